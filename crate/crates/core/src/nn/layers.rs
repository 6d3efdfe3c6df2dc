use crate::error::{Error, Result};
use crate::scalar::Float;
use crate::tensor::{Matrix, Tensor4};

/// Output positions per row block of the direct convolution; bounds the
/// shifted-input scratch buffer.
const BLOCK_POSITIONS: usize = 2048;
/// Positions per inner accumulation call, sized so the accumulators stay in L1.
const TAP_CHUNK: usize = 256;

/// Named, shaped parameter (or buffer) storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    name: String,
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::filled(name, shape, T::zero())
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], value: T) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_data(name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Result<Self> {
        let name = name.into();
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::invalid(format!(
                "param {name}: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        Ok(Self {
            name,
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Replaces the values, keeping name and shape.
    pub fn set_data(&mut self, data: Vec<T>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::invalid(format!(
                "param {}: expected {} values, got {}",
                self.name,
                self.data.len(),
                data.len()
            )));
        }
        self.data = data;
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Stride-1 square convolution with "same" padding (3×3 pad 1, or 1×1 pad 0).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    kernel: usize,
}

impl<T: Float> Conv2d<T> {
    /// Zero-initialized layer; weight named `{prefix}.weight`.
    pub fn new(prefix: &str, in_ch: usize, out_ch: usize, kernel: usize, bias: bool) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        Self {
            weight: Param::zeros(format!("{prefix}.weight"), &[out_ch, in_ch, kernel, kernel]),
            bias: bias.then(|| Param::zeros(format!("{prefix}.bias"), &[out_ch])),
            kernel,
        }
    }

    pub fn from_params(weight: Param<T>, bias: Option<Param<T>>) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[2] != s[3] || s[2] % 2 == 0 {
            return Err(Error::invalid(format!("conv weight {} has shape {s:?}", weight.name())));
        }
        if let Some(b) = &bias {
            if b.shape() != [s[0]] {
                return Err(Error::invalid(format!("conv bias {} has shape {:?}", b.name(), b.shape())));
            }
        }
        let kernel = s[2];
        Ok(Self { weight, bias, kernel })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    pub fn cast<U: Float>(&self) -> Conv2d<U> {
        Conv2d {
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(|b| b.cast()),
            kernel: self.kernel,
        }
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.channels() != self.in_channels() {
            return Err(Error::invalid(format!(
                "{}: input has {} channels, expected {}",
                self.weight.name(),
                x.channels(),
                self.in_channels()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let [batch, cin, h, w] = x.shape();
        let cout = self.out_channels();
        let hw = h * w;
        let mut out = Tensor4::zeros([batch, cout, h, w]);
        let weight = self.weight.data();
        if self.kernel == 1 {
            for b in 0..batch {
                let xs = &x.data()[b * cin * hw..(b + 1) * cin * hw];
                let os = &mut out.data_mut()[b * cout * hw..(b + 1) * cout * hw];
                T::gemm(cout, cin, hw, weight, (cin, 1), xs, (hw, 1), T::zero(), os, (hw, 1));
            }
        } else {
            direct_conv(weight, self.kernel, x, &mut out);
        }
        if let Some(bias) = &self.bias {
            for b in 0..batch {
                for (c, &bv) in bias.data().iter().enumerate() {
                    out.plane_mut(b, c).iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        Ok(out)
    }

    /// Returns `(grad_input, grad_weight, grad_bias)`; `grad_input` is skipped
    /// when not needed (first layer).
    pub fn backward(
        &self,
        x: &Tensor4<T>,
        grad_out: &Tensor4<T>,
        need_input_grad: bool,
    ) -> (Option<Tensor4<T>>, Vec<T>, Option<Vec<T>>) {
        let [batch, cin, h, w] = x.shape();
        let cout = self.out_channels();
        let hw = h * w;
        let k = self.kernel;
        let weight = self.weight.data();
        let mut gw = vec![T::zero(); weight.len()];
        let mut gx = need_input_grad.then(|| Tensor4::zeros(x.shape()));
        if k == 1 {
            for b in 0..batch {
                let xs = &x.data()[b * cin * hw..(b + 1) * cin * hw];
                let gs = &grad_out.data()[b * cout * hw..(b + 1) * cout * hw];
                T::gemm(cout, hw, cin, gs, (hw, 1), xs, (1, hw), T::one(), &mut gw, (cin, 1));
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx.data_mut()[b * cin * hw..(b + 1) * cin * hw];
                    T::gemm(cin, cout, hw, weight, (1, cin), gs, (hw, 1), T::zero(), dst, (hw, 1));
                }
            }
        } else {
            let pad = k / 2;
            let block = rows_per_block(w);
            let mut buf = vec![T::zero(); cin * k * (block.min(h) + 2 * pad) * w];
            for b in 0..batch {
                let gs = &grad_out.data()[b * cout * hw..(b + 1) * cout * hw];
                let mut r0 = 0;
                while r0 < h {
                    let r1 = (r0 + block).min(h);
                    let offsets = fill_shifted(x, b, k, r0, r1, &mut buf);
                    let n = (r1 - r0) * w;
                    let mut i0 = 0;
                    while i0 < n {
                        let len = (n - i0).min(TAP_CHUNK);
                        T::tap_correlate(&gs[r0 * w + i0..], hw, len, &offsets, &buf[i0..], &mut gw);
                        i0 += len;
                    }
                    r0 = r1;
                }
            }
            if let Some(gx) = gx.as_mut() {
                // transposed, spatially flipped kernel
                let mut flipped = vec![T::zero(); weight.len()];
                for co in 0..cout {
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                flipped[((ci * cout + co) * k + k - 1 - ky) * k + k - 1 - kx] =
                                    weight[((co * cin + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                }
                direct_conv(&flipped, k, grad_out, gx);
            }
        }
        let gb = self.bias.as_ref().map(|_| {
            (0..cout)
                .map(|c| (0..batch).map(|b| grad_out.plane(b, c).iter().copied().sum::<T>()).sum())
                .collect()
        });
        (gx, gw, gb)
    }
}

fn rows_per_block(width: usize) -> usize {
    (BLOCK_POSITIONS / width).max(1)
}

/// Copies input rows `r0 − pad .. r1 + pad` of batch item `b` into `buf`, one
/// horizontally shifted copy per kernel column (`[ci][kx][row][col]`, zero
/// outside the input). Returns the start of every tap, ordered like the
/// weight's `(ci, ky, kx)` axes.
fn fill_shifted<T: Float>(x: &Tensor4<T>, b: usize, k: usize, r0: usize, r1: usize, buf: &mut [T]) -> Vec<usize> {
    let [_, cin, h, w] = x.shape();
    let pad = k / 2;
    let rows = r1 - r0 + 2 * pad;
    for ci in 0..cin {
        let plane = x.plane(b, ci);
        for kx in 0..k {
            let dst = &mut buf[(ci * k + kx) * rows * w..][..rows * w];
            let dx = kx as isize - pad as isize;
            // valid output columns: 0 <= c + dx < w
            let c_lo = (-dx).max(0) as usize;
            let c_hi = (w as isize - dx).clamp(0, w as isize) as usize;
            for r in 0..rows {
                let seg = &mut dst[r * w..(r + 1) * w];
                let ih = (r0 + r) as isize - pad as isize;
                if ih < 0 || ih >= h as isize || c_lo >= c_hi {
                    seg.fill(T::zero());
                    continue;
                }
                let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                seg[..c_lo].fill(T::zero());
                seg[c_hi..].fill(T::zero());
                let s0 = (c_lo as isize + dx) as usize;
                seg[c_lo..c_hi].copy_from_slice(&src[s0..s0 + (c_hi - c_lo)]);
            }
        }
    }
    let mut offsets = Vec::with_capacity(cin * k * k);
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                offsets.push((ci * k + kx) * rows * w + ky * w);
            }
        }
    }
    offsets
}

/// Same-padded stride-1 convolution accumulated into `out`; `weight` is
/// `[cout, cin, k, k]` with `cout = out.channels()`.
fn direct_conv<T: Float>(weight: &[T], k: usize, x: &Tensor4<T>, out: &mut Tensor4<T>) {
    let [batch, cin, h, w] = x.shape();
    let cout = out.channels();
    let hw = h * w;
    let pad = k / 2;
    let block = rows_per_block(w);
    let mut buf = vec![T::zero(); cin * k * (block.min(h) + 2 * pad) * w];
    for b in 0..batch {
        let mut r0 = 0;
        while r0 < h {
            let r1 = (r0 + block).min(h);
            let offsets = fill_shifted(x, b, k, r0, r1, &mut buf);
            let out_b = &mut out.data_mut()[b * cout * hw..(b + 1) * cout * hw];
            let n = (r1 - r0) * w;
            let mut i0 = 0;
            while i0 < n {
                let len = (n - i0).min(TAP_CHUNK);
                T::tap_accumulate(weight, &offsets, &buf[i0..], &mut out_b[r0 * w + i0..], hw, len);
                i0 += len;
            }
            r0 = r1;
        }
    }
}

/// Per-channel batch statistics from a training-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, used for the running estimate.
    pub var_unbiased: Vec<T>,
    /// Elements per channel the statistics were taken over.
    pub count: usize,
}

impl<T: Float> BatchStats<T> {
    pub fn var_biased(&self) -> Vec<T> {
        let n = self.count as f64;
        let k = if n > 1.0 { (n - 1.0) / n } else { 1.0 };
        self.var_unbiased.iter().map(|&v| T::lit(v.as_f64() * k)).collect()
    }
}

/// Saved activations for the batch-norm backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor4<T>,
    pub inv_std: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    eps: T,
    momentum: T,
}

impl<T: Float> BatchNorm2d<T> {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            gamma: Param::filled(format!("{prefix}.gamma"), &[channels], T::one()),
            beta: Param::zeros(format!("{prefix}.beta"), &[channels]),
            running_mean: Param::zeros(format!("{prefix}.running_mean"), &[channels]),
            running_var: Param::filled(format!("{prefix}.running_var"), &[channels], T::one()),
            eps: T::lit(Self::EPS),
            momentum: T::lit(Self::MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn eps(&self) -> T {
        self.eps
    }

    /// Trainable count (gamma, beta); running statistics are buffers.
    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    pub fn cast<U: Float>(&self) -> BatchNorm2d<U> {
        BatchNorm2d {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            eps: U::lit(self.eps.as_f64()),
            momentum: U::lit(self.momentum.as_f64()),
        }
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(Error::invalid(format!(
                "{}: input has {} channels, expected {}",
                self.gamma.name(),
                x.channels(),
                self.channels()
            )));
        }
        Ok(())
    }

    /// Running-statistics normalization.
    pub fn forward_eval(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let mut y = x.clone();
        for c in 0..self.channels() {
            let scale = self.gamma.data()[c] / (self.running_var.data()[c] + self.eps).sqrt();
            let shift = self.beta.data()[c] - self.running_mean.data()[c] * scale;
            for b in 0..x.batch() {
                y.plane_mut(b, c).iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        Ok(y)
    }

    /// Batch-statistics normalization over (batch, height, width).
    pub fn forward_train(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, BnCache<T>, BatchStats<T>)> {
        self.check_input(x)?;
        let [batch, channels, h, w] = x.shape();
        let n = (batch * h * w) as f64;
        let mut xhat = x.clone();
        let mut y = x.clone();
        let mut inv_std = Vec::with_capacity(channels);
        let mut stats = BatchStats {
            mean: Vec::with_capacity(channels),
            var_unbiased: Vec::with_capacity(channels),
            count: batch * h * w,
        };
        for c in 0..channels {
            let mut sum = 0.0;
            for b in 0..batch {
                sum += x.plane(b, c).iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / n;
            let mut sq = 0.0;
            for b in 0..batch {
                sq += x.plane(b, c).iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
            }
            let var = sq / n;
            let istd = 1.0 / (var + self.eps.as_f64()).sqrt();
            let (m, is) = (T::lit(mean), T::lit(istd));
            let (g, be) = (self.gamma.data()[c], self.beta.data()[c]);
            for b in 0..batch {
                for (xh, yv) in xhat.plane_mut(b, c).iter_mut().zip(y.plane_mut(b, c).iter_mut()) {
                    *xh = (*xh - m) * is;
                    *yv = *xh * g + be;
                }
            }
            inv_std.push(is);
            stats.mean.push(m);
            stats
                .var_unbiased
                .push(T::lit(if n > 1.0 { sq / (n - 1.0) } else { var }));
        }
        Ok((y, BnCache { xhat, inv_std }, stats))
    }

    /// Exponential running update with momentum 0.1.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = self.momentum;
        for (r, &s) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (T::one() - m) * *r + m * s;
        }
        for (r, &s) in self.running_var.data_mut().iter_mut().zip(&stats.var_unbiased) {
            *r = (T::one() - m) * *r + m * s;
        }
    }

    /// Returns `(grad_input, grad_gamma, grad_beta)`.
    pub fn backward(gamma: &[T], cache: &BnCache<T>, grad_out: &Tensor4<T>) -> (Tensor4<T>, Vec<T>, Vec<T>) {
        let [batch, channels, h, w] = grad_out.shape();
        let n = T::lit((batch * h * w) as f64);
        let mut gx = Tensor4::zeros(grad_out.shape());
        let mut gg = vec![T::zero(); channels];
        let mut gb = vec![T::zero(); channels];
        for c in 0..channels {
            let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
            for b in 0..batch {
                for (&dy, &xh) in grad_out.plane(b, c).iter().zip(cache.xhat.plane(b, c)) {
                    sum_dy += dy;
                    sum_dy_xhat += dy * xh;
                }
            }
            gg[c] = sum_dy_xhat;
            gb[c] = sum_dy;
            let k = gamma[c] * cache.inv_std[c] / n;
            for b in 0..batch {
                let dst = gx.plane_mut(b, c);
                for ((d, &dy), &xh) in dst.iter_mut().zip(grad_out.plane(b, c)).zip(cache.xhat.plane(b, c)) {
                    *d = k * (n * dy - sum_dy - xh * sum_dy_xhat);
                }
            }
        }
        (gx, gg, gb)
    }
}

/// Fully connected layer applied row-wise: `y = x·Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Float> Linear<T> {
    pub fn new(prefix: &str, in_features: usize, out_features: usize) -> Self {
        Self {
            weight: Param::zeros(format!("{prefix}.weight"), &[out_features, in_features]),
            bias: Param::zeros(format!("{prefix}.bias"), &[out_features]),
        }
    }

    pub fn from_params(weight: Param<T>, bias: Param<T>) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 2 || bias.shape() != [s[0]] {
            return Err(Error::invalid(format!(
                "linear {}: weight {:?} / bias {:?}",
                weight.name(),
                s,
                bias.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Float>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let (inf, outf) = (self.in_features(), self.out_features());
        if x.cols() != inf {
            return Err(Error::invalid(format!(
                "{}: input has {} features, expected {inf}",
                self.weight.name(),
                x.cols()
            )));
        }
        let mut y = Matrix::zeros(x.rows(), outf);
        for r in 0..x.rows() {
            y.row_mut(r).copy_from_slice(self.bias.data());
        }
        T::gemm(x.rows(), inf, outf, x.data(), (inf, 1), self.weight.data(), (1, inf), T::one(), y.data_mut(), (outf, 1));
        Ok(y)
    }

    /// Returns `(grad_input, grad_weight, grad_bias)`.
    pub fn backward(&self, x: &Matrix<T>, grad_out: &Matrix<T>) -> (Matrix<T>, Vec<T>, Vec<T>) {
        let (inf, outf, rows) = (self.in_features(), self.out_features(), x.rows());
        let mut gw = vec![T::zero(); outf * inf];
        T::gemm(outf, rows, inf, grad_out.data(), (1, outf), x.data(), (inf, 1), T::zero(), &mut gw, (inf, 1));
        let mut gx = Matrix::zeros(rows, inf);
        T::gemm(rows, outf, inf, grad_out.data(), (outf, 1), self.weight.data(), (inf, 1), T::zero(), gx.data_mut(), (inf, 1));
        let mut gb = vec![T::zero(); outf];
        for r in 0..rows {
            for (g, &d) in gb.iter_mut().zip(grad_out.row(r)) {
                *g += d;
            }
        }
        (gx, gw, gb)
    }
}

/// Convolution with batch norm folded in, optionally followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedConv<T> {
    pub conv: Conv2d<T>,
    pub relu: bool,
}

impl<T: Float> FusedConv<T> {
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut y = self.conv.forward(x)?;
        if self.relu {
            y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
        }
        Ok(y)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }

    pub fn cast<U: Float>(&self) -> FusedConv<U> {
        FusedConv {
            conv: self.conv.cast(),
            relu: self.relu,
        }
    }
}

/// Folds eval-mode batch norm into the preceding convolution:
/// `w' = w·γ/√(σ²+ε)` per output channel, `b' = β − μ·γ/√(σ²+ε)`.
pub fn fuse_conv_bn_relu<T: Float>(prefix: &str, conv: &Conv2d<T>, bn: &BatchNorm2d<T>) -> Result<FusedConv<T>> {
    let cout = conv.out_channels();
    if bn.channels() != cout {
        return Err(Error::invalid(format!(
            "cannot fuse {} ({cout} outputs) with {} ({} channels)",
            conv.weight.name(),
            bn.gamma.name(),
            bn.channels()
        )));
    }
    let per_out = conv.weight.len() / cout;
    let mut weight = conv.weight.data().to_vec();
    let mut bias = vec![T::zero(); cout];
    for c in 0..cout {
        let scale = bn.gamma.data()[c] / (bn.running_var.data()[c] + bn.eps()).sqrt();
        weight[c * per_out..(c + 1) * per_out].iter_mut().for_each(|w| *w *= scale);
        let conv_bias = conv.bias.as_ref().map_or(T::zero(), |b| b.data()[c]);
        bias[c] = bn.beta.data()[c] + (conv_bias - bn.running_mean.data()[c]) * scale;
    }
    let conv = Conv2d::from_params(
        Param::from_data(format!("{prefix}.weight"), conv.weight.shape(), weight)?,
        Some(Param::from_data(format!("{prefix}.bias"), &[cout], bias)?),
    )?;
    Ok(FusedConv { conv, relu: true })
}
