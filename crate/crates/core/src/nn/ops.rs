use crate::error::{Error, Result};
use crate::nn::layers::Linear;
use crate::scalar::Float;
use crate::tensor::{Matrix, Tensor4};

pub fn relu<T: Float>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| v.max(T::zero()))
}

/// Output length of a 3-wide, stride-2, pad-1 max pool.
pub fn maxpool_out_dim(d: usize) -> usize {
    (d + 2 - 3) / 2 + 1
}

/// 3×3 max pool, stride 2, padding 1. Padding never wins (−∞ semantics).
///
/// Also returns, for every output element, the flat index of the selected input.
pub fn maxpool2d<T: Float>(x: &Tensor4<T>) -> (Tensor4<T>, Vec<usize>) {
    let [batch, channels, h, w] = x.shape();
    let (ho, wo) = (maxpool_out_dim(h), maxpool_out_dim(w));
    let mut out = Tensor4::zeros([batch, channels, ho, wo]);
    let mut argmax = vec![0usize; batch * channels * ho * wo];
    let mut o = 0;
    for b in 0..batch {
        for c in 0..channels {
            let base = x.offset(b, c, 0, 0);
            let plane = x.plane(b, c);
            for i in 0..ho {
                let r_lo = (2 * i).saturating_sub(1);
                let r_hi = (2 * i + 1).min(h - 1);
                for j in 0..wo {
                    let c_lo = (2 * j).saturating_sub(1);
                    let c_hi = (2 * j + 1).min(w - 1);
                    let mut best = T::neg_infinity();
                    let mut at = r_lo * w + c_lo;
                    for r in r_lo..=r_hi {
                        for cc in c_lo..=c_hi {
                            let v = plane[r * w + cc];
                            if v > best {
                                best = v;
                                at = r * w + cc;
                            }
                        }
                    }
                    out.data_mut()[o] = best;
                    argmax[o] = base + at;
                    o += 1;
                }
            }
        }
    }
    (out, argmax)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Normalize each column across rows.
    Rows,
    /// Normalize each row across columns.
    Cols,
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<T: Float>(x: &Matrix<T>, axis: Axis) -> Matrix<T> {
    let mut y = x.clone();
    match axis {
        Axis::Cols => {
            for r in 0..y.rows() {
                softmax_in_place(y.row_mut(r));
            }
        }
        Axis::Rows => softmax_columns(&mut y, 0, x.rows()),
    }
    y
}

fn softmax_in_place<T: Float>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

/// Column-wise softmax restricted to rows `r0..r1`.
fn softmax_columns<T: Float>(m: &mut Matrix<T>, r0: usize, r1: usize) {
    let cols = m.cols();
    let mut max = vec![T::neg_infinity(); cols];
    for r in r0..r1 {
        for (mx, &v) in max.iter_mut().zip(m.row(r)) {
            *mx = mx.max(v);
        }
    }
    let mut sum = vec![T::zero(); cols];
    for r in r0..r1 {
        for ((v, s), &mx) in m.row_mut(r).iter_mut().zip(sum.iter_mut()).zip(&max) {
            *v = (*v - mx).exp();
            *s += *v;
        }
    }
    for r in r0..r1 {
        for (v, &s) in m.row_mut(r).iter_mut().zip(&sum) {
            *v /= s;
        }
    }
}

/// `(batch, channel, token, mel)` → `(batch·token) × (channel·mel)`.
///
/// Row `b·T + t` is the concatenation of token `t`'s mel values across
/// channels, i.e. column `c·M + m` holds `x[b, c, t, m]`.
pub fn to_tokens<T: Float>(x: &Tensor4<T>) -> Matrix<T> {
    let [batch, channels, tokens, mels] = x.shape();
    let dim = channels * mels;
    let mut out = Matrix::zeros(batch * tokens, dim);
    for b in 0..batch {
        for c in 0..channels {
            let plane = x.plane(b, c);
            for t in 0..tokens {
                out.row_mut(b * tokens + t)[c * mels..(c + 1) * mels]
                    .copy_from_slice(&plane[t * mels..(t + 1) * mels]);
            }
        }
    }
    out
}

/// Inverse of [`to_tokens`].
pub fn from_tokens<T: Float>(m: &Matrix<T>, shape: [usize; 4]) -> Tensor4<T> {
    let [batch, channels, tokens, mels] = shape;
    let mut out = Tensor4::zeros(shape);
    for b in 0..batch {
        for c in 0..channels {
            let plane = out.plane_mut(b, c);
            for t in 0..tokens {
                plane[t * mels..(t + 1) * mels]
                    .copy_from_slice(&m.row(b * tokens + t)[c * mels..(c + 1) * mels]);
            }
        }
    }
    out
}

/// Activations kept for the attention-pool backward pass.
#[derive(Debug, Clone)]
pub struct PoolCache<T> {
    /// Softmax weights over tokens, `(batch·token) × dim`.
    pub weights: Matrix<T>,
    /// `lin(x)`, same shape.
    pub values: Matrix<T>,
    /// Pooled output, `batch × dim`.
    pub pooled: Matrix<T>,
}

/// Softmax-weighted token pooling: `Σ_t softmax_t(sof(x))[t] ⊙ lin(x)[t]`,
/// normalized over tokens independently for every feature.
pub fn attention_pool<T: Float>(
    tokens: &Matrix<T>,
    batch: usize,
    sof: &Linear<T>,
    lin: &Linear<T>,
) -> Result<(Matrix<T>, PoolCache<T>)> {
    if batch == 0 || tokens.rows() % batch != 0 || tokens.rows() == 0 {
        return Err(Error::invalid(format!(
            "{} token rows cannot be split into {batch} items",
            tokens.rows()
        )));
    }
    let per = tokens.rows() / batch;
    let mut weights = sof.forward(tokens)?;
    let values = lin.forward(tokens)?;
    let dim = values.cols();
    let mut pooled = Matrix::zeros(batch, dim);
    for b in 0..batch {
        softmax_columns(&mut weights, b * per, (b + 1) * per);
        for t in b * per..(b + 1) * per {
            let (wr, vr) = (weights.row(t), values.row(t));
            for ((p, &a), &v) in pooled.row_mut(b).iter_mut().zip(wr).zip(vr) {
                *p += a * v;
            }
        }
    }
    Ok((
        pooled.clone(),
        PoolCache {
            weights,
            values,
            pooled,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn maxpool_dims() {
        assert_eq!(maxpool_out_dim(2501), 1251);
        assert_eq!(maxpool_out_dim(26), 13);
        assert_eq!(maxpool_out_dim(501), 251);
        let (y, _) = maxpool2d(&Tensor4::<f32>::zeros([1, 2, 2501, 26]));
        assert_eq!(y.shape(), [1, 2, 1251, 13]);
    }

    #[test]
    fn maxpool_takes_window_max_even_when_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..7 * 9).map(|_| rng.random_range(-5.0..-1.0)).collect();
        let x = Tensor4::new([1, 1, 7, 9], data).unwrap();
        let (y, idx) = maxpool2d(&x);
        for i in 0..y.height() {
            for j in 0..y.width() {
                let mut best = f64::NEG_INFINITY;
                for r in (2 * i) as isize - 1..=(2 * i + 1) as isize {
                    for c in (2 * j) as isize - 1..=(2 * j + 1) as isize {
                        if r >= 0 && c >= 0 && (r as usize) < 7 && (c as usize) < 9 {
                            best = best.max(x.at(0, 0, r as usize, c as usize));
                        }
                    }
                }
                assert_eq!(y.at(0, 0, i, j), best);
                assert!(best < 0.0);
                assert_eq!(x.data()[idx[i * y.width() + j]], best);
            }
        }
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::new(3, 169, (0..3 * 169).map(|_| rng.random_range(-10.0..10.0)).collect::<Vec<f64>>()).unwrap();
        let y = softmax(&x, Axis::Cols);
        for r in 0..3 {
            assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let shifted = Matrix::new(3, 169, x.data().iter().map(|v| v + 123.0).collect()).unwrap();
        let z = softmax(&shifted, Axis::Cols);
        for (a, b) in y.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-7);
        }
        let cols = softmax(&x, Axis::Rows);
        for c in 0..169 {
            assert!(((0..3).map(|r| cols.at(r, c)).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tokens_round_trip_and_layout() {
        let x = Tensor4::new([2, 3, 4, 5], (0..120).map(|v| v as f64).collect()).unwrap();
        let m = to_tokens(&x);
        assert_eq!((m.rows(), m.cols()), (8, 15));
        // row (b=1,t=2), column (c=2,m=3)
        assert_eq!(m.at(4 + 2, 2 * 5 + 3), x.at(1, 2, 2, 3));
        assert_eq!(from_tokens(&m, x.shape()), x);
    }

    #[test]
    fn attention_pool_with_uniform_scores_is_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tokens = Matrix::new(6, 4, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap();
        let sof = Linear::new("sof", 4, 4); // all-zero scores
        let mut lin = Linear::new("lin", 4, 4);
        for i in 0..4 {
            lin.weight.data_mut()[i * 4 + i] = 1.0;
        }
        let (pooled, cache) = attention_pool(&tokens, 2, &sof, &lin).unwrap();
        for b in 0..2 {
            for j in 0..4 {
                let mean = (0..3).map(|t| tokens.at(b * 3 + t, j)).sum::<f64>() / 3.0;
                assert!((pooled.at(b, j) - mean).abs() < 1e-12);
                let wsum: f64 = (0..3).map(|t| cache.weights.at(b * 3 + t, j)).sum();
                assert!((wsum - 1.0).abs() < 1e-12);
            }
        }
    }
}
