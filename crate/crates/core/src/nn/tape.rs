//! Tape-based reverse mode over the layer set in this module.
//!
//! Every recorded op keeps the activations its backward pass needs, plus a
//! snapshot of the parameters it used, so the tape can be replayed without
//! access to the model.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::layers::{BatchNorm2d, BatchStats, BnCache, Conv2d, Linear};
use crate::nn::ops::{self, PoolCache};
use crate::scalar::Float;
use crate::tensor::{Matrix, Tensor4};

enum Record<T> {
    Conv {
        layer: Conv2d<T>,
        input: Rc<Tensor4<T>>,
        need_input_grad: bool,
    },
    BatchNorm {
        gamma_name: String,
        beta_name: String,
        gamma: Vec<T>,
        cache: BnCache<T>,
    },
    Relu {
        output: Rc<Tensor4<T>>,
    },
    MaxPool {
        input_shape: [usize; 4],
        argmax: Vec<usize>,
    },
    Tokens {
        shape: [usize; 4],
    },
    AttentionPool {
        sof: Linear<T>,
        lin: Linear<T>,
        tokens: Matrix<T>,
        batch: usize,
        cache: PoolCache<T>,
    },
    Linear {
        layer: Linear<T>,
        input: Matrix<T>,
    },
}

enum Grad<T> {
    Map(Tensor4<T>),
    Rows(Matrix<T>),
    /// Upstream of a layer whose input gradient was not requested.
    Stop,
}

/// Parameter gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients<T> {
    grads: BTreeMap<String, Vec<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|v| v.iter())
            .map(|g| g.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().flat_map(|v| v.iter()).all(|g| g.is_finite())
    }

    fn accumulate(&mut self, name: &str, g: Vec<T>) {
        match self.grads.get_mut(name) {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => {
                self.grads.insert(name.to_string(), g);
            }
        }
    }
}

/// Records a forward pass for one backward replay.
pub struct GradTape<T> {
    records: Vec<Record<T>>,
}

impl<T: Float> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> GradTape<T> {
    pub fn new() -> Self {
        Self { records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn conv2d(&mut self, layer: &Conv2d<T>, x: Rc<Tensor4<T>>, need_input_grad: bool) -> Result<Tensor4<T>> {
        let y = layer.forward(&x)?;
        self.records.push(Record::Conv {
            layer: layer.clone(),
            input: x,
            need_input_grad,
        });
        Ok(y)
    }

    /// Training-mode batch norm; the caller decides when to fold `BatchStats`
    /// into the running estimates.
    pub fn batchnorm2d(&mut self, layer: &BatchNorm2d<T>, x: &Tensor4<T>) -> Result<(Tensor4<T>, BatchStats<T>)> {
        let (y, cache, stats) = layer.forward_train(x)?;
        self.records.push(Record::BatchNorm {
            gamma_name: layer.gamma.name().to_string(),
            beta_name: layer.beta.name().to_string(),
            gamma: layer.gamma.data().to_vec(),
            cache,
        });
        Ok((y, stats))
    }

    pub fn relu(&mut self, x: Tensor4<T>) -> Rc<Tensor4<T>> {
        let mut y = x;
        y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
        let y = Rc::new(y);
        self.records.push(Record::Relu { output: Rc::clone(&y) });
        y
    }

    pub fn maxpool2d(&mut self, x: &Tensor4<T>) -> Tensor4<T> {
        let (y, argmax) = ops::maxpool2d(x);
        self.records.push(Record::MaxPool {
            input_shape: x.shape(),
            argmax,
        });
        y
    }

    pub fn tokens(&mut self, x: &Tensor4<T>) -> Matrix<T> {
        self.records.push(Record::Tokens { shape: x.shape() });
        ops::to_tokens(x)
    }

    pub fn attention_pool(&mut self, sof: &Linear<T>, lin: &Linear<T>, tokens: Matrix<T>, batch: usize) -> Result<Matrix<T>> {
        let (pooled, cache) = ops::attention_pool(&tokens, batch, sof, lin)?;
        self.records.push(Record::AttentionPool {
            sof: sof.clone(),
            lin: lin.clone(),
            tokens,
            batch,
            cache,
        });
        Ok(pooled)
    }

    pub fn linear(&mut self, layer: &Linear<T>, x: Matrix<T>) -> Result<Matrix<T>> {
        let y = layer.forward(&x)?;
        self.records.push(Record::Linear {
            layer: layer.clone(),
            input: x,
        });
        Ok(y)
    }

    /// Replays the tape backward from `d loss / d output`.
    ///
    /// The output of the last recorded op must be a matrix (the prediction rows).
    pub fn backward(self, output_grad: Matrix<T>) -> Result<Gradients<T>> {
        if self.records.is_empty() {
            return Err(Error::State("backward called on an empty tape".into()));
        }
        let mut grads = Gradients::default();
        let mut g = Grad::Rows(output_grad);
        for record in self.records.into_iter().rev() {
            g = match (record, g) {
                (_, Grad::Stop) => return Err(Error::State("gradient requested past a frozen input".into())),
                (Record::Linear { layer, input }, Grad::Rows(gy)) => {
                    check_rows(&gy, input.rows(), layer.out_features())?;
                    let (gx, gw, gb) = layer.backward(&input, &gy);
                    grads.accumulate(layer.weight.name(), gw);
                    grads.accumulate(layer.bias.name(), gb);
                    Grad::Rows(gx)
                }
                (Record::AttentionPool { sof, lin, tokens, batch, cache }, Grad::Rows(gp)) => {
                    check_rows(&gp, batch, lin.out_features())?;
                    let per = tokens.rows() / batch;
                    let dim = lin.out_features();
                    let mut d_values = Matrix::zeros(tokens.rows(), dim);
                    let mut d_scores = Matrix::zeros(tokens.rows(), dim);
                    for b in 0..batch {
                        let (gb, pb) = (gp.row(b), cache.pooled.row(b));
                        for t in b * per..(b + 1) * per {
                            let (a, v) = (cache.weights.row(t), cache.values.row(t));
                            let dv = d_values.row_mut(t);
                            for j in 0..dim {
                                dv[j] = gb[j] * a[j];
                            }
                            let ds = d_scores.row_mut(t);
                            for j in 0..dim {
                                ds[j] = a[j] * gb[j] * (v[j] - pb[j]);
                            }
                        }
                    }
                    let (gx_lin, gw_lin, gb_lin) = lin.backward(&tokens, &d_values);
                    let (gx_sof, gw_sof, gb_sof) = sof.backward(&tokens, &d_scores);
                    grads.accumulate(lin.weight.name(), gw_lin);
                    grads.accumulate(lin.bias.name(), gb_lin);
                    grads.accumulate(sof.weight.name(), gw_sof);
                    grads.accumulate(sof.bias.name(), gb_sof);
                    let mut gx = gx_lin;
                    gx.data_mut().iter_mut().zip(gx_sof.data()).for_each(|(a, &b)| *a += b);
                    Grad::Rows(gx)
                }
                (Record::Tokens { shape }, Grad::Rows(gt)) => {
                    check_rows(&gt, shape[0] * shape[2], shape[1] * shape[3])?;
                    Grad::Map(ops::from_tokens(&gt, shape))
                }
                (Record::MaxPool { input_shape, argmax }, Grad::Map(gy)) => {
                    let mut gx = Tensor4::zeros(input_shape);
                    for (&i, &d) in argmax.iter().zip(gy.data()) {
                        gx.data_mut()[i] += d;
                    }
                    Grad::Map(gx)
                }
                (Record::Relu { output }, Grad::Map(mut gy)) => {
                    for (d, &y) in gy.data_mut().iter_mut().zip(output.data()) {
                        if y <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    Grad::Map(gy)
                }
                (Record::BatchNorm { gamma_name, beta_name, gamma, cache }, Grad::Map(gy)) => {
                    let (gx, gg, gb) = BatchNorm2d::backward(&gamma, &cache, &gy);
                    grads.accumulate(&gamma_name, gg);
                    grads.accumulate(&beta_name, gb);
                    Grad::Map(gx)
                }
                (Record::Conv { layer, input, need_input_grad }, Grad::Map(gy)) => {
                    let (gx, gw, gb) = layer.backward(&input, &gy, need_input_grad);
                    grads.accumulate(layer.weight.name(), gw);
                    if let (Some(b), Some(gb)) = (&layer.bias, gb) {
                        grads.accumulate(b.name(), gb);
                    }
                    match gx {
                        Some(gx) => Grad::Map(gx),
                        None => Grad::Stop,
                    }
                }
                _ => return Err(Error::State("tape records do not chain".into())),
            };
        }
        Ok(grads)
    }
}

fn check_rows<T: Float>(g: &Matrix<T>, rows: usize, cols: usize) -> Result<()> {
    if g.rows() != rows || g.cols() != cols {
        return Err(Error::invalid(format!(
            "upstream gradient is {}x{}, expected {rows}x{cols}",
            g.rows(),
            g.cols()
        )));
    }
    Ok(())
}
