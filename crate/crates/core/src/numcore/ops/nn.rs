//! Normalisation, softmax, losses and stochastic depth.

use rand::Rng;

use super::basic::{axis_split, sigmoid};
use crate::error::{Error, Result};
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::{nchw, DiffTensor, Real};

/// Label value excluded from cross-entropy.
pub const IGNORE_INDEX: u8 = 255;

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const LN_EPS: f64 = 1e-5;

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnRunning {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Batch statistics observed by a training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub enum BnMode<'a> {
    /// Normalise with batch statistics (biased variance).
    Train,
    /// Normalise with stored running statistics.
    Eval(&'a BnRunning),
}

impl<T: Real> Tape<T> {
    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} for {shape:?}")));
        }
        self.value(a).check_finite("softmax")?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.data(a);
        let mut out = vec![T::ZERO; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut mx = x[at(0)];
                for k in 1..len {
                    mx = mx.max(x[at(k)]);
                }
                let mut z = 0.0f64;
                for k in 0..len {
                    let e = (x[at(k)] - mx).exp();
                    out[at(k)] = e;
                    z += e.f64();
                }
                let inv = T::of(1.0 / z);
                for k in 0..len {
                    out[at(k)] *= inv;
                }
            }
        }
        let value = DiffTensor::new(&shape, out)?;
        Ok(self.push(
            value,
            &[a],
            Box::new(move |args| {
                let y = args.output.data();
                let g = args.grad;
                let mut gx = vec![T::ZERO; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| (g[at(k)] * y[at(k)]).f64()).sum();
                        let dot = T::of(dot);
                        for k in 0..len {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Batch normalisation over `[C,H,W]` or `[N,C,H,W]`, statistics per channel.
    ///
    /// Returns the batch statistics in training mode so the caller can update
    /// its running averages.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BnBatchStats>)> {
        let (n, c, h, w) = nchw("batchnorm2d", self.shape(x))?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim("batchnorm2d", "affine parameter length != channels"));
        }
        let hw = h * w;
        let count = (n * hw) as f64;
        let xs = self.data(x);
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        s += xs[base..base + hw].iter().map(|v| v.f64()).sum::<f64>();
                    }
                    let m = s / count;
                    let mut ss = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        ss += xs[base..base + hw]
                            .iter()
                            .map(|v| (v.f64() - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count;
                }
                let stats = BnBatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval(running) => {
                if running.mean.len() != c {
                    return Err(Error::dim("batchnorm2d", "running stats length != channels"));
                }
                (running.mean.clone(), running.var.clone(), None)
            }
        };
        let train = stats.is_some();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut xhat = vec![T::ZERO; xs.len()];
        let mut out = vec![T::ZERO; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let (m, is) = (mean[ch], inv_std[ch]);
                for i in base..base + hw {
                    let xh = T::of((xs[i].f64() - m) * is);
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = DiffTensor::new(self.shape(x), out)?;
        let var_out = self.push(
            value,
            &[x, gamma, beta],
            Box::new(move |args| {
                let gam = args.parents[1].data();
                let gy = args.grad;
                let mut gx = vec![T::ZERO; gy.len()];
                let mut ggam = vec![T::ZERO; c];
                let mut gbeta = vec![T::ZERO; c];
                for ch in 0..c {
                    let mut sum_g = 0.0f64;
                    let mut sum_gx = 0.0f64;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            sum_g += gy[i].f64();
                            sum_gx += (gy[i] * xhat[i]).f64();
                        }
                    }
                    ggam[ch] = T::of(sum_gx);
                    gbeta[ch] = T::of(sum_g);
                    let gch = gam[ch].f64();
                    let is = inv_std[ch];
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            let v = if train {
                                gch * is / count
                                    * (count * gy[i].f64() - sum_g - xhat[i].f64() * sum_gx)
                            } else {
                                gch * is * gy[i].f64()
                            };
                            gx[i] = T::of(v);
                        }
                    }
                }
                vec![Some(gx), Some(ggam), Some(gbeta)]
            }),
        );
        Ok((var_out, stats))
    }

    /// Layer normalisation of each row of a `[rows, features]` matrix.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let &[rows, f] = self.shape(x) else {
            return Err(Error::dim("layer_norm", format!("expected 2-D, got {:?}", self.shape(x))));
        };
        if self.value(gamma).len() != f || self.value(beta).len() != f {
            return Err(Error::dim("layer_norm", "affine parameter length != features"));
        }
        let xs = self.data(x);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut xhat = vec![T::ZERO; xs.len()];
        let mut inv_std = vec![0.0f64; rows];
        let mut out = vec![T::ZERO; xs.len()];
        for r in 0..rows {
            let row = &xs[r * f..(r + 1) * f];
            let m = row.iter().map(|v| v.f64()).sum::<f64>() / f as f64;
            let v = row.iter().map(|v| (v.f64() - m).powi(2)).sum::<f64>() / f as f64;
            let is = 1.0 / (v + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..f {
                let xh = T::of((row[j].f64() - m) * is);
                xhat[r * f + j] = xh;
                out[r * f + j] = g[j] * xh + bt[j];
            }
        }
        let value = DiffTensor::new(&[rows, f], out)?;
        Ok(self.push(
            value,
            &[x, gamma, beta],
            Box::new(move |args| {
                let gam = args.parents[1].data();
                let gy = args.grad;
                let mut gx = vec![T::ZERO; gy.len()];
                let mut ggam = vec![0.0f64; f];
                let mut gbeta = vec![0.0f64; f];
                for r in 0..rows {
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for j in 0..f {
                        let i = r * f + j;
                        let gxh = (gy[i] * gam[j]).f64();
                        s1 += gxh;
                        s2 += gxh * xhat[i].f64();
                        ggam[j] += (gy[i] * xhat[i]).f64();
                        gbeta[j] += gy[i].f64();
                    }
                    let ff = f as f64;
                    for j in 0..f {
                        let i = r * f + j;
                        let gxh = (gy[i] * gam[j]).f64();
                        gx[i] = T::of(inv_std[r] / ff * (ff * gxh - s1 - xhat[i].f64() * s2));
                    }
                }
                vec![
                    Some(gx),
                    Some(ggam.into_iter().map(T::of).collect()),
                    Some(gbeta.into_iter().map(T::of).collect()),
                ]
            }),
        ))
    }

    /// Scales each row of a 2-D tensor to unit L2 norm (`max(‖row‖, eps)`).
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let &[rows, f] = self.shape(x) else {
            return Err(Error::dim("l2_normalize", format!("expected 2-D, got {:?}", self.shape(x))));
        };
        let xs = self.data(x);
        let norms: Vec<f64> = (0..rows)
            .map(|r| {
                xs[r * f..(r + 1) * f]
                    .iter()
                    .map(|v| v.f64().powi(2))
                    .sum::<f64>()
                    .sqrt()
                    .max(eps)
            })
            .collect();
        let out = xs
            .iter()
            .enumerate()
            .map(|(i, &v)| T::of(v.f64() / norms[i / f]))
            .collect();
        let value = DiffTensor::new(&[rows, f], out)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |args| {
                let y = args.output.data();
                let g = args.grad;
                let mut gx = vec![T::ZERO; g.len()];
                for r in 0..rows {
                    let s = r * f..(r + 1) * f;
                    let clamped = norms[r] <= eps;
                    let dot: f64 = g[s.clone()]
                        .iter()
                        .zip(&y[s.clone()])
                        .map(|(a, b)| (*a * *b).f64())
                        .sum();
                    for i in s {
                        let v = if clamped {
                            g[i].f64() / norms[r]
                        } else {
                            (g[i].f64() - y[i].f64() * dot) / norms[r]
                        };
                        gx[i] = T::of(v);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Mean cross-entropy of `[K, ...]` logits against per-position labels.
    ///
    /// Positions labelled [`IGNORE_INDEX`] are skipped. With no labelled
    /// position the loss is defined as 0 and carries no gradient.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("cross_entropy", format!("logits {shape:?} need a class axis and positions")));
        }
        let p: usize = shape[1..].iter().product();
        self.cross_entropy_impl(logits, labels, 1, shape[0], p)
    }

    /// Batched form for `[N, K, ...]` logits; labels are sample-major and the
    /// mean runs over all labelled positions of the batch.
    pub fn cross_entropy_batched(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() < 3 {
            return Err(Error::dim("cross_entropy", format!("batched logits {shape:?} must be [N,K,...]")));
        }
        let p: usize = shape[2..].iter().product();
        self.cross_entropy_impl(logits, labels, shape[0], shape[1], p)
    }

    fn cross_entropy_impl(&mut self, logits: Var, labels: &[u8], n: usize, k: usize, p: usize) -> Result<Var> {
        if labels.len() != n * p {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {:?} vs {} labels", self.shape(logits), labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != IGNORE_INDEX && l as usize >= k) {
            return Err(Error::Invalid(format!("label {bad} outside [0,{k})")));
        }
        self.value(logits).check_finite("cross_entropy")?;
        let valid = labels.iter().filter(|&&l| l != IGNORE_INDEX).count();
        if valid == 0 {
            return Ok(self.constant(DiffTensor::scalar(T::ZERO)));
        }
        let x = self.data(logits);
        let mut probs = vec![T::ZERO; n * k * p];
        let mut loss = 0.0f64;
        for b in 0..n {
            let base = b * k * p;
            for pos in 0..p {
                let at = |c: usize| base + c * p + pos;
                let mx = (0..k).map(|c| x[at(c)].f64()).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k).map(|c| (x[at(c)].f64() - mx).exp()).sum();
                for c in 0..k {
                    probs[at(c)] = T::of((x[at(c)].f64() - mx).exp() / z);
                }
                let l = labels[b * p + pos];
                if l != IGNORE_INDEX {
                    loss += mx + z.ln() - x[at(l as usize)].f64();
                }
            }
        }
        let labels = labels.to_vec();
        let inv = 1.0 / valid as f64;
        Ok(self.push(
            DiffTensor::scalar(T::of(loss * inv)),
            &[logits],
            Box::new(move |args| {
                let g0 = args.grad[0].f64() * inv;
                let mut gx = vec![T::ZERO; n * k * p];
                for (i, &l) in labels.iter().enumerate() {
                    if l == IGNORE_INDEX {
                        continue;
                    }
                    let (b, pos) = (i / p, i % p);
                    for c in 0..k {
                        let at = b * k * p + c * p + pos;
                        let onehot = if c == l as usize { 1.0 } else { 0.0 };
                        gx[at] = T::of(g0 * (probs[at].f64() - onehot));
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Mean binary cross-entropy with logits against constant 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        if targets.len() != self.value(logits).len() {
            return Err(Error::dim("bce_with_logits", "target length mismatch"));
        }
        self.value(logits).check_finite("bce_with_logits")?;
        let x = self.data(logits);
        let n = x.len() as f64;
        let loss: f64 = x
            .iter()
            .zip(targets)
            .map(|(&z, &t)| {
                let z = z.f64();
                z.max(0.0) - z * t.f64() + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let targets = targets.to_vec();
        Ok(self.push(
            DiffTensor::scalar(T::of(loss / n)),
            &[logits],
            Box::new(move |args| {
                let g0 = args.grad[0] * T::of(1.0 / n);
                let x = args.parents[0].data();
                vec![Some(
                    x.iter()
                        .zip(&targets)
                        .map(|(&z, &t)| g0 * (sigmoid(z) - t))
                        .collect(),
                )]
            }),
        ))
    }

    /// Stochastic depth on a residual branch.
    ///
    /// With a leading batch axis (rank 4) each sample is dropped independently,
    /// otherwise the whole tensor is one sample. Kept samples are scaled by
    /// `1/(1-rate)`. Outside training this is the identity.
    pub fn droppath<R: Rng>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Invalid(format!("droppath rate {rate} outside [0,1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let shape = self.shape(x).to_vec();
        let samples = if shape.len() == 4 { shape[0] } else { 1 };
        let per = self.value(x).len() / samples;
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..samples)
            .map(|_| if rng.random::<f64>() < rate { T::ZERO } else { keep })
            .collect();
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * mask[i / per])
            .collect();
        let value = DiffTensor::new(&shape, out)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |args| {
                vec![Some(
                    args.grad
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| g * mask[i / per])
                        .collect(),
                )]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn softmax_two_values() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(DiffTensor::from_f64(&[2], &[2.0, 0.0]).unwrap());
        let s = tape.softmax(a, 0).unwrap();
        let v = tape.data(s);
        assert!((v[0] - 0.8808).abs() < 1e-4);
        assert!((v[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn softmax_uniform_slice() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(DiffTensor::full(&[3, 5], 0.7));
        let s = tape.softmax(a, 1).unwrap();
        assert!(tape.data(s).iter().all(|&p| (p - 0.2).abs() < 1e-7));
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(DiffTensor::new(&[2], vec![0.0, f32::NAN]).unwrap());
        assert!(matches!(tape.softmax(a, 0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn droppath_eval_is_identity() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(DiffTensor::from_f64(&[2, 2], &[1.0, -2.0, 3.0, 4.5]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = tape.droppath(a, 0.1, false, &mut rng).unwrap();
        assert_eq!(d, a);
        assert_eq!(tape.data(d), &[1.0, -2.0, 3.0, 4.5]);
    }

    #[test]
    fn droppath_training_zeroes_or_rescales_whole_samples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(DiffTensor::full(&[64, 1, 2, 2], 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = tape.droppath(a, 0.5, true, &mut rng).unwrap();
        let v = tape.data(d);
        let mut dropped = 0;
        for s in v.chunks(4) {
            assert!(s.iter().all(|&x| x == s[0]));
            assert!(s[0] == 0.0 || (s[0] - 2.0).abs() < 1e-12);
            dropped += (s[0] == 0.0) as usize;
        }
        assert!(dropped > 10 && dropped < 54);
    }

    #[test]
    fn cross_entropy_approaches_zero_with_margin() {
        let mut last = f64::INFINITY;
        for margin in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let mut tape = Tape::<f64>::new();
            let l = tape.leaf(DiffTensor::from_f64(&[3, 1], &[margin, 0.0, 0.0]).unwrap());
            let ce = tape.cross_entropy(l, &[0]).unwrap();
            let v = tape.data(ce)[0];
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut tape = Tape::<f32>::new();
        let l = tape.leaf(DiffTensor::zeros(&[4, 3, 3]));
        let ce = tape.cross_entropy(l, &[0, 1, 2, 3, 0, 1, 2, 3, IGNORE_INDEX]).unwrap();
        assert!((tape.data(ce)[0] - 4f32.ln()).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero() {
        let mut tape = Tape::<f32>::new();
        let l = tape.leaf(DiffTensor::zeros(&[4, 2]).with_grad());
        let ce = tape.cross_entropy(l, &[IGNORE_INDEX; 2]).unwrap();
        assert_eq!(tape.data(ce)[0], 0.0);
        assert!(!tape.requires_grad(ce));
    }

    #[test]
    fn batchnorm_train_standardises_channels() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(3.0, 2.5).unwrap();
        let data: Vec<f64> = (0..4 * 3 * 6 * 5).map(|_| normal.sample(&mut rng)).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(DiffTensor::from_f64(&[4, 3, 6, 5], &data).unwrap());
        let g = tape.leaf(DiffTensor::full(&[3], 1.0));
        let b = tape.leaf(DiffTensor::zeros(&[3]));
        let (y, stats) = tape.batchnorm2d(x, g, b, BnMode::Train).unwrap();
        assert!(stats.is_some());
        let y = tape.data(y);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| {
                    let base = (n * 3 + ch) * 30;
                    y[base..base + 30].to_vec()
                })
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-4, "mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "var {v}");
        }
    }
}
