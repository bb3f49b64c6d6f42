//! Named parameter storage and per-forward binding onto a tape.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ops::{BnBatchStats, BnMode, BnRunning};
use super::tape::{Gradients, Tape, Var};
use super::tensor::{DiffTensor, Real};
use crate::error::{Error, Result};

/// Momentum of batch-norm running averages.
pub const BN_MOMENTUM: f64 = 0.1;

/// Trainable tensors plus batch-norm buffers, keyed by dotted names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    params: BTreeMap<String, DiffTensor<T>>,
    running: BTreeMap<String, BnRunning>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            running: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: DiffTensor<T>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter {name}")));
        }
        self.params.insert(name.to_string(), value.with_grad());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DiffTensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DiffTensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DiffTensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut DiffTensor<T>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Scalar count over all parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn running(&self, name: &str) -> Option<&BnRunning> {
        self.running.get(name)
    }

    pub fn running_iter(&self) -> impl Iterator<Item = (&String, &BnRunning)> {
        self.running.iter()
    }

    pub fn set_running(&mut self, name: &str, value: BnRunning) {
        self.running.insert(name.to_string(), value);
    }

    /// Folds observed batch statistics into the running averages.
    pub fn update_running(&mut self, stats: &[(String, BnBatchStats)]) {
        for (name, s) in stats {
            if let Some(r) = self.running.get_mut(name) {
                for c in 0..r.mean.len() {
                    r.mean[c] = (1.0 - BN_MOMENTUM) * r.mean[c] + BN_MOMENTUM * s.mean[c];
                    r.var[c] = (1.0 - BN_MOMENTUM) * r.var[c] + BN_MOMENTUM * s.var[c];
                }
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            running: self.running.clone(),
        }
    }

    /// He-normal `[o, c, k, k]` weight at `name.w` and zero bias at `name.b`.
    pub fn init_conv(&mut self, name: &str, o: usize, c: usize, k: usize, bias: bool, rng: &mut impl Rng) -> Result<()> {
        let std = (2.0 / (c * k * k) as f64).sqrt();
        self.insert(&format!("{name}.w"), normal(&[o, c, k, k], std, rng))?;
        if bias {
            self.insert(&format!("{name}.b"), DiffTensor::zeros(&[o]))?;
        }
        Ok(())
    }

    /// Transposed-conv weight `[c_in, c_out, k, k]` scaled for an effective
    /// fan-in of `c_in·k²/stride²`, plus bias.
    pub fn init_deconv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Result<()> {
        let std = (2.0 * (stride * stride) as f64 / (c_in * k * k) as f64).sqrt();
        self.insert(&format!("{name}.w"), normal(&[c_in, c_out, k, k], std.min(1.0), rng))?;
        self.insert(&format!("{name}.b"), DiffTensor::zeros(&[c_out]))
    }

    /// `[in, out]` weight (Glorot-normal) and zero bias.
    pub fn init_linear(&mut self, name: &str, inp: usize, out: usize, rng: &mut impl Rng) -> Result<()> {
        let std = (2.0 / (inp + out) as f64).sqrt();
        self.insert(&format!("{name}.w"), normal(&[inp, out], std, rng))?;
        self.insert(&format!("{name}.b"), DiffTensor::zeros(&[out]))
    }

    pub fn init_bn(&mut self, name: &str, c: usize) -> Result<()> {
        self.insert(&format!("{name}.gamma"), DiffTensor::full(&[c], T::ONE))?;
        self.insert(&format!("{name}.beta"), DiffTensor::zeros(&[c]))?;
        self.running.insert(name.to_string(), BnRunning::new(c));
        Ok(())
    }

    pub fn init_ln(&mut self, name: &str, c: usize) -> Result<()> {
        self.insert(&format!("{name}.gamma"), DiffTensor::full(&[c], T::ONE))?;
        self.insert(&format!("{name}.beta"), DiffTensor::zeros(&[c]))
    }
}

/// Zero-mean normal tensor with standard deviation `std`.
pub fn normal<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> DiffTensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect();
    DiffTensor::new(shape, data).expect("shape matches data")
}

/// One forward pass: every parameter bound as a tape leaf, plus the
/// training flag, the stochastic-depth stream and collected BN statistics.
pub struct Session<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    vars: BTreeMap<String, Var>,
    pub training: bool,
    pub rng: ChaCha8Rng,
    pub bn_stats: Vec<(String, BnBatchStats)>,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, training: bool, seed: u64) -> Self {
        let vars = store
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        Self {
            tape,
            store,
            vars,
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_stats: Vec::new(),
        }
    }

    /// Variant that binds parameters as constants (no parameter gradients).
    pub fn frozen(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, training: bool, seed: u64) -> Self {
        let vars = store
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        Self {
            tape,
            store,
            vars,
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_stats: Vec::new(),
        }
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    /// Rebinds an existing parameter to `var` (same shape).
    pub fn bind(&mut self, name: &str, var: Var) -> Result<()> {
        let old = self.param(name)?;
        if self.tape.shape(old) != self.tape.shape(var) {
            return Err(Error::dim("bind", format!("{name}: {:?} vs {:?}", self.tape.shape(old), self.tape.shape(var))));
        }
        self.vars.insert(name.to_string(), var);
        Ok(())
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Parameter gradients by name; parameters not reached get `None`.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> BTreeMap<String, Option<Vec<T>>> {
        self.vars.iter().map(|(k, &v)| (k.clone(), grads.take(v))).collect()
    }

    pub fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        self.conv_grouped(name, x, stride, pad, 1)
    }

    pub fn conv_grouped(&mut self, name: &str, x: Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.vars.get(&format!("{name}.b")).copied();
        self.tape.conv2d_grouped(x, w, b, stride, pad, groups)
    }

    pub fn deconv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.vars.get(&format!("{name}.b")).copied();
        self.tape.conv2d_transpose(x, w, b, stride, pad)
    }

    pub fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.vars.get(&format!("{name}.b")).copied();
        self.tape.linear(x, w, b)
    }

    pub fn bn(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        if self.training {
            let (y, stats) = self.tape.batchnorm2d(x, gamma, beta, BnMode::Train)?;
            if let Some(s) = stats {
                self.bn_stats.push((name.to_string(), s));
            }
            Ok(y)
        } else {
            let running = self
                .store
                .running(name)
                .ok_or_else(|| Error::Invalid(format!("missing running stats for {name}")))?;
            Ok(self.tape.batchnorm2d(x, gamma, beta, BnMode::Eval(running))?.0)
        }
    }

    pub fn ln(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        self.tape.layer_norm_rows(x, gamma, beta)
    }

    /// conv -> BN -> ReLU.
    pub fn conv_bn_relu(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = self.conv(&format!("{name}.conv"), x, stride, pad)?;
        let y = self.bn(&format!("{name}.bn"), y)?;
        Ok(self.tape.relu(y))
    }

    pub fn droppath(&mut self, x: Var, rate: f64) -> Result<Var> {
        let training = self.training;
        self.tape.droppath(x, rate, training, &mut self.rng)
    }
}

/// Registers the parameters of [`Session::conv_bn_relu`].
pub fn init_conv_bn<T: Real>(store: &mut ParamStore<T>, name: &str, o: usize, c: usize, k: usize, rng: &mut impl Rng) -> Result<()> {
    store.init_conv(&format!("{name}.conv"), o, c, k, false, rng)?;
    store.init_bn(&format!("{name}.bn"), o)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_binds_and_collects_bn_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        init_conv_bn(&mut store, "blk", 3, 2, 3, &mut rng).unwrap();
        assert!(store.insert("blk.bn.gamma", DiffTensor::zeros(&[3])).is_err());
        assert_eq!(store.count("blk."), 3 * 2 * 9 + 6);
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, true, 1);
        let x = s.tape.leaf(normal(&[2, 2, 5, 5], 1.0, &mut rng));
        s.conv_bn_relu("blk", x, 1, 1).unwrap();
        assert_eq!(s.bn_stats.len(), 1);
        let stats = std::mem::take(&mut s.bn_stats);
        store.update_running(&stats);
        let r = store.running("blk.bn").unwrap();
        assert!((r.mean[0] - 0.1 * stats[0].1.mean[0]).abs() < 1e-12);
    }
}
