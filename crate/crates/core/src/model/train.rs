use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::{cyclic_lr, Model, TrainSchedule};
use crate::align::{loss_share, LossBreakdown, LossWeights};
use crate::error::{Error, Result};
use crate::harness::metrics::{MetricsReport, MiouAccumulator};
use crate::numcore::{ParamStore, Session, Tape};
use crate::synthdata::{sample_seed, stream_rng, SceneSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

/// Adam (bias-corrected) or plain gradient descent over a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update; parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &BTreeMap<String, Option<Vec<f32>>>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        for (name, g) in grads {
            let Some(g) = g else { continue };
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter {name}")))?;
            if p.len() != g.len() {
                return Err(Error::dim("optimizer", format!("{name}: {} values, {} gradients", p.len(), g.len())));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &d) in p.data_mut().iter_mut().zip(g) {
                        *w = (*w as f64 - lr * d as f64) as f32;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
                    for (((w, &d), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let d = d as f64;
                        *m = self.beta1 * *m + (1.0 - self.beta1) * d;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * d * d;
                        *w = (*w as f64 - lr * (*m / c1) / ((*v / c2).sqrt() + self.eps)) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Option<Vec<f32>>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: TrainSchedule,
    pub weights: LossWeights,
    pub optimizer: OptimizerKind,
    pub clip_norm: f64,
    /// Target share of the weighted splatted-BEV term; `None` keeps γ₄ fixed.
    pub autotune_share: Option<f64>,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: TrainSchedule::default(),
            weights: LossWeights::nuscenes(),
            optimizer: OptimizerKind::Adam,
            clip_norm: 10.0,
            autotune_share: None,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.weights.validate()?;
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip norm {} must be positive", self.clip_norm)));
        }
        if let Some(t) = self.autotune_share {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("autotune share {t} outside (0,1)")));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let (s, w) = (&self.schedule, &self.weights);
        format!(
            "epochs={}\nbase_lr={}\npeak_ratio={}\nfinal_ratio={}\nstep_fraction={}\nbatch_size={}\nseed={}\n\
             w_main={}\nw_xfa={}\nw_pv={}\nw_sa_bev={}\noptimizer={}\nclip_norm={}\nautotune_share={}\nthreshold={}\n",
            s.epochs,
            s.base_lr,
            s.peak_ratio,
            s.final_ratio,
            s.step_fraction,
            s.batch_size,
            s.seed,
            w.main,
            w.xfa,
            w.pv,
            w.sa_bev,
            self.optimizer,
            self.clip_norm,
            self.autotune_share.map_or("off".to_string(), |v| v.to_string()),
            self.threshold
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub sa_share: f64,
    pub grad_norm: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,main,xfa,pv,sa_bev,total,sa_share";

    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!("{},{},{},{},{},{},{}", self.step, l.main, l.xfa, l.pv, l.sa_bev, l.total, self.sa_share)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_main: f64,
    pub mean_sa_share: f64,
    pub sa_weight: f64,
    pub val_miou: Option<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,mean_total,mean_main,mean_sa_share,sa_weight,val_miou";

    pub fn csv_row(&self) -> String {
        let v = self.val_miou.map_or(String::new(), |m| m.to_string());
        format!("{},{},{},{},{},{}", self.epoch, self.mean_total, self.mean_main, self.mean_sa_share, self.sa_weight, v)
    }
}

pub struct TrainOutcome {
    pub store: ParamStore<f32>,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Weights in force at the end (γ₄ differs from the input when auto-tuned).
    pub weights: LossWeights,
}

impl TrainOutcome {
    pub fn steps_csv(&self) -> String {
        let mut out = format!("{}\n", StepLog::CSV_HEADER);
        for s in &self.steps {
            out.push_str(&s.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = format!("{}\n", EpochLog::CSV_HEADER);
        for e in &self.epochs {
            out.push_str(&e.csv_row());
            out.push('\n');
        }
        out
    }
}

const SHUFFLE_STREAM: u64 = 11;

/// Rescales γ₄ so the weighted splatted-BEV term moves toward `target` of the total.
fn autotune(w: &mut LossWeights, b: &LossBreakdown, target: f64) {
    if !(b.sa_bev > 0.0) {
        return;
    }
    let rest = b.total - b.sa_weight * b.sa_bev;
    if !(rest > 0.0) {
        return;
    }
    let ideal = target * rest / ((1.0 - target) * b.sa_bev);
    w.sa_bev = (0.9 * w.sa_bev + 0.1 * ideal).clamp(1e-4, 100.0);
}

/// Trains `store` in place on `data`; validation mIoU is logged per epoch
/// when `val` is given.
pub fn train(model: &Model, mut store: ParamStore<f32>, data: &[SceneSample], val: Option<&[SceneSample]>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let sched = &cfg.schedule;
    let per_epoch = data.len().div_ceil(sched.batch_size);
    let total = per_epoch * sched.epochs;
    let mut weights = cfg.weights;
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut rng = stream_rng(sched.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let (mut steps, mut epochs) = (Vec::with_capacity(total), Vec::with_capacity(sched.epochs));
    let mut step = 0;
    for epoch in 0..sched.epochs {
        order.shuffle(&mut rng);
        let start = steps.len();
        for chunk in order.chunks(sched.batch_size) {
            let batch: Vec<&SceneSample> = chunk.iter().map(|&i| &data[i]).collect();
            let lr = cyclic_lr(step as f64 / total.saturating_sub(1).max(1) as f64, sched)?;
            let mut tape = Tape::<f32>::new();
            let mut s = Session::new(&mut tape, &store, true, sample_seed(sched.seed, step));
            let out = model.forward(&mut s, &batch, true)?;
            let (loss, breakdown) = out.terms.combine(s.tape, &weights).map_err(|e| Error::Diverged {
                step,
                detail: e.to_string(),
            })?;
            let mut grads = s.tape.backward(loss)?;
            let mut named = s.param_grads(&mut grads);
            let stats = std::mem::take(&mut s.bn_stats);
            drop(s);
            let grad_norm = clip_grad_norm(&mut named, cfg.clip_norm);
            if !grad_norm.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("gradient norm {grad_norm}"),
                });
            }
            opt.step(&mut store, &named, lr)?;
            store.update_running(&stats);
            let sa_share = loss_share(&breakdown).unwrap_or(0.0);
            if let Some(target) = cfg.autotune_share {
                if model.cfg.variant.aligned() {
                    autotune(&mut weights, &breakdown, target);
                }
            }
            steps.push(StepLog {
                step,
                epoch,
                lr,
                loss: breakdown,
                sa_share,
                grad_norm,
            });
            step += 1;
        }
        let window = &steps[start..];
        let n = window.len() as f64;
        let val_miou = match val {
            Some(v) if !v.is_empty() => Some(evaluate(model, &store, v, cfg.threshold)?.miou),
            _ => None,
        };
        epochs.push(EpochLog {
            epoch,
            mean_total: window.iter().map(|s| s.loss.total).sum::<f64>() / n,
            mean_main: window.iter().map(|s| s.loss.main).sum::<f64>() / n,
            mean_sa_share: window.iter().map(|s| s.sa_share).sum::<f64>() / n,
            sa_weight: weights.sa_bev,
            val_miou,
        });
    }
    Ok(TrainOutcome {
        store,
        steps,
        epochs,
        weights,
    })
}

const EVAL_BATCH: usize = 8;

/// Sigmoid class probabilities `[n_classes, rows, cols]` per sample, in eval mode.
pub fn predict(model: &Model, store: &ParamStore<f32>, samples: &[SceneSample]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch: Vec<&SceneSample> = chunk.iter().collect();
        let mut tape = Tape::<f32>::new();
        let mut s = Session::frozen(&mut tape, store, false, 0);
        let fwd = model.forward(&mut s, &batch, false)?;
        let probs = s.tape.sigmoid(fwd.logits);
        let data = s.tape.data(probs);
        let per = data.len() / batch.len();
        out.extend(data.chunks(per).map(|c| c.to_vec()));
    }
    Ok(out)
}

pub fn evaluate(model: &Model, store: &ParamStore<f32>, samples: &[SceneSample], threshold: f64) -> Result<MetricsReport> {
    let mut acc = MiouAccumulator::new(model.cfg.n_classes, threshold);
    for (p, s) in predict(model, store, samples)?.iter().zip(samples) {
        acc.add(p, &s.bev_gt)?;
    }
    Ok(acc.report())
}
