use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::align::LossWeights;
use crate::error::{Error, Result};
use crate::io::{digest, hex};
use crate::kv::{finish, parse_kv, take, take_list};
use crate::model::{BackboneKind, ModelConfig, OptimizerKind, TrainConfig, TrainSchedule, VariantKind};
use crate::synthdata::{Condition, SceneSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    BackboneSweep,
    NoiseSweep,
    ConditionSplits,
    Qualitative,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 4] = [
        ExperimentKind::BackboneSweep,
        ExperimentKind::NoiseSweep,
        ExperimentKind::ConditionSplits,
        ExperimentKind::Qualitative,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::BackboneSweep => "backbones",
            ExperimentKind::NoiseSweep => "noise",
            ExperimentKind::ConditionSplits => "splits",
            ExperimentKind::Qualitative => "qualitative",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment {s:?}")))
    }
}

/// Everything an experiment driver needs; serialised as flat `key=value`
/// text with `scene.` and `model.` prefixes for the scene and model overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub variants: Vec<VariantKind>,
    pub seeds: Vec<u64>,
    pub backbones: Vec<BackboneKind>,
    pub sigmas: Vec<f64>,
    pub conditions: Vec<Condition>,
    pub n_train: usize,
    pub n_val: usize,
    pub train_seed: u64,
    pub val_seed: u64,
    pub noise_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub optimizer: OptimizerKind,
    pub preset: String,
    pub autotune_share: Option<f64>,
    pub threshold: f64,
    pub qualitative_scenes: usize,
    /// Cells trained concurrently; 0 uses every available core. Not part of
    /// the digest since outputs do not depend on it.
    pub jobs: usize,
    /// Shared dataset directory; defaults to `<out>/data`.
    pub data_dir: Option<PathBuf>,
    pub scene: SceneSpec,
    /// Architecture defaults; `backbone` and `variant` are set per cell.
    pub model: ModelConfig,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind) -> Self {
        Self {
            experiment,
            variants: VariantKind::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            backbones: vec![BackboneKind::Tiny],
            sigmas: vec![0.0, 0.05, 0.1],
            conditions: Condition::ALL.to_vec(),
            n_train: 256,
            n_val: 64,
            train_seed: 1000,
            val_seed: 2000,
            noise_seed: 3000,
            epochs: 20,
            batch_size: 4,
            base_lr: 1e-4,
            optimizer: OptimizerKind::Adam,
            preset: "nuscenes".into(),
            autotune_share: None,
            threshold: 0.5,
            qualitative_scenes: 4,
            jobs: 0,
            data_dir: None,
            scene: SceneSpec::default(),
            model: ModelConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.variants.is_empty() || self.backbones.is_empty() {
            return Err(Error::Config("need at least one seed, variant and backbone".into()));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("empty train or validation split".into()));
        }
        if self.sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config(format!("noise levels {:?} must be non-negative", self.sigmas)));
        }
        self.scene.validate()?;
        self.model.validate()?;
        self.train_config(0)?.validate()
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::preset(&self.preset)
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            schedule: TrainSchedule {
                epochs: self.epochs,
                base_lr: self.base_lr,
                batch_size: self.batch_size,
                seed,
                ..TrainSchedule::default()
            },
            weights: self.weights()?,
            optimizer: self.optimizer,
            autotune_share: self.autotune_share,
            threshold: self.threshold,
            ..TrainConfig::default()
        })
    }

    /// Model of one cell. The configured backbone keeps its width overrides
    /// when its kind matches; other kinds use their preset.
    pub fn model_config(&self, backbone: BackboneKind, variant: VariantKind) -> ModelConfig {
        ModelConfig {
            backbone: if self.model.backbone.kind == backbone {
                self.model.backbone.clone()
            } else {
                crate::model::BackboneConfig::preset(backbone)
            },
            variant,
            ..self.model.clone()
        }
    }

    pub fn to_kv(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        let mut out = format!(
            "experiment={}\nvariants={}\nseeds={}\nbackbones={}\nsigmas={}\nconditions={}\nn_train={}\nn_val={}\n\
             train_seed={}\nval_seed={}\nnoise_seed={}\nepochs={}\nbatch_size={}\nbase_lr={}\noptimizer={}\npreset={}\n\
             autotune_share={}\nthreshold={}\nqualitative_scenes={}\njobs={}\n",
            self.experiment,
            join(self.variants.iter().map(|v| v.to_string()).collect()),
            join(self.seeds.iter().map(|v| v.to_string()).collect()),
            join(self.backbones.iter().map(|v| v.to_string()).collect()),
            join(self.sigmas.iter().map(|v| v.to_string()).collect()),
            join(self.conditions.iter().map(|v| v.to_string()).collect()),
            self.n_train,
            self.n_val,
            self.train_seed,
            self.val_seed,
            self.noise_seed,
            self.epochs,
            self.batch_size,
            self.base_lr,
            self.optimizer,
            self.preset,
            self.autotune_share.map_or("off".to_string(), |v| v.to_string()),
            self.threshold,
            self.qualitative_scenes,
            self.jobs,
        );
        if let Some(d) = &self.data_dir {
            out.push_str(&format!("data_dir={}\n", d.display()));
        }
        for (prefix, text) in [("scene", self.scene.to_kv()), ("model", self.model.to_kv())] {
            for line in text.lines() {
                out.push_str(&format!("{prefix}.{line}\n"));
            }
        }
        out
    }

    pub fn digest(&self) -> String {
        let canonical = Self { jobs: 0, ..self.clone() };
        hex(&digest(&canonical.to_kv()))
    }

    pub fn effective_jobs(&self) -> usize {
        match self.jobs {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }

    /// Parses a config file; missing keys keep the defaults of `experiment`.
    pub fn parse(text: &str, experiment: ExperimentKind) -> Result<Self> {
        let mut map = parse_kv(text)?;
        let mut c = Self::new(experiment);
        if let Some(e) = take::<ExperimentKind>(&mut map, "experiment")? {
            if e != experiment {
                return Err(Error::Config(format!("config is for experiment {e}, not {experiment}")));
            }
        }
        macro_rules! list {
            ($($name:ident),*) => {
                $(if let Some(v) = take_list(&mut map, stringify!($name))? { c.$name = v; })*
            };
        }
        list!(variants, seeds, backbones, sigmas, conditions);
        macro_rules! field {
            ($($name:ident),*) => {
                $(if let Some(v) = take(&mut map, stringify!($name))? { c.$name = v; })*
            };
        }
        field!(
            n_train,
            n_val,
            train_seed,
            val_seed,
            noise_seed,
            epochs,
            batch_size,
            base_lr,
            optimizer,
            preset,
            threshold,
            qualitative_scenes,
            jobs
        );
        if let Some(v) = take::<String>(&mut map, "autotune_share")? {
            c.autotune_share = match v.as_str() {
                "off" => None,
                s => Some(s.parse().map_err(|_| Error::Config(format!("bad autotune_share `{s}`")))?),
            };
        }
        c.data_dir = take::<PathBuf>(&mut map, "data_dir")?;
        let mut scene = split_prefix(&mut map, "scene.");
        c.scene = SceneSpec::from_kv(&mut scene)?;
        finish(scene)?;
        let mut model = split_prefix(&mut map, "model.");
        c.model = ModelConfig::from_kv(&mut model)?;
        finish(model)?;
        finish(map)?;
        c.validate()?;
        Ok(c)
    }
}

fn split_prefix(map: &mut BTreeMap<String, String>, prefix: &str) -> BTreeMap<String, String> {
    let keys: Vec<String> = map.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
    keys.into_iter()
        .map(|k| {
            let v = map.remove(&k).expect("listed key");
            (k[prefix.len()..].to_string(), v)
        })
        .collect()
}
