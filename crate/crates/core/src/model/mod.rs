//! Camera and LiDAR encoders, the three model variants, and training.

mod checkpoint;
mod network;
mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use network::{encode_lidar, init_lidar_encoder, ForwardOut, Model, AUX_PREFIXES};
pub use train::{
    clip_grad_norm, evaluate, predict, train, EpochLog, Optimizer, OptimizerKind, StepLog, TrainConfig, TrainOutcome,
};

use crate::error::{Error, Result};
use crate::kv::{take, take_list};
use crate::xff::{FuserKind, FusionConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BackboneKind {
    Tiny,
    Small,
    Base,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 3] = [BackboneKind::Tiny, BackboneKind::Small, BackboneKind::Base];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::Tiny => "tiny",
            BackboneKind::Small => "small",
            BackboneKind::Base => "base",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown backbone {s:?}")))
    }
}

/// Three strided stages (each halving resolution) and a two-level pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub widths: [usize; 3],
    pub depths: [usize; 3],
    /// Pyramid width, i.e. channels of the 1/8 feature map.
    pub out_channels: usize,
}

impl BackboneConfig {
    pub fn preset(kind: BackboneKind) -> Self {
        match kind {
            BackboneKind::Tiny => Self {
                kind,
                widths: [16, 32, 64],
                depths: [1, 1, 1],
                out_channels: 64,
            },
            BackboneKind::Small => Self {
                kind,
                widths: [16, 32, 96],
                depths: [1, 2, 2],
                out_channels: 96,
            },
            BackboneKind::Base => Self {
                kind,
                widths: [24, 48, 128],
                depths: [2, 2, 2],
                out_channels: 128,
            },
        }
    }

    pub const STRIDE: usize = 8;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VariantKind {
    Baseline,
    View,
    All,
}

impl VariantKind {
    pub const ALL: [VariantKind; 3] = [VariantKind::Baseline, VariantKind::View, VariantKind::All];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::Baseline => "baseline",
            VariantKind::View => "view",
            VariantKind::All => "all",
        }
    }

    /// Whether the alignment losses (and their auxiliary heads) are trained.
    pub fn aligned(self) -> bool {
        self != VariantKind::Baseline
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub base_lr: f64,
    pub peak_ratio: f64,
    pub final_ratio: f64,
    pub step_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 20,
            base_lr: 1e-4,
            peak_ratio: 10.0,
            final_ratio: 1e-4,
            step_fraction: 0.4,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_fraction > 0.0 && self.step_fraction < 1.0) {
            return Err(Error::Config(format!("step fraction {} outside (0,1)", self.step_fraction)));
        }
        if !(self.peak_ratio > 0.0 && self.final_ratio > 0.0 && self.base_lr > 0.0) {
            return Err(Error::Config("learning rate and ratios must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One-cycle schedule: linear rise from `base_lr` to `base_lr * peak_ratio`
/// at `step_fraction`, then linear descent to `base_lr * final_ratio` at 1.
pub fn cyclic_lr(t: f64, sched: &TrainSchedule) -> Result<f64> {
    sched.validate()?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("schedule position {t} outside [0,1]")));
    }
    let (lo, peak, end, s) = (
        sched.base_lr,
        sched.base_lr * sched.peak_ratio,
        sched.base_lr * sched.final_ratio,
        sched.step_fraction,
    );
    let lerp = |a: f64, b: f64, f: f64| a * (1.0 - f) + b * f;
    Ok(if t <= s { lerp(lo, peak, t / s) } else { lerp(peak, end, (t - s) / (1.0 - s)) })
}

/// Architecture of one model instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub variant: VariantKind,
    /// Fuser of the `All` variant; the other variants use the conv fuser.
    pub fuser: FuserKind,
    pub n_classes: usize,
    pub depth_bins: usize,
    pub d_min: f64,
    pub d_max: f64,
    /// Channels of both the camera-BEV and LiDAR-BEV maps.
    pub bev_channels: usize,
    pub fused_channels: usize,
    pub decoder_hidden: usize,
    pub lidar_hidden: usize,
    pub pv_hidden: usize,
    pub xsa_channels: usize,
    pub heads: usize,
    pub droppath: f64,
    pub modulation: bool,
    pub attn_residual: bool,
    pub pose_hidden: usize,
    pub pose_grid: usize,
    pub detach_lidar: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::preset(BackboneKind::Tiny),
            variant: VariantKind::Baseline,
            fuser: FuserKind::Sdta,
            n_classes: 4,
            depth_bins: 32,
            d_min: 1.0,
            d_max: 30.0,
            bev_channels: 16,
            fused_channels: 32,
            decoder_hidden: 32,
            lidar_hidden: 16,
            pv_hidden: 64,
            xsa_channels: 8,
            heads: 8,
            droppath: 0.1,
            modulation: false,
            attn_residual: true,
            pose_hidden: 64,
            pose_grid: 8,
            detach_lidar: false,
        }
    }
}

impl ModelConfig {
    pub fn fuser_kind(&self) -> FuserKind {
        match self.variant {
            VariantKind::All => self.fuser,
            _ => FuserKind::Conv,
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            kind: self.fuser_kind(),
            cam_channels: self.bev_channels,
            lidar_channels: self.bev_channels,
            embed_dim: self.fused_channels,
            heads: self.heads,
            droppath: self.droppath,
            modulation: self.modulation,
            attn_residual: self.attn_residual,
            pose_hidden: self.pose_hidden,
            pose_grid: self.pose_grid,
            ..FusionConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion().validate()?;
        if self.n_classes == 0 || self.depth_bins == 0 || !(self.d_min > 0.0 && self.d_min < self.d_max) {
            return Err(Error::Config("classes, depth bins and depth range must be positive".into()));
        }
        let zero = [self.bev_channels, self.decoder_hidden, self.lidar_hidden, self.pv_hidden, self.xsa_channels];
        if zero.contains(&0) || self.backbone.widths.contains(&0) || self.backbone.depths.contains(&0) || self.backbone.out_channels == 0 {
            return Err(Error::Config("zero-width layer".into()));
        }
        Ok(())
    }

    /// Inverse of [`ModelConfig::to_kv`]; missing keys keep their defaults
    /// and `backbone` selects a preset before any width overrides apply.
    pub fn from_kv(map: &mut BTreeMap<String, String>) -> Result<Self> {
        let mut c = ModelConfig::default();
        if let Some(kind) = take::<BackboneKind>(map, "backbone")? {
            c.backbone = BackboneConfig::preset(kind);
        }
        for (key, slot) in [("backbone_widths", &mut c.backbone.widths), ("backbone_depths", &mut c.backbone.depths)] {
            if let Some(v) = take_list::<usize>(map, key)? {
                *slot = v
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key} needs three values")))?;
            }
        }
        if let Some(v) = take(map, "backbone_out")? {
            c.backbone.out_channels = v;
        }
        macro_rules! field {
            ($($name:ident),*) => {
                $(if let Some(v) = take(map, stringify!($name))? { c.$name = v; })*
            };
        }
        field!(
            variant,
            fuser,
            n_classes,
            depth_bins,
            d_min,
            d_max,
            bev_channels,
            fused_channels,
            decoder_hidden,
            lidar_hidden,
            pv_hidden,
            xsa_channels,
            heads,
            droppath,
            modulation,
            attn_residual,
            pose_hidden,
            pose_grid,
            detach_lidar
        );
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        let b = &self.backbone;
        format!(
            "backbone={}\nbackbone_widths={},{},{}\nbackbone_depths={},{},{}\nbackbone_out={}\nvariant={}\nfuser={}\n\
             n_classes={}\ndepth_bins={}\nd_min={}\nd_max={}\nbev_channels={}\nfused_channels={}\ndecoder_hidden={}\n\
             lidar_hidden={}\npv_hidden={}\nxsa_channels={}\nheads={}\ndroppath={}\nmodulation={}\nattn_residual={}\n\
             pose_hidden={}\npose_grid={}\ndetach_lidar={}\n",
            b.kind,
            b.widths[0],
            b.widths[1],
            b.widths[2],
            b.depths[0],
            b.depths[1],
            b.depths[2],
            b.out_channels,
            self.variant,
            self.fuser,
            self.n_classes,
            self.depth_bins,
            self.d_min,
            self.d_max,
            self.bev_channels,
            self.fused_channels,
            self.decoder_hidden,
            self.lidar_hidden,
            self.pv_hidden,
            self.xsa_channels,
            self.heads,
            self.droppath,
            self.modulation,
            self.attn_residual,
            self.pose_hidden,
            self.pose_grid,
            self.detach_lidar
        )
    }
}
