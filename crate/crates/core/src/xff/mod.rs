//! Cross-modal feature fusion blocks mapping (camera-BEV, LiDAR-BEV) feature
//! maps to one fused BEV map.

mod attention;
mod deform;
mod fusers;

use std::fmt;
use std::str::FromStr;

pub use attention::{channel_attention, init_channel_attention, init_mhsa, mhsa};
pub use fusers::{fuse_conv, fuse_pose_dcn, fuse_sdta, fuse_self_attention, Fused, Fuser};

use crate::error::{Error, Result};
use crate::geometry::{is_rotation, CameraModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FuserKind {
    Conv,
    SelfAttn,
    Sdta,
    PoseDcn,
}

impl FuserKind {
    pub const ALL: [FuserKind; 4] = [FuserKind::Conv, FuserKind::SelfAttn, FuserKind::Sdta, FuserKind::PoseDcn];

    pub fn as_str(self) -> &'static str {
        match self {
            FuserKind::Conv => "conv",
            FuserKind::SelfAttn => "selfattn",
            FuserKind::Sdta => "sdta",
            FuserKind::PoseDcn => "posedcn",
        }
    }
}

impl fmt::Display for FuserKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FuserKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FuserKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fuser {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub kind: FuserKind,
    pub cam_channels: usize,
    pub lidar_channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub scales: usize,
    pub patch_k: usize,
    pub patch_stride: usize,
    pub droppath: f64,
    pub offset_channels: usize,
    pub dcn_k: usize,
    /// Adds k² sigmoid modulation channels to the deformable block.
    pub modulation: bool,
    /// 1x1-projected input added to the self-attention fuser output.
    pub attn_residual: bool,
    pub pose_hidden: usize,
    /// Side of the square map the pose MLP emits before interpolation.
    pub pose_grid: usize,
    /// Hidden expansion of the SDTA pointwise MLP.
    pub mlp_ratio: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            kind: FuserKind::Conv,
            cam_channels: 80,
            lidar_channels: 256,
            embed_dim: 256,
            heads: 8,
            scales: 2,
            patch_k: 3,
            patch_stride: 2,
            droppath: 0.1,
            offset_channels: 18,
            dcn_k: 3,
            modulation: false,
            attn_residual: true,
            pose_hidden: 64,
            pose_grid: 8,
            mlp_ratio: 4,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.scales == 0 || self.embed_dim % self.scales != 0 {
            return bad(format!("embed_dim {} not divisible by {} scales", self.embed_dim, self.scales));
        }
        if self.dcn_k % 2 == 0 || self.offset_channels != 2 * self.dcn_k * self.dcn_k {
            return bad(format!(
                "offset_channels {} must equal 2*k^2 for odd k={}",
                self.offset_channels, self.dcn_k
            ));
        }
        if !(0.0..1.0).contains(&self.droppath) {
            return bad(format!("droppath {} outside [0,1)", self.droppath));
        }
        if self.patch_k == 0 || self.patch_stride == 0 || self.pose_grid == 0 || self.pose_hidden == 0 {
            return bad("zero-sized patch or pose setting".into());
        }
        if self.cam_channels == 0 || self.lidar_channels == 0 || self.mlp_ratio == 0 {
            return bad("zero input channels".into());
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.cam_channels + self.lidar_channels
    }
}

/// Flattened row-major rotation followed by translation of the reference
/// camera extrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseVector(pub [f64; 12]);

impl PoseVector {
    pub fn new(values: [f64; 12]) -> Result<Self> {
        let r = [
            [values[0], values[1], values[2]],
            [values[3], values[4], values[5]],
            [values[6], values[7], values[8]],
        ];
        if !is_rotation(&r, 1e-4) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("pose rotation is not orthonormal".into()));
        }
        Ok(Self(values))
    }

    pub fn from_camera(cam: &CameraModel) -> Self {
        Self(cam.pose_vector())
    }
}
