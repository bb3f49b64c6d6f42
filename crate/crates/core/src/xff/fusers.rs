//! The four fusers. Inputs are `[N,C,H,W]` batches sharing `H x W`.

use rand::Rng;

use super::attention::{channel_attention, init_channel_attention, init_mhsa, mhsa};
use super::{FuserKind, FusionConfig, PoseVector};
use crate::error::{Error, Result};
use crate::numcore::{init_conv_bn, DiffTensor, ParamStore, Real, Session, Var};

/// Fused map plus any attention matrices computed on the way.
pub struct Fused {
    pub out: Var,
    pub attention: Vec<Var>,
    /// Deformable sampling offsets `[N,2k²,H,W]` of the pose fuser.
    pub offsets: Option<Var>,
}

fn concat_inputs<T: Real>(s: &mut Session<'_, T>, cfg: &FusionConfig, cam: Var, lidar: Var) -> Result<(Var, usize, usize, usize)> {
    let (cs, ls) = (s.tape.shape(cam).to_vec(), s.tape.shape(lidar).to_vec());
    if cs.len() != 4 || ls.len() != 4 || cs[0] != ls[0] || cs[2..] != ls[2..] {
        return Err(Error::dim("fuse", format!("camera {cs:?} vs lidar {ls:?}")));
    }
    if cs[1] != cfg.cam_channels || ls[1] != cfg.lidar_channels {
        return Err(Error::dim(
            "fuse",
            format!("expected {}+{} channels, got {}+{}", cfg.cam_channels, cfg.lidar_channels, cs[1], ls[1]),
        ));
    }
    Ok((s.tape.concat(&[cam, lidar], 1)?, cs[0], cs[2], cs[3]))
}

/// `[N,C,H,W]` -> per-sample `[H*W, C]` token matrices.
fn to_tokens<T: Real>(s: &mut Session<'_, T>, x: Var) -> Result<Vec<Var>> {
    let shape = s.tape.shape(x).to_vec();
    (0..shape[0])
        .map(|b| {
            let xb = s.tape.select(x, b)?;
            let flat = s.tape.reshape(xb, &[shape[1], shape[2] * shape[3]])?;
            s.tape.transpose(flat)
        })
        .collect()
}

/// Inverse of [`to_tokens`].
fn from_tokens<T: Real>(s: &mut Session<'_, T>, tokens: &[Var], h: usize, w: usize) -> Result<Var> {
    let maps = tokens
        .iter()
        .map(|&t| {
            let c = s.tape.shape(t)[1];
            let ct = s.tape.transpose(t)?;
            s.tape.reshape(ct, &[c, h, w])
        })
        .collect::<Result<Vec<_>>>()?;
    s.tape.stack(&maps)
}

/// Naive fuser: concat -> 3x3 conv -> BN -> ReLU.
pub fn fuse_conv<T: Real>(s: &mut Session<'_, T>, name: &str, cfg: &FusionConfig, cam: Var, lidar: Var) -> Result<Fused> {
    let (x, ..) = concat_inputs(s, cfg, cam, lidar)?;
    let out = s.conv_bn_relu(name, x, 1, 1)?;
    Ok(Fused { out, attention: Vec::new(), offsets: None })
}

/// Patch tokens (k x k, stride s, no padding) -> pre-norm MHSA with a residual
/// -> stride-s transposed conv and crop back to `H x W`, plus a projected input.
pub fn fuse_self_attention<T: Real>(s: &mut Session<'_, T>, name: &str, cfg: &FusionConfig, cam: Var, lidar: Var) -> Result<Fused> {
    let (x, _, h, w) = concat_inputs(s, cfg, cam, lidar)?;
    if h < cfg.patch_k || w < cfg.patch_k {
        return Err(Error::dim(
            "fuse_self_attention",
            format!("{h}x{w} map cannot hold one {0}x{0} patch", cfg.patch_k),
        ));
    }
    let tok = s.conv(&format!("{name}.tok"), x, cfg.patch_stride, 0)?;
    let (th, tw) = (s.tape.shape(tok)[2], s.tape.shape(tok)[3]);
    let mut attention = Vec::new();
    let mut mixed = Vec::new();
    for t in to_tokens(s, tok)? {
        let normed = s.ln(&format!("{name}.ln"), t)?;
        let (a, weights) = mhsa(s, &format!("{name}.attn"), normed, cfg.heads)?;
        attention.extend(weights);
        mixed.push(s.tape.add(t, a)?);
    }
    let grid = from_tokens(s, &mixed, th, tw)?;
    let up = s.deconv(&format!("{name}.untok"), grid, cfg.patch_stride, 0)?;
    let mut out = s.tape.crop2d(up, h, w)?;
    if cfg.attn_residual {
        let res = s.conv(&format!("{name}.res"), x, 1, 0)?;
        out = s.tape.add(out, res)?;
    }
    Ok(Fused { out, attention, offsets: None })
}

/// Kernel of the un-tokenising transposed conv that covers `extent` again.
fn untok_kernel(cfg: &FusionConfig, h: usize, w: usize) -> usize {
    let tokens = |e: usize| (e - cfg.patch_k) / cfg.patch_stride + 1;
    let need = |e: usize| e.saturating_sub((tokens(e) - 1) * cfg.patch_stride);
    need(h).max(need(w)).max(cfg.patch_stride)
}

/// 1x1 stem -> split-depth cascade -> transposed channel attention -> MLP,
/// both residual branches under stochastic depth -> size-preserving 3x3
/// transposed conv.
pub fn fuse_sdta<T: Real>(s: &mut Session<'_, T>, name: &str, cfg: &FusionConfig, cam: Var, lidar: Var) -> Result<Fused> {
    let (x, _, h, w) = concat_inputs(s, cfg, cam, lidar)?;
    let e = cfg.embed_dim;
    let x = s.conv(&format!("{name}.stem"), x, 1, 0)?;
    let part = e / cfg.scales;
    let mut prev: Option<Var> = None;
    let mut groups = Vec::with_capacity(cfg.scales);
    for i in 0..cfg.scales {
        let xi = s.tape.slice(x, 1, i * part, part)?;
        let input = match prev {
            Some(p) => s.tape.add(xi, p)?,
            None => xi,
        };
        let yi = s.conv_grouped(&format!("{name}.dw{i}"), input, 1, 1, part)?;
        groups.push(yi);
        prev = Some(yi);
    }
    let cascade = s.tape.concat(&groups, 1)?;
    let mut attention = Vec::new();
    let mut attended = Vec::new();
    for t in to_tokens(s, cascade)? {
        let normed = s.ln(&format!("{name}.ln1"), t)?;
        let (a, weights) = channel_attention(s, &format!("{name}.xca"), normed, cfg.heads)?;
        attention.extend(weights);
        attended.push(a);
    }
    let a = from_tokens(s, &attended, h, w)?;
    let a = s.droppath(a, cfg.droppath)?;
    let x1 = s.tape.add(cascade, a)?;
    let m = s.conv(&format!("{name}.mlp1"), x1, 1, 0)?;
    let m = s.bn(&format!("{name}.mlpbn"), m)?;
    let m = s.tape.relu(m);
    let m = s.conv(&format!("{name}.mlp2"), m, 1, 0)?;
    let m = s.droppath(m, cfg.droppath)?;
    let x2 = s.tape.add(x1, m)?;
    let out = s.deconv(&format!("{name}.up"), x2, 1, 1)?;
    Ok(Fused { out, attention, offsets: None })
}

/// Pose MLP -> coarse map interpolated to `H x W` as an extra channel; a conv
/// over (camera, LiDAR, pose) predicts 2k² offsets for a deformable k x k conv.
pub fn fuse_pose_dcn<T: Real>(
    s: &mut Session<'_, T>,
    name: &str,
    cfg: &FusionConfig,
    cam: Var,
    lidar: Var,
    poses: &[PoseVector],
) -> Result<Fused> {
    let (x, n, h, w) = concat_inputs(s, cfg, cam, lidar)?;
    if poses.len() != n {
        return Err(Error::dim("fuse_pose_dcn", format!("{} poses for batch of {n}", poses.len())));
    }
    let flat: Vec<f64> = poses.iter().flat_map(|p| p.0).collect();
    let pv = s.tape.constant(DiffTensor::from_f64(&[n, 12], &flat)?);
    let hdn = s.linear(&format!("{name}.pose1"), pv)?;
    let hdn = s.tape.relu(hdn);
    let coarse = s.linear(&format!("{name}.pose2"), hdn)?;
    let coarse = s.tape.reshape(coarse, &[n, 1, cfg.pose_grid, cfg.pose_grid])?;
    let pose_map = s.tape.interpolate_bilinear(coarse, h, w)?;
    let with_pose = s.tape.concat(&[x, pose_map], 1)?;
    let pad = cfg.dcn_k / 2;
    let offsets = s.conv(&format!("{name}.offset"), with_pose, 1, pad)?;
    let mask = if cfg.modulation {
        let m = s.conv(&format!("{name}.mask"), with_pose, 1, pad)?;
        Some(s.tape.sigmoid(m))
    } else {
        None
    };
    let wt = s.param(&format!("{name}.dcn.w"))?;
    let y = s.tape.deform_conv2d(x, wt, None, offsets, mask)?;
    let y = s.bn(&format!("{name}.bn"), y)?;
    Ok(Fused { out: s.tape.relu(y), attention: Vec::new(), offsets: Some(offsets) })
}

/// A configured fuser bound to a parameter-name prefix.
#[derive(Clone, Debug)]
pub struct Fuser {
    pub cfg: FusionConfig,
    pub name: String,
}

impl Fuser {
    /// Registers the parameters for fusing `h x w` maps.
    pub fn init<T: Real>(cfg: FusionConfig, name: &str, h: usize, w: usize, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, e) = (cfg.in_channels(), cfg.embed_dim);
        let p = |s: &str| format!("{name}.{s}");
        match cfg.kind {
            FuserKind::Conv => init_conv_bn(store, name, e, c, 3, rng)?,
            FuserKind::SelfAttn => {
                store.init_conv(&p("tok"), e, c, cfg.patch_k, true, rng)?;
                store.init_ln(&p("ln"), e)?;
                init_mhsa(store, &p("attn"), e, rng)?;
                store.init_deconv(&p("untok"), e, e, untok_kernel(&cfg, h.max(cfg.patch_k), w.max(cfg.patch_k)), cfg.patch_stride, rng)?;
                if cfg.attn_residual {
                    store.init_conv(&p("res"), e, c, 1, true, rng)?;
                }
            }
            FuserKind::Sdta => {
                store.init_conv(&p("stem"), e, c, 1, true, rng)?;
                let part = e / cfg.scales;
                for i in 0..cfg.scales {
                    store.init_conv(&format!("{name}.dw{i}"), part, 1, 3, true, rng)?;
                }
                store.init_ln(&p("ln1"), e)?;
                init_channel_attention(store, &p("xca"), e, cfg.heads, rng)?;
                store.init_conv(&p("mlp1"), e * cfg.mlp_ratio, e, 1, true, rng)?;
                store.init_bn(&p("mlpbn"), e * cfg.mlp_ratio)?;
                store.init_conv(&p("mlp2"), e, e * cfg.mlp_ratio, 1, true, rng)?;
                store.init_deconv(&p("up"), e, e, 3, 1, rng)?;
            }
            FuserKind::PoseDcn => {
                store.init_linear(&p("pose1"), 12, cfg.pose_hidden, rng)?;
                store.init_linear(&p("pose2"), cfg.pose_hidden, cfg.pose_grid * cfg.pose_grid, rng)?;
                let k = cfg.dcn_k;
                store.insert(&p("offset.w"), DiffTensor::zeros(&[cfg.offset_channels, c + 1, k, k]))?;
                store.insert(&p("offset.b"), DiffTensor::zeros(&[cfg.offset_channels]))?;
                if cfg.modulation {
                    store.insert(&p("mask.w"), DiffTensor::zeros(&[k * k, c + 1, k, k]))?;
                    store.insert(&p("mask.b"), DiffTensor::zeros(&[k * k]))?;
                }
                store.init_conv(&p("dcn"), e, c, k, false, rng)?;
                store.init_bn(&p("bn"), e)?;
            }
        }
        Ok(Self { cfg, name: name.to_string() })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, cam: Var, lidar: Var, poses: &[PoseVector]) -> Result<Fused> {
        let (cfg, name) = (&self.cfg, self.name.as_str());
        match cfg.kind {
            FuserKind::Conv => fuse_conv(s, name, cfg, cam, lidar),
            FuserKind::SelfAttn => fuse_self_attention(s, name, cfg, cam, lidar),
            FuserKind::Sdta => fuse_sdta(s, name, cfg, cam, lidar),
            FuserKind::PoseDcn => fuse_pose_dcn(s, name, cfg, cam, lidar, poses),
        }
    }
}
