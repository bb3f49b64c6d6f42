//! Perspective decoding and the splatted-probability BEV supervision path.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{frustum_points, point_cells, view_transform, BevGrid, CameraModel, FrustumSpec};
use crate::numcore::{init_conv_bn, DiffTensor, ParamStore, Real, Session, Var};

/// Two conv3x3-BN-ReLU blocks followed by a 1x1 classifier.
#[derive(Clone, Debug)]
pub struct PerspectiveDecoder {
    pub name: String,
    pub in_channels: usize,
    pub hidden: usize,
    pub n_classes: usize,
}

impl PerspectiveDecoder {
    pub fn init<T: Real>(
        name: &str,
        in_channels: usize,
        hidden: usize,
        n_classes: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        init_conv_bn(store, &format!("{name}.b1"), hidden, in_channels, 3, rng)?;
        init_conv_bn(store, &format!("{name}.b2"), hidden, hidden, 3, rng)?;
        store.init_conv(&format!("{name}.cls"), n_classes, hidden, 1, true, rng)?;
        Ok(Self {
            name: name.to_string(),
            in_channels,
            hidden,
            n_classes,
        })
    }

    /// `[N, C_f, h, w]` camera features -> `[N, n_classes, h, w]` logits.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, feats: Var) -> Result<Var> {
        let x = s.conv_bn_relu(&format!("{}.b1", self.name), feats, 1, 1)?;
        let x = s.conv_bn_relu(&format!("{}.b2", self.name), x, 1, 1)?;
        s.conv(&format!("{}.cls", self.name), x, 1, 0)
    }
}

/// Mean cross-entropy of `[N, K, h, w]` perspective logits over labelled pixels.
pub fn pv_loss<T: Real>(s: &mut Session<'_, T>, pv_logits: Var, labels: &[u8]) -> Result<Var> {
    if s.tape.shape(pv_logits).len() == 4 {
        s.tape.cross_entropy_batched(pv_logits, labels)
    } else {
        s.tape.cross_entropy(pv_logits, labels)
    }
}

/// Channel aggregation around the shared view transform: perspective
/// probabilities -> 1x1 conv -> lift-splat (with the feature path's depth
/// logits), averaged per cell -> 1x1 conv to BEV class logits.
#[derive(Clone, Debug)]
pub struct XsaHead {
    pub name: String,
    pub pv_classes: usize,
    pub channels: usize,
    pub n_classes: usize,
}

impl XsaHead {
    pub fn init<T: Real>(
        name: &str,
        pv_classes: usize,
        channels: usize,
        n_classes: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        store.init_conv(&format!("{name}.in"), channels, pv_classes, 1, true, rng)?;
        store.init_conv(&format!("{name}.out"), n_classes, channels, 1, true, rng)?;
        store.get_mut(&format!("{name}.out.b")).expect("just created").data_mut().fill(T::of(-2.0));
        Ok(Self {
            name: name.to_string(),
            pv_classes,
            channels,
            n_classes,
        })
    }

    /// `pv_logits [V, K, h, w]` for `V = batch * views` views (sample-major),
    /// with one depth-logit map and camera per view -> `[batch, n_classes, Hb, Wb]`.
    pub fn bev_logits<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        pv_logits: Var,
        depth_logits: &[Var],
        cams: &[CameraModel],
        frustum: &FrustumSpec,
        grid: &BevGrid,
        batch: usize,
    ) -> Result<Var> {
        let shape = s.tape.shape(pv_logits).to_vec();
        let v = shape.first().copied().unwrap_or(0);
        if shape.len() != 4 || batch == 0 || v % batch != 0 || depth_logits.len() != v || cams.len() != v {
            return Err(Error::dim(
                "xsa",
                format!("pv logits {shape:?}, {} depth maps, {} cameras, batch {batch}", depth_logits.len(), cams.len()),
            ));
        }
        let probs = s.tape.softmax(pv_logits, 1)?;
        let agg = s.conv(&format!("{}.in", self.name), probs, 1, 0)?;
        let views = v / batch;
        let mut per_sample = Vec::with_capacity(batch);
        for b in 0..batch {
            let feats = (b * views..(b + 1) * views)
                .map(|i| s.tape.select(agg, i))
                .collect::<Result<Vec<_>>>()?;
            let range = b * views..(b + 1) * views;
            let mass = view_transform(s.tape, &feats, &depth_logits[range.clone()], &cams[range.clone()], frustum, grid)?;
            let inv = inverse_point_counts::<T>(&cams[range], frustum, grid, self.channels)?;
            let inv = s.tape.constant(inv);
            per_sample.push(s.tape.mul(mass, inv)?);
        }
        let bev = s.tape.stack(&per_sample)?;
        s.conv(&format!("{}.out", self.name), bev, 1, 0)
    }
}

/// `1 / n` per cell for the `n` frustum points of `cams` landing there (0 where
/// none do), tiled over `channels`; turns splatted mass into a per-cell mean.
fn inverse_point_counts<T: Real>(cams: &[CameraModel], frustum: &FrustumSpec, grid: &BevGrid, channels: usize) -> Result<DiffTensor<T>> {
    let mut counts = vec![0u32; grid.cells()];
    for cam in cams {
        for c in point_cells(&frustum_points(cam, frustum), grid) {
            if c != u32::MAX {
                counts[c as usize] += 1;
            }
        }
    }
    let inv: Vec<T> = counts.iter().map(|&n| if n == 0 { T::ZERO } else { T::of(1.0 / n as f64) }).collect();
    DiffTensor::new(&[channels, grid.rows, grid.cols], inv.repeat(channels))
}

/// Per-class binary cross-entropy of the splatted prediction against
/// multi-label `bev_gt` (`[batch, n_classes, Hb, Wb]`, sample-major).
#[allow(clippy::too_many_arguments)]
pub fn xsa_splat_loss<T: Real>(
    s: &mut Session<'_, T>,
    head: &XsaHead,
    pv_logits: Var,
    depth_logits: &[Var],
    cams: &[CameraModel],
    frustum: &FrustumSpec,
    grid: &BevGrid,
    bev_gt: &[T],
) -> Result<Var> {
    let per = head.n_classes * grid.cells();
    if bev_gt.is_empty() || bev_gt.len() % per != 0 {
        return Err(Error::dim(
            "xsa_splat_loss",
            format!("{} GT values do not tile {} classes on a {}x{} grid", bev_gt.len(), head.n_classes, grid.rows, grid.cols),
        ));
    }
    let logits = head.bev_logits(s, pv_logits, depth_logits, cams, frustum, grid, bev_gt.len() / per)?;
    s.tape.bce_with_logits(logits, bev_gt)
}
