use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BackboneConfig, ModelConfig};
use crate::align::{pv_loss, xfa_loss, xsa_splat_loss, LossBreakdown, LossTerms, LossWeights, PerspectiveDecoder, XsaHead};
use crate::error::{Error, Result};
use crate::geometry::{view_transform, BevGrid, CameraModel, FrustumSpec};
use crate::numcore::{init_conv_bn, DiffTensor, ParamStore, Real, Session, Tape, Var};
use crate::synthdata::{SceneSample, SceneSpec};
use crate::xff::{Fused, Fuser, PoseVector};

/// Parameter-name prefixes used only by the training-time alignment heads.
pub const AUX_PREFIXES: [&str; 2] = ["pv.", "xsa."];

pub fn init_lidar_encoder<T: Real>(store: &mut ParamStore<T>, name: &str, hidden: usize, out: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    store.init_linear(&format!("{name}.mlp1"), 4, hidden, rng)?;
    store.init_linear(&format!("{name}.mlp2"), hidden, out, rng)
}

/// Pillar encoder: a pointwise MLP over `(dx, dy, z, intensity)` (offsets
/// relative to the cell centre, in cells) averaged per BEV cell ->
/// `[C, rows, cols]`, zero where no point lands.
pub fn encode_lidar<T: Real>(s: &mut Session<'_, T>, name: &str, points: &[[f32; 4]], grid: &BevGrid) -> Result<Var> {
    let w2 = s.param(&format!("{name}.mlp2.w"))?;
    let c = s.tape.shape(w2)[1];
    let mut feats = Vec::with_capacity(points.len() * 4);
    let mut cells = Vec::with_capacity(points.len());
    let mut counts = vec![0u32; grid.cells()];
    for p in points {
        let (x, y) = (p[0] as f64, p[1] as f64);
        if let Some((r, col)) = grid.cell_of(x, y) {
            let (cx, cy) = grid.cell_center(r, col);
            feats.extend([(x - cx) / grid.resolution, (y - cy) / grid.resolution, p[2] as f64 / 2.0, p[3] as f64]);
            let cell = r * grid.cols + col;
            cells.push(cell as u32);
            counts[cell] += 1;
        }
    }
    if cells.is_empty() {
        return Ok(s.tape.constant(DiffTensor::zeros(&[c, grid.rows, grid.cols])));
    }
    let x = s.tape.constant(DiffTensor::from_f64(&[cells.len(), 4], &feats)?);
    let h = s.linear(&format!("{name}.mlp1"), x)?;
    let h = s.tape.relu(h);
    let h = s.linear(&format!("{name}.mlp2"), h)?;
    let ht = s.tape.transpose(h)?;
    let sum = s.tape.scatter_sum(ht, Arc::new(cells), grid.rows, grid.cols)?;
    let inv: Vec<f64> = counts.iter().map(|&n| if n == 0 { 0.0 } else { 1.0 / n as f64 }).collect();
    let inv: Vec<f64> = (0..c).flat_map(|_| inv.iter().copied()).collect();
    let inv = s.tape.constant(DiffTensor::from_f64(&[c, grid.rows, grid.cols], &inv)?);
    s.tape.mul(sum, inv)
}

/// Intermediate nodes of one forward pass.
pub struct ForwardOut {
    /// `[B, n_classes, rows, cols]`.
    pub logits: Var,
    pub cam_bev: Var,
    pub lidar_bev: Var,
    /// One `[D, h, w]` map per view, sample-major.
    pub depth_logits: Vec<Var>,
    /// `[B*V, C_f, h, w]` pyramid output.
    pub features: Var,
    pub fused: Fused,
    pub terms: LossTerms,
}

/// Structure of a model; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub frustum: FrustumSpec,
    pub grid: BevGrid,
    pub n_cams: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub fuser: Fuser,
    pub pv: Option<PerspectiveDecoder>,
    pub xsa: Option<XsaHead>,
}

impl Model {
    /// Builds the model for scenes of `spec` and initialises its parameters from `seed`.
    pub fn init<T: Real>(cfg: &ModelConfig, spec: &SceneSpec, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        spec.validate()?;
        let s = BackboneConfig::STRIDE;
        if spec.image_h % s != 0 || spec.image_w % s != 0 || spec.pv_stride != s {
            return Err(Error::Config(format!(
                "{}x{} images with label stride {} do not match the 1/{s} feature grid",
                spec.image_h, spec.image_w, spec.pv_stride
            )));
        }
        if cfg.n_classes != spec.n_classes() {
            return Err(Error::Config(format!("model has {} classes, scenes have {}", cfg.n_classes, spec.n_classes())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let b = &cfg.backbone;
        let mut c_in = 3;
        for (st, (&w, &d)) in b.widths.iter().zip(&b.depths).enumerate() {
            for j in 0..d {
                init_conv_bn(&mut store, &format!("img.s{st}.b{j}"), w, if j == 0 { c_in } else { w }, 3, &mut rng)?;
            }
            c_in = w;
        }
        let f = b.out_channels;
        store.init_conv("img.lat2", f, b.widths[1], 1, true, &mut rng)?;
        store.init_conv("img.lat3", f, b.widths[2], 1, true, &mut rng)?;
        init_conv_bn(&mut store, "img.smooth", f, f, 3, &mut rng)?;
        store.init_conv("depth", cfg.depth_bins, f, 1, true, &mut rng)?;
        store.init_conv("ctx", cfg.bev_channels, f, 1, true, &mut rng)?;
        init_lidar_encoder(&mut store, "lidar", cfg.lidar_hidden, cfg.bev_channels, &mut rng)?;
        let grid = spec.grid.clone();
        let fuser = Fuser::init(cfg.fusion(), "fuse", grid.rows, grid.cols, &mut store, &mut rng)?;
        init_conv_bn(&mut store, "dec.b1", cfg.decoder_hidden, cfg.fused_channels, 3, &mut rng)?;
        init_conv_bn(&mut store, "dec.b2", cfg.decoder_hidden, cfg.decoder_hidden, 3, &mut rng)?;
        store.init_conv("dec.cls", cfg.n_classes, cfg.decoder_hidden, 1, true, &mut rng)?;
        // Sparse classes: start from a low positive rate.
        store.get_mut("dec.cls.b").expect("just created").data_mut().fill(T::of(-2.0));
        let (pv, xsa) = if cfg.variant.aligned() {
            (
                Some(PerspectiveDecoder::init("pv", f, cfg.pv_hidden, spec.pv_classes(), &mut store, &mut rng)?),
                Some(XsaHead::init("xsa", spec.pv_classes(), cfg.xsa_channels, cfg.n_classes, &mut store, &mut rng)?),
            )
        } else {
            (None, None)
        };
        let model = Self {
            cfg: cfg.clone(),
            frustum: spec.frustum(cfg.d_min, cfg.d_max, cfg.depth_bins)?,
            grid,
            n_cams: spec.n_cams,
            image_h: spec.image_h,
            image_w: spec.image_w,
            fuser,
            pv,
            xsa,
        };
        Ok((model, store))
    }

    /// Number of scalar parameters used at inference (auxiliary heads excluded).
    pub fn inference_param_count<T: Real>(store: &ParamStore<T>) -> usize {
        store
            .iter()
            .filter(|(k, _)| !AUX_PREFIXES.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Normalised `[B*V, 3, H, W]` image batch.
    pub fn image_batch<T: Real>(&self, batch: &[&SceneSample]) -> Result<DiffTensor<T>> {
        let mut data = Vec::with_capacity(batch.len() * self.n_cams * 3 * self.image_h * self.image_w);
        for s in batch {
            if s.n_cams() != self.n_cams || s.image_h != self.image_h || s.image_w != self.image_w {
                return Err(Error::dim(
                    "model",
                    format!("sample has {} cameras of {}x{}", s.n_cams(), s.image_h, s.image_w),
                ));
            }
            data.extend(s.images.iter().map(|&v| T::of((v as f64 - 0.5) * 4.0)));
        }
        DiffTensor::new(&[batch.len() * self.n_cams, 3, self.image_h, self.image_w], data)
    }

    /// Strided stages plus the two-level pyramid -> `[B*V, C_f, H/8, W/8]`.
    pub fn backbone<T: Real>(&self, s: &mut Session<'_, T>, images: Var) -> Result<Var> {
        let b = &self.cfg.backbone;
        let mut x = images;
        let mut stages = Vec::with_capacity(3);
        for (st, &d) in b.depths.iter().enumerate() {
            x = s.conv_bn_relu(&format!("img.s{st}.b0"), x, 2, 1)?;
            for j in 1..d {
                let y = s.conv_bn_relu(&format!("img.s{st}.b{j}"), x, 1, 1)?;
                x = s.tape.add(x, y)?;
            }
            stages.push(x);
        }
        let p3 = s.conv("img.lat3", stages[2], 1, 0)?;
        let (h2, w2) = (s.tape.shape(stages[1])[2], s.tape.shape(stages[1])[3]);
        let up = s.tape.interpolate_bilinear(p3, h2, w2)?;
        let lat2 = s.conv("img.lat2", stages[1], 1, 0)?;
        let p2 = s.tape.add(lat2, up)?;
        let down = s.conv_bn_relu("img.smooth", p2, 2, 1)?;
        s.tape.add(down, p3)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, batch: &[&SceneSample], losses: bool) -> Result<ForwardOut> {
        let images = s.tape.constant(self.image_batch(batch)?);
        self.forward_images(s, images, batch, losses)
    }

    /// Forward pass from an already normalised image batch. With `losses`,
    /// the main loss and (for aligned variants) the alignment terms are built.
    pub fn forward_images<T: Real>(&self, s: &mut Session<'_, T>, images: Var, batch: &[&SceneSample], losses: bool) -> Result<ForwardOut> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let v = self.n_cams;
        let features = self.backbone(s, images)?;
        let depth = s.conv("depth", features, 1, 0)?;
        let ctx = s.conv("ctx", features, 1, 0)?;
        let mut depth_logits = Vec::with_capacity(batch.len() * v);
        let mut cams: Vec<CameraModel> = Vec::with_capacity(batch.len() * v);
        let mut cam_maps = Vec::with_capacity(batch.len());
        let mut lidar_maps = Vec::with_capacity(batch.len());
        for (b, sample) in batch.iter().enumerate() {
            let mut feats = Vec::with_capacity(v);
            for i in b * v..(b + 1) * v {
                feats.push(s.tape.select(ctx, i)?);
                depth_logits.push(s.tape.select(depth, i)?);
            }
            cams.extend(sample.cameras.iter().cloned());
            cam_maps.push(view_transform(s.tape, &feats, &depth_logits[b * v..], &sample.cameras, &self.frustum, &self.grid)?);
            lidar_maps.push(encode_lidar(s, "lidar", &sample.lidar, &self.grid)?);
        }
        let cam_bev = s.tape.stack(&cam_maps)?;
        let lidar_bev = s.tape.stack(&lidar_maps)?;
        let poses: Vec<PoseVector> = batch.iter().map(|x| x.pose).collect();
        let fused = self.fuser.forward(s, cam_bev, lidar_bev, &poses)?;
        let x = s.conv_bn_relu("dec.b1", fused.out, 1, 1)?;
        let x = s.conv_bn_relu("dec.b2", x, 1, 1)?;
        let logits = s.conv("dec.cls", x, 1, 0)?;
        let mut terms = LossTerms::default();
        if losses {
            let gt: Vec<T> = batch.iter().flat_map(|x| x.bev_gt.iter().map(|&g| T::of(g as f64))).collect();
            terms.main = Some(s.tape.bce_with_logits(logits, &gt)?);
            if let (Some(pv), Some(xsa)) = (&self.pv, &self.xsa) {
                terms.xfa = Some(xfa_loss(s.tape, cam_bev, lidar_bev, self.cfg.detach_lidar)?);
                let pv_logits = pv.forward(s, features)?;
                let labels: Vec<u8> = batch.iter().flat_map(|x| x.pv_labels.iter().copied()).collect();
                terms.pv = Some(pv_loss(s, pv_logits, &labels)?);
                terms.sa_bev = Some(xsa_splat_loss(s, xsa, pv_logits, &depth_logits, &cams, &self.frustum, &self.grid, &gt)?);
            }
        }
        Ok(ForwardOut {
            logits,
            cam_bev,
            lidar_bev,
            depth_logits,
            features,
            fused,
            terms,
        })
    }

    /// Weighted total of the active loss terms.
    pub fn loss<T: Real>(&self, tape: &mut Tape<T>, out: &ForwardOut, weights: &LossWeights) -> Result<(Var, LossBreakdown)> {
        out.terms.combine(tape, weights)
    }
}
