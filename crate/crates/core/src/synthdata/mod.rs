//! Procedural multi-view scenes: BEV layout, rendered cameras, LiDAR, and
//! the image perturbations used by the robustness experiments.

mod dataset;
mod perturb;
mod scene;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use dataset::{Dataset, DatasetManifest, SAMPLE_MAGIC};
pub use perturb::{add_gaussian_noise, degrade_condition, Condition, NoiseSpec};
pub use scene::{Hit, ObjectClass, SceneLayout, SceneObject, Surface, CLASS_NAMES, GROUND_INTENSITY};

use crate::error::{Error, Result};
use crate::geometry::{camera_rotation, BevGrid, CameraModel, FrustumSpec, Vec3};
use crate::xff::PoseVector;

/// Label of perspective pixels that hit ground or sky.
pub const fn background_label(n_classes: usize) -> u8 {
    n_classes as u8
}

/// Independent deterministic stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of sample `index` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_LAYOUT: u64 = 1;
const STREAM_CAMERA: u64 = 2;
const STREAM_TEXTURE: u64 = 3;
const STREAM_LIDAR: u64 = 4;
pub(crate) const STREAM_CONDITION: u64 = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub n_cams: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub focal: f64,
    pub cam_height: f64,
    /// Heading of the outermost cameras; cameras are spread evenly in between.
    pub cam_yaw_deg: f64,
    pub cam_pitch_deg: f64,
    pub jitter: bool,
    pub grid: BevGrid,
    pub min_objects: usize,
    pub max_objects: usize,
    pub lidar_beams: usize,
    pub lidar_azimuths: usize,
    pub lidar_height: f64,
    pub lidar_range_noise: f64,
    /// Perspective labels are emitted at `1/pv_stride` resolution.
    pub pv_stride: usize,
    pub texture_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_cams: 2,
            image_h: 64,
            image_w: 176,
            focal: 88.0,
            cam_height: 1.6,
            cam_yaw_deg: 25.0,
            cam_pitch_deg: 15.0,
            jitter: true,
            grid: BevGrid::new(0.0, 16.0, -8.0, 8.0, 0.25).expect("valid default grid"),
            min_objects: 3,
            max_objects: 8,
            lidar_beams: 32,
            lidar_azimuths: 160,
            lidar_height: 1.8,
            lidar_range_noise: 0.02,
            pv_stride: 8,
            texture_noise: 0.02,
        }
    }
}

impl SceneSpec {
    pub fn n_classes(&self) -> usize {
        CLASS_NAMES.len()
    }

    pub fn pv_classes(&self) -> usize {
        self.n_classes() + 1
    }

    pub fn pv_h(&self) -> usize {
        self.image_h / self.pv_stride
    }

    pub fn pv_w(&self) -> usize {
        self.image_w / self.pv_stride
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cams == 0 || self.image_h == 0 || self.image_w == 0 {
            return Err(Error::Invalid("scene needs at least one non-empty camera".into()));
        }
        if self.pv_stride == 0 || self.image_h % self.pv_stride != 0 || self.image_w % self.pv_stride != 0 {
            return Err(Error::Invalid(format!(
                "{}x{} images are not divisible by label stride {}",
                self.image_h, self.image_w, self.pv_stride
            )));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Invalid("object count range is empty".into()));
        }
        if !(self.focal > 0.0 && self.cam_height > 0.0 && self.lidar_height > 0.0 && self.lidar_range_noise >= 0.0) {
            return Err(Error::Invalid("camera and LiDAR parameters must be positive".into()));
        }
        Ok(())
    }

    /// Flat `key=value` lines used for digests and manifests.
    pub fn to_kv(&self) -> String {
        let g = &self.grid;
        format!(
            "n_cams={}\nimage_h={}\nimage_w={}\nfocal={}\ncam_height={}\ncam_yaw_deg={}\ncam_pitch_deg={}\njitter={}\n\
             grid={},{},{},{},{}\nmin_objects={}\nmax_objects={}\nlidar_beams={}\nlidar_azimuths={}\nlidar_height={}\n\
             lidar_range_noise={}\npv_stride={}\ntexture_noise={}\n",
            self.n_cams,
            self.image_h,
            self.image_w,
            self.focal,
            self.cam_height,
            self.cam_yaw_deg,
            self.cam_pitch_deg,
            self.jitter,
            g.x_min,
            g.x_max,
            g.y_min,
            g.y_max,
            g.resolution,
            self.min_objects,
            self.max_objects,
            self.lidar_beams,
            self.lidar_azimuths,
            self.lidar_height,
            self.lidar_range_noise,
            self.pv_stride,
            self.texture_noise
        )
    }

    pub fn digest(&self) -> [u8; 32] {
        crate::io::digest(&self.to_kv())
    }

    /// Depth-bin frustum matching the 1/8 feature grid of these images.
    pub fn frustum(&self, d_min: f64, d_max: f64, bins: usize) -> Result<FrustumSpec> {
        FrustumSpec::new(d_min, d_max, bins, self.pv_h(), self.pv_w())
    }

    /// Nominal (unjittered) camera rig.
    pub fn nominal_cameras(&self) -> Vec<CameraModel> {
        self.cameras_with(|_| (0.0, 0.0, 0.0, [0.0; 3]))
    }

    fn cameras_with(&self, mut jitter: impl FnMut(usize) -> (f64, f64, f64, Vec3)) -> Vec<CameraModel> {
        (0..self.n_cams)
            .map(|i| {
                let yaw = if self.n_cams == 1 {
                    0.0
                } else {
                    self.cam_yaw_deg * (1.0 - 2.0 * i as f64 / (self.n_cams - 1) as f64)
                };
                let (dy, dp, dr, dt) = jitter(i);
                let rot = camera_rotation(yaw.to_radians() + dy, self.cam_pitch_deg.to_radians() + dp, dr);
                CameraModel::new(
                    self.focal,
                    self.focal,
                    self.image_w as f64 / 2.0,
                    self.image_h as f64 / 2.0,
                    rot,
                    [dt[0], dt[1], self.cam_height + dt[2]],
                    self.image_h,
                    self.image_w,
                )
                .expect("rig parameters are valid")
            })
            .collect()
    }
}

/// One synthetic frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    pub condition: Condition,
    pub cameras: Vec<CameraModel>,
    /// `[n_cams, 3, H, W]` in `[0, 1]`.
    pub images: Vec<f32>,
    pub image_h: usize,
    pub image_w: usize,
    /// `(x, y, z, intensity)` returns.
    pub lidar: Vec<[f32; 4]>,
    /// Multi-label `[n_classes, bev_rows, bev_cols]`.
    pub bev_gt: Vec<u8>,
    pub bev_rows: usize,
    pub bev_cols: usize,
    /// `[n_cams, H/8, W/8]`: class index, background, or the ignore label.
    pub pv_labels: Vec<u8>,
    pub pv_h: usize,
    pub pv_w: usize,
    pub pose: PoseVector,
    pub layout: SceneLayout,
}

impl SceneSample {
    pub fn n_cams(&self) -> usize {
        self.cameras.len()
    }
}

fn sample_object(rng: &mut ChaCha8Rng, grid: &BevGrid) -> SceneObject {
    let class = ObjectClass::ALL[rng.random_range(0..ObjectClass::ALL.len())];
    let jitter = |rng: &mut ChaCha8Rng, c: [f64; 3], a: f64| c.map(|v| (v + rng.random_range(-a..a)).clamp(0.0, 1.0));
    let (length, width, height, color) = match class {
        ObjectClass::RoadPatch => (rng.random_range(3.0..6.0), rng.random_range(2.0..4.0), 0.0, jitter(rng, [0.2, 0.23, 0.32], 0.04)),
        ObjectClass::Marking => (rng.random_range(2.0..4.0), rng.random_range(0.3..0.5), 0.0, jitter(rng, [0.92, 0.92, 0.86], 0.03)),
        ObjectClass::Vehicle => {
            let palette = [[0.75, 0.15, 0.12], [0.15, 0.25, 0.7], [0.12, 0.45, 0.2]];
            let base = palette[rng.random_range(0..palette.len())];
            (rng.random_range(3.5..4.5), rng.random_range(1.6..2.0), rng.random_range(1.4..1.7), jitter(rng, base, 0.05))
        }
        ObjectClass::Barrier => (rng.random_range(1.5..3.0), rng.random_range(0.3..0.5), rng.random_range(0.8..1.0), jitter(rng, [0.95, 0.6, 0.1], 0.05)),
    };
    loop {
        let o = SceneObject {
            class,
            center: [rng.random_range(grid.x_min + 2.0..grid.x_max - 1.0), rng.random_range(grid.y_min + 1.0..grid.y_max - 1.0)],
            length,
            width,
            height,
            yaw: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            color,
        };
        let inside = o.corners().iter().all(|c| c[0] > grid.x_min && c[0] < grid.x_max && c[1] > grid.y_min && c[1] < grid.y_max);
        if inside {
            return o;
        }
    }
}

fn shade(layout: &SceneLayout, hit: Option<Hit>, dir: Vec3, ground: [f64; 3]) -> [f64; 3] {
    let Some(hit) = hit else {
        let up = dir[2].max(0.0);
        return [0.55 + 0.2 * up, 0.7 + 0.15 * up, 0.9];
    };
    match hit.surface {
        Surface::Ground => ground,
        Surface::Object(i) => {
            let o = &layout.objects[i];
            let f = if o.class.is_flat() || hit.normal[2] > 0.5 {
                1.0
            } else {
                let light = [0.7f64.cos(), 0.7f64.sin()];
                0.55 + 0.45 * (hit.normal[0] * light[0] + hit.normal[1] * light[1]).abs()
            };
            o.color.map(|c| c * f)
        }
    }
}

fn render_camera(layout: &SceneLayout, cam: &CameraModel, ground: [f64; 3], noise: f64, rng: &mut ChaCha8Rng, out: &mut [f32]) {
    let (h, w) = (cam.image_h, cam.image_w);
    let normal = Normal::new(0.0, noise.max(1e-12)).expect("positive std");
    for v in 0..h {
        for u in 0..w {
            let dir = cam.ray(u as f64, v as f64);
            let rgb = shade(layout, layout.cast(cam.translation, dir), dir, ground);
            for (ch, c) in rgb.iter().enumerate() {
                let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
                out[(ch * h + v) * w + u] = (c + n).clamp(0.0, 1.0) as f32;
            }
        }
    }
}

fn label_of(layout: &SceneLayout, cam: &CameraModel, u: f64, v: f64, background: u8) -> u8 {
    let hit = layout.cast(cam.translation, cam.ray(u, v));
    hit.and_then(|h| layout.class_of(h.surface)).map_or(background, |c| c.index() as u8)
}

/// Perspective labels from the centre ray of each 1/stride cell; cells whose
/// corner rays disagree with the centre are marked ignore.
fn pv_labels(layout: &SceneLayout, cam: &CameraModel, spec: &SceneSpec, frustum: &FrustumSpec, out: &mut [u8]) {
    let bg = background_label(spec.n_classes());
    let q = spec.pv_stride as f64 / 4.0;
    for i in 0..frustum.feat_h {
        for j in 0..frustum.feat_w {
            let (u, v) = frustum.pixel_center(i, j, spec.image_h, spec.image_w);
            let centre = label_of(layout, cam, u, v, bg);
            let uniform = [(-q, -q), (-q, q), (q, -q), (q, q)]
                .iter()
                .all(|&(du, dv)| label_of(layout, cam, u + du, v + dv, bg) == centre);
            out[i * frustum.feat_w + j] = if uniform { centre } else { crate::numcore::IGNORE_INDEX };
        }
    }
}

fn lidar_scan(layout: &SceneLayout, spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<[f32; 4]> {
    let origin = [0.0, 0.0, spec.lidar_height];
    let range = Normal::new(0.0, spec.lidar_range_noise.max(1e-12)).expect("positive std");
    let intensity = Normal::new(0.0, 0.02).expect("positive std");
    let mut points = Vec::new();
    for b in 0..spec.lidar_beams {
        let el = (-24.0 + 28.0 * b as f64 / (spec.lidar_beams.max(2) - 1) as f64).to_radians();
        for a in 0..spec.lidar_azimuths {
            let az = (-90.0 + 180.0 * (a as f64 + 0.5) / spec.lidar_azimuths as f64).to_radians();
            let dir = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            let Some(hit) = layout.cast(origin, dir) else { continue };
            if hit.t > 60.0 {
                continue;
            }
            let t = hit.t + if spec.lidar_range_noise > 0.0 { range.sample(rng) } else { 0.0 };
            let i = layout.class_of(hit.surface).map_or(GROUND_INTENSITY, |c| c.lidar_intensity());
            let i = (i + intensity.sample(rng)).clamp(0.0, 1.0);
            points.push([
                (origin[0] + t * dir[0]) as f32,
                (origin[1] + t * dir[1]) as f32,
                (origin[2] + t * dir[2]) as f32,
                i as f32,
            ]);
        }
    }
    points
}

/// Generates a clear-weather scene.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<SceneSample> {
    spec.validate()?;
    let mut rng = stream_rng(seed, STREAM_LAYOUT);
    let n = rng.random_range(spec.min_objects..=spec.max_objects);
    let layout = SceneLayout {
        objects: (0..n).map(|_| sample_object(&mut rng, &spec.grid)).collect(),
    };
    let ground_level = rng.random_range(0.38..0.48);
    let ground = [ground_level, ground_level, ground_level * 0.94];

    let mut crng = stream_rng(seed, STREAM_CAMERA);
    let jitter = spec.jitter;
    let cameras = spec.cameras_with(|_| {
        if !jitter {
            return (0.0, 0.0, 0.0, [0.0; 3]);
        }
        (
            crng.random_range(-0.03..0.03),
            crng.random_range(-0.02..0.02),
            crng.random_range(-0.01..0.01),
            [crng.random_range(-0.05..0.05), crng.random_range(-0.05..0.05), crng.random_range(-0.03..0.03)],
        )
    });

    let (h, w) = (spec.image_h, spec.image_w);
    let mut images = vec![0f32; spec.n_cams * 3 * h * w];
    let mut trng = stream_rng(seed, STREAM_TEXTURE);
    for (cam, out) in cameras.iter().zip(images.chunks_exact_mut(3 * h * w)) {
        render_camera(&layout, cam, ground, spec.texture_noise, &mut trng, out);
    }
    let frustum = spec.frustum(1.0, 2.0, 1)?;
    let mut labels = vec![0u8; spec.n_cams * spec.pv_h() * spec.pv_w()];
    for (cam, out) in cameras.iter().zip(labels.chunks_exact_mut(spec.pv_h() * spec.pv_w())) {
        pv_labels(&layout, cam, spec, &frustum, out);
    }
    let lidar = lidar_scan(&layout, spec, &mut stream_rng(seed, STREAM_LIDAR));
    Ok(SceneSample {
        seed,
        condition: Condition::Clear,
        pose: PoseVector::from_camera(&cameras[0]),
        bev_gt: layout.rasterize(&spec.grid),
        bev_rows: spec.grid.rows,
        bev_cols: spec.grid.cols,
        cameras,
        images,
        image_h: h,
        image_w: w,
        lidar,
        pv_labels: labels,
        pv_h: spec.pv_h(),
        pv_w: spec.pv_w(),
        layout,
    })
}

/// Generates the scene of `seed` and degrades its images for `condition`.
pub fn generate_scene_in(seed: u64, spec: &SceneSpec, condition: Condition) -> Result<SceneSample> {
    let mut s = generate_scene(seed, spec)?;
    s.images = degrade_condition(&s.images, spec.n_cams, s.image_h, s.image_w, condition, seed)?;
    s.condition = condition;
    Ok(s)
}
