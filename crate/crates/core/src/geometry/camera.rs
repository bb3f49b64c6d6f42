//! Pinhole camera, depth frustum and BEV raster.
//!
//! Ego frame: x forward, y left, z up. Camera frame: x right, y down, z along
//! the optical axis. BEV raster row 0 is `x_max`, column 0 is `y_max`.

use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Checks `R Rᵀ = I` and `det R = +1` within `tol`.
pub fn is_rotation(m: &Mat3, tol: f64) -> bool {
    let p = mat_mul(m, &transpose(m));
    let ortho = (0..3).all(|i| (0..3).all(|j| (p[i][j] - if i == j { 1.0 } else { 0.0 }).abs() <= tol));
    ortho && (det(m) - 1.0).abs() <= tol
}

/// Camera-to-ego rotation for a camera with the given heading.
///
/// `yaw` turns left about ego z, `pitch` tilts the optical axis down, `roll`
/// spins about the optical axis; all in radians.
pub fn camera_rotation(yaw: f64, pitch: f64, roll: f64) -> Mat3 {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let rz = [[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]];
    let ry = [[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]];
    // Columns: camera x (right), y (down), z (forward) expressed in ego axes.
    let base = [[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]];
    mat_mul(&mat_mul(&mat_mul(&rz, &ry), &rx), &base)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-ego rotation.
    pub rotation: Mat3,
    /// Camera centre in ego coordinates (metres).
    pub translation: Vec3,
    pub image_h: usize,
    pub image_w: usize,
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Vec3,
        image_h: usize,
        image_w: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            image_h,
            image_w,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Invalid("focal lengths must be positive".into()));
        }
        if !(0.0..self.image_w as f64).contains(&self.cx) || !(0.0..self.image_h as f64).contains(&self.cy) {
            return Err(Error::Invalid(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.image_w, self.image_h
            )));
        }
        if !is_rotation(&self.rotation, 1e-5) {
            return Err(Error::Invalid("camera rotation is not a proper rotation".into()));
        }
        Ok(())
    }

    /// Ego point at depth `d` along the ray through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, d: f64) -> Result<Vec3> {
        if !(d > 0.0) {
            return Err(Error::Invalid(format!("depth must be positive, got {d}")));
        }
        let p = [d * (u - self.cx) / self.fx, d * (v - self.cy) / self.fy, d];
        let r = mat_vec(&self.rotation, p);
        Ok([
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ])
    }

    /// Pixel `(u, v)` and depth of an ego point; `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let rel = [
            p[0] - self.translation[0],
            p[1] - self.translation[1],
            p[2] - self.translation[2],
        ];
        let c = mat_vec(&transpose(&self.rotation), rel);
        (c[2] > 0.0).then(|| (self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy, c[2]))
    }

    /// Unit ray direction (ego frame) through pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        let d = mat_vec(&self.rotation, [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]);
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        [d[0] / n, d[1] / n, d[2] / n]
    }

    /// Flattened rotation (row-major) followed by translation.
    pub fn pose_vector(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 3 + j] = self.rotation[i][j];
            }
            out[9 + i] = self.translation[i];
        }
        out
    }
}

/// Depth-bin axis of the lifted frustum at feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FrustumSpec {
    pub d_min: f64,
    pub d_max: f64,
    pub n_bins: usize,
    pub feat_h: usize,
    pub feat_w: usize,
}

impl FrustumSpec {
    pub fn new(d_min: f64, d_max: f64, n_bins: usize, feat_h: usize, feat_w: usize) -> Result<Self> {
        if !(d_min > 0.0 && d_min < d_max) || n_bins == 0 || feat_h == 0 || feat_w == 0 {
            return Err(Error::Invalid(format!(
                "bad frustum: d in [{d_min}, {d_max}], {n_bins} bins, {feat_h}x{feat_w}"
            )));
        }
        Ok(Self {
            d_min,
            d_max,
            n_bins,
            feat_h,
            feat_w,
        })
    }

    /// Bin depths, uniformly spaced over `[d_min, d_max]` inclusive.
    pub fn depths(&self) -> Vec<f64> {
        if self.n_bins == 1 {
            return vec![self.d_min];
        }
        let step = (self.d_max - self.d_min) / (self.n_bins - 1) as f64;
        (0..self.n_bins).map(|k| self.d_min + k as f64 * step).collect()
    }

    pub fn pixels(&self) -> usize {
        self.feat_h * self.feat_w
    }

    /// Image-pixel centre of feature cell `(i, j)` for an image of `img_h x img_w`.
    pub fn pixel_center(&self, i: usize, j: usize, img_h: usize, img_w: usize) -> (f64, f64) {
        let sy = img_h as f64 / self.feat_h as f64;
        let sx = img_w as f64 / self.feat_w as f64;
        ((j as f64 + 0.5) * sx - 0.5, (i as f64 + 0.5) * sy - 0.5)
    }
}

/// Metric BEV raster in the ego frame.
#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: f64,
    pub rows: usize,
    pub cols: usize,
}

impl BevGrid {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0) || !(x_max > x_min) || !(y_max > y_min) {
            return Err(Error::Invalid("bad BEV extent or resolution".into()));
        }
        let rows = ((x_max - x_min) / resolution).round() as usize;
        let cols = ((y_max - y_min) / resolution).round() as usize;
        if rows == 0 || cols == 0 {
            return Err(Error::Invalid("BEV grid has no cells".into()));
        }
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
            resolution,
            rows,
            cols,
        })
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// `(row, col)` of the cell containing `(x, y)`.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let r = ((self.x_max - x) / self.resolution).floor();
        let c = ((self.y_max - y) / self.resolution).floor();
        (r >= 0.0 && c >= 0.0 && (r as usize) < self.rows && (c as usize) < self.cols)
            .then(|| (r as usize, c as usize))
    }

    pub fn flat_cell_of(&self, x: f64, y: f64) -> Option<usize> {
        self.cell_of(x, y).map(|(r, c)| r * self.cols + c)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_max - (row as f64 + 0.5) * self.resolution,
            self.y_max - (col as f64 + 0.5) * self.resolution,
        )
    }

    /// Same raster shifted by whole cells (positive `drow` moves the extent
    /// toward smaller x).
    pub fn shifted(&self, drow: i64, dcol: i64) -> Self {
        let dx = -(drow as f64) * self.resolution;
        let dy = -(dcol as f64) * self.resolution;
        Self {
            x_min: self.x_min + dx,
            x_max: self.x_max + dx,
            y_min: self.y_min + dy,
            y_max: self.y_max + dy,
            ..self.clone()
        }
    }
}
