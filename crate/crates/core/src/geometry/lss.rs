//! Lift-splat view transform.

use std::sync::Arc;

use super::camera::{BevGrid, CameraModel, FrustumSpec, Vec3};
use crate::error::{Error, Result};
use crate::numcore::{DiffTensor, Real, Tape, Var};

/// Frustum points of one camera with their depth-weighted features.
pub struct LiftedPoints {
    /// Ego coordinates, point `p * D + d` for feature pixel `p` and bin `d`.
    pub xyz: Vec<Vec3>,
    /// `[C, P*D]` features.
    pub feat: Var,
    /// `[D, P]` softmaxed depth distribution.
    pub depth_weights: Var,
}

/// Ego coordinates of every (feature pixel, depth bin) of a camera frustum.
pub fn frustum_points(cam: &CameraModel, frustum: &FrustumSpec) -> Vec<Vec3> {
    let depths = frustum.depths();
    let mut pts = Vec::with_capacity(frustum.pixels() * depths.len());
    for i in 0..frustum.feat_h {
        for j in 0..frustum.feat_w {
            let (u, v) = frustum.pixel_center(i, j, cam.image_h, cam.image_w);
            for &d in &depths {
                pts.push(cam.unproject(u, v, d).expect("bin depths are positive"));
            }
        }
    }
    pts
}

/// BEV cell of each point (`u32::MAX` when outside the grid).
pub fn point_cells(xyz: &[Vec3], grid: &BevGrid) -> Vec<u32> {
    xyz.iter()
        .map(|p| grid.flat_cell_of(p[0], p[1]).map_or(u32::MAX, |c| c as u32))
        .collect()
}

impl<T: Real> Tape<T> {
    /// Outer product `out[c, p*D + d] = features[c, p] * weights[d, p]`.
    pub fn lift_outer(&mut self, features: Var, weights: Var) -> Result<Var> {
        let (&[c, p], &[d, p2]) = (self.shape(features), self.shape(weights)) else {
            return Err(Error::dim("lift", "expected [C,P] features and [D,P] weights"));
        };
        if p != p2 {
            return Err(Error::dim("lift", format!("{p} feature pixels vs {p2} depth pixels")));
        }
        let f = self.data(features);
        let w = self.data(weights);
        let mut out = vec![T::ZERO; c * p * d];
        for ch in 0..c {
            for px in 0..p {
                let fv = f[ch * p + px];
                let base = (ch * p + px) * d;
                for k in 0..d {
                    out[base + k] = fv * w[k * p + px];
                }
            }
        }
        let value = DiffTensor::new(&[c, p * d], out)?;
        Ok(self.push(
            value,
            &[features, weights],
            Box::new(move |args| {
                let (f, w, g) = (args.parents[0].data(), args.parents[1].data(), args.grad);
                let mut gf = vec![T::ZERO; c * p];
                let mut gw = vec![T::ZERO; d * p];
                for ch in 0..c {
                    for px in 0..p {
                        let base = (ch * p + px) * d;
                        let mut acc = T::ZERO;
                        for k in 0..d {
                            acc += g[base + k] * w[k * p + px];
                            gw[k * p + px] += g[base + k] * f[ch * p + px];
                        }
                        gf[ch * p + px] = acc;
                    }
                }
                vec![Some(gf), Some(gw)]
            }),
        ))
    }

    /// Sum-pools `[C, M]` point features into `[C, rows, cols]` by precomputed cell.
    pub fn scatter_sum(&mut self, feat: Var, cells: Arc<Vec<u32>>, rows: usize, cols: usize) -> Result<Var> {
        let &[c, m] = self.shape(feat) else {
            return Err(Error::dim("splat", "features must be [C, M]"));
        };
        if cells.len() != m {
            return Err(Error::dim("splat", format!("{m} features vs {} cells", cells.len())));
        }
        let n = rows * cols;
        let f = self.data(feat);
        let mut out = vec![T::ZERO; c * n];
        for ch in 0..c {
            let src = &f[ch * m..(ch + 1) * m];
            let dst = &mut out[ch * n..(ch + 1) * n];
            for (&cell, &v) in cells.iter().zip(src) {
                if cell != u32::MAX {
                    dst[cell as usize] += v;
                }
            }
        }
        let value = DiffTensor::new(&[c, rows, cols], out)?;
        Ok(self.push(
            value,
            &[feat],
            Box::new(move |args| {
                let g = args.grad;
                let mut gf = vec![T::ZERO; c * m];
                for ch in 0..c {
                    for (k, &cell) in cells.iter().enumerate() {
                        if cell != u32::MAX {
                            gf[ch * m + k] = g[ch * n + cell as usize];
                        }
                    }
                }
                vec![Some(gf)]
            }),
        ))
    }
}

/// Lifts `[C, fh, fw]` features with `[D, fh, fw]` depth logits into the camera frustum.
pub fn lift<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    depth_logits: Var,
    cam: &CameraModel,
    frustum: &FrustumSpec,
) -> Result<LiftedPoints> {
    let fs = tape.shape(features).to_vec();
    let ds = tape.shape(depth_logits).to_vec();
    let (fh, fw) = (frustum.feat_h, frustum.feat_w);
    if fs.len() != 3 || fs[1..] != [fh, fw] || ds != [frustum.n_bins, fh, fw] {
        return Err(Error::dim(
            "lift",
            format!("features {fs:?}, depth {ds:?}, frustum {}x{}x{}", frustum.n_bins, fh, fw),
        ));
    }
    let p = fh * fw;
    let flat_f = tape.reshape(features, &[fs[0], p])?;
    let flat_d = tape.reshape(depth_logits, &[frustum.n_bins, p])?;
    let weights = tape.softmax(flat_d, 0)?;
    let feat = tape.lift_outer(flat_f, weights)?;
    Ok(LiftedPoints {
        xyz: frustum_points(cam, frustum),
        feat,
        depth_weights: weights,
    })
}

/// Sum-pools lifted points into the BEV grid; out-of-extent points are dropped.
pub fn splat<T: Real>(tape: &mut Tape<T>, points: &LiftedPoints, grid: &BevGrid) -> Result<Var> {
    let cells = Arc::new(point_cells(&points.xyz, grid));
    tape.scatter_sum(points.feat, cells, grid.rows, grid.cols)
}

/// Lift + splat per camera, summed in camera order.
pub fn view_transform<T: Real>(
    tape: &mut Tape<T>,
    features: &[Var],
    depth_logits: &[Var],
    cams: &[CameraModel],
    frustum: &FrustumSpec,
    grid: &BevGrid,
) -> Result<Var> {
    if features.is_empty() || features.len() != depth_logits.len() || features.len() != cams.len() {
        return Err(Error::Invalid(format!(
            "view transform needs one feature/depth pair per camera: {} features, {} depth maps, {} cameras",
            features.len(),
            depth_logits.len(),
            cams.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for ((&f, &d), cam) in features.iter().zip(depth_logits).zip(cams) {
        let lifted = lift(tape, f, d, cam, frustum)?;
        let bev = splat(tape, &lifted, grid)?;
        acc = Some(match acc {
            None => bev,
            Some(a) => tape.add(a, bev)?,
        });
    }
    Ok(acc.expect("at least one camera"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_sums_points_sharing_a_cell() {
        let mut tape = Tape::<f64>::new();
        let f = tape.leaf(DiffTensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 10.0, 20.0, 30.0]).unwrap());
        let cells = Arc::new(vec![1, 1, u32::MAX]);
        let out = tape.scatter_sum(f, cells, 1, 2).unwrap();
        assert_eq!(tape.data(out), &[0.0, 3.0, 0.0, 30.0]);
    }

    #[test]
    fn lift_rejects_mismatched_depth_map() {
        let cam = CameraModel::new(10.0, 10.0, 3.5, 3.5, super::super::camera_rotation(0.0, 0.0, 0.0), [0.0; 3], 8, 8).unwrap();
        let fr = FrustumSpec::new(1.0, 5.0, 3, 2, 2).unwrap();
        let mut tape = Tape::<f64>::new();
        let f = tape.leaf(DiffTensor::zeros(&[4, 2, 2]));
        let d = tape.leaf(DiffTensor::zeros(&[4, 2, 2]));
        assert!(lift(&mut tape, f, d, &cam, &fr).is_err());
    }
}
