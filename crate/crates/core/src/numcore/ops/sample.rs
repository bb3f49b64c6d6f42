//! Bilinear sampling and resizing.

use crate::error::{Error, Result};
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::{like_nchw, nchw, DiffTensor, Real};

/// One of the four neighbours of a continuous sample point.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<T> {
    /// Flat index into the `h*w` plane; `None` when outside (zero padding).
    pub idx: Option<usize>,
    pub weight: T,
    pub dw_dy: T,
    pub dw_dx: T,
}

/// Bilinear neighbours of `(y, x)` in an `h x w` plane with zero padding.
#[inline]
pub(crate) fn bilinear_taps<T: Real>(y: T, x: T, h: usize, w: usize) -> [Tap<T>; 4] {
    let y0f = y.floor();
    let x0f = x.floor();
    let (ly, lx) = (y - y0f, x - x0f);
    let (hy, hx) = (T::ONE - ly, T::ONE - lx);
    let y0 = y0f.f64() as i64;
    let x0 = x0f.f64() as i64;
    let at = |yy: i64, xx: i64| -> Option<usize> {
        (yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64).then(|| yy as usize * w + xx as usize)
    };
    [
        Tap { idx: at(y0, x0), weight: hy * hx, dw_dy: -hx, dw_dx: -hy },
        Tap { idx: at(y0, x0 + 1), weight: hy * lx, dw_dy: -lx, dw_dx: hy },
        Tap { idx: at(y0 + 1, x0), weight: ly * hx, dw_dy: hx, dw_dx: -ly },
        Tap { idx: at(y0 + 1, x0 + 1), weight: ly * lx, dw_dy: lx, dw_dx: ly },
    ]
}

/// Source index pairs and weights for resizing one axis (half-pixel centres).
fn resize_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

impl<T: Real> Tape<T> {
    /// Samples `[C,H,W]` at `N` continuous `(row, col)` points -> `[C,N]`.
    ///
    /// Neighbours outside `[0,H-1]x[0,W-1]` read as zero. Differentiable with
    /// respect to both the feature map and the coordinates.
    pub fn bilinear_sample(&mut self, feature: Var, coords: Var) -> Result<Var> {
        let &[c, h, w] = self.shape(feature) else {
            return Err(Error::dim("bilinear_sample", format!("feature must be [C,H,W], got {:?}", self.shape(feature))));
        };
        let &[n, two] = self.shape(coords) else {
            return Err(Error::dim("bilinear_sample", "coords must be [N,2]"));
        };
        if two != 2 {
            return Err(Error::dim("bilinear_sample", "coords must be [N,2]"));
        }
        self.value(coords).check_finite("bilinear_sample")?;
        let taps: Vec<[Tap<T>; 4]> = self
            .data(coords)
            .chunks_exact(2)
            .map(|yx| bilinear_taps(yx[0], yx[1], h, w))
            .collect();
        if self.tracking_branches() {
            let cells: Vec<(i64, i64)> = self
                .data(coords)
                .chunks_exact(2)
                .map(|yx| (yx[0].floor().f64() as i64, yx[1].floor().f64() as i64))
                .collect();
            self.record_branch(cells);
        }
        let f = self.data(feature);
        let mut out = vec![T::ZERO; c * n];
        for ch in 0..c {
            let plane = &f[ch * h * w..(ch + 1) * h * w];
            for (j, t) in taps.iter().enumerate() {
                let mut acc = T::ZERO;
                for tap in t {
                    if let Some(i) = tap.idx {
                        acc += tap.weight * plane[i];
                    }
                }
                out[ch * n + j] = acc;
            }
        }
        let value = DiffTensor::new(&[c, n], out)?;
        Ok(self.push(
            value,
            &[feature, coords],
            Box::new(move |args| {
                let f = args.parents[0].data();
                let g = args.grad;
                let mut gf = vec![T::ZERO; f.len()];
                let mut gc = vec![T::ZERO; n * 2];
                for ch in 0..c {
                    let off = ch * h * w;
                    for (j, t) in taps.iter().enumerate() {
                        let go = g[ch * n + j];
                        for tap in t {
                            if let Some(i) = tap.idx {
                                gf[off + i] += tap.weight * go;
                                gc[2 * j] += tap.dw_dy * f[off + i] * go;
                                gc[2 * j + 1] += tap.dw_dx * f[off + i] * go;
                            }
                        }
                    }
                }
                vec![Some(gf), Some(gc)]
            }),
        ))
    }

    /// Bilinear resize of `[C,H,W]`/`[N,C,H,W]` to `out_h x out_w` (half-pixel
    /// centres, edge clamping).
    pub fn interpolate_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let (n, c, h, w) = nchw("interpolate_bilinear", &in_shape)?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::dim("interpolate_bilinear", "zero output extent"));
        }
        let ty = resize_table(h, out_h);
        let tx = resize_table(w, out_w);
        let src = self.data(x);
        let mut out = vec![T::ZERO; n * c * out_h * out_w];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let v = (1.0 - fy) * ((1.0 - fx) * s[y0 * w + x0].f64() + fx * s[y0 * w + x1].f64())
                        + fy * ((1.0 - fx) * s[y1 * w + x0].f64() + fx * s[y1 * w + x1].f64());
                    d[oy * out_w + ox] = T::of(v);
                }
            }
        }
        let value = DiffTensor::new(&like_nchw(&in_shape, n, c, out_h, out_w), out)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |args| {
                let g = args.grad;
                let mut gx = vec![T::ZERO; n * c * h * w];
                for plane in 0..n * c {
                    let gs = &g[plane * out_h * out_w..(plane + 1) * out_h * out_w];
                    let d = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let go = gs[oy * out_w + ox];
                            let (fy, fx) = (T::of(fy), T::of(fx));
                            let (hy, hx) = (T::ONE - fy, T::ONE - fx);
                            d[y0 * w + x0] += go * hy * hx;
                            d[y0 * w + x1] += go * hy * fx;
                            d[y1 * w + x0] += go * fy * hx;
                            d[y1 * w + x1] += go * fy * fx;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature() -> DiffTensor<f64> {
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| (i * i % 7) as f64 - 2.0).collect();
        DiffTensor::from_f64(&[2, 3, 4], &data).unwrap()
    }

    #[test]
    fn integer_coordinate_reads_pixel() {
        let mut tape = Tape::<f64>::new();
        let f = tape.leaf(feature());
        let c = tape.leaf(DiffTensor::from_f64(&[2, 2], &[1.0, 2.0, 2.0, 3.0]).unwrap());
        let s = tape.bilinear_sample(f, c).unwrap();
        let fv = tape.value(f).clone();
        let out = tape.data(s);
        for ch in 0..2 {
            assert_eq!(out[ch * 2], fv.at(&[ch, 1, 2]));
            assert_eq!(out[ch * 2 + 1], fv.at(&[ch, 2, 3]));
        }
    }

    #[test]
    fn midpoint_is_mean_of_four() {
        let mut tape = Tape::<f64>::new();
        let f = tape.leaf(feature());
        let c = tape.leaf(DiffTensor::from_f64(&[1, 2], &[0.5, 1.5]).unwrap());
        let s = tape.bilinear_sample(f, c).unwrap();
        let fv = tape.value(f).clone();
        for ch in 0..2 {
            let mean = (fv.at(&[ch, 0, 1]) + fv.at(&[ch, 0, 2]) + fv.at(&[ch, 1, 1]) + fv.at(&[ch, 1, 2])) / 4.0;
            assert!((tape.data(s)[ch] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn far_outside_reads_zero() {
        let mut tape = Tape::<f64>::new();
        let f = tape.leaf(feature());
        let c = tape.leaf(DiffTensor::from_f64(&[2, 2], &[-5.0, 1.0, 1.0, 40.0]).unwrap());
        let s = tape.bilinear_sample(f, c).unwrap();
        assert!(tape.data(s).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut tape = Tape::<f64>::new();
        let f = tape.leaf(feature());
        let same = tape.interpolate_bilinear(f, 3, 4).unwrap();
        assert_eq!(tape.data(same), tape.data(f));
        let k = tape.leaf(DiffTensor::full(&[1, 2, 2], 0.25));
        let up = tape.interpolate_bilinear(k, 7, 5).unwrap();
        assert!(tape.data(up).iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
