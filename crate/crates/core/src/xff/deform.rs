//! Deformable 3x3 (generally k x k) convolution with stride 1 and same padding.

use crate::error::{Error, Result};
use crate::numcore::ops::bilinear_taps;
use crate::numcore::{nchw, DiffTensor, Real, Tape, Var};

struct DeformGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl DeformGeom {
    fn taps(&self) -> usize {
        self.k * self.k
    }

    fn p(&self) -> usize {
        self.h * self.w
    }

    /// Continuous `(row, col)` sampled by tap `t` of output pixel `(y, x)`.
    fn position<T: Real>(&self, off: &[T], b: usize, t: usize, y: usize, x: usize) -> (T, T) {
        let (p, pad) = (self.p(), (self.k / 2) as f64);
        let base = (b * 2 * self.taps() + 2 * t) * p + y * self.w + x;
        let (ky, kx) = ((t / self.k) as f64, (t % self.k) as f64);
        (
            T::of(y as f64 + ky - pad) + off[base],
            T::of(x as f64 + kx - pad) + off[base + p],
        )
    }
}

/// Builds sampled columns `[c*k*k, p]` for sample `b`.
fn deform_cols<T: Real>(g: &DeformGeom, x: &[T], off: &[T], mask: Option<&[T]>, b: usize, cols: &mut [T]) {
    let (p, kk) = (g.p(), g.taps());
    for t in 0..kk {
        for y in 0..g.h {
            for xx in 0..g.w {
                let (sy, sx) = g.position(off, b, t, y, xx);
                let taps = bilinear_taps(sy, sx, g.h, g.w);
                let m = mask.map_or(T::ONE, |m| m[(b * kk + t) * p + y * g.w + xx]);
                let pix = y * g.w + xx;
                for ch in 0..g.c {
                    let plane = &x[(b * g.c + ch) * p..(b * g.c + ch + 1) * p];
                    let mut v = T::ZERO;
                    for tap in &taps {
                        if let Some(i) = tap.idx {
                            v += tap.weight * plane[i];
                        }
                    }
                    cols[(ch * kk + t) * p + pix] = v * m;
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// Deformable convolution: `input [N,C,H,W]`, `weight [O,C,k,k]`,
    /// `offsets [N,2k²,H,W]` with channel `2t` the row and `2t+1` the column
    /// displacement of tap `t` (row-major over the kernel). Optional `mask`
    /// `[N,k²,H,W]` scales each sampled tap. Out-of-range samples read zero.
    pub fn deform_conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, offsets: Var, mask: Option<Var>) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let (n, c, h, w) = nchw("deform_conv2d", &in_shape)?;
        let &[o, wc, k, k2] = self.shape(weight) else {
            return Err(Error::dim("deform_conv2d", "weight must be [O,C,k,k]"));
        };
        if wc != c || k != k2 || k % 2 == 0 {
            return Err(Error::dim("deform_conv2d", format!("input {in_shape:?} vs weight {:?}", self.shape(weight))));
        }
        let g = DeformGeom { c, h, w, k };
        let (p, kk) = (g.p(), g.taps());
        let (_, oc, oh, ow) = nchw("deform_conv2d", self.shape(offsets))?;
        if oc != 2 * kk || oh != h || ow != w || self.value(offsets).len() != n * oc * p {
            return Err(Error::dim(
                "deform_conv2d",
                format!("offsets {:?} must have {} channels at {h}x{w}", self.shape(offsets), 2 * kk),
            ));
        }
        if let Some(m) = mask {
            if self.value(m).len() != n * kk * p {
                return Err(Error::dim("deform_conv2d", format!("mask must be [N,{kk},{h},{w}]")));
            }
        }
        if let Some(b) = bias {
            if self.value(b).len() != o {
                return Err(Error::dim("deform_conv2d", "bias length != output channels"));
            }
        }
        self.value(input).check_finite("deform_conv2d")?;
        self.value(offsets).check_finite("deform_conv2d")?;
        if self.tracking_branches() {
            let off = self.data(offsets);
            let mut cells = Vec::with_capacity(n * kk * p);
            for b in 0..n {
                for t in 0..kk {
                    for y in 0..h {
                        for x in 0..w {
                            let (sy, sx) = g.position(off, b, t, y, x);
                            cells.push((sy.floor().f64() as i64, sx.floor().f64() as i64));
                        }
                    }
                }
            }
            self.record_branch(cells);
        }
        let rows = c * kk;
        let mut out = vec![T::ZERO; n * o * p];
        let mut cols = vec![T::ZERO; rows * p];
        {
            let (x, wt, off) = (self.data(input), self.data(weight), self.data(offsets));
            let m = mask.map(|m| self.data(m));
            for b in 0..n {
                deform_cols(&g, x, off, m, b, &mut cols);
                T::gemm(o, rows, p, T::ONE, wt, rows as isize, 1, &cols, p as isize, 1, T::ZERO, &mut out[b * o * p..(b + 1) * o * p], p as isize, 1);
                if let Some(bv) = bias {
                    let bd = self.data(bv);
                    for (oc, chunk) in out[b * o * p..(b + 1) * o * p].chunks_exact_mut(p).enumerate() {
                        chunk.iter_mut().for_each(|v| *v += bd[oc]);
                    }
                }
            }
        }
        let value = DiffTensor::new(&crate::numcore::like_nchw(&in_shape, n, o, h, w), out)?;
        let mut parents = vec![input, weight, offsets];
        let has_mask = mask.is_some();
        parents.extend(mask);
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.push(
            value,
            &parents,
            Box::new(move |args| {
                let x = args.parents[0].data();
                let wt = args.parents[1].data();
                let off = args.parents[2].data();
                let m = has_mask.then(|| args.parents[3].data());
                let gy = args.grad;
                let mut gx = vec![T::ZERO; x.len()];
                let mut gw = vec![T::ZERO; wt.len()];
                let mut goff = vec![T::ZERO; off.len()];
                let mut gm = has_mask.then(|| vec![T::ZERO; n * kk * p]);
                let mut cols = vec![T::ZERO; rows * p];
                let mut dcols = vec![T::ZERO; rows * p];
                for b in 0..n {
                    deform_cols(&g, x, off, m, b, &mut cols);
                    let gyb = &gy[b * o * p..(b + 1) * o * p];
                    T::gemm(o, p, rows, T::ONE, gyb, p as isize, 1, &cols, 1, p as isize, T::ONE, &mut gw, rows as isize, 1);
                    T::gemm(rows, o, p, T::ONE, wt, 1, rows as isize, gyb, p as isize, 1, T::ZERO, &mut dcols, p as isize, 1);
                    for t in 0..kk {
                        for y in 0..h {
                            for xx in 0..w {
                                let pix = y * w + xx;
                                let (sy, sx) = g.position(off, b, t, y, xx);
                                let taps = bilinear_taps(sy, sx, h, w);
                                let mv = m.map_or(T::ONE, |m| m[(b * kk + t) * p + pix]);
                                let (mut dy, mut dx, mut dm) = (T::ZERO, T::ZERO, T::ZERO);
                                for ch in 0..c {
                                    let d = dcols[(ch * kk + t) * p + pix];
                                    let base = (b * c + ch) * p;
                                    let mut sampled = T::ZERO;
                                    for tap in &taps {
                                        if let Some(i) = tap.idx {
                                            let v = x[base + i];
                                            gx[base + i] += tap.weight * mv * d;
                                            dy += tap.dw_dy * v * mv * d;
                                            dx += tap.dw_dx * v * mv * d;
                                            sampled += tap.weight * v;
                                        }
                                    }
                                    dm += sampled * d;
                                }
                                let ob = (b * 2 * kk + 2 * t) * p + pix;
                                goff[ob] = dy;
                                goff[ob + p] = dx;
                                if let Some(gm) = gm.as_mut() {
                                    gm[(b * kk + t) * p + pix] = dm;
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![Some(gx), Some(gw), Some(goff)];
                if has_mask {
                    grads.push(gm);
                }
                if has_bias {
                    let mut gb = vec![T::ZERO; o];
                    for b in 0..n {
                        for (oc, chunk) in gy[b * o * p..(b + 1) * o * p].chunks_exact(p).enumerate() {
                            gb[oc] += chunk.iter().fold(T::ZERO, |a, &v| a + v);
                        }
                    }
                    grads.push(Some(gb));
                }
                grads
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrong_offset_channel_count_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(DiffTensor::zeros(&[1, 2, 5, 5]));
        let w = tape.leaf(DiffTensor::zeros(&[3, 2, 3, 3]));
        let off = tape.leaf(DiffTensor::zeros(&[1, 16, 5, 5]));
        assert!(tape.deform_conv2d(x, w, None, off, None).is_err());
    }

    #[test]
    fn constant_input_is_offset_insensitive_in_interior() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(DiffTensor::full(&[1, 1, 9, 9], 2.0));
        let wd: Vec<f64> = (0..9).map(|i| i as f64 * 0.1 - 0.3).collect();
        let w = tape.leaf(DiffTensor::from_f64(&[1, 1, 3, 3], &wd).unwrap());
        let offd: Vec<f64> = (0..18 * 81).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.5).collect();
        let off = tape.leaf(DiffTensor::from_f64(&[1, 18, 9, 9], &offd).unwrap());
        let y = tape.deform_conv2d(x, w, None, off, None).unwrap();
        let expected = 2.0 * wd.iter().sum::<f64>();
        let out = tape.data(y);
        for r in 2..7 {
            for c in 2..7 {
                assert!((out[r * 9 + c] - expected).abs() < 1e-12);
            }
        }
    }
}
