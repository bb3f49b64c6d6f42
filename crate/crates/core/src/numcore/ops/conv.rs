//! Convolution via im2col + GEMM.

use crate::error::{Error, Result};
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::{like_nchw, nchw, DiffTensor, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::dim("conv2d", "stride and kernel must be positive"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        Ok(Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }
}

/// Unfolds `[c,h,w]` into `[c*k*k, out_h*out_w]` columns (zero padding).
pub(crate) fn im2col<T: Real>(src: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::ZERO);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::ZERO
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `[c,h,w]`.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dst: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], channels: usize, plane: usize) {
    for (c, &b) in bias.iter().enumerate().take(channels) {
        out[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Real>(g: &[T], n: usize, channels: usize, plane: usize) -> Vec<T> {
    (0..channels)
        .map(|c| {
            T::of(
                (0..n)
                    .map(|b| {
                        let base = (b * channels + c) * plane;
                        g[base..base + plane].iter().map(|v| v.f64()).sum::<f64>()
                    })
                    .sum(),
            )
        })
        .collect()
}

impl<T: Real> Tape<T> {
    /// Cross-correlation of `[C,H,W]`/`[N,C,H,W]` input with `[O, C/groups, k, k]` weights.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.conv2d_grouped(input, weight, bias, stride, pad, 1)
    }

    pub fn conv2d_grouped(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let (n, c, h, w) = nchw("conv2d", &in_shape)?;
        let &[o, cg, k, k2] = self.shape(weight) else {
            return Err(Error::dim("conv2d", format!("weight must be 4-D, got {:?}", self.shape(weight))));
        };
        if k != k2 || groups == 0 || c % groups != 0 || o % groups != 0 || cg != c / groups {
            return Err(Error::dim(
                "conv2d",
                format!("input {in_shape:?}, weight {:?}, groups {groups}", self.shape(weight)),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).len() != o {
                return Err(Error::dim("conv2d", "bias length != output channels"));
            }
        }
        self.value(input).check_finite("conv2d")?;
        let g = ConvGeom::new(cg, h, w, k, stride, pad)?;
        let og = o / groups;
        let (p, rows) = (g.positions(), g.rows());
        let x = self.data(input);
        let wt = self.data(weight);
        let mut out = vec![T::ZERO; n * o * p];
        let mut cols = vec![T::ZERO; rows * p];
        for b in 0..n {
            for gi in 0..groups {
                let xs = &x[(b * c + gi * cg) * h * w..(b * c + (gi + 1) * cg) * h * w];
                im2col(xs, &g, &mut cols);
                let wg = &wt[gi * og * rows..(gi + 1) * og * rows];
                let dst = &mut out[(b * o + gi * og) * p..(b * o + (gi + 1) * og) * p];
                T::gemm(og, rows, p, T::ONE, wg, rows as isize, 1, &cols, p as isize, 1, T::ZERO, dst, p as isize, 1);
            }
            if let Some(bv) = bias {
                add_channel_bias(&mut out[b * o * p..(b + 1) * o * p], self.data(bv), o, p);
            }
        }
        let value = DiffTensor::new(&like_nchw(&in_shape, n, o, g.out_h, g.out_w), out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.push(
            value,
            &parents,
            Box::new(move |args| {
                let x = args.parents[0].data();
                let wt = args.parents[1].data();
                let gy = args.grad;
                let mut gx = vec![T::ZERO; x.len()];
                let mut gw = vec![T::ZERO; wt.len()];
                let mut cols = vec![T::ZERO; rows * p];
                let mut dcols = vec![T::ZERO; rows * p];
                for b in 0..n {
                    for gi in 0..groups {
                        let xr = (b * c + gi * cg) * h * w..(b * c + (gi + 1) * cg) * h * w;
                        im2col(&x[xr.clone()], &g, &mut cols);
                        let gyg = &gy[(b * o + gi * og) * p..(b * o + (gi + 1) * og) * p];
                        let wr = gi * og * rows..(gi + 1) * og * rows;
                        // dW += dY cols^T
                        T::gemm(og, p, rows, T::ONE, gyg, p as isize, 1, &cols, 1, p as isize, T::ONE, &mut gw[wr.clone()], rows as isize, 1);
                        // dcols = W^T dY
                        T::gemm(rows, og, p, T::ONE, &wt[wr], 1, rows as isize, gyg, p as isize, 1, T::ZERO, &mut dcols, p as isize, 1);
                        col2im(&dcols, &g, &mut gx[xr]);
                    }
                }
                let mut grads = vec![Some(gx), Some(gw)];
                if has_bias {
                    grads.push(Some(bias_grad(gy, n, o, p)));
                }
                grads
            }),
        ))
    }

    /// Transposed convolution; `weight` is `[C_in, C_out, k, k]`.
    ///
    /// Output extent is `(H-1)*stride - 2*pad + k`. With the same weight
    /// tensor this is the adjoint of [`Tape::conv2d`] mapping `C_out -> C_in`.
    pub fn conv2d_transpose(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let (n, c_in, h, w) = nchw("conv2d_transpose", &in_shape)?;
        let &[wc, c_out, k, k2] = self.shape(weight) else {
            return Err(Error::dim("conv2d_transpose", "weight must be 4-D"));
        };
        if wc != c_in || k != k2 {
            return Err(Error::dim(
                "conv2d_transpose",
                format!("input {in_shape:?}, weight {:?}", self.shape(weight)),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d_transpose", "stride must be >= 1"));
        }
        if let Some(b) = bias {
            if self.value(b).len() != c_out {
                return Err(Error::dim("conv2d_transpose", "bias length != output channels"));
            }
        }
        self.value(input).check_finite("conv2d_transpose")?;
        let full_h = (h - 1) * stride + k;
        let full_w = (w - 1) * stride + k;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(Error::dim("conv2d_transpose", "padding removes the whole output"));
        }
        let (out_h, out_w) = (full_h - 2 * pad, full_w - 2 * pad);
        // Geometry of the forward conv this op is the adjoint of.
        let g = ConvGeom::new(c_out, out_h, out_w, k, stride, pad)?;
        debug_assert_eq!((g.out_h, g.out_w), (h, w));
        let (p, rows, op) = (h * w, c_out * k * k, out_h * out_w);
        let x = self.data(input);
        let wt = self.data(weight);
        let mut out = vec![T::ZERO; n * c_out * op];
        let mut cols = vec![T::ZERO; rows * p];
        for b in 0..n {
            let xs = &x[b * c_in * p..(b + 1) * c_in * p];
            // cols = W^T x, W viewed as [c_in, rows]
            T::gemm(rows, c_in, p, T::ONE, wt, 1, rows as isize, xs, p as isize, 1, T::ZERO, &mut cols, p as isize, 1);
            let dst = &mut out[b * c_out * op..(b + 1) * c_out * op];
            col2im(&cols, &g, dst);
            if let Some(bv) = bias {
                add_channel_bias(dst, self.data(bv), c_out, op);
            }
        }
        let value = DiffTensor::new(&like_nchw(&in_shape, n, c_out, out_h, out_w), out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.push(
            value,
            &parents,
            Box::new(move |args| {
                let x = args.parents[0].data();
                let wt = args.parents[1].data();
                let gy = args.grad;
                let mut gx = vec![T::ZERO; x.len()];
                let mut gw = vec![T::ZERO; wt.len()];
                let mut dcols = vec![T::ZERO; rows * p];
                for b in 0..n {
                    im2col(&gy[b * c_out * op..(b + 1) * c_out * op], &g, &mut dcols);
                    let xs = &x[b * c_in * p..(b + 1) * c_in * p];
                    // dx = W dcols
                    T::gemm(c_in, rows, p, T::ONE, wt, rows as isize, 1, &dcols, p as isize, 1, T::ZERO, &mut gx[b * c_in * p..(b + 1) * c_in * p], p as isize, 1);
                    // dW += x dcols^T
                    T::gemm(c_in, p, rows, T::ONE, xs, p as isize, 1, &dcols, 1, p as isize, T::ONE, &mut gw, rows as isize, 1);
                }
                let mut grads = vec![Some(gx), Some(gw)];
                if has_bias {
                    grads.push(Some(bias_grad(gy, n, c_out, op)));
                }
                grads
            }),
        ))
    }

    /// Crops the spatial extent of a feature map to its top-left `h x w` window.
    pub fn crop2d(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, _, ih, iw) = nchw("crop2d", &shape)?;
        if h > ih || w > iw || h == 0 || w == 0 {
            return Err(Error::dim("crop2d", format!("{h}x{w} from {shape:?}")));
        }
        let axis_h = shape.len() - 2;
        let a = if h < ih { self.slice(x, axis_h, 0, h)? } else { x };
        if w < iw {
            self.slice(a, axis_h + 1, 0, w)
        } else {
            Ok(a)
        }
    }
}
