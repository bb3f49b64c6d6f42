//! Elementwise, structural and reduction ops.

use crate::error::{Error, Result};
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::{DiffTensor, Real};

pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::dim(op, format!("{a:?} vs {b:?}")))
    }
}

impl<T: Real> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let value = DiffTensor::new(self.shape(a), data)?;
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|args| vec![Some(args.grad.to_vec()), Some(args.grad.to_vec())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let value = DiffTensor::new(self.shape(a), data)?;
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|args| {
                vec![
                    Some(args.grad.to_vec()),
                    Some(args.grad.iter().map(|&g| -g).collect()),
                ]
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let value = DiffTensor::new(self.shape(a), data)?;
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|args| {
                let (x, y) = (args.parents[0].data(), args.parents[1].data());
                let ga = args.grad.iter().zip(y).map(|(&g, &v)| g * v).collect();
                let gb = args.grad.iter().zip(x).map(|(&g, &v)| g * v).collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let value = DiffTensor::new(self.shape(a), self.data(a).iter().map(|&x| x * s).collect())
            .expect("shape preserved");
        self.push(
            value,
            &[a],
            Box::new(move |args| vec![Some(args.grad.iter().map(|&g| g * s).collect())]),
        )
    }

    /// Multiplies every element by a learnable one-element tensor.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("scale_by", format!("scale must have one element, got {:?}", self.shape(s))));
        }
        let k = self.data(s)[0];
        let value = DiffTensor::new(self.shape(a), self.data(a).iter().map(|&x| x * k).collect())?;
        Ok(self.push(
            value,
            &[a, s],
            Box::new(|args| {
                let x = args.parents[0].data();
                let k = args.parents[1].data()[0];
                let ga = args.grad.iter().map(|&g| g * k).collect();
                let gs: f64 = args.grad.iter().zip(x).map(|(&g, &v)| (g * v).f64()).sum();
                vec![Some(ga), Some(vec![T::of(gs)])]
            }),
        ))
    }

    /// Gradient barrier: same value, no gradient flows to `a`.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, &[a], Box::new(|args| vec![Some(args.grad.to_vec())])))
    }

    /// Sum of all elements (64-bit accumulation) as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().map(|x| x.f64()).sum();
        let n = self.value(a).len();
        self.push(
            DiffTensor::scalar(T::of(s)),
            &[a],
            Box::new(move |args| vec![Some(vec![args.grad[0]; n])]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// `Σ a ⊙ w` against a constant weight tensor of the same shape.
    pub fn dot_const(&mut self, a: Var, w: &[T]) -> Result<Var> {
        if w.len() != self.value(a).len() {
            return Err(Error::dim("dot_const", "weight length mismatch"));
        }
        let s: f64 = self
            .data(a)
            .iter()
            .zip(w)
            .map(|(&x, &y)| x.f64() * y.f64())
            .sum();
        let w = w.to_vec();
        Ok(self.push(
            DiffTensor::scalar(T::of(s)),
            &[a],
            Box::new(move |args| vec![Some(w.iter().map(|&v| v * args.grad[0]).collect())]),
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let &[m, n] = self.shape(a) else {
            return Err(Error::dim("transpose", format!("expected 2-D, got {:?}", self.shape(a))));
        };
        let data = transpose_buf(self.data(a), m, n);
        let value = DiffTensor::new(&[n, m], data)?;
        Ok(self.push(
            value,
            &[a],
            Box::new(move |args| vec![Some(transpose_buf(args.grad, n, m))]),
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} for {base:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &l) in parts.iter().zip(&lens) {
                let d = self.data(p);
                out.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = DiffTensor::new(&shape, out)?;
        Ok(self.push(
            value,
            parts,
            Box::new(move |args| {
                let mut grads: Vec<Vec<T>> =
                    lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (g, &l) in grads.iter_mut().zip(&lens) {
                        g.extend_from_slice(&args.grad[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        let value = DiffTensor::new(&oshape, out)?;
        Ok(self.push(
            value,
            &[a],
            Box::new(move |args| {
                let mut g = vec![T::ZERO; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    g[base..base + len * inner]
                        .copy_from_slice(&args.grad[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("stack", "no inputs"))?;
        let inner = self.shape(first).to_vec();
        let mut expanded = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(p));
            if self.shape(p) != inner.as_slice() {
                return Err(Error::dim("stack", format!("{:?} vs {inner:?}", self.shape(p))));
            }
            expanded.push(self.reshape(p, &s)?);
        }
        if expanded.len() == 1 {
            return Ok(expanded[0]);
        }
        self.concat(&expanded, 0)
    }

    /// Removes the leading axis by taking element `i` of it.
    pub fn select(&mut self, a: Var, i: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("select", format!("need rank >= 2, got {shape:?}")));
        }
        let s = self.slice(a, 0, i, 1)?;
        self.reshape(s, &shape[1..])
    }

    /// Adds `bias[k]` to every element whose index along `axis` is `k`.
    pub fn add_bias(&mut self, a: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || self.value(bias).len() != shape[axis] {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} on axis {axis} of {shape:?}", self.shape(bias)),
            ));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let b = self.data(bias).to_vec();
        let mut out = self.data(a).to_vec();
        for o in 0..outer {
            for (k, &bk) in b.iter().enumerate() {
                let base = (o * len + k) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += bk);
            }
        }
        let value = DiffTensor::new(&shape, out)?;
        Ok(self.push(
            value,
            &[a, bias],
            Box::new(move |args| {
                let mut gb = vec![0.0f64; len];
                for o in 0..outer {
                    for (k, acc) in gb.iter_mut().enumerate() {
                        let base = (o * len + k) * inner;
                        *acc += args.grad[base..base + inner].iter().map(|g| g.f64()).sum::<f64>();
                    }
                }
                vec![
                    Some(args.grad.to_vec()),
                    Some(gb.into_iter().map(T::of).collect()),
                ]
            }),
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        if self.tracking_branches() {
            let mask: Vec<bool> = self.data(a).iter().map(|&x| x > T::ZERO).collect();
            self.record_branch(mask);
        }
        let value = DiffTensor::new(
            self.shape(a),
            self.data(a)
                .iter()
                .map(|&x| if x > T::ZERO { x } else { T::ZERO })
                .collect(),
        )
        .expect("shape preserved");
        self.push(
            value,
            &[a],
            Box::new(|args| {
                let x = args.parents[0].data();
                vec![Some(
                    args.grad
                        .iter()
                        .zip(x)
                        .map(|(&g, &v)| if v > T::ZERO { g } else { T::ZERO })
                        .collect(),
                )]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = DiffTensor::new(
            self.shape(a),
            self.data(a).iter().map(|&x| sigmoid(x)).collect(),
        )
        .expect("shape preserved");
        self.push(
            value,
            &[a],
            Box::new(|args| {
                let y = args.output.data();
                vec![Some(
                    args.grad
                        .iter()
                        .zip(y)
                        .map(|(&g, &s)| g * s * (T::ONE - s))
                        .collect(),
                )]
            }),
        )
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

pub(crate) fn transpose_buf<T: Real>(src: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> DiffTensor<f64> {
        DiffTensor::from_f64(shape, v).unwrap().with_grad()
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        assert_eq!(
            tape.data(c),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let s = tape.slice(c, 1, 1, 2).unwrap();
        assert_eq!(tape.data(s), tape.data(b));
    }

    #[test]
    fn add_bias_rejects_wrong_length() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 3], &[0.0; 6]));
        let b = tape.leaf(t(&[2], &[0.0; 2]));
        assert!(tape.add_bias(a, b, 1).is_err());
        assert!(tape.add_bias(a, b, 0).is_ok());
    }

    #[test]
    fn relu_gradient_masks_negative_inputs() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[3], &[-1.0, 0.5, 2.0]));
        let r = tape.relu(a);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[0.0, 1.0, 1.0]);
    }
}
