use crate::error::{Error, Result};
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::{DiffTensor, Real};

impl<T: Real> Tape<T> {
    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (&[m, k], &[k2, n]) = (self.shape(a), self.shape(b)) else {
            return Err(Error::dim(
                "matmul",
                format!("expected 2-D operands, got {:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        };
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::ZERO; m * n];
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            self.data(a),
            k as isize,
            1,
            self.data(b),
            n as isize,
            1,
            T::ZERO,
            &mut out,
            n as isize,
            1,
        );
        let value = DiffTensor::new(&[m, n], out)?;
        Ok(self.push(
            value,
            &[a, b],
            Box::new(move |args| {
                let (x, y, g) = (args.parents[0].data(), args.parents[1].data(), args.grad);
                // dA = G B^T
                let mut ga = vec![T::ZERO; m * k];
                T::gemm(m, n, k, T::ONE, g, n as isize, 1, y, 1, n as isize, T::ZERO, &mut ga, k as isize, 1);
                // dB = A^T G
                let mut gb = vec![T::ZERO; k * n];
                T::gemm(k, m, n, T::ONE, x, 1, k as isize, g, n as isize, 1, T::ZERO, &mut gb, n as isize, 1);
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Row-wise affine map `x W + b` for `x: [T,in]`, `W: [in,out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b, 1),
            None => Ok(y),
        }
    }
}
