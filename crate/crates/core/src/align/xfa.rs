//! Cosine similarity between camera-BEV and LiDAR-BEV features.

use crate::error::{Error, Result};
use crate::numcore::{nchw, DiffTensor, Real, Tape, Var};

const EPS: f64 = 1e-8;

/// Mean over BEV positions of the cosine between the channel vectors of
/// `cam` and `lidar` (`[C,H,W]` or `[N,C,H,W]`). With `detach_lidar` the
/// LiDAR side receives no gradient.
pub fn xfa_loss<T: Real>(tape: &mut Tape<T>, cam: Var, lidar: Var, detach_lidar: bool) -> Result<Var> {
    if tape.shape(cam) != tape.shape(lidar) {
        return Err(Error::dim(
            "xfa_loss",
            format!("{:?} vs {:?}", tape.shape(cam), tape.shape(lidar)),
        ));
    }
    let lidar = if detach_lidar { tape.detach(lidar) } else { lidar };
    let (n, c, h, w) = nchw("xfa_loss", tape.shape(cam))?;
    let p = h * w;
    let (a, b) = (tape.data(cam), tape.data(lidar));
    // Per position: dot, |a|, |b|.
    let mut stats = Vec::with_capacity(n * p);
    let mut total = 0.0;
    for s in 0..n {
        for pos in 0..p {
            let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
            for ch in 0..c {
                let i = (s * c + ch) * p + pos;
                let (x, y) = (a[i].f64(), b[i].f64());
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            let (na, nb) = (na.sqrt(), nb.sqrt());
            let denom = (na * nb).max(EPS);
            total += dot / denom;
            stats.push((dot, na, nb, denom));
        }
    }
    let inv = 1.0 / (n * p) as f64;
    Ok(tape.push(
        DiffTensor::scalar(T::of(total * inv)),
        &[cam, lidar],
        Box::new(move |args| {
            let (a, b) = (args.parents[0].data(), args.parents[1].data());
            let g0 = args.grad[0].f64() * inv;
            let mut ga = vec![T::ZERO; a.len()];
            let mut gb = vec![T::ZERO; b.len()];
            for s in 0..n {
                for pos in 0..p {
                    let (dot, na, nb, denom) = stats[s * p + pos];
                    let clamped = na * nb < EPS;
                    for ch in 0..c {
                        let i = (s * c + ch) * p + pos;
                        let (x, y) = (a[i].f64(), b[i].f64());
                        let (da, db) = if clamped {
                            (y / denom, x / denom)
                        } else {
                            let cos = dot / denom;
                            (y / denom - cos * x / (na * na), x / denom - cos * y / (nb * nb))
                        };
                        ga[i] = T::of(g0 * da);
                        gb[i] = T::of(g0 * db);
                    }
                }
            }
            vec![Some(ga), Some(gb)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(a: &[f64], b: &[f64], shape: &[usize]) -> f64 {
        let mut tape = Tape::<f64>::new();
        let av = tape.leaf(DiffTensor::from_f64(shape, a).unwrap());
        let bv = tape.leaf(DiffTensor::from_f64(shape, b).unwrap());
        let l = xfa_loss(&mut tape, av, bv, false).unwrap();
        tape.data(l)[0]
    }

    #[test]
    fn identical_orthogonal_and_antipodal() {
        let a = [1.0, 2.0, -0.5, 3.0, 0.0, 1.0];
        assert!((eval(&a, &a, &[2, 1, 3]) - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((eval(&a, &neg, &[2, 1, 3]) + 1.0).abs() < 1e-12);
        // Channel vectors (1,0) and (0,1) at each position.
        let x = [1.0, 1.0, 0.0, 0.0];
        let y = [0.0, 0.0, 2.0, 3.0];
        assert_eq!(eval(&x, &y, &[2, 1, 2]), 0.0);
    }

    #[test]
    fn zero_vectors_give_zero_not_nan() {
        let z = [0.0; 4];
        assert_eq!(eval(&z, &z, &[2, 1, 2]), 0.0);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(DiffTensor::zeros(&[2, 2, 2]));
        let b = tape.leaf(DiffTensor::zeros(&[3, 2, 2]));
        assert!(xfa_loss(&mut tape, a, b, false).is_err());
    }
}
