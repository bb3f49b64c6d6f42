use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{stream_rng, STREAM_CONDITION};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Clear,
    Night,
    Rain,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Clear, Condition::Night, Condition::Rain];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Clear => "clear",
            Condition::Night => "night",
            Condition::Rain => "rain",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown condition `{s}` (expected clear, night or rain)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::Invalid(format!("noise sigma must be >= 0, got {sigma}")));
        }
        Ok(Self { sigma, seed })
    }

    /// The pre-clamp perturbation added to `len` pixels.
    pub fn draws(&self, len: usize) -> Vec<f64> {
        let mut rng = stream_rng(self.seed, 0);
        let normal = Normal::new(0.0, self.sigma).expect("validated sigma");
        (0..len).map(|_| normal.sample(&mut rng)).collect()
    }
}

/// Adds zero-mean Gaussian noise and clamps to `[0, 1]`; `sigma = 0` returns the input.
pub fn add_gaussian_noise(images: &[f32], spec: &NoiseSpec) -> Result<Vec<f32>> {
    let spec = NoiseSpec::new(spec.sigma, spec.seed)?;
    if spec.sigma == 0.0 {
        return Ok(images.to_vec());
    }
    Ok(images
        .iter()
        .zip(spec.draws(images.len()))
        .map(|(&x, n)| (x as f64 + n).clamp(0.0, 1.0) as f32)
        .collect())
}

fn box_blur5(plane: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f64;
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    acc += plane[yy * w + xx] as f64;
                }
            }
            out[y * w + x] = (acc / 25.0) as f32;
        }
    }
    out
}

/// Synthetic night or rain rendition of `[n_cams, 3, h, w]` images; clear is
/// the identity.
pub fn degrade_condition(images: &[f32], n_cams: usize, h: usize, w: usize, condition: Condition, seed: u64) -> Result<Vec<f32>> {
    if images.len() != n_cams * 3 * h * w {
        return Err(Error::Invalid(format!("{} values are not {n_cams} images of 3x{h}x{w}", images.len())));
    }
    let mut rng = stream_rng(seed, STREAM_CONDITION);
    match condition {
        Condition::Clear => Ok(images.to_vec()),
        Condition::Night => {
            let normal = Normal::new(0.0, 0.03).expect("positive std");
            Ok(images
                .iter()
                .map(|&x| ((x as f64).powf(2.2) * 0.35 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32)
                .collect())
        }
        Condition::Rain => {
            let mut out = Vec::with_capacity(images.len());
            for img in images.chunks_exact(3 * h * w) {
                let mut planes: Vec<Vec<f32>> = img.chunks_exact(h * w).map(|p| box_blur5(p, h, w)).collect();
                for _ in 0..200 {
                    let (mut x, mut y) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
                    let len = rng.random_range(6..15);
                    let slant = rng.random_range(0.2..0.45);
                    for _ in 0..len {
                        let (xi, yi) = (x as usize, y as usize);
                        if xi < w && yi < h {
                            for p in planes.iter_mut() {
                                let v = &mut p[yi * w + xi];
                                *v = 0.4 * *v + 0.6 * 0.9;
                            }
                        }
                        y += 1.0;
                        x += slant;
                    }
                }
                let mean = planes.iter().flatten().map(|&v| v as f64).sum::<f64>() / (3 * h * w) as f64;
                out.extend(planes.iter().flatten().map(|&v| ((v as f64 - mean) * 0.8 + mean).clamp(0.0, 1.0) as f32));
            }
            Ok(out)
        }
    }
}
