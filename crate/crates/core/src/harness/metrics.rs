use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_class_iou: Vec<f64>,
    pub miou: f64,
    pub n_samples: usize,
}

/// Per-class intersection and union counts summed over samples; division
/// happens once in [`MiouAccumulator::report`].
#[derive(Clone, Debug)]
pub struct MiouAccumulator {
    n_classes: usize,
    threshold: f64,
    inter: Vec<u64>,
    union: Vec<u64>,
    n_samples: usize,
}

impl MiouAccumulator {
    pub fn new(n_classes: usize, threshold: f64) -> Self {
        Self {
            n_classes,
            threshold,
            inter: vec![0; n_classes],
            union: vec![0; n_classes],
            n_samples: 0,
        }
    }

    /// Adds one `[n_classes, H, W]` probability map against binary ground truth.
    pub fn add(&mut self, probs: &[f32], gt: &[u8]) -> Result<()> {
        if probs.len() != gt.len() || self.n_classes == 0 || gt.len() % self.n_classes != 0 {
            return Err(Error::Invalid(format!(
                "prediction of {} values vs ground truth of {} for {} classes",
                probs.len(),
                gt.len(),
                self.n_classes
            )));
        }
        let per = gt.len() / self.n_classes;
        for k in 0..self.n_classes {
            for (&p, &g) in probs[k * per..(k + 1) * per].iter().zip(&gt[k * per..(k + 1) * per]) {
                let (p, g) = (p as f64 >= self.threshold, g != 0);
                self.inter[k] += (p && g) as u64;
                self.union[k] += (p || g) as u64;
            }
        }
        self.n_samples += 1;
        Ok(())
    }

    /// A class whose union is empty over all samples scores 1.
    pub fn report(&self) -> MetricsReport {
        let per_class_iou: Vec<f64> = self
            .inter
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
            .collect();
        let miou = per_class_iou.iter().sum::<f64>() / per_class_iou.len().max(1) as f64;
        MetricsReport {
            per_class_iou,
            miou,
            n_samples: self.n_samples,
        }
    }
}

/// Single-sample convenience wrapper.
pub fn compute_miou(pred_probs: &[f32], gt: &[u8], n_classes: usize, threshold: f64) -> Result<MetricsReport> {
    let mut acc = MiouAccumulator::new(n_classes, threshold);
    acc.add(pred_probs, gt)?;
    Ok(acc.report())
}
