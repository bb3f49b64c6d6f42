//! Cross-modal feature alignment, cross-view segmentation alignment and the
//! weighted combination of all training losses.

mod xfa;
mod xsa;

pub use xfa::xfa_loss;
pub use xsa::{pv_loss, xsa_splat_loss, PerspectiveDecoder, XsaHead};

use crate::error::{Error, Result};
use crate::numcore::{Real, Tape, Var};

/// Weights of the main, feature-alignment, perspective and splatted-BEV losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub main: f64,
    pub xfa: f64,
    pub pv: f64,
    pub sa_bev: f64,
}

impl LossWeights {
    pub fn nuscenes() -> Self {
        Self {
            main: 1.0,
            xfa: -0.002,
            pv: 0.1,
            sa_bev: 0.1,
        }
    }

    pub fn kitti360() -> Self {
        Self {
            pv: 0.5,
            ..Self::nuscenes()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "nuscenes" => Ok(Self::nuscenes()),
            "kitti360" => Ok(Self::kitti360()),
            _ => Err(Error::Config(format!("unknown loss preset {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.main, self.xfa, self.pv, self.sa_bev];
        if all.iter().any(|v| !v.is_finite()) || self.xfa > 0.0 || self.pv < 0.0 || self.sa_bev < 0.0 {
            return Err(Error::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::nuscenes()
    }
}

/// Unweighted loss components and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub main: f64,
    pub xfa: f64,
    pub pv: f64,
    pub sa_bev: f64,
    pub total: f64,
    /// Weight applied to `sa_bev` when the total was formed.
    pub sa_weight: f64,
}

/// `total = γ₁·main + γ₂·xfa + γ₃·pv + γ₄·sa_bev`.
pub fn total_loss(main: f64, xfa: f64, pv: f64, sa_bev: f64, w: &LossWeights) -> Result<LossBreakdown> {
    if [main, xfa, pv, sa_bev].iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "total_loss" });
    }
    Ok(LossBreakdown {
        main,
        xfa,
        pv,
        sa_bev,
        total: w.main * main + w.xfa * xfa + w.pv * pv + w.sa_bev * sa_bev,
        sa_weight: w.sa_bev,
    })
}

/// Fraction of the total contributed by the weighted splatted-BEV term.
pub fn loss_share(b: &LossBreakdown) -> Result<f64> {
    if !(b.total > 0.0) {
        return Err(Error::Invalid(format!("loss share needs a positive total, got {}", b.total)));
    }
    Ok(b.sa_weight * b.sa_bev / b.total)
}

/// Scalar loss nodes; absent terms are inactive for the variant.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub main: Option<Var>,
    pub xfa: Option<Var>,
    pub pv: Option<Var>,
    pub sa_bev: Option<Var>,
}

impl LossTerms {
    /// Weighted sum on the tape plus the numeric breakdown.
    pub fn combine<T: Real>(&self, tape: &mut Tape<T>, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
        let value = |v: Option<Var>, tape: &Tape<T>| v.map_or(0.0, |v| tape.data(v)[0].f64());
        let breakdown = total_loss(
            value(self.main, tape),
            value(self.xfa, tape),
            value(self.pv, tape),
            value(self.sa_bev, tape),
            w,
        )?;
        let mut acc: Option<Var> = None;
        for (term, weight) in [(self.main, w.main), (self.xfa, w.xfa), (self.pv, w.pv), (self.sa_bev, w.sa_bev)] {
            if let Some(t) = term {
                let scaled = tape.scale(t, weight);
                acc = Some(match acc {
                    Some(a) => tape.add(a, scaled)?,
                    None => scaled,
                });
            }
        }
        let total = acc.ok_or_else(|| Error::Invalid("no active loss term".into()))?;
        Ok((total, breakdown))
    }
}
