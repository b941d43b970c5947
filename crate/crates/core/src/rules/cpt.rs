//! Cumulative prospect theory predictions for binary lotteries.
//!
//! Value function v(z) = z^alpha for gains, -(-z)^beta for losses;
//! probability weighting w(p) = delta p^gamma / (delta p^gamma + (1-p)^gamma).
//! The predicted certainty equivalent is v^(-1)(w(p) v(z1) + (1-w(p)) v(z2)).

use serde::{Deserialize, Serialize};

use crate::meta::Lottery;
use crate::rules::RuleError;

/// Which CPT parameters are free; fixed parameters equal exactly 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CptVariant {
    /// gamma free
    G,
    /// alpha, beta free
    Ab,
    /// delta, gamma free
    Dg,
    /// alpha, beta, gamma free
    Abg,
    /// alpha, beta, delta, gamma free
    Abdg,
}

impl CptVariant {
    /// Free parameter names in canonical order (alpha, beta, delta, gamma).
    pub fn free_params(&self) -> &'static [&'static str] {
        match self {
            CptVariant::G => &["gamma"],
            CptVariant::Ab => &["alpha", "beta"],
            CptVariant::Dg => &["delta", "gamma"],
            CptVariant::Abg => &["alpha", "beta", "gamma"],
            CptVariant::Abdg => &["alpha", "beta", "delta", "gamma"],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CptVariant::G => "g",
            CptVariant::Ab => "ab",
            CptVariant::Dg => "dg",
            CptVariant::Abg => "abg",
            CptVariant::Abdg => "abdg",
        }
    }

    pub fn parse(s: &str) -> Option<CptVariant> {
        match s {
            "g" => Some(CptVariant::G),
            "ab" => Some(CptVariant::Ab),
            "dg" => Some(CptVariant::Dg),
            "abg" => Some(CptVariant::Abg),
            "abdg" => Some(CptVariant::Abdg),
            _ => None,
        }
    }

    /// Box bounds for the free parameters, in `free_params` order.
    /// alpha, beta, gamma live in `[0, 1]`; delta in `[0, delta_max]`.
    pub fn bounds(&self, delta_max: f64) -> (Vec<f64>, Vec<f64>) {
        let (mut lo, mut hi) = (Vec::new(), Vec::new());
        for name in self.free_params() {
            match *name {
                "delta" => {
                    lo.push(0.0);
                    hi.push(delta_max);
                }
                _ => {
                    lo.push(0.0);
                    hi.push(1.0);
                }
            }
        }
        (lo, hi)
    }

    /// Builds full parameters from a free-parameter vector in
    /// `free_params` order, fixing the rest at 1.
    pub fn params_from_free(&self, free: &[f64]) -> CptParams {
        let mut p = CptParams {
            alpha: 1.0,
            beta: 1.0,
            delta: 1.0,
            gamma: 1.0,
            variant: *self,
        };
        for (name, &v) in self.free_params().iter().zip(free) {
            match *name {
                "alpha" => p.alpha = v,
                "beta" => p.beta = v,
                "delta" => p.delta = v,
                "gamma" => p.gamma = v,
                _ => unreachable!(),
            }
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CptParams {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub gamma: f64,
    pub variant: CptVariant,
}

impl CptParams {
    /// Free parameters in canonical order.
    pub fn free(&self) -> Vec<f64> {
        self.variant
            .free_params()
            .iter()
            .map(|name| match *name {
                "alpha" => self.alpha,
                "beta" => self.beta,
                "delta" => self.delta,
                "gamma" => self.gamma,
                _ => unreachable!(),
            })
            .collect()
    }
}

fn cpt_value(z: f64, alpha: f64, beta: f64) -> f64 {
    if z >= 0.0 {
        z.powf(alpha)
    } else {
        -(-z).powf(beta)
    }
}

/// Probability weighting w(p); errors when the denominator degenerates
/// (delta = 0 at p = 1 and similar corner cases).
pub fn weight(p: f64, delta: f64, gamma: f64) -> Result<f64, RuleError> {
    let num = delta * p.powf(gamma);
    let den = num + (1.0 - p).powf(gamma);
    if den == 0.0 || !den.is_finite() {
        return Err(RuleError::DegenerateWeighting { delta, gamma, p });
    }
    Ok(num / den)
}

/// Predicted certainty equivalent of `lot` under CPT.
pub fn predict_cpt(params: &CptParams, lot: &Lottery) -> Result<f64, RuleError> {
    let CptParams {
        alpha,
        beta,
        delta,
        gamma,
        ..
    } = *params;
    // degenerate powers cannot be inverted on the side they touch
    let touches_gain = (lot.p > 0.0 && lot.z1 >= 0.0) || (lot.p < 1.0 && lot.z2 >= 0.0);
    let touches_loss = (lot.p > 0.0 && lot.z1 < 0.0) || (lot.p < 1.0 && lot.z2 < 0.0);
    if alpha == 0.0 && touches_gain {
        return Err(RuleError::DegeneratePower { param: "alpha" });
    }
    if beta == 0.0 && touches_loss {
        return Err(RuleError::DegeneratePower { param: "beta" });
    }

    let w = weight(lot.p, delta, gamma)?;
    let u = w * cpt_value(lot.z1, alpha, beta) + (1.0 - w) * cpt_value(lot.z2, alpha, beta);
    let ce = if u >= 0.0 {
        u.powf(1.0 / alpha)
    } else {
        -((-u).powf(1.0 / beta))
    };
    if ce.is_finite() {
        Ok(ce)
    } else {
        Err(RuleError::DegeneratePower {
            param: if u >= 0.0 { "alpha" } else { "beta" },
        })
    }
}
