use serde::{Deserialize, Serialize};

use crate::params::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Prior {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, sd: f64 },
    LogNormal { mu: f64, sigma: f64 },
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

impl Prior {
    pub fn ln_pdf(&self, x: f64) -> f64 {
        match *self {
            Prior::Uniform { lo, hi } => {
                if x >= lo && x <= hi && hi > lo {
                    -(hi - lo).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Prior::Normal { mean, sd } => {
                let z = (x - mean) / sd;
                -0.5 * z * z - sd.ln() - LN_SQRT_2PI
            }
            Prior::LogNormal { mu, sigma } => {
                if x <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let z = (x.ln() - mu) / sigma;
                -0.5 * z * z - sigma.ln() - LN_SQRT_2PI - x.ln()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub phi: Prior,
    pub epsilon: Prior,
    pub w_replies: Prior,
    pub w_votes: Prior,
    pub w_intercept: Prior,
    pub alpha0: Prior,
}

impl Default for Priors {
    fn default() -> Self {
        let unit = Prior::Uniform { lo: 0.0, hi: 1.0 };
        let weight = Prior::Normal {
            mean: 0.0,
            sd: 10.0,
        };
        Self {
            phi: unit,
            epsilon: unit,
            w_replies: weight,
            w_votes: weight,
            w_intercept: weight,
            alpha0: Prior::LogNormal {
                mu: 0.0,
                sigma: 1.0,
            },
        }
    }
}

impl Priors {
    pub fn ln_learning(&self, phi: f64, epsilon: f64) -> f64 {
        self.phi.ln_pdf(phi) + self.epsilon.ln_pdf(epsilon)
    }

    pub fn ln_reward(&self, w_replies: f64, w_votes: f64, w_intercept: f64) -> f64 {
        self.w_replies.ln_pdf(w_replies)
            + self.w_votes.ln_pdf(w_votes)
            + self.w_intercept.ln_pdf(w_intercept)
    }

    pub fn ln_pdf(&self, p: &ModelParams) -> f64 {
        self.ln_learning(p.learning.phi, p.learning.epsilon)
            + self.ln_reward(p.reward.w_replies, p.reward.w_votes, p.reward.w_intercept)
            + self.alpha0.ln_pdf(p.hdp.alpha0)
    }
}
