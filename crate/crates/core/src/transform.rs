//! Bounded-to-real transform for `[0, 1]`-valued fields.
//!
//! `f(x) = logit[(exp(x/ε) − 1) / (exp(1/ε) − 1)]` after clipping `x` to
//! `[lo, hi]`. The closed form overflows for small `ε`, so both directions are
//! evaluated in the log domain:
//!
//! `f(x) = (x − 1)/ε + log1p(−e^{−x/ε}) − log1p(−e^{(x−1)/ε})`
//!
//! and the inverse is `x = ε · softplus(log(e^{1/ε} − 1) − softplus(−y))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec<T> {
    pub epsilon: T,
    pub lo: T,
    pub hi: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Inverse,
}

/// Tolerance on the `[0, 1]` domain check for forward tensor transforms.
const DOMAIN_SLACK: f64 = 1e-9;

fn softplus<T: Real>(t: T) -> T {
    if t > T::zero() {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn finite<T: Real>(x: T, what: &str) -> Result<T> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(format!("{what} received {}", x.as_f64())))
    }
}

impl<T: Real> Default for TransformSpec<T> {
    fn default() -> Self {
        Self {
            epsilon: T::lit(1e-3),
            lo: T::lit(0.01),
            hi: T::lit(0.99),
        }
    }
}

impl<T: Real> TransformSpec<T> {
    pub fn new(epsilon: T, lo: T, hi: T) -> Result<Self> {
        let s = Self { epsilon, lo, hi };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.epsilon > T::zero()
            && self.epsilon.is_finite()
            && self.lo > T::zero()
            && self.lo < self.hi
            && self.hi < T::one();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "transform needs 0 < lo < hi < 1 and epsilon > 0 (got eps={}, lo={}, hi={})",
                self.epsilon.as_f64(),
                self.lo.as_f64(),
                self.hi.as_f64()
            )))
        }
    }

    pub fn clip(&self, x: T) -> Result<T> {
        let x = finite(x, "clip")?;
        Ok(x.max(self.lo).min(self.hi))
    }

    pub fn forward(&self, x: T) -> Result<T> {
        let x = self.clip(x)?;
        let e = self.epsilon;
        let y = (x - T::one()) / e + (-(-x / e).exp()).ln_1p() - (-((x - T::one()) / e).exp()).ln_1p();
        finite(y, "forward transform output")
    }

    pub fn inverse(&self, y: T) -> Result<T> {
        let y = finite(y, "inverse")?;
        let e = self.epsilon;
        // log(e^{1/ε} − 1)
        let log_denominator = T::one() / e + (-(-T::one() / e).exp()).ln_1p();
        let log_q = -softplus(-y);
        let x = e * softplus(log_denominator + log_q);
        Ok(x.max(self.lo).min(self.hi))
    }

    pub fn apply_tensor(&self, t: &DenseTensor<T>, direction: Direction) -> Result<DenseTensor<T>> {
        match direction {
            Direction::Forward => {
                let slack = T::lit(DOMAIN_SLACK);
                t.try_map(|v| {
                    if v.is_finite() && (v < -slack || v > T::one() + slack) {
                        return Err(Error::Domain(format!(
                            "forward transform expects values in [0, 1], found {}",
                            v.as_f64()
                        )));
                    }
                    self.forward(v)
                })
            }
            Direction::Inverse => t.try_map(|v| self.inverse(v)),
        }
    }
}
