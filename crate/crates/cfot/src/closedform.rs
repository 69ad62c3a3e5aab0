//! Exact one-dimensional quantile counterfactuals.
//!
//! Three scalar mechanisms over a binary parent `pa ∈ {0, 1}` and uniform
//! noise `u ∈ (0, 1)`, all inducing the same conditional observational law
//! `X | PA = pa ~ U(pa, pa + 1)`:
//!
//! - `T1`: `x = pa + u` (increasing in `u`),
//! - `T2`: `x = pa + 1 - u` (decreasing in `u`),
//! - `T3`: `x = u` when `pa = 0`, `x = 2 - u` when `pa = 1`.
//!
//! `T1` and `T2` produce identical counterfactuals even though they abduct
//! different noise values; `T3` does not, because its monotonicity direction
//! flips between parent values and the quantile level of an observation is
//! not preserved under intervention. These exact values anchor the tolerance
//! chain used by the numerical tests elsewhere in the crate.

use crate::error::{Error, Result};

/// One of the three scalar mechanisms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism1D {
    T1,
    T2,
    T3,
}

impl Mechanism1D {
    pub const ALL: [Mechanism1D; 3] = [Mechanism1D::T1, Mechanism1D::T2, Mechanism1D::T3];

    pub fn label(self) -> &'static str {
        match self {
            Mechanism1D::T1 => "T1: x = pa + u",
            Mechanism1D::T2 => "T2: x = pa + 1 - u",
            Mechanism1D::T3 => "T3: x = u | 2 - u",
        }
    }

    fn apply(self, pa: u8, u: f64) -> f64 {
        match self {
            Mechanism1D::T1 => f64::from(pa) + u,
            Mechanism1D::T2 => f64::from(pa) + 1.0 - u,
            Mechanism1D::T3 => {
                if pa == 0 {
                    u
                } else {
                    2.0 - u
                }
            }
        }
    }

    fn invert(self, pa: u8, x: f64) -> f64 {
        match self {
            Mechanism1D::T1 => x - f64::from(pa),
            Mechanism1D::T2 => f64::from(pa) + 1.0 - x,
            Mechanism1D::T3 => {
                if pa == 0 {
                    x
                } else {
                    2.0 - x
                }
            }
        }
    }
}

fn check_parent(op: &'static str, pa: u8) -> Result<()> {
    if pa > 1 {
        return Err(Error::InvalidArgument {
            op,
            msg: format!("parent must be 0 or 1, got {pa}"),
        });
    }
    Ok(())
}

fn check_support(pa: u8, x: f64) -> Result<()> {
    let lo = f64::from(pa);
    if !(lo..=lo + 1.0).contains(&x) {
        return Err(Error::OutOfSupport(x));
    }
    Ok(())
}

/// Counterfactual `X_{pa*} | {X = x, PA = pa}` under the given mechanism:
/// abduct `u` by the mechanism's inverse, re-apply at `pa_star`.
pub fn cf_1d(mech: Mechanism1D, pa: u8, x: f64, pa_star: u8) -> Result<f64> {
    check_parent("cf_1d", pa)?;
    check_parent("cf_1d", pa_star)?;
    check_support(pa, x)?;
    let u = mech.invert(pa, x);
    Ok(mech.apply(pa_star, u))
}

/// Quantile level of `x` under `X | PA = pa ~ U(pa, pa + 1)`.
///
/// All three mechanisms induce the same conditional law, so the rank does
/// not depend on the mechanism; the argument is kept so call sites read the
/// same as [`cf_1d`].
pub fn rank_1d(_mech: Mechanism1D, pa: u8, x: f64) -> Result<f64> {
    check_parent("rank_1d", pa)?;
    check_support(pa, x)?;
    Ok(x - f64::from(pa))
}
