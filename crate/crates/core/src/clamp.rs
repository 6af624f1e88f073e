//! Per-node solution of the interconnected obstacle system.
//!
//! At one space-time node the p values must satisfy
//! `v^{i+1} - g_down_i <= v^i <= v^{i+1} + g_up_i` and equal the continuation
//! value `c^i` wherever neither obstacle binds. The fixed point is reached by
//! Gauss–Seidel sweeps over the modes. Used by the lattice oracle and the
//! finite-difference solver alike.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::SwitchingProblem;

/// Which obstacle is active at a node for a mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    LowerContact,
    Interior,
    UpperContact,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::LowerContact => "lower-contact",
            Regime::Interior => "interior",
            Regime::UpperContact => "upper-contact",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lower-contact" => Ok(Regime::LowerContact),
            "interior" => Ok(Regime::Interior),
            "upper-contact" => Ok(Regime::UpperContact),
            other => Err(Error::InvalidArgument(format!("unknown regime tag {other:?}"))),
        }
    }
}

/// Which obstacles are enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sides {
    Both,
    /// Reflection at `L^i` only (decreasing penalization ladder).
    LowerOnly,
    /// Reflection at `U^i` only (increasing penalization ladder).
    UpperOnly,
}

/// Orientation of the residual identity checked after convergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    MinMax,
    MaxMin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clamped {
    pub values: Vec<f64>,
    pub regimes: Vec<Regime>,
    pub sweeps: usize,
}

const CHANGE_TOL: f64 = 1e-12;
const RESIDUAL_TOL: f64 = 1e-10;
const SWEEP_CAP: usize = 1_000_000;

/// Two-sided clamp in min-max orientation.
pub fn clamp_modes(c: &[f64], down: &[f64], up: &[f64]) -> Result<Clamped> {
    clamp_modes_with(c, down, up, Sides::Both, Orientation::MinMax)
}

pub fn clamp_modes_with(
    c: &[f64],
    down: &[f64],
    up: &[f64],
    sides: Sides,
    orientation: Orientation,
) -> Result<Clamped> {
    let p = c.len();
    if p < 2 || down.len() != p || up.len() != p {
        return Err(Error::InvalidArgument(format!(
            "clamp needs p >= 2 continuation values and matching cost vectors (got {}, {}, {})",
            p,
            down.len(),
            up.len()
        )));
    }
    if let Some(i) = (0..p).find(|&i| !(down[i] + up[i] > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "cost gap g_down + g_up is not positive for mode {}",
            i + 1
        )));
    }
    let scale = c.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let (lo, hi) = c
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let cheap_gap = {
        let sum_down: f64 = down.iter().sum();
        let sum_up: f64 = up.iter().sum();
        let pair_gap = (0..p).map(|i| down[i] + up[i]).fold(f64::INFINITY, f64::min);
        match sides {
            Sides::Both => sum_down.min(sum_up).min(pair_gap),
            Sides::LowerOnly => sum_down,
            Sides::UpperOnly => sum_up,
        }
    };
    let budget = |gap: f64| -> usize {
        let est = 10.0 * p as f64 * (1.0 + (hi - lo) / gap);
        if gap > 0.0 && est.is_finite() {
            (est.ceil() as usize).clamp(1, SWEEP_CAP)
        } else {
            SWEEP_CAP
        }
    };
    let mut max_sweeps = budget(cheap_gap);
    let mut refined = false;

    let mut v = c.to_vec();
    let mut sweeps = 0;
    let mut last_change = f64::INFINITY;
    loop {
        if sweeps >= max_sweeps {
            // slow progress is governed by the smallest signed cycle sum,
            // which is only worth enumerating when the cheap budget runs out
            if refined || sides != Sides::Both {
                break;
            }
            refined = true;
            max_sweeps = budget(signed_cycle_gap(down, up)).max(max_sweeps);
            if sweeps >= max_sweeps {
                break;
            }
        }
        sweeps += 1;
        let mut change = 0.0f64;
        for i in 0..p {
            let nxt = v[(i + 1) % p];
            let lower = nxt - down[i];
            let upper = nxt + up[i];
            let new = match (sides, orientation) {
                (Sides::Both, Orientation::MinMax) => lower.max(upper.min(c[i])),
                (Sides::Both, Orientation::MaxMin) => upper.min(lower.max(c[i])),
                (Sides::LowerOnly, _) => lower.max(c[i]),
                (Sides::UpperOnly, _) => upper.min(c[i]),
            };
            change = change.max((new - v[i]).abs());
            v[i] = new;
        }
        last_change = change;
        if change < CHANGE_TOL * scale {
            break;
        }
    }
    if !(last_change < CHANGE_TOL * scale) {
        return Err(Error::ClampNonConvergence { sweeps, last_change });
    }

    let tol = RESIDUAL_TOL * scale;
    let mut regimes = Vec::with_capacity(p);
    for i in 0..p {
        let nxt = v[(i + 1) % p];
        let to_lower = v[i] - (nxt - down[i]);
        let to_upper = v[i] - (nxt + up[i]);
        let to_c = v[i] - c[i];
        let residual = match (sides, orientation) {
            (Sides::Both, Orientation::MinMax) => to_lower.min(to_upper.max(to_c)),
            (Sides::Both, Orientation::MaxMin) => to_upper.max(to_lower.min(to_c)),
            (Sides::LowerOnly, _) => to_lower.min(to_c),
            (Sides::UpperOnly, _) => to_upper.max(to_c),
        };
        if residual.abs() > tol {
            return Err(Error::ClampNonConvergence {
                sweeps,
                last_change: residual.abs(),
            });
        }
        regimes.push(tag(to_lower, to_upper, sides, tol));
    }
    Ok(Clamped {
        values: v,
        regimes,
        sweeps,
    })
}

/// Smallest `|sum_i s_i|` over `s_i in {-down_i, up_i}`, enumerated for up
/// to 20 modes; larger systems fall back to the one-sided sums.
fn signed_cycle_gap(down: &[f64], up: &[f64]) -> f64 {
    let p = down.len();
    if p > 20 {
        let sd: f64 = down.iter().sum();
        let su: f64 = up.iter().sum();
        return sd.min(su);
    }
    (0u32..1 << p)
        .map(|mask| {
            (0..p)
                .map(|i| if mask >> i & 1 == 1 { up[i] } else { -down[i] })
                .sum::<f64>()
                .abs()
        })
        .fold(f64::INFINITY, f64::min)
}

fn tag(to_lower: f64, to_upper: f64, sides: Sides, tol: f64) -> Regime {
    let lower = sides != Sides::UpperOnly && to_lower <= tol;
    let upper = sides != Sides::LowerOnly && to_upper >= -tol;
    if lower {
        Regime::LowerContact
    } else if upper {
        Regime::UpperContact
    } else {
        Regime::Interior
    }
}

/// Contact tags of an arbitrary value vector against the two obstacles.
pub fn regimes_of(v: &[f64], down: &[f64], up: &[f64], tol: f64) -> Vec<Regime> {
    let p = v.len();
    (0..p)
        .map(|i| {
            let nxt = v[(i + 1) % p];
            tag(v[i] - (nxt - down[i]), v[i] - (nxt + up[i]), Sides::Both, tol)
        })
        .collect()
}

pub(crate) const PICARD_TOL: f64 = 1e-10;
pub(crate) const PICARD_MAX: usize = 200;

/// Outcome of a failed same-node Picard loop.
#[derive(Debug)]
pub(crate) enum NodeFailure {
    Diverged { last_change: f64 },
    Other(Error),
}

impl From<Error> for NodeFailure {
    fn from(e: Error) -> Self {
        NodeFailure::Other(e)
    }
}

impl NodeFailure {
    pub(crate) fn into_error(self, slice: usize) -> Error {
        match self {
            NodeFailure::Diverged { last_change } => Error::PicardDivergence { slice, last_change },
            NodeFailure::Other(e) => e,
        }
    }
}

/// Continuation plus running reward, then clamp, iterated until the values
/// fed to the reward stop moving. The first reward evaluation uses `init`
/// (the next-slice values at the node).
#[allow(clippy::too_many_arguments)]
pub(crate) fn picard_clamp(
    problem: &SwitchingProblem,
    t: f64,
    x: &[f64],
    base: &[f64],
    dt: f64,
    init: &[f64],
    down: &[f64],
    up: &[f64],
    sides: Sides,
    orientation: Orientation,
) -> Result<Clamped, NodeFailure> {
    let p = base.len();
    let mut y = init.to_vec();
    let mut c = vec![0.0; p];
    let mut last_change = f64::INFINITY;
    for _ in 0..PICARD_MAX {
        for i in 0..p {
            let f = problem.reward(i, t, x, &y);
            if !f.is_finite() {
                return Err(Error::Evaluation {
                    field: format!("f^{}", i + 1),
                    t,
                    x: x.to_vec(),
                }
                .into());
            }
            c[i] = base[i] + dt * f;
        }
        let out = clamp_modes_with(&c, down, up, sides, orientation)?;
        last_change = out
            .values
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        y.copy_from_slice(&out.values);
        if last_change < PICARD_TOL {
            return Ok(out);
        }
        if !last_change.is_finite() {
            break;
        }
    }
    Err(NodeFailure::Diverged { last_change })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_mode_hand_fixed_point() {
        // sweep 1: v1 = median(0, 9, 11) = 9, v2 = median(10, 8, 10) = 10
        let out = clamp_modes(&[0.0, 10.0], &[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(out.values, vec![9.0, 10.0]);
        assert_eq!(out.regimes, vec![Regime::LowerContact, Regime::UpperContact]);
        // residual identities by hand
        let (v1, v2) = (9.0f64, 10.0f64);
        assert_eq!((v1 - (v2 - 1.0)).min((v1 - (v2 + 1.0)).max(v1 - 0.0)), 0.0);
        assert_eq!((v2 - (v1 - 1.0)).min((v2 - (v1 + 1.0)).max(v2 - 10.0)), 0.0);
    }

    #[test]
    fn interior_values_untouched() {
        let c = [5.0, 5.0];
        let out = clamp_modes(&c, &[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(out.values, c.to_vec());
        assert!(out.regimes.iter().all(|r| *r == Regime::Interior));
        let c = [0.1, -0.2, 0.05];
        let out = clamp_modes(&c, &[1.0; 3], &[1.0; 3]).unwrap();
        assert_eq!(out.values, c.to_vec());
    }

    #[test]
    fn maxmin_matches_minmax_on_hand_fixture() {
        let out = clamp_modes_with(&[0.0, 10.0], &[1.0, 1.0], &[1.0, 1.0], Sides::Both, Orientation::MaxMin).unwrap();
        assert_eq!(out.values, vec![9.0, 10.0]);
    }

    #[test]
    fn tie_at_contact_is_lower() {
        // v1 = c1 = v2 - 1 exactly
        let out = clamp_modes(&[9.0, 10.0], &[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(out.regimes[0], Regime::LowerContact);
    }

    #[test]
    fn one_sided_clamps() {
        let lower = clamp_modes_with(
            &[0.0, 10.0],
            &[1.0, 1.0],
            &[1.0, 1.0],
            Sides::LowerOnly,
            Orientation::MinMax,
        )
        .unwrap();
        assert_eq!(lower.values, vec![9.0, 10.0]);
        let upper = clamp_modes_with(
            &[0.0, 10.0],
            &[1.0, 1.0],
            &[1.0, 1.0],
            Sides::UpperOnly,
            Orientation::MinMax,
        )
        .unwrap();
        assert_eq!(upper.values, vec![0.0, 1.0]);
        assert_eq!(upper.regimes[1], Regime::UpperContact);
    }

    #[test]
    fn rejects_zero_gap() {
        assert!(clamp_modes(&[0.0, 1.0], &[0.0, 1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn near_free_loop_takes_many_sweeps() {
        // mixed cycle sum up_1 - down_2 = 1e-3: v1 creeps up by 1e-3 per sweep
        let out = clamp_modes(&[10.0, 0.0], &[1.0, 0.5], &[0.501, 1.0]).unwrap();
        assert!(out.sweeps > 5_000, "sweeps={}", out.sweeps);
        assert!((out.values[0] - 10.0).abs() < 1e-9);
        let err = clamp_modes(&[10.0, 0.0], &[1.0, 0.5], &[0.5 + 1e-9, 1.0]).unwrap_err();
        assert!(matches!(err, Error::ClampNonConvergence { .. }));
    }

    proptest! {
        #[test]
        fn clamp_satisfies_barriers_and_residual(
            c in prop::collection::vec(-20.0f64..20.0, 2..7),
            gaps in prop::collection::vec((0.05f64..3.0, 0.05f64..3.0), 7),
        ) {
            let p = c.len();
            let down: Vec<f64> = gaps[..p].iter().map(|g| g.0).collect();
            let up: Vec<f64> = gaps[..p].iter().map(|g| g.1).collect();
            let a = clamp_modes(&c, &down, &up).unwrap();
            let b = clamp_modes_with(&c, &down, &up, Sides::Both, Orientation::MaxMin).unwrap();
            for i in 0..p {
                let j = (i + 1) % p;
                prop_assert!(a.values[i] >= a.values[j] - down[i] - 1e-10);
                prop_assert!(a.values[i] <= a.values[j] + up[i] + 1e-10);
                prop_assert!((a.values[i] - b.values[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn clamp_is_monotone_in_continuation(
            c in prop::collection::vec(-20.0f64..20.0, 3),
            bump in 0.0f64..5.0,
            k in 0usize..3,
        ) {
            let g = [0.5, 0.7, 0.4];
            let a = clamp_modes(&c, &g, &g).unwrap();
            let mut c2 = c.clone();
            c2[k] += bump;
            let b = clamp_modes(&c2, &g, &g).unwrap();
            for i in 0..3 {
                prop_assert!(b.values[i] >= a.values[i] - 1e-10);
            }
        }
    }
}
