//! Checks of the standing assumptions on a concrete problem.
//!
//! Consistency, cost signs and the non-free-loop property are exact on the
//! supplied grid. Lipschitz, monotonicity and growth checks are sample-based:
//! a failure carries a concrete counterexample, a pass is only evidence.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{CostShape, SwitchingProblem};
use crate::error::{Error, Result};

/// Largest mode count for which all `2^p` cost assignments are enumerated.
pub const MAX_ENUMERATED_MODES: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Assumption {
    /// Lipschitz drift and volatility.
    H0,
    /// Terminal consistency `h^{i+1} - g_down <= h^i <= h^{i+1} + g_up`.
    H2,
    /// Non-negative costs with positive sum.
    H3a,
    /// Non-free loop.
    H3b,
    /// Non-decreasing cost processes.
    H4,
    /// Off-diagonal monotonicity of the running rewards.
    H5b,
    /// Declared polynomial growth class.
    Growth,
}

impl fmt::Display for Assumption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Assumption::H0 => "H0",
            Assumption::H2 => "H2",
            Assumption::H3a => "H3a",
            Assumption::H3b => "H3b",
            Assumption::H4 => "H4",
            Assumption::H5b => "H5b",
            Assumption::Growth => "growth",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Pass,
    Fail,
    HeuristicPass,
    /// Sampled counterexample: conclusive.
    HeuristicFail,
    /// Not certified and not refuted.
    Unverified,
}

impl Verdict {
    pub fn is_failure(self) -> bool {
        matches!(self, Verdict::Fail | Verdict::HeuristicFail)
    }
}

/// Point (and optionally mode or sign assignment) at which a check failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    /// 1-based mode, when the check is per mode.
    pub mode: Option<usize>,
    pub t: Option<f64>,
    pub x: Vec<f64>,
    pub note: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditCheck {
    pub name: String,
    pub assumption: Assumption,
    pub verdict: Verdict,
    pub witness: Option<Witness>,
    pub measured: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AuditReport {
    pub checks: Vec<AuditCheck>,
}

impl AuditReport {
    pub fn overall(&self) -> bool {
        !self.checks.iter().any(|c| c.verdict.is_failure())
    }

    pub fn extend(&mut self, other: AuditReport) {
        self.checks.extend(other.checks);
    }

    /// Assumptions with at least one failing check.
    pub fn violated(&self) -> Vec<Assumption> {
        let mut out: Vec<Assumption> = Vec::new();
        for c in &self.checks {
            if c.verdict.is_failure() && !out.contains(&c.assumption) {
                out.push(c.assumption);
            }
        }
        out
    }

    /// True if any failing check is an exact (non-sampled) check.
    pub fn has_exact_failure(&self) -> bool {
        self.checks.iter().any(|c| c.verdict == Verdict::Fail)
    }

    pub fn find(&self, name: &str) -> Option<&AuditCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&format!(
                "{:<28} {:<6} {:<14} measured={:<12.6e}",
                c.name,
                c.assumption.to_string(),
                format!("{:?}", c.verdict),
                c.measured
            ));
            if let Some(w) = &c.witness {
                s.push_str(&format!(
                    " witness: mode={:?} t={:?} x={:?} {}",
                    w.mode, w.t, w.x, w.note
                ));
            }
            s.push('\n');
        }
        s.push_str(&format!("overall: {}\n", if self.overall() { "pass" } else { "FAIL" }));
        s
    }
}

fn finite_or_err(value: f64, field: impl Into<String>, t: f64, x: &[f64]) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Evaluation {
            field: field.into(),
            t,
            x: x.to_vec(),
        })
    }
}

/// Terminal consistency on `x_grid`. The measured value is the smallest slack.
pub fn validate_consistency<P: AsRef<[f64]>>(problem: &SwitchingProblem, x_grid: &[P]) -> Result<AuditReport> {
    if x_grid.is_empty() {
        return Err(Error::InvalidArgument("consistency grid is empty".into()));
    }
    let p = problem.p();
    let t = problem.horizon();
    let mut worst = f64::INFINITY;
    let mut witness = None;
    for x in x_grid {
        let x = x.as_ref();
        for i in 0..p {
            let j = problem.next(i);
            let hi = finite_or_err(problem.terminal(i, x), format!("h^{}", i + 1), t, x)?;
            let hj = finite_or_err(problem.terminal(j, x), format!("h^{}", j + 1), t, x)?;
            let down = finite_or_err(problem.cost_down(i, t, x), format!("g_down[{}]", i + 1), t, x)?;
            let up = finite_or_err(problem.cost_up(i, t, x), format!("g_up[{}]", i + 1), t, x)?;
            let lower_slack = hi - (hj - down);
            let upper_slack = (hj + up) - hi;
            let slack = lower_slack.min(upper_slack);
            if slack < worst {
                worst = slack;
                if slack < 0.0 {
                    let side = if lower_slack < upper_slack {
                        "below lower"
                    } else {
                        "above upper"
                    };
                    witness = Some(Witness {
                        mode: Some(i + 1),
                        t: Some(t),
                        x: x.to_vec(),
                        note: format!("h^{} {side} bound by {}", i + 1, -slack),
                    });
                }
            }
        }
    }
    let verdict = if worst >= 0.0 { Verdict::Pass } else { Verdict::Fail };
    Ok(AuditReport {
        checks: vec![AuditCheck {
            name: "terminal-consistency".into(),
            assumption: Assumption::H2,
            verdict,
            witness: if verdict == Verdict::Pass { None } else { witness },
            measured: worst,
        }],
    })
}

/// Costs non-negative with positive sum at every grid point.
pub fn check_cost_signs<P: AsRef<[f64]>>(problem: &SwitchingProblem, tx_grid: &[(f64, P)]) -> Result<AuditReport> {
    if tx_grid.is_empty() {
        return Err(Error::InvalidArgument("cost grid is empty".into()));
    }
    let mut worst = f64::INFINITY;
    let mut witness = None;
    for (t, x) in tx_grid {
        let (t, x) = (*t, x.as_ref());
        for i in 0..problem.p() {
            let down = finite_or_err(problem.cost_down(i, t, x), format!("g_down[{}]", i + 1), t, x)?;
            let up = finite_or_err(problem.cost_up(i, t, x), format!("g_up[{}]", i + 1), t, x)?;
            // Zero sum is as bad as a negative cost, so both count toward `worst`.
            let (margin, note) = if down.min(up) < 0.0 {
                (down.min(up), format!("negative cost: g_down={down}, g_up={up}"))
            } else {
                (down + up, format!("g_down + g_up = {}", down + up))
            };
            let bad = down < 0.0 || up < 0.0 || down + up <= 0.0;
            if margin < worst || (bad && witness.is_none()) {
                worst = worst.min(margin);
                if bad && witness.is_none() {
                    witness = Some(Witness {
                        mode: Some(i + 1),
                        t: Some(t),
                        x: x.to_vec(),
                        note,
                    });
                }
            }
        }
    }
    let verdict = if witness.is_none() {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(AuditReport {
        checks: vec![AuditCheck {
            name: "cost-signs".into(),
            assumption: Assumption::H3a,
            verdict,
            witness,
            measured: worst,
        }],
    })
}

/// Non-free-loop property: every signed cycle sum over all `2^p` choices of
/// `-g_down` / `+g_up` per transition is non-zero. Also checks the two
/// one-sided cycle sums. Above [`MAX_ENUMERATED_MODES`] modes the assignments
/// are sampled and the verdict is heuristic.
pub fn check_nonfree_loop<P: AsRef<[f64]>>(problem: &SwitchingProblem, tx_grid: &[(f64, P)]) -> Result<AuditReport> {
    if tx_grid.is_empty() {
        return Err(Error::InvalidArgument("non-free-loop grid is empty".into()));
    }
    let p = problem.p();
    if p > 64 {
        return Err(Error::InvalidArgument(format!(
            "non-free-loop sampling supports at most 64 modes, got {p}"
        )));
    }
    let exhaustive = p <= MAX_ENUMERATED_MODES;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6e666c70);
    let n_sampled = 1usize << 16;

    let mut min_abs = f64::INFINITY;
    let mut loop_witness = None;
    let mut min_up = f64::INFINITY;
    let mut up_witness = None;
    let mut min_down = f64::INFINITY;
    let mut down_witness = None;

    let mut down = vec![0.0; p];
    let mut up = vec![0.0; p];
    for (t, x) in tx_grid {
        let (t, x) = (*t, x.as_ref());
        for i in 0..p {
            down[i] = finite_or_err(problem.cost_down(i, t, x), format!("g_down[{}]", i + 1), t, x)?;
            up[i] = finite_or_err(problem.cost_up(i, t, x), format!("g_up[{}]", i + 1), t, x)?;
        }
        let scale = down
            .iter()
            .chain(up.iter())
            .fold(0.0f64, |a, v| a.max(v.abs()))
            .max(1.0);
        let zero_tol = 1e-12 * scale;

        let visit = |mask: u64, min_abs: &mut f64, witness: &mut Option<Witness>| {
            let sum: f64 = (0..p).map(|l| if mask >> l & 1 == 1 { up[l] } else { -down[l] }).sum();
            if sum.abs() < *min_abs {
                *min_abs = sum.abs();
            }
            if sum.abs() <= zero_tol && witness.is_none() {
                let signs: String = (0..p).map(|l| if mask >> l & 1 == 1 { '+' } else { '-' }).collect();
                *witness = Some(Witness {
                    mode: None,
                    t: Some(t),
                    x: x.to_vec(),
                    note: format!("assignment {signs} (+ = g_up, - = g_down) sums to {sum}"),
                });
            }
        };
        if exhaustive {
            for mask in 0..(1u64 << p) {
                visit(mask, &mut min_abs, &mut loop_witness);
            }
        } else {
            for _ in 0..n_sampled {
                let mask: u64 = rng.gen();
                visit(mask, &mut min_abs, &mut loop_witness);
            }
        }

        let sum_up: f64 = up.iter().sum();
        let sum_down: f64 = down.iter().sum();
        if sum_up < min_up {
            min_up = sum_up;
        }
        if sum_up <= 0.0 && up_witness.is_none() {
            up_witness = Some(Witness {
                mode: None,
                t: Some(t),
                x: x.to_vec(),
                note: format!("sum of g_up over the cycle = {sum_up}"),
            });
        }
        if sum_down < min_down {
            min_down = sum_down;
        }
        if sum_down <= 0.0 && down_witness.is_none() {
            down_witness = Some(Witness {
                mode: None,
                t: Some(t),
                x: x.to_vec(),
                note: format!("sum of g_down over the cycle = {sum_down}"),
            });
        }
    }

    let pass_verdict = if exhaustive {
        Verdict::Pass
    } else {
        Verdict::HeuristicPass
    };
    let verdict_of = |w: &Option<Witness>| if w.is_some() { Verdict::Fail } else { pass_verdict };
    Ok(AuditReport {
        checks: vec![
            AuditCheck {
                name: "non-free-loop".into(),
                assumption: Assumption::H3b,
                verdict: verdict_of(&loop_witness),
                witness: loop_witness,
                measured: min_abs,
            },
            AuditCheck {
                name: "cycle-sum-up".into(),
                assumption: Assumption::H3b,
                verdict: if up_witness.is_some() {
                    Verdict::Fail
                } else {
                    Verdict::Pass
                },
                witness: up_witness,
                measured: min_up,
            },
            AuditCheck {
                name: "cycle-sum-down".into(),
                assumption: Assumption::H3b,
                verdict: if down_witness.is_some() {
                    Verdict::Fail
                } else {
                    Verdict::Pass
                },
                witness: down_witness,
                measured: min_down,
            },
        ],
    })
}

const SCALES: [f64; 3] = [1.0, 10.0, 100.0];

fn random_point(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-radius..=radius)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn point_on_sphere(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let v = random_point(rng, dim, 1.0);
        let r = norm(&v);
        if r > 1e-3 {
            return v.into_iter().map(|a| a * radius / r).collect();
        }
    }
}

/// Sample-based checks of Lipschitz dynamics, off-diagonal monotone rewards,
/// growth of rewards and terminal payoffs within the declared class, plus a
/// structural certificate for non-decreasing cost processes.
pub fn audit_regularity(problem: &SwitchingProblem, sampler_seed: u64, n_samples: usize) -> Result<AuditReport> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument("audit_regularity needs n_samples >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampler_seed);
    let mut report = AuditReport::default();
    report.checks.push(lipschitz_check(problem, &mut rng, n_samples)?);
    report.checks.push(monotonicity_check(problem, &mut rng, n_samples)?);
    report.checks.push(growth_check(problem, &mut rng, n_samples)?);
    report.checks.push(cost_monotonicity_certificate(problem));
    Ok(report)
}

fn lipschitz_check(problem: &SwitchingProblem, rng: &mut ChaCha8Rng, n_samples: usize) -> Result<AuditCheck> {
    let k = problem.dim_x();
    let d = problem.brownian_dim();
    let t_max = problem.horizon();
    let mut b1 = vec![0.0; k];
    let mut b2 = vec![0.0; k];
    let mut s1 = vec![0.0; k * d];
    let mut s2 = vec![0.0; k * d];
    // Largest difference quotient per sampling radius.
    let mut quotients = [0.0f64; SCALES.len()];
    let mut argmax: [Option<(f64, Vec<f64>)>; SCALES.len()] = Default::default();
    for (si, &radius) in SCALES.iter().enumerate() {
        for _ in 0..n_samples {
            let t = rng.gen_range(0.0..=t_max);
            let x = random_point(rng, k, radius);
            let y = random_point(rng, k, radius);
            let dist = norm(&x.iter().zip(&y).map(|(a, b)| a - b).collect::<Vec<_>>());
            if dist < 1e-9 {
                continue;
            }
            problem.drift(t, &x, &mut b1);
            problem.drift(t, &y, &mut b2);
            problem.vol(t, &x, &mut s1);
            problem.vol(t, &y, &mut s2);
            for v in b1.iter().chain(&b2).chain(&s1).chain(&s2) {
                finite_or_err(*v, "drift/vol", t, &x)?;
            }
            let db = norm(&b1.iter().zip(&b2).map(|(a, b)| a - b).collect::<Vec<_>>());
            let ds = norm(&s1.iter().zip(&s2).map(|(a, b)| a - b).collect::<Vec<_>>());
            let q = (db + ds) / dist;
            if q > quotients[si] {
                quotients[si] = q;
                argmax[si] = Some((t, x));
            }
        }
    }
    let small = quotients[0];
    let large = quotients[SCALES.len() - 1];
    let failed = large > 10.0 * small + 1.0;
    let witness = if failed {
        argmax[SCALES.len() - 1].take().map(|(t, x)| Witness {
            mode: None,
            t: Some(t),
            x,
            note: format!(
                "difference quotient {large:.4e} at radius {} vs {small:.4e} at radius {}",
                SCALES[SCALES.len() - 1],
                SCALES[0]
            ),
        })
    } else {
        None
    };
    Ok(AuditCheck {
        name: "lipschitz-dynamics".into(),
        assumption: Assumption::H0,
        verdict: if failed {
            Verdict::HeuristicFail
        } else {
            Verdict::HeuristicPass
        },
        witness,
        measured: large,
    })
}

fn monotonicity_check(problem: &SwitchingProblem, rng: &mut ChaCha8Rng, n_samples: usize) -> Result<AuditCheck> {
    let p = problem.p();
    let k = problem.dim_x();
    let t_max = problem.horizon();
    let mut worst_drop = 0.0f64;
    let mut witness = None;
    for _ in 0..n_samples {
        let t = rng.gen_range(0.0..=t_max);
        let x = random_point(rng, k, 5.0);
        let y = random_point(rng, p, 20.0);
        for i in 0..p {
            let base = finite_or_err(problem.reward(i, t, &x, &y), format!("f^{}", i + 1), t, &x)?;
            for j in (0..p).filter(|&j| j != i) {
                let mut y2 = y.clone();
                y2[j] += rng.gen_range(0.01..5.0);
                let bumped = finite_or_err(problem.reward(i, t, &x, &y2), format!("f^{}", i + 1), t, &x)?;
                let drop = base - bumped;
                let tol = 1e-12 * base.abs().max(1.0);
                if drop > tol && drop > worst_drop {
                    worst_drop = drop;
                    witness = Some(Witness {
                        mode: Some(i + 1),
                        t: Some(t),
                        x: x.clone(),
                        note: format!(
                            "raising y^{} from {} to {} lowers f^{} by {drop:.4e}",
                            j + 1,
                            y[j],
                            y2[j],
                            i + 1
                        ),
                    });
                }
            }
        }
    }
    Ok(AuditCheck {
        name: "off-diagonal-monotone".into(),
        assumption: Assumption::H5b,
        verdict: if witness.is_some() {
            Verdict::HeuristicFail
        } else {
            Verdict::HeuristicPass
        },
        witness,
        measured: worst_drop,
    })
}

fn growth_check(problem: &SwitchingProblem, rng: &mut ChaCha8Rng, n_samples: usize) -> Result<AuditCheck> {
    let p = problem.p();
    let k = problem.dim_x();
    let gamma = problem.growth_exponent() as i32;
    let t_max = problem.horizon();
    let zeros = vec![0.0; p];
    let mut worst_factor = 0.0f64;
    let mut witness = None;
    // (label, per-scale envelope ratio, point of the largest-scale maximum)
    for mode in 0..p {
        for which in ["f", "h"] {
            let mut ratios = [0.0f64; SCALES.len()];
            let mut at_max: Option<(f64, Vec<f64>)> = None;
            for (si, &radius) in SCALES.iter().enumerate() {
                let envelope = 1.0 + radius.powi(gamma);
                for _ in 0..n_samples {
                    let t = rng.gen_range(0.0..=t_max);
                    let x = point_on_sphere(rng, k, radius);
                    let v = if which == "f" {
                        problem.reward(mode, t, &x, &zeros)
                    } else {
                        problem.terminal(mode, &x)
                    };
                    let v = finite_or_err(v, format!("{which}^{}", mode + 1), t, &x)?;
                    let r = v.abs() / envelope;
                    if r > ratios[si] {
                        ratios[si] = r;
                        if si == SCALES.len() - 1 {
                            at_max = Some((t, x));
                        }
                    }
                }
            }
            let reference = ratios[..SCALES.len() - 1].iter().cloned().fold(0.0, f64::max);
            let last = ratios[SCALES.len() - 1];
            let factor = last / reference.max(1e-12);
            if last > 1e-12 && factor > worst_factor {
                worst_factor = factor;
            }
            if last > 4.0 * reference + 1e-9 && witness.is_none() {
                let (t, x) = at_max.unwrap_or((0.0, vec![0.0; k]));
                witness = Some(Witness {
                    mode: Some(mode + 1),
                    t: Some(t),
                    x,
                    note: format!(
                        "|{which}|/(1+|x|^{gamma}) = {last:.4e} at radius {} vs {reference:.4e} nearer the origin",
                        SCALES[SCALES.len() - 1]
                    ),
                });
            }
        }
    }
    Ok(AuditCheck {
        name: "polynomial-growth".into(),
        assumption: Assumption::Growth,
        verdict: if witness.is_some() {
            Verdict::HeuristicFail
        } else {
            Verdict::HeuristicPass
        },
        witness,
        measured: worst_factor,
    })
}

fn cost_monotonicity_certificate(problem: &SwitchingProblem) -> AuditCheck {
    let certified = (0..problem.p()).all(|i| {
        [problem.cost_down_spec(i).shape(), problem.cost_up_spec(i).shape()]
            .iter()
            .all(|s| matches!(s, CostShape::Constant | CostShape::TimeNondecreasing))
    });
    AuditCheck {
        name: "monotone-cost-processes".into(),
        assumption: Assumption::H4,
        verdict: if certified { Verdict::Pass } else { Verdict::Unverified },
        witness: None,
        measured: if certified { 1.0 } else { 0.0 },
    }
}

/// Exact audits a grid solver relies on: terminal consistency on `xs` and
/// the non-free-loop property on every `(t, x)` of the grid. Constant costs
/// are checked at a single point.
pub fn preflight(problem: &SwitchingProblem, times: &[f64], xs: &[f64]) -> Result<AuditReport> {
    let points: Vec<[f64; 1]> = xs.iter().map(|&x| [x]).collect();
    let mut report = validate_consistency(problem, &points)?;
    let constant = (0..problem.p()).all(|i| {
        problem.cost_down_spec(i).shape() == CostShape::Constant
            && problem.cost_up_spec(i).shape() == CostShape::Constant
    });
    let tx: Vec<(f64, [f64; 1])> = if constant {
        vec![(times[0], points[0])]
    } else {
        times
            .iter()
            .flat_map(|&t| points.iter().map(move |x| (t, *x)))
            .collect()
    };
    report.extend(check_nonfree_loop(problem, &tx)?);
    if report.has_exact_failure() {
        return Err(Error::InvalidProblem(format!(
            "assumption audit failed (use --force to override):\n{}",
            report.to_text()
        )));
    }
    Ok(report)
}
