//! Explicit monotone finite differences for the one-dimensional obstacle
//! system, its max-min twin, the penalized system and the monotone
//! penalization ladders.
//!
//! Interior rows use a central second difference and an upwind first
//! difference. Boundary rows drop the second difference and keep the drift
//! term only when it points into the domain, which keeps every row monotone.

use rayon::prelude::*;

use crate::clamp::{picard_clamp, regimes_of, Clamped, NodeFailure, Orientation, Sides};
use crate::error::{Error, Result};
use crate::field::{Axis, Provenance, ValueField};
use crate::lattice::costs_at;
use crate::model::{penalty_terms, SwitchingProblem};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub t0: f64,
    /// Number of time steps M.
    pub n_steps: usize,
    pub n_x: usize,
    pub x_min: f64,
    pub x_max: f64,
}

impl GridSpec {
    /// Domain `x0 +- 6 sigma sqrt(T - t0)` with sigma taken at `(t0, x0)`
    /// and widened once to the largest sigma seen on that first domain.
    pub fn around(problem: &SwitchingProblem, t0: f64, x0: f64, n_steps: usize, n_x: usize) -> Self {
        let span = problem.horizon() - t0;
        let mut s = problem.variance_1d(t0, x0).sqrt();
        let half = 6.0 * s * span.sqrt();
        if half > 0.0 {
            for k in 0..n_x.max(2) {
                let x = x0 - half + 2.0 * half * k as f64 / (n_x.max(2) - 1) as f64;
                let v = problem.variance_1d(t0, x).sqrt();
                if v.is_finite() {
                    s = s.max(v);
                }
            }
        }
        let half = 6.0 * s * span.sqrt();
        let half = if half > 0.0 { half } else { 1.0 };
        Self {
            t0,
            n_steps,
            n_x,
            x_min: x0 - half,
            x_max: x0 + half,
        }
    }

    pub fn validate(&self, problem: &SwitchingProblem) -> Result<()> {
        problem.require_one_dimensional()?;
        if self.n_steps == 0 || self.n_x < 3 {
            return Err(Error::InvalidArgument(format!(
                "grid needs M >= 1 and n_x >= 3 (got M={}, n_x={})",
                self.n_steps, self.n_x
            )));
        }
        if !(self.x_min < self.x_max) || !self.x_min.is_finite() || !self.x_max.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "bad x-range [{}, {}]",
                self.x_min, self.x_max
            )));
        }
        if !(self.t0 < problem.horizon()) {
            return Err(Error::InvalidArgument(format!(
                "start time {} is not before the horizon {}",
                self.t0,
                problem.horizon()
            )));
        }
        Ok(())
    }

    pub fn time_axis(&self, horizon: f64) -> Axis {
        Axis::new(self.t0, horizon, self.n_steps + 1)
    }

    pub fn space_axis(&self) -> Axis {
        Axis::new(self.x_min, self.x_max, self.n_x)
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_x - 1) as f64
    }

    pub fn dt(&self, horizon: f64) -> f64 {
        (horizon - self.t0) / self.n_steps as f64
    }
}

/// Worst `dt (sigma^2/dx^2 + |b|/dx + stiffness)` over the grid.
pub fn cfl_ratio(problem: &SwitchingProblem, grid: &GridSpec, stiffness: f64) -> Result<(f64, f64)> {
    let dt = grid.dt(problem.horizon());
    let dx = grid.dx();
    let space = grid.space_axis();
    let mut worst = (f64::NEG_INFINITY, space.start);
    for j in 0..grid.n_steps {
        let t = grid.t0 + j as f64 * dt;
        for k in 0..grid.n_x {
            let x = space.at(k);
            let (b, v) = coefficients(problem, t, x)?;
            let r = dt * (v / (dx * dx) + b.abs() / dx + stiffness);
            if r > worst.0 {
                worst = (r, x);
            }
        }
    }
    Ok(worst)
}

fn check_cfl(problem: &SwitchingProblem, grid: &GridSpec, stiffness: f64) -> Result<f64> {
    let (ratio, x) = cfl_ratio(problem, grid, stiffness)?;
    if ratio > 1.0 + 1e-12 {
        return Err(Error::Cfl {
            x,
            ratio,
            hint: if stiffness > 0.0 {
                "penalty-stiff: increase the number of time steps"
            } else {
                "increase the number of time steps or coarsen the x-grid"
            },
        });
    }
    Ok(ratio)
}

fn coefficients(problem: &SwitchingProblem, t: f64, x: f64) -> Result<(f64, f64)> {
    let b = problem.drift_1d(t, x);
    let v = problem.variance_1d(t, x);
    if !b.is_finite() || !v.is_finite() {
        return Err(Error::Evaluation {
            field: "b/sigma".into(),
            t,
            x: vec![x],
        });
    }
    Ok((b, v))
}

/// `w + dt * (1/2 sigma^2 D2 w + b D w)` at node `k` for every mode, without
/// the running reward. `w` holds the slice node-major (`k * p + i`).
#[inline]
#[allow(clippy::too_many_arguments)]
fn transport(w: &[f64], p: usize, k: usize, n: usize, dt: f64, dx: f64, b: f64, var: f64, out: &mut [f64]) {
    let at = |kk: usize, i: usize| w[kk * p + i];
    for (i, o) in out.iter_mut().enumerate() {
        let mid = at(k, i);
        let mut l = 0.0;
        if k > 0 && k + 1 < n {
            let d2 = (at(k + 1, i) - 2.0 * mid + at(k - 1, i)) / (dx * dx);
            let d1 = if b >= 0.0 {
                (at(k + 1, i) - mid) / dx
            } else {
                (mid - at(k - 1, i)) / dx
            };
            l = 0.5 * var * d2 + b * d1;
        } else if k == 0 && b > 0.0 && n > 1 {
            l = b * (at(1, i) - mid) / dx;
        } else if k + 1 == n && b < 0.0 && n > 1 {
            l = b * (mid - at(k - 1, i)) / dx;
        }
        *o = mid + dt * l;
    }
}

/// One explicit step from slice `j + 1` (values `w`) to the continuation
/// slice at `t_j`, with the running reward evaluated at `w`.
pub fn step_parabolic(problem: &SwitchingProblem, grid: &GridSpec, j: usize, w: &[f64]) -> Result<Vec<f64>> {
    grid.validate(problem)?;
    let p = problem.p();
    if w.len() != grid.n_x * p || j >= grid.n_steps {
        return Err(Error::InvalidArgument("slice does not match the grid".into()));
    }
    let dt = grid.dt(problem.horizon());
    let dx = grid.dx();
    let t = grid.t0 + j as f64 * dt;
    let space = grid.space_axis();
    let mut out = vec![0.0; w.len()];
    for k in 0..grid.n_x {
        let x = [space.at(k)];
        let (b, var) = coefficients(problem, t, x[0])?;
        let ratio = dt * (var / (dx * dx) + b.abs() / dx);
        if ratio > 1.0 + 1e-12 {
            return Err(Error::Cfl {
                x: x[0],
                ratio,
                hint: "increase the number of time steps or coarsen the x-grid",
            });
        }
        let node = &mut out[k * p..(k + 1) * p];
        transport(w, p, k, grid.n_x, dt, dx, b, var, node);
        for (i, c) in node.iter_mut().enumerate() {
            *c += dt * finite_reward(problem, i, t, &x, &w[k * p..(k + 1) * p])?;
        }
    }
    Ok(out)
}

fn finite_reward(problem: &SwitchingProblem, i: usize, t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    let f = problem.reward(i, t, x, y);
    if f.is_finite() {
        Ok(f)
    } else {
        Err(Error::Evaluation {
            field: format!("f^{}", i + 1),
            t,
            x: x.to_vec(),
        })
    }
}

/// How a slice is completed from the transported values.
#[derive(Debug, Clone, Copy)]
enum Closure {
    /// Clamp both obstacles with Picard refinement of the reward.
    Direct(Orientation),
    /// Explicit doubly penalized driver at the next-slice values.
    Penalized { m: f64, n: f64 },
    /// Reflect at `L`, penalize above `U` with stiffness `m`.
    Decreasing { m: f64 },
    /// Reflect at `U`, penalize below `L` with stiffness `n`.
    Increasing { n: f64 },
}

fn march(problem: &SwitchingProblem, grid: &GridSpec, closure: Closure, provenance: Provenance) -> Result<ValueField> {
    grid.validate(problem)?;
    let stiffness = match closure {
        Closure::Direct(_) => 0.0,
        Closure::Penalized { m, n } => m + n,
        Closure::Decreasing { m } => m,
        Closure::Increasing { n } => n,
    };
    if stiffness < 0.0 || !stiffness.is_finite() {
        return Err(Error::InvalidArgument(format!("bad penalty {stiffness}")));
    }
    let ratio = check_cfl(problem, grid, stiffness)?;
    let horizon = problem.horizon();
    let p = problem.p();
    let dt = grid.dt(horizon);
    let dx = grid.dx();
    let n_x = grid.n_x;
    let space = grid.space_axis();
    let mut field = ValueField::zeros(provenance, grid.time_axis(horizon), space, p);
    field.cfl_ratio = Some(ratio);
    let m_last = grid.n_steps;
    let direct = matches!(closure, Closure::Direct(_));

    for k in 0..n_x {
        let x = [space.at(k)];
        for i in 0..p {
            let h = problem.terminal(i, &x);
            if !h.is_finite() {
                return Err(Error::Evaluation {
                    field: format!("h^{}", i + 1),
                    t: horizon,
                    x: x.to_vec(),
                });
            }
            field.node_mut(m_last, k)[i] = h;
        }
        if direct {
            let (down, up) = costs_at(problem, horizon, &x);
            let tags = regimes_of(field.node(m_last, k), &down, &up, 1e-10);
            field.regimes_slice_mut(m_last)[k * p..(k + 1) * p].copy_from_slice(&tags);
        }
    }

    for j in (0..m_last).rev() {
        let t = grid.t0 + j as f64 * dt;
        let w = field.slice(j + 1);
        let nodes: Vec<std::result::Result<Clamped, NodeFailure>> = (0..n_x)
            .into_par_iter()
            .map(|k| -> std::result::Result<Clamped, NodeFailure> {
                let x = [space.at(k)];
                let (b, var) = coefficients(problem, t, x[0])?;
                let mut base = vec![0.0; p];
                transport(w, p, k, n_x, dt, dx, b, var, &mut base);
                let wk = &w[k * p..(k + 1) * p];
                let (down, up) = costs_at(problem, t, &x);
                match closure {
                    Closure::Direct(orientation) => {
                        picard_clamp(problem, t, &x, &base, dt, wk, &down, &up, Sides::Both, orientation)
                    }
                    Closure::Penalized { m, n } => {
                        for i in 0..p {
                            let f = finite_reward(problem, i, t, &x, wk)?;
                            let pen = penalty_terms(wk[i], wk[(i + 1) % p], down[i], up[i], m, n);
                            base[i] += dt * (f + pen);
                        }
                        Ok(Clamped {
                            values: base,
                            regimes: Vec::new(),
                            sweeps: 0,
                        })
                    }
                    Closure::Decreasing { m } => {
                        for i in 0..p {
                            base[i] += dt * penalty_terms(wk[i], wk[(i + 1) % p], down[i], up[i], m, 0.0);
                        }
                        picard_clamp(
                            problem,
                            t,
                            &x,
                            &base,
                            dt,
                            wk,
                            &down,
                            &up,
                            Sides::LowerOnly,
                            Orientation::MinMax,
                        )
                    }
                    Closure::Increasing { n } => {
                        for i in 0..p {
                            base[i] += dt * penalty_terms(wk[i], wk[(i + 1) % p], down[i], up[i], 0.0, n);
                        }
                        picard_clamp(
                            problem,
                            t,
                            &x,
                            &base,
                            dt,
                            wk,
                            &down,
                            &up,
                            Sides::UpperOnly,
                            Orientation::MinMax,
                        )
                    }
                }
            })
            .collect();
        let mut values = Vec::with_capacity(n_x * p);
        let mut tags = Vec::with_capacity(n_x * p);
        for node in nodes {
            let c = node.map_err(|e| e.into_error(j))?;
            values.extend_from_slice(&c.values);
            tags.extend_from_slice(&c.regimes);
        }
        field.slice_mut(j).copy_from_slice(&values);
        if direct {
            field.regimes_slice_mut(j).copy_from_slice(&tags);
        }
    }
    Ok(field)
}

/// Min-max obstacle system by per-node clamping.
pub fn solve_minmax(problem: &SwitchingProblem, grid: &GridSpec) -> Result<ValueField> {
    march(
        problem,
        grid,
        Closure::Direct(Orientation::MinMax),
        Provenance::DirectMinMax,
    )
}

/// Max-min obstacle system; the residual is checked in max-min orientation.
pub fn solve_maxmin(problem: &SwitchingProblem, grid: &GridSpec) -> Result<ValueField> {
    march(
        problem,
        grid,
        Closure::Direct(Orientation::MaxMin),
        Provenance::DirectMaxMin,
    )
}

/// Doubly penalized system, fully explicit, no clamping.
pub fn solve_penalized(problem: &SwitchingProblem, grid: &GridSpec, m: f64, n: f64) -> Result<ValueField> {
    march(
        problem,
        grid,
        Closure::Penalized { m, n },
        Provenance::Penalized { m, n },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LadderDirection {
    /// Reflect at the lower obstacle, penalize above the upper one; values
    /// decrease as the penalty grows.
    Decreasing,
    /// Reflect at the upper obstacle, penalize below the lower one; values
    /// increase as the penalty grows.
    Increasing,
}

/// One rung of a ladder: one-sided reflection plus one-sided penalty.
pub fn solve_one_sided(
    problem: &SwitchingProblem,
    grid: &GridSpec,
    penalty: f64,
    direction: LadderDirection,
) -> Result<ValueField> {
    match direction {
        LadderDirection::Decreasing => march(
            problem,
            grid,
            Closure::Decreasing { m: penalty },
            Provenance::Penalized { m: penalty, n: 0.0 },
        ),
        LadderDirection::Increasing => march(
            problem,
            grid,
            Closure::Increasing { n: penalty },
            Provenance::Penalized { m: 0.0, n: penalty },
        ),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadderSchedule {
    /// Strictly increasing penalties.
    pub penalties: Vec<f64>,
    /// Inner penalty list of the doubly indexed scheme.
    pub inner: Vec<f64>,
    /// Stop early once consecutive rungs differ by less than this in sup-norm.
    pub cauchy_tol: f64,
    pub max_rungs: usize,
}

impl LadderSchedule {
    /// `1, 2, 4, ..., 2^j`.
    pub fn doubling(j: u32) -> Self {
        Self {
            penalties: (0..=j).map(|e| 2f64.powi(e as i32)).collect(),
            inner: Vec::new(),
            cauchy_tol: 0.0,
            max_rungs: usize::MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.penalties.is_empty() {
            return Err(Error::InvalidArgument("ladder schedule is empty".into()));
        }
        for list in [&self.penalties, &self.inner] {
            if list.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidArgument(
                    "ladder penalties must be finite and >= 0".into(),
                ));
            }
            if list.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::InvalidArgument(
                    "ladder penalties must be strictly increasing".into(),
                ));
            }
        }
        if self.max_rungs == 0 {
            return Err(Error::InvalidArgument("max_rungs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LadderOutput {
    pub rungs: Vec<ValueField>,
    pub limit: ValueField,
    /// Sup-norm gap between the last two rungs (infinite with one rung).
    pub cauchy_gap: f64,
}

const LADDER_MONOTONE_TOL: f64 = 1e-8;

pub fn run_ladder(
    problem: &SwitchingProblem,
    grid: &GridSpec,
    schedule: &LadderSchedule,
    direction: LadderDirection,
) -> Result<LadderOutput> {
    schedule.validate()?;
    let mut rungs: Vec<ValueField> = Vec::new();
    let mut cauchy_gap = f64::INFINITY;
    for &penalty in schedule.penalties.iter().take(schedule.max_rungs) {
        let field = solve_one_sided(problem, grid, penalty, direction)?;
        if let Some(prev) = rungs.last() {
            let prev_penalty = match prev.provenance {
                Provenance::Penalized { m, n } => m.max(n),
                _ => unreachable!("ladder rungs are penalized fields"),
            };
            let mut violation = 0.0f64;
            let mut gap = 0.0f64;
            for j in 0..field.n_times() {
                for (new, old) in field.slice(j).iter().zip(prev.slice(j)) {
                    let step = new - old;
                    let wrong = match direction {
                        LadderDirection::Decreasing => step,
                        LadderDirection::Increasing => -step,
                    };
                    violation = violation.max(wrong);
                    gap = gap.max(step.abs());
                }
            }
            if violation > LADDER_MONOTONE_TOL {
                return Err(Error::LadderMonotonicity {
                    from: prev_penalty,
                    to: penalty,
                    violation,
                });
            }
            cauchy_gap = gap;
        }
        rungs.push(field);
        if cauchy_gap < schedule.cauchy_tol {
            break;
        }
    }
    let mut limit = rungs.last().expect("schedule is non-empty").clone();
    limit.provenance = match direction {
        LadderDirection::Decreasing => Provenance::LadderLimitDecreasing,
        LadderDirection::Increasing => Provenance::LadderLimitIncreasing,
    };
    limit.notes.insert("cauchy_gap".into(), cauchy_gap);
    let last = match rungs.last().unwrap().provenance {
        Provenance::Penalized { m, n } => m.max(n),
        _ => f64::NAN,
    };
    limit.notes.insert("last_penalty".into(), last);
    Ok(LadderOutput {
        rungs,
        limit,
        cauchy_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{compare_fields, CompareOptions};
    use crate::fixtures;
    use crate::lattice::{backward_induct, build_lattice};
    use crate::model::tests::still_problem;

    fn heat(b: f64, s: f64, lo: f64, hi: f64, n_x: usize, m: usize) -> (SwitchingProblem, GridSpec) {
        let pb = SwitchingProblem::builder(2, 1.0)
            .constant_costs(1.0, 1.0)
            .drift_1d("b", move |_, _| b)
            .vol_1d("s", move |_, _| s)
            .build()
            .unwrap();
        (
            pb,
            GridSpec {
                t0: 0.0,
                n_steps: m,
                n_x,
                x_min: lo,
                x_max: hi,
            },
        )
    }

    #[test]
    fn constants_are_preserved() {
        let (pb, g) = heat(0.3, 0.7, -1.0, 1.0, 21, 100);
        let w = vec![2.5; 21 * 2];
        let c = step_parabolic(&pb, &g, 0, &w).unwrap();
        assert!(c.iter().all(|v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn upwind_is_exact_on_linear_data() {
        let (pb, g) = heat(1.0, 0.0, 0.0, 1.0, 11, 100);
        let dt = g.dt(1.0);
        let w: Vec<f64> = (0..11).flat_map(|k| [0.1 * k as f64; 2]).collect();
        let c = step_parabolic(&pb, &g, 0, &w).unwrap();
        for k in 1..10 {
            assert!((c[2 * k] - (w[2 * k] + dt)).abs() < 1e-14);
        }
    }

    #[test]
    fn heat_eigenfunction_decay() {
        let len = 2.0;
        let (pb, g) = heat(0.0, 2f64.sqrt(), 0.0, len, 201, 40_000);
        let dt = g.dt(1.0);
        let space = g.space_axis();
        let w: Vec<f64> = (0..201)
            .flat_map(|k| {
                let v = (std::f64::consts::PI * space.at(k) / len).sin();
                [v, v]
            })
            .collect();
        let c = step_parabolic(&pb, &g, 0, &w).unwrap();
        let expected = 1.0 - (-std::f64::consts::PI.powi(2) * dt / (len * len)).exp();
        for k in [50, 100, 150] {
            let got = 1.0 - c[2 * k] / w[2 * k];
            assert!(
                (got / expected - 1.0).abs() < 0.02,
                "k={k} got={got} expected={expected}"
            );
        }
    }

    #[test]
    fn cfl_violation_reports_worst_point() {
        let (pb, g) = heat(0.0, 1.0, -1.0, 1.0, 101, 10);
        let err = solve_minmax(&pb, &g).unwrap_err();
        assert!(matches!(err, Error::Cfl { ratio, .. } if ratio > 1.0));
    }

    #[test]
    fn still_hand_fixture() {
        let pb = still_problem(&[0.0, 10.0], 1.0, 1.0);
        let g = GridSpec {
            t0: 0.0,
            n_steps: 4,
            n_x: 5,
            x_min: -1.0,
            x_max: 1.0,
        };
        for f in [solve_minmax(&pb, &g).unwrap(), solve_maxmin(&pb, &g).unwrap()] {
            for k in 0..5 {
                assert_eq!(f.node(0, k), &[9.0, 10.0]);
                assert_eq!(f.node(4, k), &[0.0, 10.0]);
            }
        }
    }

    fn standard_grid(m: usize, n_x: usize) -> GridSpec {
        GridSpec::around(&fixtures::standard(), 0.0, 0.0, m, n_x)
    }

    #[test]
    fn minmax_equals_maxmin_and_respects_barriers() {
        let pb = fixtures::standard();
        let g = standard_grid(200, 101);
        let a = solve_minmax(&pb, &g).unwrap();
        let b = solve_maxmin(&pb, &g).unwrap();
        let gaps = compare_fields(&a, &b, CompareOptions::default()).unwrap();
        assert!(gaps.iter().all(|g| g.sup <= 1e-9));
        let (low, high) = a.barrier_violation(|_, _, _| (0.3, 0.3));
        assert!(low <= 1e-9 && high <= 1e-9);
        for k in 0..101 {
            for i in 0..3 {
                assert_eq!(a.value(i, 200, k), pb.terminal(i, &[a.space.at(k)]));
            }
        }
    }

    #[test]
    fn huge_costs_match_lattice_expectation() {
        let pb = SwitchingProblem::builder(2, 1.0)
            .constant_costs(1e6, 1e6)
            .drift_1d("0.2(1-x)", |_, x| 0.2 * (1.0 - x))
            .vol_1d("0.5", |_, _| 0.5)
            .reward(0, "cos x", |_, x, _| x[0].cos())
            .terminal(1, "x/2", |x| 0.5 * x[0])
            .build()
            .unwrap();
        let g = GridSpec::around(&pb, 0.0, 0.0, 100, 101);
        let v = solve_minmax(&pb, &g).unwrap();
        let l = build_lattice(&pb, 0.0, 0.0, 100, 201).unwrap();
        let lv = backward_induct(&pb, &l).unwrap();
        let gaps = compare_fields(
            &v,
            &lv.field,
            CompareOptions {
                interpolate: true,
                central_half: true,
            },
        )
        .unwrap();
        assert!(gaps.iter().all(|g| g.sup <= 5e-2), "{gaps:?}");
    }

    #[test]
    fn unpenalized_equals_direct_with_huge_costs() {
        let pb = SwitchingProblem::builder(2, 1.0)
            .constant_costs(1e6, 1e6)
            .drift_1d("-x", |_, x| -x)
            .vol_1d("0.4", |_, _| 0.4)
            .reward(0, "sin x", |_, x, _| x[0].sin())
            .reward(1, "1", |_, _, _| 1.0)
            .terminal(0, "x", |x| x[0])
            .build()
            .unwrap();
        let g = GridSpec::around(&pb, 0.0, 0.0, 80, 41);
        let a = solve_penalized(&pb, &g, 0.0, 0.0).unwrap();
        let b = solve_minmax(&pb, &g).unwrap();
        let gaps = compare_fields(&a, &b, CompareOptions::default()).unwrap();
        assert!(gaps.iter().all(|g| g.sup <= 1e-8), "{gaps:?}");
    }

    #[test]
    fn upper_violation_shrinks_like_inverse_penalty() {
        let pb = fixtures::opposed_rewards(0.2, 0.25, 0.3);
        let mut pts = Vec::new();
        for m in [10.0, 100.0, 1000.0] {
            let n_steps = (1.2 * (m + 40.0)) as usize;
            let g = GridSpec {
                t0: 0.0,
                n_steps,
                n_x: 41,
                x_min: -2.0,
                x_max: 2.0,
            };
            let f = solve_penalized(&pb, &g, m, 0.0).unwrap();
            let (_, high) = f.barrier_violation(|_, _, _| (0.2, 0.25));
            pts.push((m, high));
        }
        let slope = fit_slope(&pts);
        assert!((slope + 1.0).abs() <= 0.2, "slope={slope} pts={pts:?}");
    }

    fn fit_slope(pts: &[(f64, f64)]) -> f64 {
        let n = pts.len() as f64;
        let xs: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        num / den
    }

    #[test]
    fn ladders_sandwich_direct_solution() {
        let pb = fixtures::standard();
        let g = standard_grid(200, 101);
        let direct = solve_minmax(&pb, &g).unwrap();
        let sched = LadderSchedule::doubling(6);
        let dec = run_ladder(&pb, &g, &sched, LadderDirection::Decreasing).unwrap();
        let inc = run_ladder(&pb, &g, &sched, LadderDirection::Increasing).unwrap();
        assert_eq!(dec.rungs.len(), 7);
        for (d, u) in dec.rungs.iter().zip(&inc.rungs) {
            for j in 0..direct.n_times() {
                for ((dv, uv), v) in d.slice(j).iter().zip(u.slice(j)).zip(direct.slice(j)) {
                    assert!(*uv <= v + 1e-6 && *v <= dv + 1e-6);
                }
            }
        }
        let gap = compare_fields(&dec.limit, &inc.limit, CompareOptions::default()).unwrap();
        assert!(gap.iter().all(|g| g.sup <= 5e-2), "{gap:?}");
    }

    #[test]
    fn one_rung_ladder_is_one_sided_solve() {
        let pb = fixtures::standard();
        let g = standard_grid(60, 31);
        let sched = LadderSchedule {
            penalties: vec![8.0],
            inner: vec![],
            cauchy_tol: 0.0,
            max_rungs: 10,
        };
        let out = run_ladder(&pb, &g, &sched, LadderDirection::Increasing).unwrap();
        let one = solve_one_sided(&pb, &g, 8.0, LadderDirection::Increasing).unwrap();
        for j in 0..=60 {
            assert_eq!(out.limit.slice(j), one.slice(j));
        }
        assert!(out.cauchy_gap.is_infinite());
    }

    #[test]
    fn schedule_validation() {
        let mut s = LadderSchedule::doubling(3);
        assert!(s.validate().is_ok());
        s.penalties = vec![2.0, 2.0];
        assert!(s.validate().is_err());
        s.penalties.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn raising_terminal_never_lowers_solution() {
        let pb = fixtures::standard();
        let g = standard_grid(80, 41);
        let a = solve_minmax(&pb, &g).unwrap();
        let mut b = SwitchingProblem::builder(3, 1.0)
            .drift_1d("0.2*(1-x)", |_, x| 0.2 * (1.0 - x))
            .vol_1d("0.5", |_, _| 0.5)
            .constant_costs(0.3, 0.3);
        for (i, shift) in [0.05, 0.2, 0.1].into_iter().enumerate() {
            let phase = (i + 1) as f64;
            b = b
                .reward(i, "f", move |_, x, y| {
                    (x[0] + phase).cos() + 0.1 * y.iter().map(|v| v.max(-10.0)).sum::<f64>()
                })
                .terminal(i, "h", move |x| 0.5 * x[0] + shift);
        }
        let raised = solve_minmax(&b.build().unwrap(), &g).unwrap();
        for j in 0..=80 {
            for (lo, hi) in a.slice(j).iter().zip(raised.slice(j)) {
                assert!(hi >= &(lo - 1e-12));
            }
        }
    }
}
