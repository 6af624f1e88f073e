//! Trinomial-chain backward induction for the interconnected double-obstacle
//! system, and brute-force Dynkin game values on tiny trees.

use rayon::prelude::*;

use crate::clamp::{picard_clamp, regimes_of, Clamped, NodeFailure, Orientation, Sides};
use crate::error::{Error, Result};
use crate::field::{Axis, Provenance, ValueField};
use crate::model::SwitchingProblem;

#[derive(Debug, Clone, Copy)]
pub struct LatticeOptions {
    /// `dx = lambda * sigma_max * sqrt(dt)`.
    pub lambda: f64,
    /// Explicit spacing, overriding `lambda`.
    pub dx: Option<f64>,
}

impl Default for LatticeOptions {
    fn default() -> Self {
        Self {
            lambda: 3f64.sqrt(),
            dx: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    t0: f64,
    dt: f64,
    n_steps: usize,
    x_min: f64,
    dx: f64,
    n_levels: usize,
    /// `[p_up, p_mid, p_down]` at `j * n_levels + k`, `j < n_steps`
    probs: Vec<[f64; 3]>,
}

impl Lattice {
    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    #[inline]
    pub fn x(&self, k: usize) -> f64 {
        self.x_min + k as f64 * self.dx
    }

    #[inline]
    pub fn t(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.dt
    }

    pub fn levels(&self) -> Vec<f64> {
        (0..self.n_levels).map(|k| self.x(k)).collect()
    }

    pub fn time_axis(&self) -> Axis {
        Axis {
            start: self.t0,
            step: self.dt,
            len: self.n_steps + 1,
        }
    }

    pub fn space_axis(&self) -> Axis {
        Axis {
            start: self.x_min,
            step: self.dx,
            len: self.n_levels,
        }
    }

    /// `[p_up, p_mid, p_down]` for the step leaving `(t_j, x_k)`.
    #[inline]
    pub fn probs(&self, j: usize, k: usize) -> [f64; 3] {
        self.probs[j * self.n_levels + k]
    }

    /// Destination levels of the up/mid/down moves; the outermost levels
    /// reflect the move that would leave the chain.
    #[inline]
    pub fn targets(&self, k: usize) -> [usize; 3] {
        let n = self.n_levels;
        if n == 1 {
            return [0, 0, 0];
        }
        let up = if k + 1 < n { k + 1 } else { k - 1 };
        let down = if k > 0 { k - 1 } else { k + 1 };
        [up, k, down]
    }

    /// One-step conditional expectation of `next` from `(t_j, x_k)`.
    #[inline]
    pub fn expect(&self, j: usize, k: usize, next: impl Fn(usize) -> f64) -> f64 {
        let p = self.probs(j, k);
        let t = self.targets(k);
        p[0] * next(t[0]) + p[1] * next(t[1]) + p[2] * next(t[2])
    }
}

pub fn build_lattice(
    problem: &SwitchingProblem,
    t0: f64,
    x_center: f64,
    n_steps: usize,
    n_levels: usize,
) -> Result<Lattice> {
    build_lattice_with(problem, t0, x_center, n_steps, n_levels, LatticeOptions::default())
}

pub fn build_lattice_with(
    problem: &SwitchingProblem,
    t0: f64,
    x_center: f64,
    n_steps: usize,
    n_levels: usize,
    opts: LatticeOptions,
) -> Result<Lattice> {
    problem.require_one_dimensional()?;
    if n_steps == 0 {
        return Err(Error::InvalidArgument("lattice needs at least one step".into()));
    }
    if n_levels.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "n_levels must be odd so the centre is a node (got {n_levels})"
        )));
    }
    if !(t0 < problem.horizon()) {
        return Err(Error::InvalidArgument(format!(
            "start time {t0} is not before the horizon {}",
            problem.horizon()
        )));
    }
    if !(opts.lambda >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be >= 1 (got {})",
            opts.lambda
        )));
    }
    let dt = (problem.horizon() - t0) / n_steps as f64;
    let half = (n_levels / 2) as f64;

    // largest sigma and |b| over the nodes spanned by spacing dx
    let scan = |dx: f64| -> Result<(f64, f64)> {
        let mut s_max = 0.0f64;
        let mut b_max = 0.0f64;
        for j in 0..n_steps {
            let t = t0 + j as f64 * dt;
            for k in 0..n_levels {
                let x = x_center + (k as f64 - half) * dx;
                let (b, v) = coefficients(problem, t, x)?;
                s_max = s_max.max(v.sqrt());
                b_max = b_max.max(b.abs());
            }
        }
        Ok((s_max, b_max))
    };

    let dx = match opts.dx {
        Some(dx) if dx > 0.0 && dx.is_finite() => dx,
        Some(dx) => return Err(Error::InvalidArgument(format!("bad lattice spacing {dx}"))),
        None => {
            let (_, v0) = coefficients(problem, t0, x_center)?;
            let mut s = v0.sqrt();
            if s == 0.0 {
                s = scan(1.0)?.0;
            }
            if s == 0.0 {
                let b_max = scan(1.0)?.1;
                if b_max > 0.0 {
                    b_max * dt
                } else {
                    1.0
                }
            } else {
                // the spread of the chain grows with dx; iterate to a fixed point
                let mut dx = opts.lambda * s * dt.sqrt();
                for _ in 0..50 {
                    let s_new = scan(dx)?.0;
                    if s_new <= s * (1.0 + 1e-12) {
                        break;
                    }
                    s = s_new;
                    dx = opts.lambda * s * dt.sqrt();
                }
                dx
            }
        }
    };

    let x_min = x_center - half * dx;
    let mut probs = Vec::with_capacity(n_steps * n_levels);
    for j in 0..n_steps {
        let t = t0 + j as f64 * dt;
        for k in 0..n_levels {
            let x = x_min + k as f64 * dx;
            let (b, v) = coefficients(problem, t, x)?;
            let beta = b * dt / dx;
            let a = (v * dt + (b * dt).powi(2)) / (dx * dx);
            let pr = [(a + beta) / 2.0, 1.0 - a, (a - beta) / 2.0];
            if pr.iter().any(|q| !(-1e-12..=1.0 + 1e-12).contains(q)) {
                return Err(Error::LatticeInfeasible {
                    level: j,
                    x,
                    p_up: pr[0],
                    p_mid: pr[1],
                    p_down: pr[2],
                });
            }
            probs.push(pr);
        }
    }
    Ok(Lattice {
        t0,
        dt,
        n_steps,
        x_min,
        dx,
        n_levels,
        probs,
    })
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

/// Discrete value surfaces on a lattice, with per-node contact tags.
#[derive(Debug, Clone)]
pub struct LatticeValues {
    pub lattice: Lattice,
    pub field: ValueField,
}

impl LatticeValues {
    pub fn value(&self, mode: usize, j: usize, k: usize) -> f64 {
        self.field.value(mode, j, k)
    }

    /// Values at `(t0, x_center)`.
    pub fn root(&self) -> &[f64] {
        self.field.node(0, self.lattice.n_levels / 2)
    }
}

pub(crate) fn costs_at(problem: &SwitchingProblem, t: f64, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let p = problem.p();
    (
        (0..p).map(|i| problem.cost_down(i, t, x)).collect(),
        (0..p).map(|i| problem.cost_up(i, t, x)).collect(),
    )
}

/// Backward induction with a per-node clamp and same-slice Picard refinement
/// of the running reward.
///
/// The assumption audits are not re-run here; callers that accept untrusted
/// problems should gate on [`crate::model::preflight`] first.
pub fn backward_induct(problem: &SwitchingProblem, lattice: &Lattice) -> Result<LatticeValues> {
    let p = problem.p();
    let n = lattice.n_levels;
    let m = lattice.n_steps;
    let mut field = ValueField::zeros(Provenance::Lattice, lattice.time_axis(), lattice.space_axis(), p);
    field.notes.insert("dx".into(), lattice.dx);
    field.notes.insert("dt".into(), lattice.dt);

    let horizon = lattice.t(m);
    for k in 0..n {
        let x = [lattice.x(k)];
        for i in 0..p {
            let h = problem.terminal(i, &x);
            if !h.is_finite() {
                return Err(Error::Evaluation {
                    field: format!("h^{}", i + 1),
                    t: horizon,
                    x: x.to_vec(),
                });
            }
            field.node_mut(m, k)[i] = h;
        }
        let (down, up) = costs_at(problem, horizon, &x);
        let tags = regimes_of(field.node(m, k), &down, &up, 1e-10);
        field.regimes_slice_mut(m)[k * p..(k + 1) * p].copy_from_slice(&tags);
    }

    for j in (0..m).rev() {
        let t = lattice.t(j);
        let next = field.slice(j + 1);
        let solved: Vec<std::result::Result<Clamped, NodeFailure>> = (0..n)
            .into_par_iter()
            .map(|k| {
                let x = [lattice.x(k)];
                let base: Vec<f64> = (0..p).map(|i| lattice.expect(j, k, |kk| next[kk * p + i])).collect();
                let (down, up) = costs_at(problem, t, &x);
                picard_clamp(
                    problem,
                    t,
                    &x,
                    &base,
                    lattice.dt,
                    &next[k * p..(k + 1) * p],
                    &down,
                    &up,
                    Sides::Both,
                    Orientation::MinMax,
                )
            })
            .collect();
        let mut values = Vec::with_capacity(n * p);
        let mut tags = Vec::with_capacity(n * p);
        for node in solved {
            let c = node.map_err(|e| e.into_error(j))?;
            values.extend_from_slice(&c.values);
            tags.extend_from_slice(&c.regimes);
        }
        field.slice_mut(j).copy_from_slice(&values);
        field.regimes_slice_mut(j).copy_from_slice(&tags);
    }
    Ok(LatticeValues {
        lattice: lattice.clone(),
        field,
    })
}

/// A single-mode stopping game on a recombining tree. Level `j` has
/// `j * (b - 1) + 1` nodes for branching factor `b`; branch `r` from node `k`
/// leads to node `k + r`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynkinTree {
    /// Branch probabilities, the same at every node.
    pub probs: Vec<f64>,
    pub dt: f64,
    /// Payoff at the final level if nobody stops.
    pub terminal: Vec<f64>,
    /// Running reward, per level `0..M` and node.
    pub reward: Vec<Vec<f64>>,
    /// Paid to the maximizer when it stops (first-stopper priority on ties).
    pub lower: Vec<Vec<f64>>,
    /// Paid when the minimizer stops strictly first.
    pub upper: Vec<Vec<f64>>,
}

pub const MAX_DYNKIN_STEPS: usize = 4;
pub const MAX_RULE_PAIRS: u128 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynkinValue {
    pub enumerated: f64,
    pub recursion: f64,
}

impl DynkinTree {
    pub fn n_steps(&self) -> usize {
        self.reward.len()
    }

    fn width(&self, level: usize) -> usize {
        level * (self.probs.len() - 1) + 1
    }

    fn validate(&self) -> Result<()> {
        let m = self.n_steps();
        let bad = |s: String| Err(Error::InvalidArgument(s));
        if m == 0 || m > MAX_DYNKIN_STEPS {
            return bad(format!("tree depth must be in 1..={MAX_DYNKIN_STEPS} (got {m})"));
        }
        let b = self.probs.len();
        if b < 1 || self.probs.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return bad("branch probabilities must lie in [0, 1]".into());
        }
        if (self.probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return bad("branch probabilities must sum to 1".into());
        }
        if self.terminal.len() != self.width(m) || self.lower.len() != m || self.upper.len() != m {
            return bad("tree arrays have inconsistent sizes".into());
        }
        for j in 0..m {
            let w = self.width(j);
            if self.reward[j].len() != w || self.lower[j].len() != w || self.upper[j].len() != w {
                return bad(format!("level {j} arrays must have {w} nodes"));
            }
            if let Some(k) = (0..w).find(|&k| !(self.lower[j][k] < self.upper[j][k])) {
                return bad(format!("obstacles not strictly separated at level {j}, node {k}"));
            }
        }
        Ok(())
    }

    /// Clamp recursion `max(L, min(U, reward dt + E[next]))`.
    pub fn recursion_value(&self) -> Result<f64> {
        self.validate()?;
        let mut next = self.terminal.clone();
        for j in (0..self.n_steps()).rev() {
            next = (0..self.width(j))
                .map(|k| {
                    let c = self.reward[j][k] * self.dt + self.continuation(&next, k);
                    self.lower[j][k].max(self.upper[j][k].min(c))
                })
                .collect();
        }
        Ok(next[0])
    }

    #[inline]
    fn continuation(&self, next: &[f64], k: usize) -> f64 {
        self.probs.iter().enumerate().map(|(r, q)| q * next[k + r]).sum()
    }

    /// Payoff of a pair of node-indexed stopping rules (bit `o + k` set means
    /// stop at node `k` of the level starting at flat offset `o`).
    fn payoff(&self, sigma: u32, tau: u32, scratch: &mut [f64], offsets: &[usize]) -> f64 {
        let m = self.n_steps();
        let wm = self.width(m);
        let mut next: Vec<f64> = self.terminal.clone();
        for j in (0..m).rev() {
            let w = self.width(j);
            for (k, s) in scratch[..w].iter_mut().enumerate() {
                let bit = offsets[j] + k;
                *s = if sigma >> bit & 1 == 1 {
                    self.lower[j][k]
                } else if tau >> bit & 1 == 1 {
                    self.upper[j][k]
                } else {
                    self.reward[j][k] * self.dt + self.continuation(&next, k)
                };
            }
            next[..w].copy_from_slice(&scratch[..w]);
        }
        debug_assert!(wm >= 1);
        next[0]
    }
}

/// Inf over minimizer rules of sup over maximizer rules, by exhaustive
/// enumeration, checked against the clamp recursion.
pub fn enumerate_dynkin_value(tree: &DynkinTree) -> Result<DynkinValue> {
    tree.validate()?;
    let m = tree.n_steps();
    let offsets: Vec<usize> = (0..m)
        .scan(0, |acc, j| {
            let o = *acc;
            *acc += tree.width(j);
            Some(o)
        })
        .collect();
    let decisions: usize = (0..m).map(|j| tree.width(j)).sum();
    let pairs = 1u128 << (2 * decisions).min(127);
    if 2 * decisions >= 127 || pairs > MAX_RULE_PAIRS {
        return Err(Error::EnumerationTooLarge {
            count: if 2 * decisions >= 127 { u128::MAX } else { pairs },
            limit: MAX_RULE_PAIRS,
        });
    }
    let rules = 1u32 << decisions;
    let mut scratch = vec![0.0; tree.width(m)];
    let mut enumerated = f64::INFINITY;
    for tau in 0..rules {
        let mut best = f64::NEG_INFINITY;
        for sigma in 0..rules {
            best = best.max(tree.payoff(sigma, tau, &mut scratch, &offsets));
        }
        enumerated = enumerated.min(best);
    }
    let recursion = tree.recursion_value()?;
    let tol = 1e-10 * (1.0 + recursion.abs());
    if (enumerated - recursion).abs() > tol {
        return Err(Error::DynkinMismatch { enumerated, recursion });
    }
    Ok(DynkinValue { enumerated, recursion })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clamp::Regime;
    use crate::fixtures;
    use crate::model::tests::still_problem;
    use crate::model::Cost;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diffusion(b: f64, s: f64) -> SwitchingProblem {
        SwitchingProblem::builder(2, 1.0)
            .constant_costs(1.0, 1.0)
            .drift_1d("b", move |_, _| b)
            .vol_1d("s", move |_, _| s)
            .build()
            .unwrap()
    }

    #[test]
    fn driftless_unit_vol_probabilities() {
        // dx^2 = 3 dt: p_up + p_down = 1/3, p_up - p_down = 0
        let l = build_lattice(&diffusion(0.0, 1.0), 0.0, 0.0, 100, 21).unwrap();
        assert!((l.dx() - (3.0f64 * 0.01).sqrt()).abs() < 1e-15);
        for k in 0..21 {
            let [u, m, d] = l.probs(0, k);
            assert!((u - 1.0 / 6.0).abs() < 1e-12);
            assert!((m - 2.0 / 3.0).abs() < 1e-12);
            assert!((d - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn still_chain_stays_put() {
        let l = build_lattice(&diffusion(0.0, 0.0), 0.0, 0.0, 5, 3).unwrap();
        assert!(l.probs.iter().all(|p| p[1] == 1.0));
    }

    #[test]
    fn drift_moment_is_matched() {
        let l = build_lattice(&diffusion(1.0, 1.0), 0.0, 0.0, 400, 11).unwrap();
        for j in [0, 399] {
            for k in 0..11 {
                let [u, _, d] = l.probs(j, k);
                assert!((u - d - l.dt() / l.dx()).abs() < 1e-12);
                let a = (l.dt() + l.dt() * l.dt()) / (l.dx() * l.dx());
                assert!((u + d - a).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strong_drift_is_infeasible() {
        let err = build_lattice(&diffusion(100.0, 0.1), 0.0, 0.0, 10, 5).unwrap_err();
        assert!(matches!(err, Error::LatticeInfeasible { level: 0, .. }));
    }

    #[test]
    fn rejects_even_levels() {
        assert!(build_lattice(&diffusion(0.0, 1.0), 0.0, 0.0, 10, 4).is_err());
    }

    #[test]
    fn probabilities_valid_under_state_dependent_vol() {
        let pb = SwitchingProblem::builder(2, 1.0)
            .constant_costs(1.0, 1.0)
            .drift_1d("-x", |_, x| -x)
            .vol_1d("0.2+0.1|x|", |_, x| 0.2 + 0.1 * x.abs())
            .build()
            .unwrap();
        let l = build_lattice(&pb, 0.0, 0.0, 50, 41).unwrap();
        for pr in &l.probs {
            assert!(pr.iter().all(|q| (0.0..=1.0).contains(q)));
            assert!((pr.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_clamp_single_step() {
        let pb = still_problem(&[0.0, 10.0], 1.0, 1.0);
        let l = build_lattice(&pb, 0.0, 0.0, 1, 1).unwrap();
        let v = backward_induct(&pb, &l).unwrap();
        assert_eq!(v.root(), &[9.0, 10.0]);
        assert_eq!(v.field.regime(0, 0, 0), Some(Regime::LowerContact));
        assert_eq!(v.field.regime(1, 0, 0), Some(Regime::UpperContact));
    }

    /// Forward pass of the chain's distribution from the root.
    fn forward_expectation(l: &Lattice, h: impl Fn(f64) -> f64) -> f64 {
        let n = l.n_levels();
        let mut mass = vec![0.0; n];
        mass[n / 2] = 1.0;
        for j in 0..l.n_steps() {
            let mut next = vec![0.0; n];
            for (k, &mk) in mass.iter().enumerate() {
                let pr = l.probs(j, k);
                for (q, t) in pr.iter().zip(l.targets(k)) {
                    next[t] += mk * q;
                }
            }
            mass = next;
        }
        (0..n).map(|k| mass[k] * h(l.x(k))).sum()
    }

    #[test]
    fn huge_costs_give_plain_expectation() {
        let pb = SwitchingProblem::builder(2, 1.0)
            .constant_costs(1e6, 1e6)
            .drift_1d("0.3", |_, _| 0.3)
            .vol_1d("0.4", |_, _| 0.4)
            .terminal(0, "sin", |x| x[0].sin())
            .terminal(1, "x^2", |x| x[0] * x[0])
            .build()
            .unwrap();
        let l = build_lattice(&pb, 0.0, 0.0, 60, 41).unwrap();
        let v = backward_induct(&pb, &l).unwrap();
        let e0 = forward_expectation(&l, f64::sin);
        let e1 = forward_expectation(&l, |x| x * x);
        assert!((v.root()[0] - e0).abs() < 1e-12);
        assert!((v.root()[1] - e1).abs() < 1e-12);
        assert!(v.field.regime(0, 0, 20) == Some(Regime::Interior));
    }

    #[test]
    fn constant_reward_integrates_to_horizon() {
        let pb = SwitchingProblem::builder(3, 1.0)
            .constant_costs(1e6, 1e6)
            .vol_1d("1", |_, _| 1.0)
            .reward(0, "1", |_, _, _| 1.0)
            .reward(1, "1", |_, _, _| 1.0)
            .reward(2, "1", |_, _, _| 1.0)
            .build()
            .unwrap();
        let l = build_lattice(&pb, 0.0, 0.0, 30, 11).unwrap();
        let v = backward_induct(&pb, &l).unwrap();
        for i in 0..3 {
            for k in 0..11 {
                assert!((v.value(i, 0, k) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn standard_fixture_barrier_sandwich() {
        let pb = fixtures::standard();
        let l = build_lattice(&pb, 0.0, 0.0, 100, 61).unwrap();
        let v = backward_induct(&pb, &l).unwrap();
        let (low, high) = v.field.barrier_violation(|_, _, _| (0.3, 0.3));
        assert!(low <= 1e-10 && high <= 1e-10, "low={low} high={high}");
        for k in 0..61 {
            for i in 0..3 {
                assert_eq!(v.value(i, 100, k), pb.terminal(i, &[l.x(k)]));
            }
        }
        // some contact somewhere, and tags agree with the values
        let mut contacts = 0;
        for j in 0..=100 {
            for k in 0..61 {
                let node = v.field.node(j, k);
                for i in 0..3 {
                    let lower = node[i] - (node[(i + 1) % 3] - 0.3);
                    match v.field.regime(i, j, k).unwrap() {
                        Regime::LowerContact => {
                            contacts += 1;
                            assert!(lower.abs() <= 1e-9)
                        }
                        Regime::UpperContact => {
                            contacts += 1;
                            assert!((node[i] - node[(i + 1) % 3] - 0.3).abs() <= 1e-9)
                        }
                        Regime::Interior => assert!(lower > 1e-10),
                    }
                }
            }
        }
        assert!(contacts > 0);
    }

    #[test]
    fn hand_fixture_fails_preflight() {
        // h = (0, 10) breaks terminal consistency and unit costs on two modes
        // cancel in the mixed cycle; the clamp still has the hand fixed point
        let pb = still_problem(&[0.0, 10.0], 1.0, 1.0);
        let err = crate::model::preflight(&pb, &[0.0, 1.0], &[0.0]).unwrap_err();
        assert!(matches!(err, Error::InvalidProblem(_)));
    }

    fn perturbable(h_bump: [f64; 2], f_bump: [f64; 2]) -> SwitchingProblem {
        let mut b = SwitchingProblem::builder(2, 1.0)
            .drift_1d("-0.5x", |_, x| -0.5 * x)
            .vol_1d("0.6", |_, _| 0.6)
            .constant_costs(0.25, 0.4);
        for i in 0..2 {
            let (hb, fb) = (h_bump[i], f_bump[i]);
            let s = i as f64;
            b = b.terminal(i, "x/2+s+hb", move |x| 0.5 * x[0] + 0.1 * s + hb).reward(
                i,
                "sin(x+s)+0.2y+fb",
                move |_, x, y| (x[0] + s).sin() + 0.2 * (y[0] + y[1]) + fb,
            );
        }
        b.build().unwrap()
    }

    #[test]
    fn raising_data_never_lowers_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = perturbable([0.0; 2], [0.0; 2]);
        let l = build_lattice(&base, 0.0, 0.0, 40, 31).unwrap();
        let v0 = backward_induct(&base, &l).unwrap();
        for _ in 0..5 {
            // keep terminal consistency: bump both h by amounts within the cost band
            let c = rng.gen_range(0.0..0.3);
            let hb = [c + rng.gen_range(0.0..0.05), c];
            let fb = [rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5)];
            let pb = perturbable(hb, fb);
            let v1 = backward_induct(&pb, &l).unwrap();
            for j in 0..=40 {
                for (a, b) in v0.field.slice(j).iter().zip(v1.field.slice(j)) {
                    assert!(b >= &(a - 1e-12));
                }
            }
        }
    }

    #[test]
    fn two_mode_relabelling_swaps_values() {
        let build = |swap: bool| {
            let hs = [0.1, -0.05];
            let fs = [0.5, -0.3];
            let downs = [0.2, 0.35];
            let ups = [0.3, 0.15];
            let ix = |i: usize| if swap { 1 - i } else { i };
            let mut b = SwitchingProblem::builder(2, 1.0)
                .drift_1d("0.1", |_, _| 0.1)
                .vol_1d("0.4", |_, _| 0.4);
            for i in 0..2 {
                let src = ix(i);
                let (h, f) = (hs[src], fs[src]);
                b = b
                    .terminal(i, "h", move |x| 0.3 * x[0] + h)
                    .reward(i, "f", move |_, x, y| f * x[0].cos() + 0.1 * y[i] + 0.2 * y[1 - i])
                    .cost_down(i, Cost::constant(downs[src]))
                    .cost_up(i, Cost::constant(ups[src]));
            }
            b.build().unwrap()
        };
        let a = build(false);
        let b = build(true);
        let l = build_lattice(&a, 0.0, 0.0, 30, 21).unwrap();
        let va = backward_induct(&a, &l).unwrap();
        let vb = backward_induct(&b, &l).unwrap();
        for j in 0..=30 {
            for k in 0..21 {
                assert!((va.value(0, j, k) - vb.value(1, j, k)).abs() < 1e-12);
                assert!((va.value(1, j, k) - vb.value(0, j, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn field_export_shape() {
        let pb = fixtures::standard();
        let l = build_lattice(&pb, 0.0, 0.0, 8, 9).unwrap();
        let v = backward_induct(&pb, &l).unwrap();
        let mut buf = Vec::new();
        v.field.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 9 * 9 * 3);
        assert!(text.lines().next().unwrap().ends_with("regime_tag"));
    }

    fn single_node(terminal: f64, lower: f64, upper: f64) -> DynkinTree {
        DynkinTree {
            probs: vec![0.5, 0.5],
            dt: 1.0,
            terminal: vec![terminal; 2],
            reward: vec![vec![0.0]],
            lower: vec![vec![lower]],
            upper: vec![vec![upper]],
        }
    }

    #[test]
    fn dynkin_hand_examples() {
        let v = enumerate_dynkin_value(&single_node(0.0, 5.0, 6.0)).unwrap();
        assert_eq!(v.enumerated, 5.0);
        let v = enumerate_dynkin_value(&single_node(0.0, -1.0, -0.5)).unwrap();
        assert_eq!(v.enumerated, -0.5);
    }

    #[test]
    fn dynkin_far_obstacles_give_expectation() {
        let t = DynkinTree {
            probs: vec![0.25, 0.5, 0.25],
            dt: 0.1,
            terminal: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
            reward: (0..3).map(|j| vec![0.0; 2 * j + 1]).collect(),
            lower: (0..3).map(|j| vec![-1e9; 2 * j + 1]).collect(),
            upper: (0..3).map(|j| vec![1e9; 2 * j + 1]).collect(),
        };
        let v = enumerate_dynkin_value(&t).unwrap();
        assert!((v.enumerated - 4.0).abs() < 1e-12);
    }

    #[test]
    fn dynkin_guard_and_validation() {
        let deep = DynkinTree {
            probs: vec![0.3, 0.4, 0.3],
            dt: 0.1,
            terminal: vec![0.0; 9],
            reward: (0..4).map(|j| vec![0.0; 2 * j + 1]).collect(),
            lower: (0..4).map(|j| vec![-1.0; 2 * j + 1]).collect(),
            upper: (0..4).map(|j| vec![1.0; 2 * j + 1]).collect(),
        };
        assert!(matches!(
            enumerate_dynkin_value(&deep),
            Err(Error::EnumerationTooLarge { .. })
        ));
        assert!(enumerate_dynkin_value(&single_node(0.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn dynkin_random_binomial_trees_match_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let m = rng.gen_range(1..=4);
            let q = rng.gen_range(0.1..0.9);
            let level = |rng: &mut ChaCha8Rng, w: usize, lo: f64, hi: f64| -> Vec<f64> {
                (0..w).map(|_| rng.gen_range(lo..hi)).collect()
            };
            let lower: Vec<Vec<f64>> = (0..m).map(|j| level(&mut rng, j + 1, -2.0, 1.0)).collect();
            let upper = lower
                .iter()
                .map(|l| l.iter().map(|v| v + rng.gen_range(0.05..2.0)).collect())
                .collect();
            let t = DynkinTree {
                probs: vec![q, 1.0 - q],
                dt: 0.25,
                terminal: level(&mut rng, m + 1, -2.0, 2.0),
                reward: (0..m).map(|j| level(&mut rng, j + 1, -1.0, 1.0)).collect(),
                lower,
                upper,
            };
            enumerate_dynkin_value(&t).unwrap();
        }
    }
}
