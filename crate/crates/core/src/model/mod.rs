//! The switching-game datum and the audits of its standing assumptions.
//!
//! Modes are indexed `0..p` internally; the successor of mode `i` is
//! `(i + 1) % p`. Everything written to disk or shown to a user numbers the
//! modes `1..=p`.

mod audit;

use std::fmt;
use std::sync::Arc;

pub use audit::{
    audit_regularity, check_cost_signs, check_nonfree_loop, preflight, validate_consistency, Assumption, AuditCheck,
    AuditReport, Verdict, Witness, MAX_ENUMERATED_MODES,
};

use crate::error::{Error, Result};

pub type DriftFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;
/// Writes sigma(t, x) row-major (`dim_x` rows, `d` columns).
pub type VolFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;
pub type RewardFn = dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync;
pub type TerminalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
pub type CostFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

/// A callable with a symbolic tag used only in reports.
pub struct Tagged<F: ?Sized> {
    tag: String,
    f: Arc<F>,
}

impl<F: ?Sized> Clone for Tagged<F> {
    fn clone(&self) -> Self {
        Self {
            tag: self.tag.clone(),
            f: Arc::clone(&self.f),
        }
    }
}

impl<F: ?Sized> Tagged<F> {
    pub fn new(tag: impl Into<String>, f: Arc<F>) -> Self {
        Self { tag: tag.into(), f }
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn func(&self) -> &F {
        &self.f
    }
}

impl<F: ?Sized> fmt::Debug for Tagged<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag)
    }
}

/// What is known about the time/space dependence of a switching cost.
/// Used to certify that the cost process is non-decreasing along paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostShape {
    Constant,
    /// Does not depend on x and is non-decreasing in t.
    TimeNondecreasing,
    General,
}

#[derive(Clone, Debug)]
pub struct Cost {
    func: Tagged<CostFn>,
    shape: CostShape,
}

impl Cost {
    pub fn new(
        tag: impl Into<String>,
        shape: CostShape,
        f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            func: Tagged::new(tag, Arc::new(f) as Arc<CostFn>),
            shape,
        }
    }

    pub fn constant(value: f64) -> Self {
        Self::new(format!("{value}"), CostShape::Constant, move |_, _| value)
    }

    /// `value + t_slope * t + x_slope * x[0]`.
    pub fn affine(value: f64, t_slope: f64, x_slope: f64) -> Self {
        let shape = match (t_slope == 0.0, x_slope == 0.0) {
            (true, true) => CostShape::Constant,
            (false, true) if t_slope > 0.0 => CostShape::TimeNondecreasing,
            _ => CostShape::General,
        };
        Self::new(format!("{value} + {t_slope}*t + {x_slope}*x"), shape, move |t, x| {
            value + t_slope * t + x_slope * x[0]
        })
    }

    pub fn shape(&self) -> CostShape {
        self.shape
    }

    pub fn tag(&self) -> &str {
        self.func.tag()
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        (self.func.func())(t, x)
    }
}

/// Full datum of a zero-sum switching game with `p` cyclically ordered modes.
#[derive(Clone, Debug)]
pub struct SwitchingProblem {
    p: usize,
    dim_x: usize,
    brownian_dim: usize,
    horizon: f64,
    growth_exponent: u32,
    drift: Tagged<DriftFn>,
    vol: Tagged<VolFn>,
    running_reward: Vec<Tagged<RewardFn>>,
    terminal: Vec<Tagged<TerminalFn>>,
    cost_down: Vec<Cost>,
    cost_up: Vec<Cost>,
}

impl SwitchingProblem {
    pub fn builder(p: usize, horizon: f64) -> SwitchingProblemBuilder {
        SwitchingProblemBuilder::new(p, horizon)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn brownian_dim(&self) -> usize {
        self.brownian_dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn growth_exponent(&self) -> u32 {
        self.growth_exponent
    }

    /// Successor mode. Fixed to the cyclic shift.
    #[inline]
    pub fn next(&self, i: usize) -> usize {
        (i + 1) % self.p
    }

    #[inline]
    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift.func())(t, x, out)
    }

    #[inline]
    pub fn vol(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.vol.func())(t, x, out)
    }

    #[inline]
    pub fn reward(&self, i: usize, t: f64, x: &[f64], y: &[f64]) -> f64 {
        (self.running_reward[i].func())(t, x, y)
    }

    #[inline]
    pub fn terminal(&self, i: usize, x: &[f64]) -> f64 {
        (self.terminal[i].func())(x)
    }

    /// Cost paid by the maximizer to move from mode `i` to its successor.
    #[inline]
    pub fn cost_down(&self, i: usize, t: f64, x: &[f64]) -> f64 {
        self.cost_down[i].eval(t, x)
    }

    /// Cost paid by the minimizer to move from mode `i` to its successor.
    #[inline]
    pub fn cost_up(&self, i: usize, t: f64, x: &[f64]) -> f64 {
        self.cost_up[i].eval(t, x)
    }

    pub fn cost_down_spec(&self, i: usize) -> &Cost {
        &self.cost_down[i]
    }

    pub fn cost_up_spec(&self, i: usize) -> &Cost {
        &self.cost_up[i]
    }

    /// Drift of a one-dimensional state.
    #[inline]
    pub fn drift_1d(&self, t: f64, x: f64) -> f64 {
        let mut out = [0.0];
        self.drift(t, &[x], &mut out);
        out[0]
    }

    /// `(sigma sigma^T)_{11}` of a one-dimensional state.
    pub fn variance_1d(&self, t: f64, x: f64) -> f64 {
        let mut row = vec![0.0; self.brownian_dim];
        self.vol(t, &[x], &mut row);
        row.iter().map(|s| s * s).sum()
    }

    pub fn require_one_dimensional(&self) -> Result<()> {
        if self.dim_x != 1 {
            return Err(Error::InvalidProblem(format!(
                "grid-based routes need dim_x = 1, problem has dim_x = {}",
                self.dim_x
            )));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        let mut s = format!(
            "p={} dim_x={} d={} T={} drift=[{}] vol=[{}]",
            self.p,
            self.dim_x,
            self.brownian_dim,
            self.horizon,
            self.drift.tag(),
            self.vol.tag()
        );
        for i in 0..self.p {
            s.push_str(&format!(
                "\n  mode {}: f=[{}] h=[{}] g_down=[{}] g_up=[{}]",
                i + 1,
                self.running_reward[i].tag(),
                self.terminal[i].tag(),
                self.cost_down[i].tag(),
                self.cost_up[i].tag()
            ));
        }
        s
    }
}

pub struct SwitchingProblemBuilder {
    p: usize,
    horizon: f64,
    dim_x: usize,
    brownian_dim: usize,
    growth_exponent: u32,
    drift: Option<Tagged<DriftFn>>,
    vol: Option<Tagged<VolFn>>,
    running_reward: Vec<Option<Tagged<RewardFn>>>,
    terminal: Vec<Option<Tagged<TerminalFn>>>,
    cost_down: Vec<Option<Cost>>,
    cost_up: Vec<Option<Cost>>,
}

impl SwitchingProblemBuilder {
    fn new(p: usize, horizon: f64) -> Self {
        Self {
            p,
            horizon,
            dim_x: 1,
            brownian_dim: 1,
            growth_exponent: 1,
            drift: None,
            vol: None,
            running_reward: vec![None; p],
            terminal: vec![None; p],
            cost_down: vec![None; p],
            cost_up: vec![None; p],
        }
    }

    pub fn dims(mut self, dim_x: usize, brownian_dim: usize) -> Self {
        self.dim_x = dim_x;
        self.brownian_dim = brownian_dim;
        self
    }

    pub fn growth_exponent(mut self, gamma: u32) -> Self {
        self.growth_exponent = gamma;
        self
    }

    pub fn drift(
        mut self,
        tag: impl Into<String>,
        f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.drift = Some(Tagged::new(tag, Arc::new(f) as Arc<DriftFn>));
        self
    }

    pub fn vol(mut self, tag: impl Into<String>, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.vol = Some(Tagged::new(tag, Arc::new(f) as Arc<VolFn>));
        self
    }

    pub fn drift_1d(self, tag: impl Into<String>, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.drift(tag, move |t, x, out| out[0] = f(t, x[0]))
    }

    /// Scalar volatility driving a single Brownian motion.
    pub fn vol_1d(self, tag: impl Into<String>, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.vol(tag, move |t, x, out| out[0] = f(t, x[0]))
    }

    pub fn reward(
        mut self,
        i: usize,
        tag: impl Into<String>,
        f: impl Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        if let Some(slot) = self.running_reward.get_mut(i) {
            *slot = Some(Tagged::new(tag, Arc::new(f) as Arc<RewardFn>));
        }
        self
    }

    pub fn terminal(
        mut self,
        i: usize,
        tag: impl Into<String>,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        if let Some(slot) = self.terminal.get_mut(i) {
            *slot = Some(Tagged::new(tag, Arc::new(f) as Arc<TerminalFn>));
        }
        self
    }

    pub fn cost_down(mut self, i: usize, cost: Cost) -> Self {
        if let Some(slot) = self.cost_down.get_mut(i) {
            *slot = Some(cost);
        }
        self
    }

    pub fn cost_up(mut self, i: usize, cost: Cost) -> Self {
        if let Some(slot) = self.cost_up.get_mut(i) {
            *slot = Some(cost);
        }
        self
    }

    /// Same constant costs on every transition.
    pub fn constant_costs(mut self, down: f64, up: f64) -> Self {
        for i in 0..self.p {
            self.cost_down[i] = Some(Cost::constant(down));
            self.cost_up[i] = Some(Cost::constant(up));
        }
        self
    }

    pub fn build(self) -> Result<SwitchingProblem> {
        if self.p < 2 {
            return Err(Error::InvalidProblem(format!(
                "need at least two modes, got p = {}",
                self.p
            )));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::InvalidProblem(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if self.dim_x == 0 || self.brownian_dim == 0 {
            return Err(Error::InvalidProblem(
                "state and Brownian dimensions must be at least 1".into(),
            ));
        }
        let zero_drift = || {
            Tagged::new(
                "0",
                Arc::new(|_: f64, _: &[f64], out: &mut [f64]| out.fill(0.0)) as Arc<DriftFn>,
            )
        };
        let zero_vol = || {
            Tagged::new(
                "0",
                Arc::new(|_: f64, _: &[f64], out: &mut [f64]| out.fill(0.0)) as Arc<VolFn>,
            )
        };
        let running_reward = self
            .running_reward
            .into_iter()
            .map(|f| {
                f.unwrap_or_else(|| Tagged::new("0", Arc::new(|_: f64, _: &[f64], _: &[f64]| 0.0) as Arc<RewardFn>))
            })
            .collect();
        let terminal = self
            .terminal
            .into_iter()
            .map(|h| h.unwrap_or_else(|| Tagged::new("0", Arc::new(|_: &[f64]| 0.0) as Arc<TerminalFn>)))
            .collect();
        let take_costs = |costs: Vec<Option<Cost>>, which: &str| -> Result<Vec<Cost>> {
            costs
                .into_iter()
                .enumerate()
                .map(|(i, c)| {
                    c.ok_or_else(|| Error::InvalidProblem(format!("missing {which} cost for mode {}", i + 1)))
                })
                .collect()
        };
        Ok(SwitchingProblem {
            p: self.p,
            dim_x: self.dim_x,
            brownian_dim: self.brownian_dim,
            horizon: self.horizon,
            growth_exponent: self.growth_exponent,
            drift: self.drift.unwrap_or_else(zero_drift),
            vol: self.vol.unwrap_or_else(zero_vol),
            running_reward,
            terminal,
            cost_down: take_costs(self.cost_down, "down")?,
            cost_up: take_costs(self.cost_up, "up")?,
        })
    }
}

#[inline]
fn pos(a: f64) -> f64 {
    a.max(0.0)
}

#[inline]
fn neg(a: f64) -> f64 {
    (-a).max(0.0)
}

/// Running reward of the doubly penalized system:
/// `f^i + n (y^i - (y^{i+1} - g_down))^- - m (y^i - (y^{i+1} + g_up))^+`.
pub fn eval_penalized_driver(
    problem: &SwitchingProblem,
    i: usize,
    m: f64,
    n: f64,
    t: f64,
    x: &[f64],
    y: &[f64],
) -> f64 {
    let j = problem.next(i);
    let base = problem.reward(i, t, x, y);
    base + penalty_terms(y[i], y[j], problem.cost_down(i, t, x), problem.cost_up(i, t, x), m, n)
}

/// The two penalty terms alone, given own value, successor value and costs.
#[inline]
pub(crate) fn penalty_terms(yi: f64, ynext: f64, down: f64, up: f64, m: f64, n: f64) -> f64 {
    let mut out = 0.0;
    if n != 0.0 {
        out += n * neg(yi - (ynext - down));
    }
    if m != 0.0 {
        out -= m * pos(yi - (ynext + up));
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// p modes, zero dynamics, zero rewards, terminal `h`, constant costs.
    pub(crate) fn still_problem(h: &[f64], down: f64, up: f64) -> SwitchingProblem {
        let mut b = SwitchingProblem::builder(h.len(), 1.0).constant_costs(down, up);
        for (i, &hi) in h.iter().enumerate() {
            b = b.terminal(i, format!("{hi}"), move |_| hi);
        }
        b.build().unwrap()
    }

    #[test]
    fn rejects_single_mode() {
        let err = SwitchingProblem::builder(1, 1.0)
            .constant_costs(1.0, 1.0)
            .build()
            .unwrap_err();
        assert!(matches!(err, Error::InvalidProblem(_)));
    }

    #[test]
    fn rejects_missing_costs() {
        assert!(SwitchingProblem::builder(2, 1.0).build().is_err());
    }

    #[test]
    fn successor_is_cyclic() {
        let pb = still_problem(&[0.0, 0.0, 0.0], 1.0, 1.0);
        assert_eq!(pb.next(0), 1);
        assert_eq!(pb.next(1), 2);
        assert_eq!(pb.next(2), 0);
    }

    #[test]
    fn penalized_driver_examples() {
        // f = 0, n = 2, m = 3, y^i = 0, y^{i+1} = 2, costs 1
        let pb = still_problem(&[0.0, 0.0], 1.0, 1.0);
        let v = eval_penalized_driver(&pb, 0, 3.0, 2.0, 0.0, &[0.0], &[0.0, 2.0]);
        assert_eq!(v, 2.0);

        // m = 5, n = 0, y^i = 4, y^{i+1} = 1, up cost 1
        let v = eval_penalized_driver(&pb, 0, 5.0, 0.0, 0.0, &[0.0], &[4.0, 1.0]);
        assert_eq!(v, -10.0);
    }

    #[test]
    fn penalized_driver_without_penalties_is_the_reward() {
        let pb = SwitchingProblem::builder(2, 1.0)
            .constant_costs(1.0, 1.0)
            .reward(0, "x+y1", |_, x, y| x[0] + 3.0 * y[1])
            .build()
            .unwrap();
        let y = [7.0, -2.0];
        assert_eq!(
            eval_penalized_driver(&pb, 0, 0.0, 0.0, 0.3, &[1.5], &y),
            pb.reward(0, 0.3, &[1.5], &y)
        );
    }

    #[test]
    fn affine_cost_shapes() {
        assert_eq!(Cost::affine(1.0, 0.0, 0.0).shape(), CostShape::Constant);
        assert_eq!(Cost::affine(1.0, 0.5, 0.0).shape(), CostShape::TimeNondecreasing);
        assert_eq!(Cost::affine(1.0, -0.5, 0.0).shape(), CostShape::General);
        assert_eq!(Cost::affine(1.0, 0.0, 0.2).shape(), CostShape::General);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn driver_monotone_in_penalties(
                yi in -10.0..10.0f64, yn in -10.0..10.0f64,
                m in 0.0..50.0f64, dm in 0.0..50.0f64,
                n in 0.0..50.0f64, dn in 0.0..50.0f64,
                down in 0.0..3.0f64, up in 0.0..3.0f64,
            ) {
                let pb = SwitchingProblem::builder(2, 1.0)
                    .cost_down(0, Cost::constant(down)).cost_up(0, Cost::constant(up))
                    .constant_costs(down, up)
                    .build().unwrap();
                let y = [yi, yn];
                let base = eval_penalized_driver(&pb, 0, m, n, 0.0, &[0.0], &y);
                prop_assert!(eval_penalized_driver(&pb, 0, m + dm, n, 0.0, &[0.0], &y) <= base);
                prop_assert!(eval_penalized_driver(&pb, 0, m, n + dn, 0.0, &[0.0], &y) >= base);
            }
        }
    }
}
