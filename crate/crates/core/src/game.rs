//! Switching game play: controls, the coupling with maximizer priority,
//! payoff accounting and strategies read off value surfaces.
//!
//! Switches happen at grid times only. At each step the players are asked
//! in turn, C1 first, until neither wants to switch; the mode held after
//! that collects the running reward over the following interval.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{Provenance, ValueField};
use crate::model::SwitchingProblem;
use crate::sde::PathBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Player {
    C1,
    C2,
}

impl fmt::Display for Player {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Player::C1 => "C1",
            Player::C2 => "C2",
        })
    }
}

/// Decision function of `(step, mode, state)`, mode 0-based.
pub type Script = Arc<dyn Fn(usize, usize, &[f64]) -> bool + Send + Sync>;

#[derive(Clone)]
pub enum Rule {
    /// Non-decreasing switch times; `f64::INFINITY` means never.
    Times(Vec<f64>),
    /// Switch whenever the owner's contact condition holds on `field` at the
    /// nearest node, with tolerance `eps`.
    Hitting {
        field: Arc<ValueField>,
        eps: f64,
    },
    Scripted(Script),
}

impl fmt::Debug for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::Times(t) => f.debug_tuple("Times").field(t).finish(),
            Rule::Hitting { field, eps } => f
                .debug_struct("Hitting")
                .field("field", &field.grid_description())
                .field("eps", eps)
                .finish(),
            Rule::Scripted(_) => f.write_str("Scripted"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Control {
    owner: Player,
    rule: Rule,
}

impl Control {
    pub fn times(owner: Player, times: Vec<f64>) -> Result<Self> {
        if times.iter().any(|t| t.is_nan()) || times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument(format!(
                "switch times must be non-decreasing: {times:?}"
            )));
        }
        Ok(Self {
            owner,
            rule: Rule::Times(times),
        })
    }

    pub fn never(owner: Player) -> Self {
        Self {
            owner,
            rule: Rule::Times(Vec::new()),
        }
    }

    pub fn hitting(owner: Player, field: Arc<ValueField>, eps: f64) -> Self {
        Self {
            owner,
            rule: Rule::Hitting { field, eps },
        }
    }

    pub fn scripted(owner: Player, f: impl Fn(usize, usize, &[f64]) -> bool + Send + Sync + 'static) -> Self {
        Self {
            owner,
            rule: Rule::Scripted(Arc::new(f)),
        }
    }

    pub fn owner(&self) -> Player {
        self.owner
    }

    pub fn rule(&self) -> &Rule {
        &self.rule
    }

    pub fn is_never(&self) -> bool {
        matches!(&self.rule, Rule::Times(t) if t.iter().all(|t| t.is_infinite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwitchEvent {
    pub step: usize,
    pub time: f64,
    pub from: usize,
    pub to: usize,
    pub switcher: Player,
    pub cost: f64,
    /// Triggered by a hitting rule.
    pub hitting: bool,
}

impl SwitchEvent {
    /// Effect on the maximizer's payoff.
    pub fn signed_cost(&self) -> f64 {
        match self.switcher {
            Player::C1 => -self.cost,
            Player::C2 => self.cost,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameTranscript {
    pub path: usize,
    pub start_mode: usize,
    pub events: Vec<SwitchEvent>,
    /// Left-endpoint integral of the running reward.
    pub reward: f64,
    pub final_mode: usize,
    pub terminal: f64,
    pub a_total: f64,
    pub b_total: f64,
}

impl GameTranscript {
    /// Net cost `A - B` over the first `n` events.
    pub fn c_partial(&self, n: usize) -> f64 {
        self.events.iter().take(n).map(|e| -e.signed_cost()).sum()
    }

    pub fn c_infinity(&self) -> f64 {
        self.a_total - self.b_total
    }

    pub fn payoff(&self) -> f64 {
        self.terminal + self.reward - self.c_infinity()
    }

    /// Cost process of `who` at time `t` (right-continuous).
    pub fn cost_process(&self, who: Player, t: f64) -> f64 {
        self.events
            .iter()
            .filter(|e| e.switcher == who && e.time <= t)
            .map(|e| e.cost)
            .sum()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let events: Vec<_> = self
            .events
            .iter()
            .map(|e| {
                serde_json::json!({
                    "step": e.step,
                    "time": e.time,
                    "from": e.from + 1,
                    "to": e.to + 1,
                    "switcher": e.switcher,
                    "cost": e.cost,
                    "hitting": e.hitting,
                })
            })
            .collect();
        serde_json::json!({
            "path": self.path,
            "start_mode": self.start_mode + 1,
            "events": events,
            "reward": self.reward,
            "final_mode": self.final_mode + 1,
            "terminal": self.terminal,
            "A": self.a_total,
            "B": self.b_total,
            "C_inf": self.c_infinity(),
            "payoff": self.payoff(),
        })
    }
}

/// One JSON object per line, in path order.
pub fn write_transcripts(path: &Path, transcripts: &[GameTranscript]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in transcripts {
        writeln!(w, "{}", t.to_json()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PayoffEstimate {
    pub mean: f64,
    pub se: f64,
    pub n_paths: usize,
    /// Empirical second moments of the cost totals.
    pub a_second_moment: f64,
    pub b_second_moment: f64,
}

fn mean_se(xs: impl ExactSizeIterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Sample mean and standard error of the realized payoffs.
pub fn payoff(transcripts: &[GameTranscript]) -> PayoffEstimate {
    let (mean, se) = mean_se(transcripts.iter().map(|t| t.payoff()));
    let n = transcripts.len().max(1) as f64;
    PayoffEstimate {
        mean,
        se,
        n_paths: transcripts.len(),
        a_second_moment: transcripts.iter().map(|t| t.a_total * t.a_total).sum::<f64>() / n,
        b_second_moment: transcripts.iter().map(|t| t.b_total * t.b_total).sum::<f64>() / n,
    }
}

/// Everything a play needs besides the two controls.
#[derive(Clone, Copy)]
pub struct GameSetup<'a> {
    pub problem: &'a SwitchingProblem,
    pub bundle: &'a PathBundle,
    /// Source of the coupling argument of the running reward; zeros if absent.
    pub ybar: Option<&'a ValueField>,
    /// Defaults to `10 * p * n_steps`.
    pub max_switches: Option<usize>,
}

impl<'a> GameSetup<'a> {
    pub fn new(problem: &'a SwitchingProblem, bundle: &'a PathBundle) -> Self {
        Self {
            problem,
            bundle,
            ybar: None,
            max_switches: None,
        }
    }

    pub fn with_ybar(mut self, field: &'a ValueField) -> Self {
        self.ybar = Some(field);
        self
    }

    fn switch_cap(&self) -> usize {
        self.max_switches
            .unwrap_or(10 * self.problem.p() * self.bundle.n_steps().max(1))
    }

    fn check_field(&self, field: &ValueField) -> Result<()> {
        let b = self.bundle;
        let end = b.t0() + b.n_steps() as f64 * b.dt();
        if field.p() != self.problem.p() || b.dim_x() != 1 || !field.time.contains(b.t0()) || !field.time.contains(end)
        {
            return Err(Error::GridMismatch {
                left: format!(
                    "paths t=[{}, {}] dim_x={} p={}",
                    b.t0(),
                    end,
                    b.dim_x(),
                    self.problem.p()
                ),
                right: field.grid_description(),
            });
        }
        Ok(())
    }

    fn check_control(&self, c: &Control, owner: Player) -> Result<()> {
        if c.owner != owner {
            return Err(Error::InvalidArgument(format!(
                "control owned by {} used as {owner}'s control",
                c.owner
            )));
        }
        match &c.rule {
            Rule::Times(ts) => {
                let (a, b) = (self.bundle.t0(), self.problem.horizon());
                let tol = 1e-9 * (1.0 + b.abs());
                if let Some(t) = ts.iter().find(|t| t.is_finite() && (**t < a - tol || **t > b + tol)) {
                    return Err(Error::InvalidArgument(format!("switch time {t} outside [{a}, {b}]")));
                }
                Ok(())
            }
            Rule::Hitting { field, eps } => {
                if !(*eps >= 0.0) {
                    return Err(Error::InvalidArgument(format!("contact tolerance {eps} < 0")));
                }
                self.check_field(field)
            }
            Rule::Scripted(_) => Ok(()),
        }
    }
}

fn nearest(axis: &crate::field::Axis, x: f64) -> usize {
    if axis.len < 2 || axis.step == 0.0 {
        return 0;
    }
    let s = ((x - axis.start) / axis.step).round();
    (s.max(0.0) as usize).min(axis.len - 1)
}

/// Contact test on the nearest node of `field`.
fn hitting_fires(
    problem: &SwitchingProblem,
    field: &ValueField,
    eps: f64,
    who: Player,
    mode: usize,
    t: f64,
    x: f64,
) -> bool {
    let j = field.time_index(t);
    let k = nearest(&field.space, x);
    contact(problem, field, eps, who, mode, j, k)
}

fn contact(
    problem: &SwitchingProblem,
    field: &ValueField,
    eps: f64,
    who: Player,
    mode: usize,
    j: usize,
    k: usize,
) -> bool {
    let t = field.time.at(j);
    let xs = [field.space.at(k)];
    let v = field.node(j, k);
    let next = v[problem.next(mode)];
    match who {
        Player::C1 => v[mode] <= next - problem.cost_down(mode, t, &xs) + eps,
        Player::C2 => v[mode] >= next + problem.cost_up(mode, t, &xs) - eps,
    }
}

struct Cursor<'c> {
    control: &'c Control,
    next: usize,
}

impl Cursor<'_> {
    fn wants(&self, problem: &SwitchingProblem, step: usize, t: f64, dt: f64, mode: usize, x: &[f64]) -> bool {
        match &self.control.rule {
            Rule::Times(ts) => ts.get(self.next).is_some_and(|s| *s <= t + 1e-9 * dt),
            Rule::Hitting { field, eps } => hitting_fires(problem, field, *eps, self.control.owner, mode, t, x[0]),
            Rule::Scripted(f) => f(step, mode, x),
        }
    }

    fn consume(&mut self) {
        if matches!(self.control.rule, Rule::Times(_)) {
            self.next += 1;
        }
    }

    fn is_hitting(&self) -> bool {
        matches!(self.control.rule, Rule::Hitting { .. })
    }
}

/// True when a hitting switch with effect `signed` would close a cycle of
/// hitting switches whose costs cancel. Such a cycle leaves the payoff
/// unchanged and would otherwise repeat forever.
fn closes_free_cycle(events: &[SwitchEvent], p: usize, signed: f64) -> bool {
    if events.len() + 1 < p {
        return false;
    }
    let tail = &events[events.len() + 1 - p..];
    if !tail.iter().all(|e| e.hitting) {
        return false;
    }
    let sum: f64 = tail.iter().map(SwitchEvent::signed_cost).sum::<f64>() + signed;
    let scale: f64 = tail.iter().map(|e| e.cost.abs()).sum::<f64>() + signed.abs();
    sum.abs() <= 1e-12 * (1.0 + scale)
}

fn play_path(
    setup: &GameSetup,
    u: &Control,
    v: &Control,
    start_mode: usize,
    path: usize,
    cap: usize,
) -> Result<GameTranscript> {
    let pb = setup.problem;
    let b = setup.bundle;
    let p = pb.p();
    let dt = b.dt();
    let ns = b.n_steps();
    let mut cu = Cursor { control: u, next: 0 };
    let mut cv = Cursor { control: v, next: 0 };
    let mut mode = start_mode;
    let mut events: Vec<SwitchEvent> = Vec::new();
    let mut reward = 0.0;
    let mut a_total = 0.0;
    let mut b_total = 0.0;
    let zeros = vec![0.0; p];
    for j in 0..=ns {
        let t = b.time(j);
        let x = b.state(path, j);
        loop {
            let down = pb.cost_down(mode, t, x);
            let up = pb.cost_up(mode, t, x);
            let c1 = cu.wants(pb, j, t, dt, mode, x) && !(cu.is_hitting() && closes_free_cycle(&events, p, -down));
            let c2 = !c1 && cv.wants(pb, j, t, dt, mode, x) && !(cv.is_hitting() && closes_free_cycle(&events, p, up));
            let (who, cost, hitting) = if c1 {
                let h = cu.is_hitting();
                cu.consume();
                a_total += down;
                (Player::C1, down, h)
            } else if c2 {
                let h = cv.is_hitting();
                cv.consume();
                b_total += up;
                (Player::C2, up, h)
            } else {
                break;
            };
            let to = pb.next(mode);
            events.push(SwitchEvent {
                step: j,
                time: t,
                from: mode,
                to,
                switcher: who,
                cost,
                hitting,
            });
            mode = to;
            if events.len() > cap {
                let tail = events.len().saturating_sub(p);
                return Err(Error::NonAdmissible {
                    path,
                    max_switches: cap,
                    loop_modes: events[tail..].iter().map(|e| e.from + 1).collect(),
                });
            }
        }
        if j < ns {
            let ybar = match setup.ybar {
                Some(f) => f.interp_node(f.time_index(t), x[0]),
                None => zeros.clone(),
            };
            let f = pb.reward(mode, t, x, &ybar);
            if !f.is_finite() {
                return Err(Error::PathEvaluation {
                    what: "running reward",
                    path,
                    step: j,
                    state: x.to_vec(),
                });
            }
            reward += f * dt;
        }
    }
    let xt = b.state(path, ns);
    let terminal = pb.terminal(mode, xt);
    if !terminal.is_finite() {
        return Err(Error::PathEvaluation {
            what: "terminal payoff",
            path,
            step: ns,
            state: xt.to_vec(),
        });
    }
    Ok(GameTranscript {
        path,
        start_mode,
        events,
        reward,
        final_mode: mode,
        terminal,
        a_total,
        b_total,
    })
}

/// Plays `u` (C1) against `v` (C2) on every path of the bundle.
pub fn couple_controls(setup: &GameSetup, u: &Control, v: &Control, start_mode: usize) -> Result<Vec<GameTranscript>> {
    let p = setup.problem.p();
    if start_mode >= p {
        return Err(Error::InvalidArgument(format!(
            "start mode {} outside 1..={p}",
            start_mode + 1
        )));
    }
    if setup.bundle.dim_x() != setup.problem.dim_x() {
        return Err(Error::InvalidArgument("bundle and problem dimensions differ".into()));
    }
    setup.check_control(u, Player::C1)?;
    setup.check_control(v, Player::C2)?;
    if let Some(f) = setup.ybar {
        setup.check_field(f)?;
    }
    let cap = setup.switch_cap();
    (0..setup.bundle.n_paths())
        .into_par_iter()
        .map(|path| play_path(setup, u, v, start_mode, path, cap))
        .collect()
}

/// Smallest tolerance that absorbs the residual of the scheme behind `field`.
pub fn default_contact_eps(field: &ValueField) -> f64 {
    let scale = (0..field.n_times())
        .flat_map(|j| field.slice(j).iter())
        .fold(1.0f64, |m, v| m.max(v.abs()));
    let recorded = field.notes.get("residual").copied().unwrap_or(0.0);
    (2.0 * recorded).max(2e-10 * scale)
}

fn check_source(problem: &SwitchingProblem, field: &ValueField, start_mode: usize) -> Result<()> {
    if !(field.provenance.is_direct() || field.provenance == Provenance::Lattice) {
        return Err(Error::InvalidArgument(format!(
            "strategies need a direct or lattice surface, got {}",
            field.provenance
        )));
    }
    if field.p() != problem.p() || start_mode >= problem.p() {
        return Err(Error::InvalidArgument(format!(
            "surface has {} modes, problem {}, start mode {}",
            field.p(),
            problem.p(),
            start_mode + 1
        )));
    }
    problem.require_one_dimensional()
}

/// Hitting rules for both players. A player whose contact set is empty on
/// the whole grid gets the empty time list.
pub fn synthesize_saddle(
    problem: &SwitchingProblem,
    field: Arc<ValueField>,
    start_mode: usize,
    eps: Option<f64>,
) -> Result<(Control, Control)> {
    check_source(problem, &field, start_mode)?;
    let eps = eps.unwrap_or_else(|| default_contact_eps(&field));
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("contact tolerance {eps} < 0")));
    }
    let (mut any1, mut any2) = (false, false);
    for j in 0..field.n_times() {
        for k in 0..field.n_x() {
            for i in 0..field.p() {
                let c1 = contact(problem, &field, eps, Player::C1, i, j, k);
                let c2 = contact(problem, &field, eps, Player::C2, i, j, k);
                if c1 && c2 {
                    return Err(Error::ContactConflict {
                        t_index: j,
                        x_index: k,
                        mode: i + 1,
                    });
                }
                any1 |= c1;
                any2 |= c2;
            }
        }
    }
    let make = |who, any| {
        if any {
            Control::hitting(who, field.clone(), eps)
        } else {
            Control::never(who)
        }
    };
    Ok((make(Player::C1, any1), make(Player::C2, any2)))
}

/// The responder's hitting rule against `opponent`; the coupling routine
/// merges the two when the game is played.
pub fn best_response(
    problem: &SwitchingProblem,
    field: Arc<ValueField>,
    opponent: &Control,
    responder: Player,
    start_mode: usize,
    eps: Option<f64>,
) -> Result<Control> {
    if opponent.owner == responder {
        return Err(Error::InvalidArgument(format!(
            "opponent and responder are both {responder}"
        )));
    }
    let (u, v) = synthesize_saddle(problem, field, start_mode, eps)?;
    Ok(match responder {
        Player::C1 => u,
        Player::C2 => v,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Deviation {
    pub deviator: Player,
    pub times: Vec<f64>,
    pub estimate: PayoffEstimate,
    /// Mean and standard error of the per-path payoff difference from the
    /// saddle play.
    pub diff_mean: f64,
    pub diff_se: f64,
    /// The saddle inequality holds at three standard errors.
    pub holds: bool,
    /// The deviation loses by more than three standard errors.
    pub strictly_worse: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SaddleReport {
    pub start_mode: usize,
    pub value: f64,
    pub saddle: PayoffEstimate,
    pub scheme_tol: f64,
    pub verification_ok: bool,
    pub deviations: Vec<Deviation>,
    pub saddle_ok: bool,
    pub strictly_worse: usize,
}

/// Deviations must lose strictly at least this often for the audit to be
/// informative.
pub const MIN_STRICTLY_WORSE: usize = 5;

impl SaddleReport {
    pub fn non_vacuous(&self) -> bool {
        self.strictly_worse >= MIN_STRICTLY_WORSE
    }

    pub fn passed(&self) -> bool {
        self.verification_ok && self.saddle_ok
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "start mode {}\nvalue v(t0, x0) = {}\nJ(u*, v*) = {} (se {}, {} paths)\n|J - v| = {} allowed {}: {}\n",
            self.start_mode + 1,
            self.value,
            self.saddle.mean,
            self.saddle.se,
            self.saddle.n_paths,
            (self.saddle.mean - self.value).abs(),
            3.0 * self.saddle.se + self.scheme_tol,
            verdict(self.verification_ok)
        );
        for (n, d) in self.deviations.iter().enumerate() {
            s.push_str(&format!(
                "deviation {n} by {}: J = {} diff {} (se {}) {}{}\n",
                d.deviator,
                d.estimate.mean,
                d.diff_mean,
                d.diff_se,
                verdict(d.holds),
                if d.strictly_worse { ", strictly worse" } else { "" }
            ));
        }
        s.push_str(&format!(
            "saddle inequalities: {}\nstrictly worse deviations: {} (need {})\n",
            verdict(self.saddle_ok),
            self.strictly_worse,
            MIN_STRICTLY_WORSE
        ));
        s
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "kind,deviator,mean,se,diff_mean,diff_se,holds,strictly_worse")?;
        writeln!(
            w,
            "saddle,,{},{},0,0,{},false",
            self.saddle.mean, self.saddle.se, self.verification_ok
        )?;
        for d in &self.deviations {
            writeln!(
                w,
                "deviation,{},{},{},{},{},{},{}",
                d.deviator, d.estimate.mean, d.estimate.se, d.diff_mean, d.diff_se, d.holds, d.strictly_worse
            )?;
        }
        w.flush()
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

/// Random time list of one to three grid times.
fn random_times(rng: &mut ChaCha8Rng, bundle: &PathBundle) -> Vec<f64> {
    let k = rng.gen_range(1..=3);
    let mut steps: Vec<usize> = (0..k).map(|_| rng.gen_range(0..=bundle.n_steps())).collect();
    steps.sort_unstable();
    steps.into_iter().map(|j| bundle.time(j)).collect()
}

/// Plays the saddle pair and `n_perturbations` random time-list deviations
/// per side against it, on the same paths.
pub fn saddle_audit(
    setup: &GameSetup,
    field: Arc<ValueField>,
    start_mode: usize,
    n_perturbations: usize,
    seed: u64,
    eps: Option<f64>,
    scheme_tol: f64,
) -> Result<SaddleReport> {
    let (u_star, v_star) = synthesize_saddle(setup.problem, field.clone(), start_mode, eps)?;
    let base = couple_controls(setup, &u_star, &v_star, start_mode)?;
    let saddle = payoff(&base);
    let b = setup.bundle;
    let value = field.interp(start_mode, b.t0(), b.x0()[0]);
    let slack = |j: f64| 1e-12 * (1.0 + j.abs());
    let verification_ok = (saddle.mean - value).abs() <= 3.0 * saddle.se + scheme_tol + slack(value);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deviations = Vec::with_capacity(2 * n_perturbations);
    for who in [Player::C1, Player::C2] {
        for _ in 0..n_perturbations {
            let times = random_times(&mut rng, b);
            let dev = Control::times(who, times.clone())?;
            let plays = match who {
                Player::C1 => couple_controls(setup, &dev, &v_star, start_mode)?,
                Player::C2 => couple_controls(setup, &u_star, &dev, start_mode)?,
            };
            // positive diff means the deviator did better
            let sign = if who == Player::C1 { 1.0 } else { -1.0 };
            let diffs: Vec<f64> = plays
                .iter()
                .zip(&base)
                .map(|(a, s)| sign * (a.payoff() - s.payoff()))
                .collect();
            let (diff_mean, diff_se) = mean_se(diffs.iter().copied());
            let tol = 3.0 * diff_se + slack(saddle.mean);
            deviations.push(Deviation {
                deviator: who,
                times,
                estimate: payoff(&plays),
                diff_mean,
                diff_se,
                holds: diff_mean <= tol,
                strictly_worse: diff_mean < -tol,
            });
        }
    }
    let saddle_ok = deviations.iter().all(|d| d.holds);
    let strictly_worse = deviations.iter().filter(|d| d.strictly_worse).count();
    Ok(SaddleReport {
        start_mode,
        value,
        saddle,
        scheme_tol,
        verification_ok,
        deviations,
        saddle_ok,
        strictly_worse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{backward_induct, build_lattice};
    use crate::model::tests::still_problem;
    use crate::pde::{solve_minmax, GridSpec};
    use crate::sde::simulate_paths;

    fn still_setup(h: &[f64], down: f64, up: f64, n_steps: usize) -> (SwitchingProblem, PathBundle) {
        let pb = still_problem(h, down, up);
        let b = simulate_paths(&pb, 0.0, &[0.0], n_steps, 1, 0).unwrap();
        (pb, b)
    }

    fn times(who: Player, ts: &[f64]) -> Control {
        Control::times(who, ts.to_vec()).unwrap()
    }

    #[test]
    fn c2_then_c1_time_lists() {
        let (pb, b) = still_setup(&[0.0, 0.0, 0.0], 0.3, 0.7, 10);
        let setup = GameSetup::new(&pb, &b);
        let tr = &couple_controls(&setup, &times(Player::C1, &[0.5]), &times(Player::C2, &[0.3]), 0).unwrap()[0];
        let e = &tr.events;
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].switcher, e[0].from, e[0].to), (Player::C2, 0, 1));
        assert!((e[0].time - 0.3).abs() < 1e-12);
        assert_eq!(e[0].cost, 0.7);
        assert_eq!((e[1].switcher, e[1].from, e[1].to), (Player::C1, 1, 2));
        assert_eq!(tr.cost_process(Player::C1, 0.45), 0.0);
        assert_eq!(tr.cost_process(Player::C2, 0.45), 0.7);
        assert_eq!(tr.a_total, 0.3);
    }

    #[test]
    fn ties_go_to_the_maximizer_first() {
        let (pb, b) = still_setup(&[0.0, 0.0, 0.0], 0.3, 0.7, 10);
        let setup = GameSetup::new(&pb, &b);
        let tr = &couple_controls(&setup, &times(Player::C1, &[0.4]), &times(Player::C2, &[0.4]), 0).unwrap()[0];
        assert_eq!(tr.events[0].switcher, Player::C1);
        assert_eq!(tr.events[0].cost, 0.3);
        assert_eq!(tr.events[1].switcher, Player::C2);
        assert_eq!(tr.events[1].time, tr.events[0].time);
    }

    #[test]
    fn empty_controls_collect_reward_and_terminal() {
        let pb = SwitchingProblem::builder(2, 1.0)
            .constant_costs(1.0, 1.0)
            .reward(1, "1", |_, _, _| 1.0)
            .terminal(1, "3", |_| 3.0)
            .build()
            .unwrap();
        let b = simulate_paths(&pb, 0.0, &[0.0], 8, 2, 0).unwrap();
        let setup = GameSetup::new(&pb, &b);
        let tr = couple_controls(&setup, &Control::never(Player::C1), &Control::never(Player::C2), 1).unwrap();
        assert!(tr[0].events.is_empty());
        assert_eq!(tr[0].final_mode, 1);
        assert!((tr[0].payoff() - 4.0).abs() < 1e-12);
        assert_eq!(payoff(&tr).se, 0.0);
    }

    #[test]
    fn forced_minimizer_switch_pays_the_maximizer() {
        let (pb, b) = still_setup(&[0.0, 10.0], 1.0, 1.0, 10);
        let setup = GameSetup::new(&pb, &b);
        let tr = couple_controls(&setup, &Control::never(Player::C1), &times(Player::C2, &[0.3]), 0).unwrap();
        assert_eq!(tr[0].payoff(), 11.0);
        assert_eq!(tr[0].c_infinity(), -1.0);
    }

    #[test]
    fn no_switch_payoff_is_terminal_mean() {
        let pb = SwitchingProblem::builder(2, 1.0)
            .constant_costs(1.0, 1.0)
            .vol_1d("1", |_, _| 1.0)
            .terminal(0, "x^2", |x| x[0] * x[0])
            .build()
            .unwrap();
        let b = simulate_paths(&pb, 0.0, &[0.0], 20, 500, 7).unwrap();
        let setup = GameSetup::new(&pb, &b);
        let tr = couple_controls(&setup, &Control::never(Player::C1), &Control::never(Player::C2), 0).unwrap();
        let direct = (0..500).map(|q| b.state(q, 20)[0].powi(2)).sum::<f64>() / 500.0;
        assert!((payoff(&tr).mean - direct).abs() < 1e-12);
    }

    #[test]
    fn cyclic_law_and_cost_attribution() {
        let (pb, b) = still_setup(&[0.0, 0.0, 0.0], 0.3, 0.7, 20);
        let setup = GameSetup::new(&pb, &b);
        let u = times(Player::C1, &[0.1, 0.1, 0.5, 0.9]);
        let v = times(Player::C2, &[0.1, 0.6, f64::INFINITY]);
        let tr = &couple_controls(&setup, &u, &v, 2).unwrap()[0];
        for (n, e) in tr.events.iter().enumerate() {
            assert_eq!(e.to, (2 + n + 1) % 3);
        }
        assert_eq!(tr.final_mode, (2 + tr.events.len()) % 3);
        assert!((tr.a_total - 4.0 * 0.3).abs() < 1e-12);
        assert!((tr.b_total - 2.0 * 0.7).abs() < 1e-12);
        assert!((tr.c_partial(tr.events.len()) - tr.c_infinity()).abs() < 1e-12);
    }

    #[test]
    fn switch_cap_flags_zero_cost_loops() {
        let (pb, b) = still_setup(&[0.0, 0.0], 1.0, 1.0, 4);
        let setup = GameSetup::new(&pb, &b);
        let u = Control::scripted(Player::C1, |_, m, _| m == 0);
        let v = Control::scripted(Player::C2, |_, m, _| m == 1);
        let err = couple_controls(&setup, &u, &v, 0).unwrap_err();
        assert!(matches!(err, Error::NonAdmissible { max_switches: 80, .. }), "{err}");
    }

    #[test]
    fn controls_are_checked() {
        let (pb, b) = still_setup(&[0.0, 0.0], 1.0, 1.0, 4);
        let setup = GameSetup::new(&pb, &b);
        assert!(Control::times(Player::C1, vec![0.5, 0.2]).is_err());
        let never = Control::never(Player::C2);
        assert!(couple_controls(&setup, &never, &never, 0).is_err());
        let late = times(Player::C1, &[1.5]);
        assert!(couple_controls(&setup, &late, &never, 0).is_err());
    }

    fn still_field(pb: &SwitchingProblem, n_steps: usize) -> Arc<ValueField> {
        let g = GridSpec {
            t0: 0.0,
            n_steps,
            n_x: 3,
            x_min: -1.0,
            x_max: 1.0,
        };
        Arc::new(solve_minmax(pb, &g).unwrap())
    }

    #[test]
    fn huge_costs_give_empty_strategies() {
        let (pb, _) = still_setup(&[0.0, 1.0, 2.0], 1e6, 1e6, 4);
        let (u, v) = synthesize_saddle(&pb, still_field(&pb, 4), 0, None).unwrap();
        assert!(u.is_never() && v.is_never());
    }

    #[test]
    fn free_loop_fixture_switches_once() {
        let (pb, b) = still_setup(&[0.0, 10.0], 1.0, 1.0, 10);
        let field = still_field(&pb, 10);
        assert_eq!(field.node(0, 1), &[9.0, 10.0]);
        let (u, v) = synthesize_saddle(&pb, field.clone(), 0, None).unwrap();
        let setup = GameSetup::new(&pb, &b);
        let tr = &couple_controls(&setup, &u, &v, 0).unwrap()[0];
        assert_eq!(tr.events.len(), 1);
        assert_eq!(tr.events[0].switcher, Player::C1);
        assert_eq!(tr.events[0].step, 0);
        assert_eq!(tr.payoff(), 9.0);

        // C1 answering scripted C2 switches never ends below the value
        for s in 0..20 {
            let v_dev = times(Player::C2, &[b.time(s % 11)]);
            let u_resp = best_response(&pb, field.clone(), &v_dev, Player::C1, 0, None).unwrap();
            let tr = &couple_controls(&setup, &u_resp, &v_dev, 0).unwrap()[0];
            assert!(tr.payoff() >= 9.0 - 1e-12, "{s}: {tr:?}");
        }
        let replay = best_response(&pb, field, &v, Player::C1, 0, None).unwrap();
        assert_eq!(couple_controls(&setup, &replay, &v, 0).unwrap()[0], *tr);
    }

    #[test]
    fn oversized_tolerance_is_a_conflict() {
        let (pb, _) = still_setup(&[0.0, 0.5], 1.0, 1.0, 4);
        let err = synthesize_saddle(&pb, still_field(&pb, 4), 0, Some(2.5)).unwrap_err();
        assert!(matches!(err, Error::ContactConflict { .. }));
    }

    #[test]
    fn penalized_surfaces_are_refused() {
        let (pb, _) = still_setup(&[0.0, 0.5], 1.0, 1.0, 4);
        let mut f = (*still_field(&pb, 4)).clone();
        f.provenance = Provenance::Penalized { m: 1.0, n: 1.0 };
        assert!(synthesize_saddle(&pb, Arc::new(f), 0, None).is_err());
    }

    #[test]
    fn zero_tolerance_reproduces_lattice_tags() {
        let pb = crate::fixtures::standard();
        let lat = build_lattice(&pb, 0.0, 0.0, 8, 9).unwrap();
        let lv = backward_induct(&pb, &lat).unwrap();
        let f = &lv.field;
        let (mut lower, mut upper) = (0, 0);
        for j in 0..f.n_times() {
            for k in 0..f.n_x() {
                for i in 0..3 {
                    let tag = f.regime(i, j, k).unwrap();
                    let c1 = contact(&pb, f, 0.0, Player::C1, i, j, k);
                    assert_eq!(c1, tag == crate::clamp::Regime::LowerContact, "{j} {k} {i}");
                    lower += c1 as usize;
                    if tag != crate::clamp::Regime::LowerContact {
                        let c2 = contact(&pb, f, 0.0, Player::C2, i, j, k);
                        assert_eq!(c2, tag == crate::clamp::Regime::UpperContact);
                        upper += c2 as usize;
                    }
                }
            }
        }
        assert!(lower > 0 && upper > 0, "{lower} {upper}");
    }

    #[test]
    fn deterministic_audit_is_exact() {
        let pb = crate::fixtures::opposed_rewards(0.2, 0.25, 0.0);
        let g = GridSpec {
            t0: 0.0,
            n_steps: 50,
            n_x: 5,
            x_min: -1.0,
            x_max: 1.0,
        };
        let field = Arc::new(solve_minmax(&pb, &g).unwrap());
        let b = simulate_paths(&pb, 0.0, &[0.0], 50, 2, 0).unwrap();
        let setup = GameSetup::new(&pb, &b).with_ybar(&field);
        for start in 0..2 {
            let r = saddle_audit(&setup, field.clone(), start, 6, 11, None, 0.0).unwrap();
            assert_eq!(r.saddle.se, 0.0);
            assert!(r.verification_ok, "{}", r.to_text());
            assert!(r.saddle_ok, "{}", r.to_text());
            assert!(r.strictly_worse > 0);
        }
    }

    #[test]
    fn huge_cost_audit_degenerates() {
        let pb = crate::fixtures::opposed_rewards(1e6, 1e6, 0.3);
        let g = GridSpec::around(&pb, 0.0, 0.0, 200, 41);
        let field = Arc::new(solve_minmax(&pb, &g).unwrap());
        let b = simulate_paths(&pb, 0.0, &[0.0], 200, 50, 1).unwrap();
        let setup = GameSetup::new(&pb, &b).with_ybar(&field);
        let (u, v) = synthesize_saddle(&pb, field.clone(), 0, None).unwrap();
        let tr = couple_controls(&setup, &u, &v, 0).unwrap();
        assert!(tr.iter().all(|t| t.events.is_empty()));
        let r = saddle_audit(&setup, field.clone(), 0, 4, 3, None, 5e-2).unwrap();
        assert!(r.deviations.iter().all(|d| d.strictly_worse));
    }

    #[test]
    fn transcripts_are_deterministic_and_exportable() {
        let pb = crate::fixtures::standard();
        let b = simulate_paths(&pb, 0.0, &[0.0], 20, 64, 5).unwrap();
        let setup = GameSetup::new(&pb, &b);
        let u = times(Player::C1, &[0.2, 0.7]);
        let v = times(Player::C2, &[0.5]);
        let a = couple_controls(&setup, &u, &v, 0).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = one.install(|| couple_controls(&setup, &u, &v, 0).unwrap());
        assert_eq!(a, c);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        write_transcripts(&path, &a).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 64);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["start_mode"], 1);
        assert_eq!(first["events"][0]["switcher"], "C1");
    }
}
