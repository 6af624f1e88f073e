//! Run configuration read from TOML.
//!
//! Problem data are built from named function families with numeric
//! parameters; no code is embedded in a config. Every section except
//! `[problem]` is optional and filled with defaults by [`RunConfig::resolve`].
//! The key schema is documented in the repository README.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Cost, SwitchingProblem};
use crate::pde::{GridSpec, LadderSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl OneOrMany {
    fn per_mode(&self, p: usize, key: &str) -> Result<Vec<f64>> {
        match self {
            OneOrMany::One(v) => Ok(vec![*v; p]),
            OneOrMany::Many(v) if v.len() == p => Ok(v.clone()),
            OneOrMany::Many(v) => Err(Error::Config(format!(
                "{key} has {} entries, expected 1 or {p}",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    Zero,
    Constant,
    Affine,
    Polynomial,
    Cosine,
}

/// One-dimensional coefficient family. `affine` reads `intercept + slope*x`,
/// `polynomial` reads `sum_k coeffs[k] x^k`, `cosine` reads
/// `level + amplitude*cos(frequency*x + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub kind: FamilyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intercept: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coeffs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<f64>,
    /// Rewards only: adds `coupling * sum_l max(y^l, coupling_floor)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling_floor: Option<f64>,
}

fn need(v: Option<f64>, kind: &str, key: &str, at: &str) -> Result<f64> {
    v.ok_or_else(|| Error::Config(format!("{at}: kind \"{kind}\" needs key `{key}`")))
}

type ScalarFn = Box<dyn Fn(f64) -> f64 + Send + Sync>;

impl FamilySpec {
    fn scalar(&self, at: &str) -> Result<(String, ScalarFn)> {
        Ok(match self.kind {
            FamilyKind::Zero => ("0".into(), Box::new(|_| 0.0)),
            FamilyKind::Constant => {
                let c = need(self.value, "constant", "value", at)?;
                (format!("{c}"), Box::new(move |_| c))
            }
            FamilyKind::Affine => {
                let a = need(self.intercept, "affine", "intercept", at)?;
                let b = need(self.slope, "affine", "slope", at)?;
                (format!("{a}+{b}*x"), Box::new(move |x| a + b * x))
            }
            FamilyKind::Polynomial => {
                let c = self
                    .coeffs
                    .clone()
                    .ok_or_else(|| Error::Config(format!("{at}: kind \"polynomial\" needs key `coeffs`")))?;
                let tag = format!("poly{c:?}");
                (tag, Box::new(move |x| c.iter().rev().fold(0.0, |acc, a| acc * x + a)))
            }
            FamilyKind::Cosine => {
                let level = self.level.unwrap_or(0.0);
                let amp = self.amplitude.unwrap_or(1.0);
                let freq = self.frequency.unwrap_or(1.0);
                let phase = self.phase.unwrap_or(0.0);
                (
                    format!("{level}+{amp}*cos({freq}*x+{phase})"),
                    Box::new(move |x| level + amp * (freq * x + phase).cos()),
                )
            }
        })
    }

    fn check_finite(&self, at: &str) -> Result<()> {
        let scalars = [
            self.value,
            self.intercept,
            self.slope,
            self.level,
            self.amplitude,
            self.frequency,
            self.phase,
            self.coupling,
            self.coupling_floor,
        ];
        let all = scalars.iter().flatten().chain(self.coeffs.iter().flatten());
        for v in all {
            if !v.is_finite() {
                return Err(Error::Config(format!("{at}: non-finite parameter {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub down: OneOrMany,
    pub up: OneOrMany,
    #[serde(default)]
    pub down_t_slope: f64,
    #[serde(default)]
    pub down_x_slope: f64,
    #[serde(default)]
    pub up_t_slope: f64,
    #[serde(default)]
    pub up_x_slope: f64,
}

fn default_t0() -> f64 {
    0.0
}

fn default_growth() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub modes: usize,
    pub horizon: f64,
    #[serde(default = "default_growth")]
    pub growth_exponent: u32,
    #[serde(default = "default_t0")]
    pub t0: f64,
    #[serde(default)]
    pub x0: f64,
    pub drift: FamilySpec,
    pub vol: FamilySpec,
    /// One entry for all modes or one per mode.
    pub reward: Vec<FamilySpec>,
    pub terminal: Vec<FamilySpec>,
    pub costs: CostSpec,
}

impl ProblemSpec {
    pub fn build(&self) -> Result<SwitchingProblem> {
        let p = self.modes;
        if p < 2 {
            return Err(Error::Config(format!("problem.modes = {p}, need at least 2")));
        }
        if !(self.horizon > self.t0) || !self.horizon.is_finite() || !self.t0.is_finite() || !self.x0.is_finite() {
            return Err(Error::Config(format!(
                "need finite t0 < horizon (t0 = {}, horizon = {})",
                self.t0, self.horizon
            )));
        }
        for (name, list) in [("reward", &self.reward), ("terminal", &self.terminal)] {
            if list.len() != 1 && list.len() != p {
                return Err(Error::Config(format!(
                    "problem.{name} has {} entries, expected 1 or {p}",
                    list.len()
                )));
            }
        }
        self.drift.check_finite("problem.drift")?;
        self.vol.check_finite("problem.vol")?;
        let (dtag, drift) = self.drift.scalar("problem.drift")?;
        let (vtag, vol) = self.vol.scalar("problem.vol")?;
        let mut b = SwitchingProblem::builder(p, self.horizon)
            .growth_exponent(self.growth_exponent)
            .drift_1d(dtag, move |_, x| drift(x))
            .vol_1d(vtag, move |_, x| vol(x));

        let down = self.costs.down.per_mode(p, "problem.costs.down")?;
        let up = self.costs.up.per_mode(p, "problem.costs.up")?;
        let c = &self.costs;
        for v in down
            .iter()
            .chain(&up)
            .chain([&c.down_t_slope, &c.down_x_slope, &c.up_t_slope, &c.up_x_slope])
        {
            if !v.is_finite() {
                return Err(Error::Config(format!("problem.costs: non-finite value {v}")));
            }
        }
        for i in 0..p {
            let reward = &self.reward[i.min(self.reward.len() - 1)];
            let at = format!("problem.reward[{}]", i + 1);
            reward.check_finite(&at)?;
            let (rtag, base) = reward.scalar(&at)?;
            let coupling = reward.coupling.unwrap_or(0.0);
            let floor = reward.coupling_floor.unwrap_or(-10.0);
            if coupling == 0.0 {
                b = b.reward(i, rtag, move |_, x, _| base(x[0]));
            } else {
                b = b.reward(i, format!("{rtag}+{coupling}*sum(max(y,{floor}))"), move |_, x, y| {
                    base(x[0]) + coupling * y.iter().map(|v| v.max(floor)).sum::<f64>()
                });
            }

            let term = &self.terminal[i.min(self.terminal.len() - 1)];
            let at = format!("problem.terminal[{}]", i + 1);
            term.check_finite(&at)?;
            let (ttag, h) = term.scalar(&at)?;
            b = b.terminal(i, ttag, move |x| h(x[0]));

            b = b
                .cost_down(i, Cost::affine(down[i], c.down_t_slope, c.down_x_slope))
                .cost_up(i, Cost::affine(up[i], c.up_t_slope, c.up_x_slope));
        }
        b.build()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n_steps: usize,
    pub n_x: usize,
    /// Default: six standard deviations of the diffusion around x0.
    pub x_min: Option<f64>,
    pub x_max: Option<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_steps: 400,
            n_x: 201,
            x_min: None,
            x_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatticeConfig {
    /// Default: the grid's step count.
    pub n_steps: Option<usize>,
    pub n_levels: usize,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self {
            n_steps: None,
            n_levels: 201,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LadderConfig {
    /// Doubling schedule `1, 2, ..., 2^rungs` unless `penalties` is given.
    pub rungs: u32,
    pub penalties: Option<Vec<f64>>,
    pub cauchy_tol: f64,
    pub max_rungs: Option<usize>,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self {
            rungs: 6,
            penalties: None,
            cauchy_tol: 0.0,
            max_rungs: None,
        }
    }
}

impl LadderConfig {
    pub fn schedule(&self) -> LadderSchedule {
        let mut s = LadderSchedule::doubling(self.rungs);
        if let Some(p) = &self.penalties {
            s.penalties = p.clone();
        }
        s.cauchy_tol = self.cauchy_tol;
        if let Some(m) = self.max_rungs {
            s.max_rungs = m;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            n_steps: 100,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BsdeConfig {
    pub m: f64,
    pub n: f64,
    pub degree: usize,
}

impl Default for BsdeConfig {
    fn default() -> Self {
        Self {
            m: 16.0,
            n: 16.0,
            degree: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GameConfig {
    /// 1-based.
    pub start_mode: usize,
    pub perturbations: usize,
    pub perturbation_seed: u64,
    /// Default: twice the residual of the scheme behind the field.
    pub eps_contact: Option<f64>,
    pub scheme_tol: f64,
    pub max_switches: Option<usize>,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            start_mode: 1,
            perturbations: 20,
            perturbation_seed: 2,
            eps_contact: None,
            scheme_tol: 5e-2,
            max_switches: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub samples: usize,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self { samples: 256, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub lattice: LatticeConfig,
    #[serde(default)]
    pub ladder: LadderConfig,
    #[serde(default)]
    pub monte_carlo: MonteCarloConfig,
    #[serde(default)]
    pub bsde: BsdeConfig,
    #[serde(default)]
    pub game: GameConfig,
    #[serde(default)]
    pub audit: AuditConfig,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl RunConfig {
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            file: file.to_string(),
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Fills every defaulted value that depends on the problem, so the
    /// manifest echoes exactly what ran.
    pub fn resolve(mut self) -> Result<(Self, SwitchingProblem)> {
        let problem = self.problem.build()?;
        if self.grid.x_min.is_none() || self.grid.x_max.is_none() {
            let g = GridSpec::around(
                &problem,
                self.problem.t0,
                self.problem.x0,
                self.grid.n_steps,
                self.grid.n_x,
            );
            self.grid.x_min.get_or_insert(g.x_min);
            self.grid.x_max.get_or_insert(g.x_max);
        }
        self.lattice.n_steps.get_or_insert(self.grid.n_steps);
        if self.game.start_mode == 0 || self.game.start_mode > self.problem.modes {
            return Err(Error::Config(format!(
                "game.start_mode = {} outside 1..={}",
                self.game.start_mode, self.problem.modes
            )));
        }
        self.grid_spec().validate(&problem)?;
        self.ladder.schedule().validate()?;
        Ok((self, problem))
    }

    /// Grid of the finite-difference routes; call after [`RunConfig::resolve`].
    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            t0: self.problem.t0,
            n_steps: self.grid.n_steps,
            n_x: self.grid.n_x,
            x_min: self.grid.x_min.unwrap_or(self.problem.x0 - 1.0),
            x_max: self.grid.x_max.unwrap_or(self.problem.x0 + 1.0),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
