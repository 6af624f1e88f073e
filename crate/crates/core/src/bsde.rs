//! Regression Monte Carlo for the penalized backward system.
//!
//! Conditional expectations are least-squares projections on a polynomial
//! basis of the state, standardized per step. Normal equations are
//! accumulated over fixed-size path chunks and summed in chunk order, so
//! results do not depend on the thread count.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{meta_path, ValueField};
use crate::model::{penalty_terms, SwitchingProblem};
use crate::pde::{LadderDirection, LadderSchedule};
use crate::sde::PathBundle;

const CHUNK: usize = 4096;
pub const MAX_CONDITION: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegressionBasis {
    /// Highest power of each standardized state coordinate.
    pub degree: usize,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self { degree: 4 }
    }
}

/// Standardization and fitted coefficients of one backward step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRegression {
    pub shift: Vec<f64>,
    /// Zero marks a coordinate with no spread at this step; it is left out
    /// of the basis.
    pub scale: Vec<f64>,
    pub y_coeffs: Vec<Vec<f64>>,
    pub z_coeffs: Vec<Vec<f64>>,
    /// Degrees-of-freedom corrected residual RMSE of the Y regression, per mode.
    pub rmse: Vec<f64>,
    /// Condition number of the design matrix.
    pub cond: f64,
}

impl StepRegression {
    fn n_features(&self, degree: usize) -> usize {
        1 + self.scale.iter().filter(|s| **s > 0.0).count() * degree
    }

    fn features(&self, x: &[f64], degree: usize, out: &mut Vec<f64>) {
        out.clear();
        out.push(1.0);
        for ((xc, shift), scale) in x.iter().zip(&self.shift).zip(&self.scale) {
            if *scale > 0.0 {
                let z = (xc - shift) / scale;
                let mut pw = 1.0;
                for _ in 0..degree {
                    pw *= z;
                    out.push(pw);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BsdeSolution {
    pub m: f64,
    pub n: f64,
    pub seed: u64,
    pub degree: usize,
    n_paths: usize,
    n_steps: usize,
    p: usize,
    d: usize,
    t0: f64,
    dt: f64,
    /// `(path * (n_steps + 1) + step) * p + mode`
    y: Vec<f64>,
    /// `((path * n_steps + step) * p + mode) * d + component`
    z: Vec<f64>,
    k_plus: Vec<f64>,
    k_minus: Vec<f64>,
    pub steps: Vec<StepRegression>,
}

impl BsdeSolution {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn time(&self, step: usize) -> f64 {
        self.t0 + step as f64 * self.dt
    }

    #[inline]
    fn at(&self, path: usize, step: usize) -> usize {
        (path * (self.n_steps + 1) + step) * self.p
    }

    #[inline]
    pub fn y(&self, path: usize, step: usize, mode: usize) -> f64 {
        self.y[self.at(path, step) + mode]
    }

    pub fn y_node(&self, path: usize, step: usize) -> &[f64] {
        let a = self.at(path, step);
        &self.y[a..a + self.p]
    }

    pub fn z(&self, path: usize, step: usize, mode: usize) -> &[f64] {
        let a = ((path * self.n_steps + step) * self.p + mode) * self.d;
        &self.z[a..a + self.d]
    }

    /// Running sum of the lower penalty times dt (pushes up, from the n-term).
    pub fn k_plus(&self, path: usize, step: usize, mode: usize) -> f64 {
        self.k_plus[self.at(path, step) + mode]
    }

    /// Running sum of the upper penalty times dt (pushes down, from the m-term).
    pub fn k_minus(&self, path: usize, step: usize, mode: usize) -> f64 {
        self.k_minus[self.at(path, step) + mode]
    }

    /// Time-zero values (every path starts at the same point).
    pub fn y0(&self) -> Vec<f64> {
        self.y_node(0, 0).to_vec()
    }

    /// CSV `path,step,mode,Y,K_plus,K_minus` with a metadata sidecar.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        if let Some(dir) = csv_path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let file = fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
        self.write_csv(BufWriter::new(file))
            .map_err(|e| Error::io(csv_path, e))?;
        let meta = BsdeMeta {
            seed: self.seed,
            m: self.m,
            n: self.n,
            degree: self.degree,
            n_paths: self.n_paths,
            n_steps: self.n_steps,
            p: self.p,
            t0: self.t0,
            dt: self.dt,
            y0: self.y0(),
            version: crate::VERSION,
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
        let mp = meta_path(csv_path);
        fs::write(&mp, text).map_err(|e| Error::io(&mp, e))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "path,step,mode,Y,K_plus,K_minus")?;
        for path in 0..self.n_paths {
            for step in 0..=self.n_steps {
                let a = self.at(path, step);
                for i in 0..self.p {
                    writeln!(
                        w,
                        "{path},{step},{},{},{},{}",
                        i + 1,
                        self.y[a + i],
                        self.k_plus[a + i],
                        self.k_minus[a + i]
                    )?;
                }
            }
        }
        w.flush()
    }
}

#[derive(Serialize)]
struct BsdeMeta {
    seed: u64,
    m: f64,
    n: f64,
    degree: usize,
    n_paths: usize,
    n_steps: usize,
    p: usize,
    t0: f64,
    dt: f64,
    y0: Vec<f64>,
    version: &'static str,
}

fn check_bundle(problem: &SwitchingProblem, bundle: &PathBundle) -> Result<()> {
    let end = bundle.t0() + bundle.n_steps() as f64 * bundle.dt();
    if bundle.dim_x() != problem.dim_x()
        || bundle.brownian_dim() != problem.brownian_dim()
        || (end - problem.horizon()).abs() > 1e-9 * (1.0 + problem.horizon().abs())
    {
        return Err(Error::InvalidArgument(
            "path bundle does not match the problem's dimensions or horizon".into(),
        ));
    }
    Ok(())
}

/// Backward regression for the doubly penalized system with penalties
/// evaluated explicitly at the next-step values.
pub fn solve_penalized_bsde(
    problem: &SwitchingProblem,
    bundle: &PathBundle,
    m: f64,
    n: f64,
    basis: RegressionBasis,
) -> Result<BsdeSolution> {
    check_bundle(problem, bundle)?;
    if !(m >= 0.0 && n >= 0.0 && m.is_finite() && n.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "penalties must be finite and >= 0 (m={m}, n={n})"
        )));
    }
    let dt = bundle.dt();
    if m * dt > 1.0 {
        return Err(Error::PenaltyStiffness {
            name: "m",
            value: m * dt,
        });
    }
    if n * dt > 1.0 {
        return Err(Error::PenaltyStiffness {
            name: "n",
            value: n * dt,
        });
    }
    let p = problem.p();
    let d = problem.brownian_dim();
    let np = bundle.n_paths();
    let ns = bundle.n_steps();
    let stride = (ns + 1) * p;
    let mut y = vec![0.0; np * stride];
    let mut z = vec![0.0; np * ns * p * d];
    let mut kp_inc = vec![0.0; np * stride];
    let mut km_inc = vec![0.0; np * stride];

    y.par_chunks_mut(stride)
        .enumerate()
        .try_for_each(|(path, row)| -> Result<()> {
            let x = bundle.state(path, ns);
            for i in 0..p {
                let h = problem.terminal(i, x);
                if !h.is_finite() {
                    return Err(Error::PathEvaluation {
                        what: "terminal payoff",
                        path,
                        step: ns,
                        state: x.to_vec(),
                    });
                }
                row[ns * p + i] = h;
            }
            Ok(())
        })?;

    let mut steps = vec![None; ns];
    // targets: p columns of Y, then p*d columns of Y * dB / dt
    let width = p + p * d;
    let mut targets = vec![0.0; np * width];
    for j in (0..ns).rev() {
        let t = bundle.time(j);
        {
            let y_ref = &y;
            targets
                .par_chunks_mut(width)
                .zip(kp_inc.par_chunks_mut(stride))
                .zip(km_inc.par_chunks_mut(stride))
                .enumerate()
                .try_for_each(|(path, ((row, kp), km))| -> Result<()> {
                    let x = bundle.state(path, j);
                    let next = &y_ref[path * stride + (j + 1) * p..path * stride + (j + 2) * p];
                    let dw = bundle.increment(path, j);
                    for i in 0..p {
                        let f = problem.reward(i, t, x, next);
                        let down = problem.cost_down(i, t, x);
                        let up = problem.cost_up(i, t, x);
                        let nxt = next[(i + 1) % p];
                        let push_up = penalty_terms(next[i], nxt, down, up, 0.0, n);
                        let push_down = -penalty_terms(next[i], nxt, down, up, m, 0.0);
                        let v = next[i] + dt * (f + push_up - push_down);
                        if !v.is_finite() {
                            return Err(Error::PathEvaluation {
                                what: "penalized driver",
                                path,
                                step: j,
                                state: x.to_vec(),
                            });
                        }
                        row[i] = v;
                        kp[(j + 1) * p + i] = push_up * dt;
                        km[(j + 1) * p + i] = push_down * dt;
                        for c in 0..d {
                            row[p + i * d + c] = next[i] * dw[c] / dt;
                        }
                    }
                    Ok(())
                })?;
        }

        let fit = regress(bundle, j, &targets, width, p, basis.degree)?;
        let fit = fit.ok_or(Error::Conditioning {
            step: j,
            cond: f64::INFINITY,
        })?;
        if fit.cond > MAX_CONDITION {
            return Err(Error::Conditioning {
                step: j,
                cond: fit.cond,
            });
        }

        let n_feat = fit.n_features(basis.degree);
        let zs = &mut z;
        y.par_chunks_mut(stride)
            .zip(zs.par_chunks_mut(ns * p * d))
            .enumerate()
            .for_each(|(path, (row, zrow))| {
                let mut phi = Vec::with_capacity(n_feat);
                fit.features(bundle.state(path, j), basis.degree, &mut phi);
                for i in 0..p {
                    row[j * p + i] = dot(&phi, &fit.y_coeffs[i]);
                    for c in 0..d {
                        zrow[(j * p + i) * d + c] = dot(&phi, &fit.z_coeffs[i * d + c]);
                    }
                }
            });
        steps[j] = Some(fit);
    }

    // K increments were stored at the step they complete; accumulate forward
    let cumulate = |inc: &mut Vec<f64>| {
        inc.par_chunks_mut(stride).for_each(|row| {
            for j in 1..=ns {
                for i in 0..p {
                    row[j * p + i] += row[(j - 1) * p + i];
                }
            }
        });
    };
    cumulate(&mut kp_inc);
    cumulate(&mut km_inc);

    Ok(BsdeSolution {
        m,
        n,
        seed: bundle.seed(),
        degree: basis.degree,
        n_paths: np,
        n_steps: ns,
        p,
        d,
        t0: bundle.t0(),
        dt,
        y,
        z,
        k_plus: kp_inc,
        k_minus: km_inc,
        steps: steps.into_iter().map(|s| s.expect("every step fitted")).collect(),
    })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Least squares of every target column on the step's basis. Returns `None`
/// when the normal equations are singular.
fn regress(
    bundle: &PathBundle,
    j: usize,
    targets: &[f64],
    width: usize,
    p: usize,
    degree: usize,
) -> Result<Option<StepRegression>> {
    let np = bundle.n_paths();
    let k = bundle.dim_x();
    let mut shift = vec![0.0; k];
    let mut scale = vec![0.0; k];
    for c in 0..k {
        let mean = (0..np).map(|q| bundle.state(q, j)[c]).sum::<f64>() / np as f64;
        let var = (0..np).map(|q| (bundle.state(q, j)[c] - mean).powi(2)).sum::<f64>() / np as f64;
        shift[c] = mean;
        let sd = var.sqrt();
        scale[c] = if sd > 1e-12 * (1.0 + mean.abs()) && np > degree {
            sd
        } else {
            0.0
        };
    }
    let mut fit = StepRegression {
        shift,
        scale,
        y_coeffs: Vec::new(),
        z_coeffs: Vec::new(),
        rmse: vec![0.0; p],
        cond: 1.0,
    };
    let nf = fit.n_features(degree);

    // chunked normal equations, reduced in chunk order
    let partial: Vec<(Vec<f64>, Vec<f64>)> = (0..np.div_ceil(CHUNK))
        .into_par_iter()
        .map(|ch| {
            let mut gram = vec![0.0; nf * nf];
            let mut rhs = vec![0.0; nf * width];
            let mut phi = Vec::with_capacity(nf);
            for q in ch * CHUNK..((ch + 1) * CHUNK).min(np) {
                fit.features(bundle.state(q, j), degree, &mut phi);
                let row = &targets[q * width..(q + 1) * width];
                for a in 0..nf {
                    for b in a..nf {
                        gram[a * nf + b] += phi[a] * phi[b];
                    }
                    for (c, t) in row.iter().enumerate() {
                        rhs[a * width + c] += phi[a] * t;
                    }
                }
            }
            (gram, rhs)
        })
        .collect();
    let mut gram = DMatrix::<f64>::zeros(nf, nf);
    let mut rhs = DMatrix::<f64>::zeros(nf, width);
    for (g, r) in &partial {
        for a in 0..nf {
            for b in a..nf {
                gram[(a, b)] += g[a * nf + b];
            }
            for c in 0..width {
                rhs[(a, c)] += r[a * width + c];
            }
        }
    }
    for a in 0..nf {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    let eig = gram.clone().symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    fit.cond = if lo > 0.0 { (hi / lo).sqrt() } else { f64::INFINITY };
    if !(fit.cond <= MAX_CONDITION) {
        return Ok(Some(fit));
    }
    let Some(chol) = gram.cholesky() else {
        return Ok(None);
    };
    let coeffs = chol.solve(&rhs);
    let column = |c: usize| -> Vec<f64> { coeffs.column(c).iter().copied().collect() };
    fit.y_coeffs = (0..p).map(column).collect();
    fit.z_coeffs = (p..width).map(column).collect();

    // residual spread of the Y fits
    let mut phi = Vec::with_capacity(nf);
    let mut ssr = vec![0.0; p];
    for q in 0..np {
        fit.features(bundle.state(q, j), degree, &mut phi);
        let v = DVector::from_column_slice(&phi);
        for (i, s) in ssr.iter_mut().enumerate() {
            let pred = v.dot(&DVector::from_column_slice(&fit.y_coeffs[i]));
            *s += (targets[q * width + i] - pred).powi(2);
        }
    }
    let dof = np.saturating_sub(nf).max(1) as f64;
    fit.rmse = ssr.iter().map(|s| (s / dof).sqrt()).collect();
    Ok(Some(fit))
}

/// Penalized solves across the rungs of `schedule`. Decreasing ladders vary
/// `m` with `n` fixed at the first inner penalty (0 if none); increasing
/// ladders vary `n` with `m` fixed likewise. Consecutive rungs must be
/// ordered at every (path, step, mode) up to three regression RMSEs.
pub fn ladder_bsde(
    problem: &SwitchingProblem,
    bundle: &PathBundle,
    schedule: &LadderSchedule,
    direction: LadderDirection,
    basis: RegressionBasis,
) -> Result<Vec<BsdeSolution>> {
    let fixed = schedule.inner.first().copied().unwrap_or(0.0);
    let mut out: Vec<BsdeSolution> = Vec::new();
    for &pen in schedule.penalties.iter().take(schedule.max_rungs) {
        let (m, n) = match direction {
            LadderDirection::Decreasing => (pen, fixed),
            LadderDirection::Increasing => (fixed, pen),
        };
        let sol = solve_penalized_bsde(problem, bundle, m, n, basis)?;
        if let Some(prev) = out.last() {
            let mut violation = 0.0f64;
            for j in 0..=sol.n_steps {
                let noise = if j < sol.n_steps {
                    let a = &sol.steps[j].rmse;
                    let b = &prev.steps[j].rmse;
                    3.0 * a.iter().chain(b).fold(0.0f64, |acc, v| acc.max(*v))
                } else {
                    0.0
                };
                for path in 0..sol.n_paths {
                    for i in 0..sol.p {
                        let step = sol.y(path, j, i) - prev.y(path, j, i);
                        let wrong = match direction {
                            LadderDirection::Decreasing => step,
                            LadderDirection::Increasing => -step,
                        };
                        violation = violation.max(wrong - noise);
                    }
                }
            }
            if violation > 1e-12 {
                return Err(Error::LadderMonotonicity {
                    from: match direction {
                        LadderDirection::Decreasing => prev.m,
                        LadderDirection::Increasing => prev.n,
                    },
                    to: pen,
                    violation,
                });
            }
        }
        out.push(sol);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeynmanKacResidual {
    /// Mean over steps, paths and modes.
    pub mean_abs: f64,
    /// Mean over paths and modes at each step.
    pub per_step: Vec<f64>,
}

/// `|Y^i_j - v^i(t_j, X_j)|` with the surface interpolated bilinearly.
pub fn feynman_kac_residual(
    solution: &BsdeSolution,
    bundle: &PathBundle,
    field: &ValueField,
) -> Result<FeynmanKacResidual> {
    if field.p() != solution.p || bundle.n_paths() != solution.n_paths || bundle.dim_x() != 1 {
        return Err(Error::GridMismatch {
            left: format!("bsde p={} paths={}", solution.p, solution.n_paths),
            right: field.grid_description(),
        });
    }
    let per_step: Vec<f64> = (0..=solution.n_steps)
        .into_par_iter()
        .map(|j| {
            let t = solution.time(j);
            let mut acc = 0.0;
            for path in 0..solution.n_paths {
                let x = bundle.state(path, j)[0];
                for i in 0..solution.p {
                    acc += (solution.y(path, j, i) - field.interp(i, t, x)).abs();
                }
            }
            acc / (solution.n_paths * solution.p) as f64
        })
        .collect();
    let mean_abs = per_step.iter().sum::<f64>() / per_step.len() as f64;
    Ok(FeynmanKacResidual { mean_abs, per_step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::still_problem;
    use crate::pde::{solve_penalized, GridSpec};
    use crate::sde::simulate_paths;

    #[test]
    fn still_paths_keep_terminal_value() {
        let pb = still_problem(&[1.0, -2.0, 0.5], 1.0, 1.0);
        let b = simulate_paths(&pb, 0.0, &[0.3], 10, 50, 1).unwrap();
        let s = solve_penalized_bsde(&pb, &b, 0.0, 0.0, RegressionBasis::default()).unwrap();
        for path in [0, 49] {
            for j in 0..=10 {
                for (a, b) in s.y_node(path, j).iter().zip([1.0, -2.0, 0.5]) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unit_reward_adds_remaining_time() {
        let pb = SwitchingProblem::builder(2, 1.0)
            .constant_costs(1e6, 1e6)
            .reward(0, "1", |_, _, _| 1.0)
            .reward(1, "1", |_, _, _| 1.0)
            .terminal(0, "2", |_| 2.0)
            .build()
            .unwrap();
        let b = simulate_paths(&pb, 0.0, &[0.0], 8, 5, 3).unwrap();
        let s = solve_penalized_bsde(&pb, &b, 0.0, 0.0, RegressionBasis::default()).unwrap();
        for j in 0..=8 {
            let rem = 1.0 - j as f64 / 8.0;
            assert!((s.y(2, j, 0) - (2.0 + rem)).abs() < 1e-12);
            assert!((s.y(2, j, 1) - rem).abs() < 1e-12);
        }
        assert!(s.steps.iter().all(|r| r.cond == 1.0));
    }

    #[test]
    fn still_bsde_equals_still_pde() {
        let pb = crate::fixtures::opposed_rewards(0.2, 0.25, 0.0);
        let g = GridSpec {
            t0: 0.0,
            n_steps: 50,
            n_x: 5,
            x_min: -1.0,
            x_max: 1.0,
        };
        let v = solve_penalized(&pb, &g, 10.0, 5.0).unwrap();
        let b = simulate_paths(&pb, 0.0, &[0.0], 50, 3, 0).unwrap();
        let s = solve_penalized_bsde(&pb, &b, 10.0, 5.0, RegressionBasis::default()).unwrap();
        for j in 0..=50 {
            for i in 0..2 {
                assert!((s.y(1, j, i) - v.value(i, j, 2)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn stiffness_guard() {
        let pb = still_problem(&[0.0, 0.0], 1.0, 1.0);
        let b = simulate_paths(&pb, 0.0, &[0.0], 10, 2, 0).unwrap();
        let err = solve_penalized_bsde(&pb, &b, 11.0, 0.0, RegressionBasis::default()).unwrap_err();
        assert!(matches!(err, Error::PenaltyStiffness { name: "m", .. }));
        let err = solve_penalized_bsde(&pb, &b, 0.0, 10.5, RegressionBasis::default()).unwrap_err();
        assert!(matches!(err, Error::PenaltyStiffness { name: "n", .. }));
    }

    #[test]
    fn too_few_paths_fall_back_to_constant_basis() {
        let pb = SwitchingProblem::builder(2, 1.0)
            .constant_costs(1.0, 1.0)
            .vol_1d("1", |_, _| 1.0)
            .build()
            .unwrap();
        let b = simulate_paths(&pb, 0.0, &[0.0], 4, 2, 0).unwrap();
        let s = solve_penalized_bsde(&pb, &b, 0.0, 0.0, RegressionBasis { degree: 4 }).unwrap();
        assert!(s.steps.iter().all(|r| r.scale == [0.0] && r.y_coeffs[0].len() == 1));
    }

    #[test]
    fn ill_conditioned_basis_is_refused() {
        let pb = SwitchingProblem::builder(2, 1.0)
            .constant_costs(1.0, 1.0)
            .vol_1d("1", |_, _| 1.0)
            .build()
            .unwrap();
        let b = simulate_paths(&pb, 0.0, &[0.0], 4, 2000, 0).unwrap();
        let err = solve_penalized_bsde(&pb, &b, 0.0, 0.0, RegressionBasis { degree: 30 });
        assert!(matches!(err, Err(Error::Conditioning { .. })), "{err:?}");
    }

    #[test]
    fn k_processes_are_nondecreasing_and_vanish_when_unreached() {
        let pb = crate::fixtures::opposed_rewards(0.2, 0.25, 0.3);
        let b = simulate_paths(&pb, 0.0, &[0.0], 40, 400, 2).unwrap();
        let s = solve_penalized_bsde(&pb, &b, 20.0, 20.0, RegressionBasis::default()).unwrap();
        let mut any = false;
        for path in 0..400 {
            for i in 0..2 {
                for j in 1..=40 {
                    assert!(s.k_plus(path, j, i) >= s.k_plus(path, j - 1, i));
                    assert!(s.k_minus(path, j, i) >= s.k_minus(path, j - 1, i));
                }
                any |= s.k_minus(path, 40, i) > 0.0;
            }
        }
        assert!(any);

        let far = SwitchingProblem::builder(2, 1.0)
            .constant_costs(1e6, 1e6)
            .vol_1d("0.3", |_, _| 0.3)
            .reward(0, "1", |_, _, _| 1.0)
            .build()
            .unwrap();
        let b = simulate_paths(&far, 0.0, &[0.0], 40, 100, 2).unwrap();
        let s = solve_penalized_bsde(&far, &b, 20.0, 20.0, RegressionBasis::default()).unwrap();
        for path in 0..100 {
            assert_eq!(s.k_minus(path, 40, 0), 0.0);
            assert_eq!(s.k_plus(path, 40, 1), 0.0);
        }
    }

    #[test]
    fn still_ladder_is_exactly_monotone() {
        let pb = crate::fixtures::opposed_rewards(0.2, 0.25, 0.0);
        let b = simulate_paths(&pb, 0.0, &[0.0], 100, 2, 0).unwrap();
        let sched = LadderSchedule::doubling(6);
        let dec = ladder_bsde(&pb, &b, &sched, LadderDirection::Decreasing, RegressionBasis::default()).unwrap();
        assert_eq!(dec.len(), 7);
        for w in dec.windows(2) {
            for j in 0..=100 {
                for i in 0..2 {
                    assert!(w[1].y(0, j, i) <= w[0].y(0, j, i));
                }
            }
        }
        let inc = ladder_bsde(&pb, &b, &sched, LadderDirection::Increasing, RegressionBasis::default()).unwrap();
        for w in inc.windows(2) {
            assert!(w[1].y(0, 0, 1) >= w[0].y(0, 0, 1));
        }
        let empty = LadderSchedule {
            penalties: vec![],
            ..sched
        };
        assert!(
            ladder_bsde(&pb, &b, &empty, LadderDirection::Decreasing, RegressionBasis::default())
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn thread_count_does_not_change_solution() {
        let pb = crate::fixtures::standard();
        let b = simulate_paths(&pb, 0.0, &[0.0], 20, 9000, 4).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| solve_penalized_bsde(&pb, &b, 4.0, 4.0, RegressionBasis::default()).unwrap());
        let c = four.install(|| solve_penalized_bsde(&pb, &b, 4.0, 4.0, RegressionBasis::default()).unwrap());
        assert_eq!(a.y, c.y);
        assert_eq!(a.z, c.z);
    }

    #[test]
    fn csv_shape() {
        let pb = still_problem(&[0.0, 0.0], 1.0, 1.0);
        let b = simulate_paths(&pb, 0.0, &[0.0], 3, 2, 9).unwrap();
        let s = solve_penalized_bsde(&pb, &b, 0.0, 0.0, RegressionBasis::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.csv");
        s.write(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 4 * 2);
        assert!(fs::read_to_string(dir.path().join("y.meta.toml"))
            .unwrap()
            .contains("seed = 9"));
    }
}
