//! Seeded Euler–Maruyama simulation of the controlled state.
//!
//! Paths are generated in blocks of [`PATH_BLOCK`]. Block `b` draws its
//! Gaussians from ChaCha20 seeded with the bundle seed on stream `b`, so the
//! output does not depend on how many worker threads run the blocks.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::SwitchingProblem;

pub const PATH_BLOCK: usize = 256;

/// Magic bytes of the binary bundle dump.
pub const DUMP_MAGIC: [u8; 4] = *b"SGPB";
pub const DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    t0: f64,
    x0: Vec<f64>,
    n_steps: usize,
    dt: f64,
    n_paths: usize,
    seed: u64,
    dim_x: usize,
    brownian_dim: usize,
    /// `n_paths * n_steps * brownian_dim`
    increments: Vec<f64>,
    /// `n_paths * (n_steps + 1) * dim_x`
    states: Vec<f64>,
    increment_mean: f64,
    increment_var: f64,
}

impl PathBundle {
    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn brownian_dim(&self) -> usize {
        self.brownian_dim
    }

    #[inline]
    pub fn time(&self, step: usize) -> f64 {
        self.t0 + step as f64 * self.dt
    }

    #[inline]
    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let k = self.dim_x;
        let at = (path * (self.n_steps + 1) + step) * k;
        &self.states[at..at + k]
    }

    #[inline]
    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let d = self.brownian_dim;
        let at = (path * self.n_steps + step) * d;
        &self.increments[at..at + d]
    }

    /// Realized mean of all Brownian increments (nominally 0).
    pub fn increment_mean(&self) -> f64 {
        self.increment_mean
    }

    /// Realized variance of all Brownian increments (nominally `dt`).
    pub fn increment_var(&self) -> f64 {
        self.increment_var
    }

    /// First state component along every path at `step`.
    pub fn column_1d(&self, step: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.state(p, step)[0]).collect()
    }

    /// Binary dump: little-endian header (magic, version, dim_x, d, n_paths,
    /// n_steps, seed, t0, dt, x0) followed by the row-major state array
    /// indexed `[path][step][component]`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&DUMP_MAGIC)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim_x as u32).to_le_bytes())?;
        w.write_all(&(self.brownian_dim as u32).to_le_bytes())?;
        w.write_all(&(self.n_paths as u64).to_le_bytes())?;
        w.write_all(&(self.n_steps as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.t0.to_le_bytes())?;
        w.write_all(&self.dt.to_le_bytes())?;
        for v in &self.x0 {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.states {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// Contents of a binary bundle dump.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleDump {
    pub dim_x: usize,
    pub brownian_dim: usize,
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub t0: f64,
    pub dt: f64,
    pub x0: Vec<f64>,
    pub states: Vec<f64>,
}

impl BundleDump {
    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::Config(format!("bundle dump: {m}"));
        let io = |e: std::io::Error| Error::Config(format!("bundle dump: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if magic != DUMP_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        let mut u32_ = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut b4).map_err(io)?;
            Ok(u32::from_le_bytes(b4))
        };
        let version = u32_(&mut r)?;
        if version != DUMP_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dim_x = u32_(&mut r)? as usize;
        let brownian_dim = u32_(&mut r)? as usize;
        let mut u64_ = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut b8).map_err(io)?;
            Ok(u64::from_le_bytes(b8))
        };
        let n_paths = u64_(&mut r)? as usize;
        let n_steps = u64_(&mut r)? as usize;
        let seed = u64_(&mut r)?;
        let t0 = f64::from_bits(u64_(&mut r)?);
        let dt = f64::from_bits(u64_(&mut r)?);
        let x0 = (0..dim_x)
            .map(|_| u64_(&mut r).map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        let len = n_paths * (n_steps + 1) * dim_x;
        let states = (0..len)
            .map(|_| u64_(&mut r).map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim_x,
            brownian_dim,
            n_paths,
            n_steps,
            seed,
            t0,
            dt,
            x0,
            states,
        })
    }
}

/// Simulates `n_paths` Euler paths of the state from `(t0, x0)` to the horizon.
pub fn simulate_paths(
    problem: &SwitchingProblem,
    t0: f64,
    x0: &[f64],
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    if n_steps == 0 || n_paths == 0 {
        return Err(Error::InvalidArgument(
            "simulate_paths needs n_steps >= 1 and n_paths >= 1".into(),
        ));
    }
    if !(t0 < problem.horizon()) {
        return Err(Error::InvalidArgument(format!(
            "start time {t0} is not before the horizon {}",
            problem.horizon()
        )));
    }
    let k = problem.dim_x();
    let d = problem.brownian_dim();
    if x0.len() != k {
        return Err(Error::InvalidArgument(format!(
            "x0 has length {}, problem dimension is {k}",
            x0.len()
        )));
    }
    let dt = (problem.horizon() - t0) / n_steps as f64;
    let sqrt_dt = dt.sqrt();
    let mut states = vec![0.0; n_paths * (n_steps + 1) * k];
    let mut increments = vec![0.0; n_paths * n_steps * d];

    let state_block = PATH_BLOCK * (n_steps + 1) * k;
    let inc_block = PATH_BLOCK * n_steps * d;
    states
        .par_chunks_mut(state_block)
        .zip(increments.par_chunks_mut(inc_block))
        .enumerate()
        .try_for_each(|(block, (st, inc))| -> Result<()> {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(block as u64);
            let mut b = vec![0.0; k];
            let mut s = vec![0.0; k * d];
            let paths_here = st.len() / ((n_steps + 1) * k);
            for local in 0..paths_here {
                let path = block * PATH_BLOCK + local;
                let xs = &mut st[local * (n_steps + 1) * k..(local + 1) * (n_steps + 1) * k];
                let dw = &mut inc[local * n_steps * d..(local + 1) * n_steps * d];
                xs[..k].copy_from_slice(x0);
                for j in 0..n_steps {
                    let t = t0 + j as f64 * dt;
                    for c in 0..d {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        dw[j * d + c] = z * sqrt_dt;
                    }
                    let (cur, next) = xs.split_at_mut((j + 1) * k);
                    let cur = &cur[j * k..];
                    problem.drift(t, cur, &mut b);
                    problem.vol(t, cur, &mut s);
                    if b.iter().chain(s.iter()).any(|v| !v.is_finite()) {
                        return Err(Error::PathEvaluation {
                            what: "drift/vol",
                            path,
                            step: j,
                            state: cur.to_vec(),
                        });
                    }
                    for r in 0..k {
                        let mut v = cur[r] + b[r] * dt;
                        for c in 0..d {
                            v += s[r * d + c] * dw[j * d + c];
                        }
                        next[r] = v;
                    }
                }
            }
            Ok(())
        })?;

    let count = increments.len() as f64;
    let increment_mean = increments.iter().sum::<f64>() / count;
    let increment_var = if increments.len() > 1 {
        increments.iter().map(|v| (v - increment_mean).powi(2)).sum::<f64>() / (count - 1.0)
    } else {
        0.0
    };

    Ok(PathBundle {
        t0,
        x0: x0.to_vec(),
        n_steps,
        dt,
        n_paths,
        seed,
        dim_x: k,
        brownian_dim: d,
        increments,
        states,
        increment_mean,
        increment_var,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentEstimate {
    pub value: f64,
    pub finite: bool,
}

/// Sample estimate of `E[sup_s |X_s|^gamma]` over the bundle's grid.
pub fn moment_check(bundle: &PathBundle, gamma: u32) -> Result<MomentEstimate> {
    if gamma < 1 {
        return Err(Error::InvalidArgument("moment_check needs gamma >= 1".into()));
    }
    let total: f64 = (0..bundle.n_paths)
        .map(|p| {
            (0..=bundle.n_steps)
                .map(|j| {
                    let s = bundle.state(p, j);
                    s.iter().map(|v| v * v).sum::<f64>().sqrt().powi(gamma as i32)
                })
                .fold(0.0, f64::max)
        })
        .sum();
    let value = total / bundle.n_paths as f64;
    Ok(MomentEstimate {
        value,
        finite: value.is_finite(),
    })
}
