//! Value surfaces on a uniform time-space grid, their CSV form and gap
//! reports between two surfaces.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clamp::Regime;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Provenance {
    DirectMinMax,
    DirectMaxMin,
    Penalized { m: f64, n: f64 },
    LadderLimitDecreasing,
    LadderLimitIncreasing,
    Lattice,
    Bsde,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::DirectMinMax => f.write_str("direct-minmax"),
            Provenance::DirectMaxMin => f.write_str("direct-maxmin"),
            Provenance::Penalized { m, n } => write!(f, "penalized({m},{n})"),
            Provenance::LadderLimitDecreasing => f.write_str("ladder-limit-decreasing"),
            Provenance::LadderLimitIncreasing => f.write_str("ladder-limit-increasing"),
            Provenance::Lattice => f.write_str("lattice"),
            Provenance::Bsde => f.write_str("bsde"),
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown provenance {s:?}"));
        Ok(match s {
            "direct-minmax" => Provenance::DirectMinMax,
            "direct-maxmin" => Provenance::DirectMaxMin,
            "ladder-limit-decreasing" => Provenance::LadderLimitDecreasing,
            "ladder-limit-increasing" => Provenance::LadderLimitIncreasing,
            "lattice" => Provenance::Lattice,
            "bsde" => Provenance::Bsde,
            other => {
                let inner = other
                    .strip_prefix("penalized(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(bad)?;
                let (m, n) = inner.split_once(',').ok_or_else(bad)?;
                Provenance::Penalized {
                    m: m.trim().parse().map_err(|_| bad())?,
                    n: n.trim().parse().map_err(|_| bad())?,
                }
            }
        })
    }
}

impl Provenance {
    /// Whether the barrier inequalities are enforced exactly by construction.
    pub fn is_direct(self) -> bool {
        matches!(
            self,
            Provenance::DirectMinMax | Provenance::DirectMaxMin | Provenance::Lattice
        )
    }
}

/// Uniform axis `start + k * step`, `k < len`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub start: f64,
    pub step: f64,
    pub len: usize,
}

impl Axis {
    pub fn new(start: f64, end: f64, len: usize) -> Self {
        let step = if len > 1 { (end - start) / (len - 1) as f64 } else { 0.0 };
        Self { start, step, len }
    }

    #[inline]
    pub fn at(&self, k: usize) -> f64 {
        self.start + k as f64 * self.step
    }

    pub fn end(&self) -> f64 {
        self.at(self.len.saturating_sub(1))
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len).map(|k| self.at(k)).collect()
    }

    fn same_as(&self, other: &Axis) -> bool {
        let tol = 1e-12 * (1.0 + self.start.abs().max(self.end().abs()));
        self.len == other.len && (self.start - other.start).abs() <= tol && (self.end() - other.end()).abs() <= tol
    }

    /// Bracketing index and weight for linear interpolation, clamped to the ends.
    fn locate(&self, x: f64) -> (usize, f64) {
        if self.len < 2 || self.step == 0.0 {
            return (0, 0.0);
        }
        let s = ((x - self.start) / self.step).clamp(0.0, (self.len - 1) as f64);
        let k = (s.floor() as usize).min(self.len - 2);
        (k, s - k as f64)
    }

    pub fn contains(&self, x: f64) -> bool {
        let tol = 1e-12 * (1.0 + x.abs());
        x >= self.start.min(self.end()) - tol && x <= self.start.max(self.end()) + tol
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}] x {}", self.start, self.end(), self.len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    pub provenance: Provenance,
    pub time: Axis,
    pub space: Axis,
    p: usize,
    /// index `((j * n_x) + k) * p + i`
    values: Vec<f64>,
    regimes: Option<Vec<Regime>>,
    pub cfl_ratio: Option<f64>,
    /// Free-form numeric diagnostics echoed into the metadata sidecar.
    pub notes: BTreeMap<String, f64>,
}

impl ValueField {
    pub fn zeros(provenance: Provenance, time: Axis, space: Axis, p: usize) -> Self {
        Self {
            provenance,
            time,
            space,
            p,
            values: vec![0.0; time.len * space.len * p],
            regimes: None,
            cfl_ratio: None,
            notes: BTreeMap::new(),
        }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_times(&self) -> usize {
        self.time.len
    }

    pub fn n_x(&self) -> usize {
        self.space.len
    }

    #[inline]
    fn at(&self, j: usize, k: usize) -> usize {
        (j * self.space.len + k) * self.p
    }

    #[inline]
    pub fn value(&self, mode: usize, j: usize, k: usize) -> f64 {
        self.values[self.at(j, k) + mode]
    }

    /// The p values at node `(t_j, x_k)`.
    #[inline]
    pub fn node(&self, j: usize, k: usize) -> &[f64] {
        let a = self.at(j, k);
        &self.values[a..a + self.p]
    }

    #[inline]
    pub fn node_mut(&mut self, j: usize, k: usize) -> &mut [f64] {
        let a = self.at(j, k);
        let p = self.p;
        &mut self.values[a..a + p]
    }

    /// All node values of slice `j`, `n_x * p` long.
    pub fn slice(&self, j: usize) -> &[f64] {
        let a = self.at(j, 0);
        &self.values[a..a + self.space.len * self.p]
    }

    pub fn slice_mut(&mut self, j: usize) -> &mut [f64] {
        let a = self.at(j, 0);
        let len = self.space.len * self.p;
        &mut self.values[a..a + len]
    }

    pub fn regime(&self, mode: usize, j: usize, k: usize) -> Option<Regime> {
        self.regimes.as_ref().map(|r| r[self.at(j, k) + mode])
    }

    pub fn has_regimes(&self) -> bool {
        self.regimes.is_some()
    }

    pub fn regimes_slice_mut(&mut self, j: usize) -> &mut [Regime] {
        let len = self.space.len * self.p;
        let a = self.at(j, 0);
        let total = self.values.len();
        self.regimes
            .get_or_insert_with(|| vec![Regime::Interior; total])
            .get_mut(a..a + len)
            .expect("slice index in range")
    }

    /// Values at `x` on slice `j` by linear interpolation (flat beyond the ends).
    pub fn interp_node(&self, j: usize, x: f64) -> Vec<f64> {
        let (k, w) = self.space.locate(x);
        let a = self.node(j, k);
        if w == 0.0 {
            return a.to_vec();
        }
        let b = self.node(j, k + 1);
        a.iter().zip(b).map(|(a, b)| a + w * (b - a)).collect()
    }

    /// Bilinear interpolation at `(t, x)`.
    pub fn interp(&self, mode: usize, t: f64, x: f64) -> f64 {
        let (j, wt) = self.time.locate(t);
        let (k, wx) = self.space.locate(x);
        let v = |j: usize, k: usize| self.value(mode, j, k);
        let kx = (k + 1).min(self.space.len - 1);
        let row = |j| v(j, k) + wx * (v(j, kx) - v(j, k));
        if wt == 0.0 {
            row(j)
        } else {
            let jt = (j + 1).min(self.time.len - 1);
            row(j) + wt * (row(jt) - row(j))
        }
    }

    /// Nearest time index for `t`.
    pub fn time_index(&self, t: f64) -> usize {
        if self.time.step == 0.0 {
            return 0;
        }
        let s = ((t - self.time.start) / self.time.step).round();
        (s.max(0.0) as usize).min(self.time.len - 1)
    }

    pub fn same_grid(&self, other: &ValueField) -> bool {
        self.p == other.p && self.time.same_as(&other.time) && self.space.same_as(&other.space)
    }

    pub fn grid_description(&self) -> String {
        format!("p={} t{} x{}", self.p, self.time, self.space)
    }

    /// Largest violation of `v^{i+1} - g_down <= v^i <= v^{i+1} + g_up`,
    /// split into the lower and upper parts, given the costs at each node.
    pub fn barrier_violation<F>(&self, mut costs: F) -> (f64, f64)
    where
        F: FnMut(f64, f64, usize) -> (f64, f64),
    {
        let p = self.p;
        let mut low = 0.0f64;
        let mut high = 0.0f64;
        for j in 0..self.time.len {
            let t = self.time.at(j);
            for k in 0..self.space.len {
                let x = self.space.at(k);
                let v = self.node(j, k);
                for i in 0..p {
                    let (down, up) = costs(t, x, i);
                    let nxt = v[(i + 1) % p];
                    low = low.max(nxt - down - v[i]);
                    high = high.max(v[i] - nxt - up);
                }
            }
        }
        (low, high)
    }

    pub fn write(&self, csv_path: &Path) -> Result<()> {
        if let Some(dir) = csv_path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let file = fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
        self.write_csv(BufWriter::new(file))
            .map_err(|e| Error::io(csv_path, e))?;
        let meta = self.meta();
        let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
        let meta_path = meta_path(csv_path);
        fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))
    }

    /// CSV `t_index,x_index,mode,value` (plus `regime_tag` when tags exist);
    /// modes are written 1-based.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        if self.regimes.is_some() {
            writeln!(w, "t_index,x_index,mode,value,regime_tag")?;
        } else {
            writeln!(w, "t_index,x_index,mode,value")?;
        }
        for j in 0..self.time.len {
            for k in 0..self.space.len {
                for i in 0..self.p {
                    let v = self.value(i, j, k);
                    match self.regime(i, j, k) {
                        Some(r) => writeln!(w, "{j},{k},{},{v},{r}", i + 1)?,
                        None => writeln!(w, "{j},{k},{},{v}", i + 1)?,
                    }
                }
            }
        }
        w.flush()
    }

    fn meta(&self) -> FieldMeta {
        FieldMeta {
            provenance: self.provenance.to_string(),
            p: self.p,
            time: self.time,
            space: self.space,
            cfl_ratio: self.cfl_ratio,
            regime_tags: self.regimes.is_some(),
            notes: self.notes.clone(),
            version: crate::VERSION.to_string(),
        }
    }

    pub fn read(csv_path: &Path) -> Result<Self> {
        let meta_path = meta_path(csv_path);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: FieldMeta = toml::from_str(&text).map_err(|e| Error::Parse {
            file: meta_path.display().to_string(),
            line: e.span().map(|s| line_of(&text, s.start)).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        let mut field = ValueField::zeros(meta.provenance.parse()?, meta.time, meta.space, meta.p);
        field.cfl_ratio = meta.cfl_ratio;
        field.notes = meta.notes;
        let file = fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let name = csv_path.display().to_string();
        let perr = |line: usize, message: String| Error::Parse {
            file: name.clone(),
            line,
            message,
        };
        let expected = field.values.len();
        let mut regimes = meta.regime_tags.then(|| vec![Regime::Interior; expected]);
        let mut seen = vec![false; expected];
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(csv_path, e))?;
            let lineno = n + 1;
            if n == 0 {
                if !line.starts_with("t_index,x_index,mode,value") {
                    return Err(perr(lineno, format!("unexpected header {line:?}")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            let want = if regimes.is_some() { 5 } else { 4 };
            if cols.len() != want {
                return Err(perr(lineno, format!("expected {want} columns, got {}", cols.len())));
            }
            let idx = |c: &str, what: &str| -> Result<usize> {
                c.trim()
                    .parse::<usize>()
                    .map_err(|_| perr(lineno, format!("bad {what} {c:?}")))
            };
            let j = idx(cols[0], "t_index")?;
            let k = idx(cols[1], "x_index")?;
            let mode = idx(cols[2], "mode")?;
            if j >= field.time.len || k >= field.space.len || mode == 0 || mode > field.p {
                return Err(perr(lineno, "index outside the declared grid".into()));
            }
            let v: f64 = cols[3]
                .trim()
                .parse()
                .map_err(|_| perr(lineno, format!("bad value {:?}", cols[3])))?;
            let at = field.at(j, k) + mode - 1;
            field.values[at] = v;
            seen[at] = true;
            if let Some(r) = regimes.as_mut() {
                r[at] = cols[4].trim().parse().map_err(|e: Error| perr(lineno, e.to_string()))?;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(perr(
                0,
                format!("{} of {expected} rows missing (first at flat index {missing})", {
                    seen.iter().filter(|s| !**s).count()
                }),
            ));
        }
        field.regimes = regimes;
        Ok(field)
    }
}

/// `dir/name.csv` -> `dir/name.meta.toml`
pub fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.toml")
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldMeta {
    provenance: String,
    p: usize,
    time: Axis,
    space: Axis,
    #[serde(skip_serializing_if = "Option::is_none")]
    cfl_ratio: Option<f64>,
    regime_tags: bool,
    notes: BTreeMap<String, f64>,
    version: String,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CompareOptions {
    /// Evaluate the second field at the first field's nodes by bilinear
    /// interpolation instead of requiring identical grids.
    pub interpolate: bool,
    /// Restrict to the central half of the first field's x-range.
    pub central_half: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeGap {
    /// 1-based
    pub mode: usize,
    pub sup: f64,
    pub mean_abs: f64,
    pub sup_at: (f64, f64),
    pub points: usize,
}

/// Per-mode sup-norm and mean absolute gap between two fields.
pub fn compare_fields(a: &ValueField, b: &ValueField, opts: CompareOptions) -> Result<Vec<ModeGap>> {
    let mismatch = || Error::GridMismatch {
        left: a.grid_description(),
        right: b.grid_description(),
    };
    if a.p != b.p {
        return Err(mismatch());
    }
    if !opts.interpolate && !a.same_grid(b) {
        return Err(mismatch());
    }
    let (lo, hi) = if opts.central_half {
        let (s, e) = (a.space.start, a.space.end());
        let q = (e - s) / 4.0;
        (s + q, e - q)
    } else {
        (f64::NEG_INFINITY, f64::INFINITY)
    };
    let tol = 1e-12 * (1.0 + lo.abs().max(hi.abs()).min(1e300));
    let mut gaps: Vec<ModeGap> = (0..a.p)
        .map(|i| ModeGap {
            mode: i + 1,
            sup: 0.0,
            mean_abs: 0.0,
            sup_at: (a.time.start, a.space.start),
            points: 0,
        })
        .collect();
    for j in 0..a.time.len {
        let t = a.time.at(j);
        if opts.interpolate && !b.time.contains(t) {
            continue;
        }
        for k in 0..a.space.len {
            let x = a.space.at(k);
            if x < lo - tol || x > hi + tol {
                continue;
            }
            if opts.interpolate && !b.space.contains(x) {
                continue;
            }
            for (i, g) in gaps.iter_mut().enumerate() {
                let other = if opts.interpolate {
                    b.interp(i, t, x)
                } else {
                    b.value(i, j, k)
                };
                let d = (a.value(i, j, k) - other).abs();
                if d > g.sup || d.is_nan() {
                    g.sup = d;
                    g.sup_at = (t, x);
                }
                g.mean_abs += d;
                g.points += 1;
            }
        }
    }
    if gaps.iter().any(|g| g.points == 0) {
        return Err(Error::GridMismatch {
            left: a.grid_description(),
            right: format!("{} (no overlapping nodes)", b.grid_description()),
        });
    }
    for g in &mut gaps {
        g.mean_abs /= g.points as f64;
    }
    Ok(gaps)
}
