//! Command-line front end. Exit codes: 0 success, 1 check or tolerance
//! failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bsde::{solve_penalized_bsde, RegressionBasis};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::field::{compare_fields, CompareOptions, ValueField};
use crate::game::{couple_controls, payoff, saddle_audit, synthesize_saddle, write_transcripts, GameSetup};
use crate::lattice::{backward_induct, build_lattice};
use crate::model::{
    audit_regularity, check_cost_signs, check_nonfree_loop, preflight, validate_consistency, AuditReport,
    SwitchingProblem,
};
use crate::pde::{run_ladder, solve_maxmin, solve_minmax, LadderDirection};
use crate::sde::simulate_paths;

pub const OUT_ENV: &str = "SWITCHGAME_OUT";

#[derive(Parser, Debug)]
#[command(name = "switchgame", version, about = "Solve and verify zero-sum switching games")]
struct Cli {
    /// Cap on worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the standing assumptions of a problem.
    Audit(Common),
    /// Compute value surfaces by one route.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        route: Route,
        /// Run even if the exact assumption checks fail.
        #[arg(long)]
        force: bool,
        /// Also write the simulated paths as a binary bundle (bsde route).
        #[arg(long)]
        dump_paths: bool,
    },
    /// Play the strategies read off a value surface and audit the saddle point.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        field: PathBuf,
        /// 1-based; defaults to the config's game.start_mode.
        #[arg(long)]
        start_mode: Option<usize>,
        #[arg(long)]
        perturbations: Option<usize>,
        /// Scheme allowance in |J - v|; defaults to game.scheme_tol.
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        dump_paths: bool,
    },
    /// Pairwise gaps between value surfaces.
    Compare {
        #[arg(required = true, num_args = 1..)]
        files: Vec<PathBuf>,
        /// Fail (exit 1) if any sup gap exceeds this.
        #[arg(long)]
        tolerance: Option<f64>,
        /// Interpolate the second surface onto the first one's grid.
        #[arg(long)]
        interpolate: bool,
        /// Restrict to the central half of the space axis.
        #[arg(long)]
        central_half: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to $SWITCHGAME_OUT, then ./out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides monte_carlo.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    PdeMinmax,
    PdeMaxmin,
    LadderDec,
    LadderInc,
    Lattice,
    Bsde,
}

impl Route {
    fn name(self) -> &'static str {
        match self {
            Route::PdeMinmax => "pde-minmax",
            Route::PdeMaxmin => "pde-maxmin",
            Route::LadderDec => "ladder-dec",
            Route::LadderInc => "ladder-inc",
            Route::Lattice => "lattice",
            Route::Bsde => "bsde",
        }
    }
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Io { .. }
        | Error::InvalidArgument(_)
        | Error::GridMismatch { .. } => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Reports go to stdout, diagnostics to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let go = || match dispatch(cli.command) {
        Ok(Outcome { report, ok }) => {
            print!("{report}");
            if ok {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(go),
            Err(e) => {
                eprintln!("error: cannot start {n} threads: {e}");
                2
            }
        },
        None => go(),
    }
}

struct Outcome {
    report: String,
    ok: bool,
}

fn out_dir(explicit: Option<PathBuf>) -> Result<PathBuf> {
    let dir = explicit
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    command: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    route: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<String>,
    force: bool,
    config: &'a RunConfig,
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let text = toml::to_string(m).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&dir.join("manifest.toml"), &text)
}

fn load(common: &Common) -> Result<(RunConfig, SwitchingProblem)> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.monte_carlo.seed = s;
    }
    cfg.resolve()
}

fn dispatch(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Audit(common) => cmd_audit(&common),
        Command::Solve {
            common,
            route,
            force,
            dump_paths,
        } => cmd_solve(&common, route, force, dump_paths),
        Command::Simulate {
            common,
            field,
            start_mode,
            perturbations,
            tolerance,
            force,
            dump_paths,
        } => cmd_simulate(&common, &field, start_mode, perturbations, tolerance, force, dump_paths),
        Command::Compare {
            files,
            tolerance,
            interpolate,
            central_half,
            out,
        } => cmd_compare(
            &files,
            tolerance,
            CompareOptions {
                interpolate,
                central_half,
            },
            out,
        ),
    }
}

/// Every assumption check the `audit` command runs, on the config's grid.
pub fn audit_problem(cfg: &RunConfig, pb: &SwitchingProblem) -> Result<AuditReport> {
    let grid = cfg.grid_spec();
    let xs: Vec<[f64; 1]> = grid.space_axis().points().into_iter().map(|x| [x]).collect();
    let times = grid.time_axis(pb.horizon()).points();
    let tx: Vec<(f64, [f64; 1])> = times
        .iter()
        .step_by((times.len() / 16).max(1))
        .chain(times.last())
        .flat_map(|&t| xs.iter().map(move |x| (t, *x)))
        .collect();
    let mut report = validate_consistency(pb, &xs)?;
    report.extend(check_cost_signs(pb, &tx)?);
    report.extend(check_nonfree_loop(pb, &tx)?);
    report.extend(audit_regularity(pb, cfg.audit.seed, cfg.audit.samples)?);
    Ok(report)
}

fn cmd_audit(common: &Common) -> Result<Outcome> {
    let (cfg, pb) = load(common)?;
    let report = audit_problem(&cfg, &pb)?;

    let dir = out_dir(common.out.clone())?;
    let text = report.to_text();
    write_text(&dir.join("audit.txt"), &text)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&dir.join("audit.json"), &json)?;
    write_manifest(
        &dir,
        &Manifest {
            version: crate::VERSION,
            command: "audit",
            route: None,
            field: None,
            force: false,
            config: &cfg,
        },
    )?;
    let mut text = text;
    let violated = report.violated();
    if !violated.is_empty() {
        let names: Vec<String> = violated.iter().map(|a| a.to_string()).collect();
        let _ = writeln!(text, "violated: {}", names.join(", "));
    }
    Ok(Outcome {
        report: text,
        ok: report.overall(),
    })
}

fn gate(pb: &SwitchingProblem, times: &[f64], xs: &[f64], force: bool) -> Result<String> {
    match preflight(pb, times, xs) {
        Ok(_) => Ok(String::new()),
        Err(e) if force => Ok(format!("warning (forced): {e}\n")),
        Err(e) => Err(e),
    }
}

fn summarize_field(f: &ValueField, t0: f64, x0: f64) -> String {
    let v: Vec<String> = (0..f.p()).map(|i| format!("{:.6}", f.interp(i, t0, x0))).collect();
    format!("v(t0, x0) = [{}]\n", v.join(", "))
}

fn cmd_solve(common: &Common, route: Route, force: bool, dump_paths: bool) -> Result<Outcome> {
    let (cfg, pb) = load(common)?;
    let grid = cfg.grid_spec();
    let (t0, x0) = (cfg.problem.t0, cfg.problem.x0);
    let dir = out_dir(common.out.clone())?;
    let name = route.name();
    let mut report = format!("route {name}\n");

    match route {
        Route::Lattice => {
            let lat = build_lattice(
                &pb,
                t0,
                x0,
                cfg.lattice.n_steps.unwrap_or(grid.n_steps),
                cfg.lattice.n_levels,
            )?;
            let xs = lat.space_axis().points();
            report += &gate(&pb, &lat.time_axis().points(), &xs, force)?;
            let lv = backward_induct(&pb, &lat)?;
            lv.field.write(&dir.join(format!("{name}.csv")))?;
            report += &summarize_field(&lv.field, t0, x0);
        }
        Route::Bsde => {
            let mc = &cfg.monte_carlo;
            report += &gate(&pb, &[t0], &grid.space_axis().points(), force)?;
            let bundle = simulate_paths(&pb, t0, &[x0], mc.n_steps, mc.n_paths, mc.seed)?;
            if dump_paths {
                dump(&bundle, &dir.join("paths.bin"))?;
            }
            let sol = solve_penalized_bsde(
                &pb,
                &bundle,
                cfg.bsde.m,
                cfg.bsde.n,
                RegressionBasis {
                    degree: cfg.bsde.degree,
                },
            )?;
            sol.write(&dir.join(format!("{name}.csv")))?;
            let y0: Vec<String> = sol.y0().iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(
                report,
                "Y0 = [{}] (seed {}, {} paths)",
                y0.join(", "),
                mc.seed,
                mc.n_paths
            );
        }
        _ => {
            report += &gate(
                &pb,
                &grid.time_axis(pb.horizon()).points(),
                &grid.space_axis().points(),
                force,
            )?;
            let field = match route {
                Route::PdeMinmax => solve_minmax(&pb, &grid)?,
                Route::PdeMaxmin => solve_maxmin(&pb, &grid)?,
                Route::LadderDec | Route::LadderInc => {
                    let dirn = if route == Route::LadderDec {
                        LadderDirection::Decreasing
                    } else {
                        LadderDirection::Increasing
                    };
                    let out = run_ladder(&pb, &grid, &cfg.ladder.schedule(), dirn)?;
                    for (r, rung) in out.rungs.iter().enumerate() {
                        rung.write(&dir.join(format!("{name}-rung{r}.csv")))?;
                    }
                    let _ = writeln!(report, "{} rungs, last gap {:e}", out.rungs.len(), out.cauchy_gap);
                    out.limit
                }
                Route::Lattice | Route::Bsde => unreachable!(),
            };
            field.write(&dir.join(format!("{name}.csv")))?;
            report += &summarize_field(&field, t0, x0);
        }
    }
    write_manifest(
        &dir,
        &Manifest {
            version: crate::VERSION,
            command: "solve",
            route: Some(name),
            field: None,
            force,
            config: &cfg,
        },
    )?;
    Ok(Outcome { report, ok: true })
}

fn dump(bundle: &crate::sde::PathBundle, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    bundle
        .write_binary(BufWriter::new(file))
        .map_err(|e| Error::io(path, e))
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    common: &Common,
    field_path: &Path,
    start_mode: Option<usize>,
    perturbations: Option<usize>,
    tolerance: Option<f64>,
    force: bool,
    dump_paths: bool,
) -> Result<Outcome> {
    let (cfg, pb) = load(common)?;
    let field = Arc::new(ValueField::read(field_path)?);
    let (t0, x0) = (cfg.problem.t0, cfg.problem.x0);
    let start = start_mode.unwrap_or(cfg.game.start_mode);
    if start == 0 || start > pb.p() {
        return Err(Error::InvalidArgument(format!(
            "start mode {start} outside 1..={}",
            pb.p()
        )));
    }
    let start = start - 1;
    let tol_t = 1e-9 * (1.0 + pb.horizon().abs());
    if field.p() != pb.p()
        || (field.time.start - t0).abs() > tol_t
        || (field.time.end() - pb.horizon()).abs() > tol_t
        || field.n_times() < 2
    {
        return Err(Error::GridMismatch {
            left: format!("problem p={} t=[{t0}, {}]", pb.p(), pb.horizon()),
            right: field.grid_description(),
        });
    }
    let mut report = gate(&pb, &field.time.points(), &field.space.points(), force)?;

    // paths run on the field's own time grid so switch times are field times
    let mc = &cfg.monte_carlo;
    let bundle = simulate_paths(&pb, t0, &[x0], field.n_times() - 1, mc.n_paths, mc.seed)?;
    let dir = out_dir(common.out.clone())?;
    if dump_paths {
        dump(&bundle, &dir.join("paths.bin"))?;
    }
    let mut setup = GameSetup::new(&pb, &bundle).with_ybar(&field);
    setup.max_switches = cfg.game.max_switches;
    let eps = cfg.game.eps_contact;

    let mut table = String::from("start_mode,value,J,se,events_mean\n");
    let mut start_transcripts = Vec::new();
    for i in 0..pb.p() {
        let (u, v) = synthesize_saddle(&pb, field.clone(), i, eps)?;
        let tr = couple_controls(&setup, &u, &v, i)?;
        let est = payoff(&tr);
        let events = tr.iter().map(|t| t.events.len()).sum::<usize>() as f64 / tr.len().max(1) as f64;
        let _ = writeln!(
            table,
            "{},{},{},{},{}",
            i + 1,
            field.interp(i, t0, x0),
            est.mean,
            est.se,
            events
        );
        if i == start {
            start_transcripts = tr;
        }
    }
    write_text(&dir.join("payoff.csv"), &table)?;
    write_transcripts(&dir.join("transcripts.jsonl"), &start_transcripts)?;

    let audit = saddle_audit(
        &setup,
        field.clone(),
        start,
        perturbations.unwrap_or(cfg.game.perturbations),
        cfg.game.perturbation_seed,
        eps,
        tolerance.unwrap_or(cfg.game.scheme_tol),
    )?;
    let text = audit.to_text();
    write_text(&dir.join("saddle.txt"), &text)?;
    let csv = dir.join("saddle.csv");
    let file = fs::File::create(&csv).map_err(|e| Error::io(&csv, e))?;
    audit.write_csv(BufWriter::new(file)).map_err(|e| Error::io(&csv, e))?;
    write_manifest(
        &dir,
        &Manifest {
            version: crate::VERSION,
            command: "simulate",
            route: None,
            field: Some(field_path.display().to_string()),
            force,
            config: &cfg,
        },
    )?;
    report += &table;
    report += &text;
    let _ = writeln!(report, "verdict: {}", if audit.passed() { "pass" } else { "FAIL" });
    Ok(Outcome {
        report,
        ok: audit.passed(),
    })
}

fn cmd_compare(
    files: &[PathBuf],
    tolerance: Option<f64>,
    opts: CompareOptions,
    out: Option<PathBuf>,
) -> Result<Outcome> {
    let fields: Vec<ValueField> = files.iter().map(|f| ValueField::read(f)).collect::<Result<_>>()?;
    let pairs: Vec<(usize, usize)> = if fields.len() == 1 {
        vec![(0, 0)]
    } else {
        (0..fields.len())
            .flat_map(|a| (a + 1..fields.len()).map(move |b| (a, b)))
            .collect()
    };
    let mut csv = String::from("left,right,mode,sup,mean_abs,sup_t,sup_x,points\n");
    let mut report = String::new();
    let mut worst = 0.0f64;
    for (a, b) in pairs {
        let gaps = compare_fields(&fields[a], &fields[b], opts)?;
        for g in &gaps {
            worst = worst.max(g.sup);
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                files[a].display(),
                files[b].display(),
                g.mode,
                g.sup,
                g.mean_abs,
                g.sup_at.0,
                g.sup_at.1,
                g.points
            );
            let _ = writeln!(
                report,
                "{} vs {} mode {}: sup {:.3e} mean {:.3e}",
                files[a].display(),
                files[b].display(),
                g.mode,
                g.sup,
                g.mean_abs
            );
        }
    }
    let dir = out_dir(out)?;
    write_text(&dir.join("compare.csv"), &csv)?;
    let ok = tolerance.is_none_or(|tol| worst <= tol);
    if let Some(tol) = tolerance {
        let _ = writeln!(
            report,
            "worst sup gap {worst:.3e} vs tolerance {tol:e}: {}",
            if ok { "pass" } else { "FAIL" }
        );
    }
    Ok(Outcome { report, ok })
}
