//! Command-line front end: layered configuration, dispatch to the core
//! studies and output writing.

pub mod config;
pub mod error;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{value_parser, Arg, ArgMatches, Command};
use sac_core::fem::FemSpace;
use sac_core::harness::{self, Artifacts, Metadata, RunOptions, VERSION};
use sac_core::mesh::PeriodicMesh;
use sac_core::report::{fmt_f64, provenance_line, sha256_hex, to_json};
use sac_core::stepper::InitialData;
use sac_core::stochastic::sample_path;
use sac_core::{run_trajectory, SpaceOptions};
use serde_json::json;

pub use config::{parse_config, RunConfig, Subcommand, KEYS};
pub use error::CliError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub fn command() -> Command {
    let mut cmd = Command::new("sac")
        .version(VERSION)
        .about("Finite element and spectral experiments for the stochastic Allen-Cahn equation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .value_parser(value_parser!(PathBuf))
                .help("flat key = value configuration file"),
        );
    for k in KEYS {
        cmd = cmd.arg(
            Arg::new(k.name)
                .long(k.name)
                .global(true)
                .value_name("VALUE")
                .help(k.help),
        );
    }
    for s in Subcommand::ALL {
        cmd = cmd.subcommand(Command::new(s.name()).about(s.about()));
    }
    cmd
}

fn flag_overrides(m: &ArgMatches) -> Vec<(String, String)> {
    KEYS.iter()
        .filter_map(|k| {
            m.get_one::<String>(k.name)
                .map(|v| (k.name.to_string(), v.clone()))
        })
        .collect()
}

/// Parses `args`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I, env: &dyn Fn(&str) -> Option<String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let Some((name, sub)) = matches.subcommand() else {
        return EXIT_USAGE;
    };
    let Some(subcommand) = Subcommand::from_name(name) else {
        return EXIT_USAGE;
    };
    let path = sub.get_one::<PathBuf>("config").map(PathBuf::as_path);
    let flags = flag_overrides(sub);
    let cfg = match parse_config(path, env, &flags, subcommand) {
        Ok(cfg) => cfg,
        Err(e) => {
            let dir = config::requested_output_dir(path, env, &flags);
            return report_failure(&e, dir.as_deref());
        }
    };
    match execute(&cfg) {
        Ok(summary) => {
            println!("{summary}");
            println!("outputs written to {}", cfg.output_dir.display());
            EXIT_OK
        }
        Err(e) => report_failure(&e, Some(&cfg.output_dir)),
    }
}

fn report_failure(e: &CliError, output_dir: Option<&Path>) -> i32 {
    let body = e.to_json();
    eprintln!("error: {e}");
    eprintln!("{body}");
    if let Some(dir) = output_dir {
        let text = serde_json::to_string_pretty(&body).unwrap_or_default() + "\n";
        if fs::create_dir_all(dir).is_ok() {
            let _ = fs::write(dir.join("failure.json"), text);
        }
    }
    EXIT_FAILURE
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, content).map_err(|e| CliError::Output {
        path,
        message: e.to_string(),
    })
}

fn write_outputs(cfg: &RunConfig, provenance: &str, artifacts: &Artifacts) -> Result<(), CliError> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| CliError::Output {
        path: dir.clone(),
        message: e.to_string(),
    })?;
    let stale = dir.join("failure.json");
    if stale.exists() {
        let _ = fs::remove_file(stale);
    }
    write_file(dir, "config.txt", &cfg.echo())?;
    write_file(dir, "provenance.txt", &format!("{provenance}\n"))?;
    for (name, content) in artifacts {
        write_file(dir, name, content)?;
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn fmt_ci(ci: Option<[f64; 2]>) -> String {
    ci.map_or_else(String::new, |[lo, hi]| format!(" (95% CI [{lo:.4}, {hi:.4}])"))
}

/// Runs the configured subcommand, writes its outputs and returns a short
/// summary.
pub fn execute(cfg: &RunConfig) -> Result<String, CliError> {
    let plan = &cfg.plan;
    let opts = RunOptions {
        threads: cfg.threads,
        cache_dir: cfg.cache_dir.clone(),
    };
    let (summary, provenance, artifacts) = match cfg.command {
        Subcommand::Simulate => return simulate(cfg),
        Subcommand::RateTime | Subcommand::RateSpace => {
            let study = if cfg.command == Subcommand::RateTime {
                harness::temporal_rate_study(plan, &opts)?
            } else {
                harness::spatial_rate_study(plan, &opts)?
            };
            let r = &study.report;
            let mut s = format!(
                "{} rate: slope {}{}",
                r.parameter,
                fmt_opt(r.slope()),
                fmt_ci(r.fit.as_ref().and_then(|f| f.slope_ci95))
            );
            for w in &r.warnings {
                s.push_str(&format!("\nwarning: {w}"));
            }
            (s, r.metadata.provenance.clone(), study.artifacts()?)
        }
        Subcommand::Moments => {
            let study = harness::moment_study(plan, &opts)?;
            let r = &study.report;
            let s = r
                .verdicts
                .iter()
                .map(|v| {
                    format!(
                        "p = {}: spread {:.4} ({})",
                        v.p,
                        v.spread,
                        if v.bounded { "bounded" } else { "not bounded" }
                    )
                })
                .collect::<Vec<_>>()
                .join("\n");
            (s, r.metadata.provenance.clone(), study.artifacts()?)
        }
        Subcommand::Increments => {
            let study = harness::increment_study(plan, &opts)?;
            let r = &study.report;
            let mut s = r
                .ratios
                .iter()
                .map(|h| {
                    format!(
                        "lag {} -> {}: ratio {:.4} ± {:.4}, control {:.4}",
                        h.from_lag,
                        h.to_lag,
                        h.ratio,
                        h.standard_error,
                        h.control_ratio
                    )
                })
                .collect::<Vec<_>>()
                .join("\n");
            s.push_str(&format!(
                "\nincrement scaling {}",
                if r.passed { "within band" } else { "outside band" }
            ));
            (s, r.metadata.provenance.clone(), study.artifacts()?)
        }
        Subcommand::Check => {
            let suite = harness::identity_suite(plan)?;
            let r = &suite.report;
            write_outputs(cfg, &r.metadata.provenance, &suite.artifacts()?)?;
            let lines = r
                .checks
                .iter()
                .map(|c| format!("{:?}: {} (worst {:.3e})", c.status, c.name, c.worst))
                .collect::<Vec<_>>()
                .join("\n");
            if !r.passed {
                println!("{lines}");
                let failed = r
                    .checks
                    .iter()
                    .filter(|c| c.status == harness::CheckStatus::Fail)
                    .map(|c| c.name.clone())
                    .collect();
                return Err(CliError::ChecksFailed { failed });
            }
            return Ok(lines);
        }
    };
    write_outputs(cfg, &provenance, &artifacts)?;
    Ok(summary)
}

fn simulate(cfg: &RunConfig) -> Result<String, CliError> {
    let plan = &cfg.plan;
    let scheme = &plan.scheme;
    let mesh = PeriodicMesh::build(plan.d, plan.length, plan.n)?;
    let space = FemSpace::assemble(
        mesh,
        SpaceOptions {
            quadrature: plan.quadrature,
            solver: None,
        },
    )?;
    let increments = sample_path(plan.seed, 0, scheme.horizon, plan.j_fine)?.at_level(scheme.steps)?;
    let x0 = |x: &[f64]| plan.x0.eval(x, plan.length);
    let traj = run_trajectory(&space, scheme, InitialData::Function(&x0), &increments)?;

    let k = scheme.time_step();
    let mut diag = String::from(
        "step,time,energy,grad_part,psi_part,newton_iters,residual_norm,residual_scale,picard_fallback,identity_residual,increment_l2\n",
    );
    let e0 = &traj.initial_energy;
    diag.push_str(&format!(
        "0,{},{},{},{},,,,,,\n",
        fmt_f64(0.0),
        fmt_f64(e0.total),
        fmt_f64(e0.grad_part),
        fmt_f64(e0.psi_part)
    ));
    for (j, d) in traj.diagnostics.iter().enumerate() {
        diag.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            j + 1,
            fmt_f64((j + 1) as f64 * k),
            fmt_f64(d.energy.total),
            fmt_f64(d.energy.grad_part),
            fmt_f64(d.energy.psi_part),
            d.newton_iters,
            fmt_f64(d.residual_norm),
            fmt_f64(d.residual_scale),
            d.picard_fallback,
            fmt_f64(d.identity_residual),
            fmt_f64(d.increment_l2)
        ));
    }

    let mesh = space.mesh();
    let header: Vec<String> = (0..plan.d).map(|i| format!("x{i}")).collect();
    let field_csv = |values: &[f64]| {
        let mut s = format!("{},value\n", header.join(","));
        for (i, v) in values.iter().enumerate() {
            let coords: Vec<String> = mesh.vertex(i).iter().map(|c| fmt_f64(*c)).collect();
            s.push_str(&format!("{},{}\n", coords.join(","), fmt_f64(*v)));
        }
        s
    };
    let mut artifacts: Artifacts = vec![
        ("diagnostics.csv".into(), diag),
        ("terminal.csv".into(), field_csv(&traj.terminal.coeffs)),
    ];
    if !traj.retained.is_empty() {
        let mut s = String::from("step,index,value\n");
        for (step, f) in &traj.retained {
            for (i, v) in f.coeffs.iter().enumerate() {
                s.push_str(&format!("{step},{i},{}\n", fmt_f64(*v)));
            }
        }
        artifacts.push(("retained.csv".into(), s));
    }

    let canonical = cfg.canonical();
    let metadata = Metadata {
        version: VERSION.to_string(),
        seed: plan.seed,
        n_paths: 1,
        config_sha256: sha256_hex(&canonical),
        provenance: provenance_line(VERSION, plan.seed, &canonical),
    };
    let max_identity = traj
        .diagnostics
        .iter()
        .map(|d| d.identity_residual.abs())
        .fold(0.0, f64::max);
    let max_iters = traj.diagnostics.iter().map(|d| d.newton_iters).max().unwrap_or(0);
    let fallbacks = traj.diagnostics.iter().filter(|d| d.picard_fallback).count();
    let terminal_energy = traj.diagnostics.last().map_or(e0.total, |d| d.energy.total);
    let report = json!({
        "kind": "simulate",
        "d": plan.d,
        "n": plan.n,
        "dofs": space.num_dofs(),
        "quadrature": plan.quadrature,
        "horizon": scheme.horizon,
        "steps": scheme.steps,
        "initial_energy": e0.total,
        "terminal_energy": terminal_energy,
        "max_identity_residual": max_identity,
        "max_newton_iters": max_iters,
        "picard_fallbacks": fallbacks,
        "metadata": metadata,
    });
    artifacts.insert(0, ("report.json".into(), to_json(&report)?));
    write_outputs(cfg, &metadata.provenance, &artifacts)?;
    Ok(format!(
        "energy {} -> {} over {} steps; max identity residual {:.3e}; max Newton iterations {max_iters}",
        fmt_f64(e0.total),
        fmt_f64(terminal_energy),
        scheme.steps,
        max_identity
    ))
}
