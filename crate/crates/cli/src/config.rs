//! Flat `key = value` run configuration with environment and flag
//! overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use sac_core::harness::{ExperimentKind, ExperimentPlan, ReferenceSolver};
use sac_core::stepper::InitialTransfer;
use sac_core::{InitialPreset, QuadratureChoice, SchemeConfig, SigmaKind, SigmaPreset};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "SAC_";

pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

/// Every accepted key, in echo order. An empty default means "derived from
/// the subcommand".
pub const KEYS: &[KeySpec] = &[
    KeySpec { name: "kind", default: "", help: "experiment kind; must match the subcommand" },
    KeySpec { name: "d", default: "1", help: "spatial dimension (1, 2 or 3)" },
    KeySpec { name: "R", default: "1", help: "period of the box [0, R)^d" },
    KeySpec { name: "n", default: "64", help: "mesh subdivisions per direction" },
    KeySpec { name: "quadrature", default: "exact", help: "exact | lumped" },
    KeySpec { name: "T", default: "0.25", help: "time horizon" },
    KeySpec { name: "J", default: "256", help: "number of time steps" },
    KeySpec { name: "newton_tol", default: "1e-12", help: "relative Newton residual tolerance" },
    KeySpec { name: "newton_max_iter", default: "30", help: "Newton iteration cap" },
    KeySpec { name: "damping", default: "8", help: "maximum step halvings per Newton iteration" },
    KeySpec { name: "sigma", default: "zero", help: "noise coefficient: zero | sine | rational" },
    KeySpec { name: "sigma_amplitude", default: "0.5", help: "noise amplitude c" },
    KeySpec { name: "y0", default: "project", help: "initial transfer: project | interpolate" },
    KeySpec { name: "record_stride", default: "0", help: "keep every k-th field of a trajectory (0: none)" },
    KeySpec { name: "x0", default: "cos", help: "initial datum: cos | tanh-layer | constant:<c>" },
    KeySpec { name: "x0_amplitude", default: "1", help: "amplitude of the cos and tanh-layer presets" },
    KeySpec { name: "x0_wavenumber", default: "1", help: "wavenumber of the cos preset" },
    KeySpec { name: "x0_width", default: "0.1", help: "interface width of the tanh-layer preset" },
    KeySpec { name: "seed", default: "1", help: "experiment seed" },
    KeySpec { name: "n_paths", default: "64", help: "Monte Carlo paths" },
    KeySpec { name: "j_fine", default: "4096", help: "resolution of the sampled Brownian paths" },
    KeySpec { name: "spectral_modes", default: "128", help: "largest retained wavenumber N" },
    KeySpec { name: "spectral_pad", default: "2", help: "collocation padding factor (G > 2 pad N)" },
    KeySpec { name: "levels", default: "", help: "comma-separated refinement levels" },
    KeySpec { name: "j_levels", default: "", help: "step counts paired with levels (moments)" },
    KeySpec { name: "reference", default: "", help: "reference step count (rate-time) or subdivisions (rate-space)" },
    KeySpec { name: "reference_solver", default: "spectral", help: "spectral | fem (rate-time)" },
    KeySpec { name: "t_start", default: "0.125", help: "start time of the increment study" },
    KeySpec { name: "output_dir", default: "sac-out", help: "directory receiving all outputs" },
    KeySpec { name: "cache_dir", default: "", help: "spectral reference cache directory (empty: off)" },
    KeySpec { name: "threads", default: "0", help: "worker threads (0: all cores)" },
];

pub fn is_key(name: &str) -> bool {
    KEYS.iter().any(|k| k.name == name)
}

/// Environment variable overriding `key`.
pub fn env_var_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_uppercase())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Default,
    File { path: PathBuf, line: usize },
    Env(String),
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Default => write!(f, "default"),
            Source::File { path, line } => write!(f, "{}:{line}", path.display()),
            Source::Env(var) => write!(f, "environment {var}"),
            Source::Flag => write!(f, "command line"),
        }
    }
}

impl Source {
    pub fn line(&self) -> Option<usize> {
        match self {
            Source::File { line, .. } => Some(*line),
            _ => None,
        }
    }
}

/// The subcommands and the experiment each one runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Simulate,
    RateTime,
    RateSpace,
    Moments,
    Increments,
    Check,
}

impl Subcommand {
    pub const ALL: [Subcommand; 6] = [
        Subcommand::Simulate,
        Subcommand::RateTime,
        Subcommand::RateSpace,
        Subcommand::Moments,
        Subcommand::Increments,
        Subcommand::Check,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Subcommand::Simulate => "simulate",
            Subcommand::RateTime => "rate-time",
            Subcommand::RateSpace => "rate-space",
            Subcommand::Moments => "moments",
            Subcommand::Increments => "increments",
            Subcommand::Check => "check",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn about(&self) -> &'static str {
        match self {
            Subcommand::Simulate => "Run one trajectory and write per-step diagnostics",
            Subcommand::RateTime => "Strong temporal convergence rate",
            Subcommand::RateSpace => "Strong spatial convergence rate",
            Subcommand::Moments => "Moments of the energy across refinements",
            Subcommand::Increments => "Scaling of time increments",
            Subcommand::Check => "Structural identity suite",
        }
    }

    pub fn kind(&self) -> Option<ExperimentKind> {
        match self {
            Subcommand::Simulate => None,
            Subcommand::RateTime => Some(ExperimentKind::TemporalRate),
            Subcommand::RateSpace => Some(ExperimentKind::SpatialRate),
            Subcommand::Moments => Some(ExperimentKind::Moments),
            Subcommand::Increments => Some(ExperimentKind::Increments),
            Subcommand::Check => Some(ExperimentKind::IdentitySuite),
        }
    }

    /// Kind label accepted in config files.
    fn kind_label(&self) -> &'static str {
        match self.kind() {
            Some(k) => k.as_str(),
            None => "simulate",
        }
    }
}

/// Raw layered values before typing.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    values: BTreeMap<&'static str, (String, Source)>,
}

fn static_key(name: &str) -> Option<&'static str> {
    KEYS.iter().find(|k| k.name == name).map(|k| k.name)
}

fn unquote(v: &str) -> &str {
    let b = v.as_bytes();
    if b.len() >= 2 && (b[0] == b'"' || b[0] == b'\'') && b[b.len() - 1] == b[0] {
        &v[1..v.len() - 1]
    } else {
        v
    }
}

/// Strips a `#` comment that is not inside quotes.
fn strip_comment(line: &str) -> &str {
    let mut quote: Option<char> = None;
    for (i, c) in line.char_indices() {
        match (quote, c) {
            (None, '"') | (None, '\'') => quote = Some(c),
            (Some(q), c) if c == q => quote = None,
            (None, '#') => return &line[..i],
            _ => {}
        }
    }
    line
}

/// Parses a config document into `(key, value, line)` entries.
pub fn parse_document(path: &Path, text: &str) -> Result<Vec<(&'static str, String, usize)>, CliError> {
    let mut out: Vec<(&'static str, String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = strip_comment(raw).trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(CliError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected `key = value`, found {content:?}"),
            });
        };
        let k = k.trim();
        let Some(key) = static_key(k) else {
            return Err(CliError::UnknownKey {
                key: k.to_string(),
                origin: Source::File {
                    path: path.to_path_buf(),
                    line,
                },
            });
        };
        if let Some((_, _, first)) = out.iter().find(|(existing, _, _)| *existing == key) {
            return Err(CliError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("key `{key}` already set on line {first}"),
            });
        }
        out.push((key, unquote(v.trim()).to_string(), line));
    }
    Ok(out)
}

impl RawConfig {
    pub fn defaults() -> Self {
        let mut values = BTreeMap::new();
        for k in KEYS {
            values.insert(k.name, (k.default.to_string(), Source::Default));
        }
        Self { values }
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::MissingFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        for (key, value, line) in parse_document(path, &text)? {
            self.values.insert(
                key,
                (
                    value,
                    Source::File {
                        path: path.to_path_buf(),
                        line,
                    },
                ),
            );
        }
        Ok(())
    }

    pub fn apply_env(&mut self, env: &dyn Fn(&str) -> Option<String>) {
        for k in KEYS {
            let var = env_var_name(k.name);
            if let Some(v) = env(&var) {
                self.values.insert(k.name, (unquote(v.trim()).to_string(), Source::Env(var)));
            }
        }
    }

    pub fn set_flag(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let Some(key) = static_key(key) else {
            return Err(CliError::UnknownKey {
                key: key.to_string(),
                origin: Source::Flag,
            });
        };
        self.values.insert(key, (value.trim().to_string(), Source::Flag));
        Ok(())
    }

    pub fn get(&self, key: &str) -> (&str, &Source) {
        let (v, s) = &self.values[key];
        (v.as_str(), s)
    }
}

/// Fully typed and validated configuration of one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Subcommand,
    pub plan: ExperimentPlan,
    pub output_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub threads: usize,
    sources: BTreeMap<&'static str, Source>,
    echo: Vec<(&'static str, String)>,
}

struct Typer<'a> {
    raw: &'a RawConfig,
}

impl Typer<'_> {
    fn invalid(&self, key: &str, message: impl Into<String>) -> CliError {
        let (value, source) = self.raw.get(key);
        CliError::Invalid {
            key: key.to_string(),
            value: value.to_string(),
            origin: source.clone(),
            message: message.into(),
        }
    }

    fn str(&self, key: &str) -> &str {
        self.raw.get(key).0
    }

    fn usize(&self, key: &str) -> Result<usize, CliError> {
        self.str(key)
            .parse::<usize>()
            .map_err(|_| self.invalid(key, "expected a non-negative integer"))
    }

    fn u64(&self, key: &str) -> Result<u64, CliError> {
        self.str(key)
            .parse::<u64>()
            .map_err(|_| self.invalid(key, "expected a non-negative integer"))
    }

    fn f64(&self, key: &str) -> Result<f64, CliError> {
        self.str(key)
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.invalid(key, "expected a finite number"))
    }

    fn list(&self, key: &str) -> Result<Vec<usize>, CliError> {
        self.str(key)
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| self.invalid(key, format!("{s:?} is not a non-negative integer")))
            })
            .collect()
    }

    fn choice<T: Copy>(&self, key: &str, options: &[(&str, T)]) -> Result<T, CliError> {
        let v = self.str(key);
        options
            .iter()
            .find(|(name, _)| *name == v)
            .map(|(_, t)| *t)
            .ok_or_else(|| {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                self.invalid(key, format!("expected one of {}", names.join(", ")))
            })
    }
}

/// Default levels and reference implied by the subcommand.
fn derived_levels(command: Subcommand, j_fine: usize) -> (Vec<usize>, Vec<usize>, usize) {
    match command {
        Subcommand::RateTime => (vec![16, 32, 64, 128, 256, 512], vec![], j_fine),
        Subcommand::RateSpace => (vec![8, 16, 32, 64, 128], vec![], 512),
        Subcommand::Moments => (vec![64, 256], vec![256, 1024], 0),
        Subcommand::Increments => (vec![16, 32, 64, 128], vec![], 0),
        Subcommand::Simulate | Subcommand::Check => (vec![], vec![], 0),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Types and validates the layered values for `command`.
    pub fn from_raw(raw: &RawConfig, command: Subcommand) -> Result<Self, CliError> {
        let t = Typer { raw };
        let kind_value = t.str("kind");
        if !kind_value.is_empty() && kind_value != command.kind_label() {
            return Err(t.invalid(
                "kind",
                format!(
                    "does not match the `{}` subcommand (expected {})",
                    command.name(),
                    command.kind_label()
                ),
            ));
        }
        let d = t.usize("d")?;
        if !(1..=3).contains(&d) {
            return Err(t.invalid("d", "must be 1, 2 or 3"));
        }
        let length = t.f64("R")?;
        if !(length > 0.0) {
            return Err(t.invalid("R", "must be positive"));
        }
        let n = t.usize("n")?;
        if n < 2 {
            return Err(t.invalid("n", "must be at least 2"));
        }
        let quadrature = t.choice(
            "quadrature",
            &[("exact", QuadratureChoice::Exact), ("lumped", QuadratureChoice::Lumped)],
        )?;
        let horizon = t.f64("T")?;
        if !(horizon > 0.0) {
            return Err(t.invalid("T", "must be positive"));
        }
        let steps = t.usize("J")?;
        if steps == 0 {
            return Err(t.invalid("J", "must be at least 1"));
        }
        if !(horizon / (steps as f64) < 1.0) {
            return Err(t.invalid("J", "time step k = T/J must be below 1"));
        }
        let newton_tol = t.f64("newton_tol")?;
        if !(newton_tol >= 1e-14) {
            return Err(t.invalid("newton_tol", "must be at least 1e-14"));
        }
        let newton_max_iter = t.usize("newton_max_iter")?;
        if newton_max_iter == 0 {
            return Err(t.invalid("newton_max_iter", "must be positive"));
        }
        let damping = t.usize("damping")?;
        let sigma_kind = t.choice(
            "sigma",
            &[
                ("zero", SigmaKind::Zero),
                ("sine", SigmaKind::Sine),
                ("rational", SigmaKind::Rational),
            ],
        )?;
        let sigma_amplitude = t.f64("sigma_amplitude")?;
        let sigma = match sigma_kind {
            SigmaKind::Zero => SigmaPreset::ZERO,
            SigmaKind::Sine => SigmaPreset::sine(sigma_amplitude),
            SigmaKind::Rational => SigmaPreset::rational(sigma_amplitude),
        };
        let y0 = t.choice(
            "y0",
            &[("project", InitialTransfer::Project), ("interpolate", InitialTransfer::Interpolate)],
        )?;
        let record_stride = t.usize("record_stride")?;
        let x0_amplitude = t.f64("x0_amplitude")?;
        let x0_wavenumber = t.usize("x0_wavenumber")?;
        let x0_width = t.f64("x0_width")?;
        let x0 = match t
            .str("x0")
            .parse::<InitialPreset>()
            .map_err(|e| t.invalid("x0", e.to_string()))?
        {
            InitialPreset::Cos { .. } => InitialPreset::Cos {
                amplitude: x0_amplitude,
                wavenumber: u32::try_from(x0_wavenumber)
                    .ok()
                    .filter(|w| *w > 0)
                    .ok_or_else(|| t.invalid("x0_wavenumber", "must be a positive integer"))?,
            },
            InitialPreset::TanhLayer { .. } => {
                if !(x0_width > 0.0) {
                    return Err(t.invalid("x0_width", "must be positive"));
                }
                InitialPreset::TanhLayer {
                    amplitude: x0_amplitude,
                    width: x0_width,
                }
            }
            c @ InitialPreset::Constant { .. } => c,
        };
        let seed = t.u64("seed")?;
        let n_paths = t.usize("n_paths")?;
        let j_fine = t.usize("j_fine")?;
        if j_fine == 0 {
            return Err(t.invalid("j_fine", "must be at least 1"));
        }
        let spectral_modes = t.usize("spectral_modes")?;
        if spectral_modes == 0 {
            return Err(t.invalid("spectral_modes", "must be positive"));
        }
        let spectral_pad = t.f64("spectral_pad")?;
        if !(spectral_pad >= 1.5) {
            return Err(t.invalid("spectral_pad", "must be at least 1.5"));
        }
        let (default_levels, default_j_levels, default_reference) = derived_levels(command, j_fine);
        let levels = match t.list("levels")? {
            v if v.is_empty() => default_levels,
            v => v,
        };
        let j_levels = match t.list("j_levels")? {
            v if v.is_empty() => default_j_levels,
            v => v,
        };
        let reference = if t.str("reference").is_empty() {
            default_reference
        } else {
            t.usize("reference")?
        };
        let reference_solver = t.choice(
            "reference_solver",
            &[("spectral", ReferenceSolver::Spectral), ("fem", ReferenceSolver::Fem)],
        )?;
        let t_start = t.f64("t_start")?;
        let output_dir = PathBuf::from(t.str("output_dir"));
        if t.str("output_dir").is_empty() {
            return Err(t.invalid("output_dir", "must not be empty"));
        }
        let cache_dir = match t.str("cache_dir") {
            "" => None,
            p => Some(PathBuf::from(p)),
        };
        let threads = t.usize("threads")?;

        let plan = ExperimentPlan {
            kind: command.kind().unwrap_or(ExperimentKind::IdentitySuite),
            d,
            length,
            n,
            quadrature,
            scheme: SchemeConfig {
                horizon,
                steps,
                newton_tol,
                newton_max_iter,
                damping,
                sigma,
                record_stride,
                y0,
            },
            x0,
            levels,
            j_levels,
            reference,
            reference_solver,
            spectral_modes,
            spectral_pad,
            n_paths,
            seed,
            j_fine,
            t_start,
        };
        let sources = KEYS
            .iter()
            .map(|k| (k.name, raw.get(k.name).1.clone()))
            .collect();
        let mut cfg = Self {
            command,
            plan,
            output_dir,
            cache_dir,
            threads,
            sources,
            echo: Vec::new(),
        };
        if command != Subcommand::Simulate {
            cfg.plan.validate().map_err(|e| cfg.attribute(e))?;
        } else {
            cfg.validate_simulate()?;
        }
        cfg.echo = KEYS
            .iter()
            .map(|k| {
                let v = match k.name {
                    "kind" => command.kind_label().to_string(),
                    "levels" => join(&cfg.plan.levels),
                    "j_levels" => join(&cfg.plan.j_levels),
                    "reference" => cfg.plan.reference.to_string(),
                    _ => raw.get(k.name).0.to_string(),
                };
                (k.name, v)
            })
            .collect();
        Ok(cfg)
    }

    fn validate_simulate(&self) -> Result<(), CliError> {
        let j = self.plan.scheme.steps;
        let fine = self.plan.j_fine;
        if fine % j != 0 || !(fine / j).is_power_of_two() {
            return Err(CliError::Invalid {
                key: "j_fine".into(),
                value: fine.to_string(),
                origin: self.sources["j_fine"].clone(),
                message: format!("must be a power-of-two multiple of J = {j}"),
            });
        }
        self.plan.x0.validate().map_err(|e| self.attribute(e))
    }

    /// Attaches the key named at the start of a core validation message.
    fn attribute(&self, e: sac_core::SacError) -> CliError {
        let message = e.to_string();
        let body = message.strip_prefix("configuration error: ").unwrap_or(&message);
        let first = body
            .split(|c: char| !(c.is_alphanumeric() || c == '_'))
            .next()
            .unwrap_or("");
        match static_key(first) {
            Some(key) => CliError::Invalid {
                key: key.to_string(),
                value: self.echo_value(key),
                origin: self.sources[key].clone(),
                message: body.to_string(),
            },
            None => CliError::Core(e),
        }
    }

    fn echo_value(&self, key: &str) -> String {
        match key {
            "levels" => join(&self.plan.levels),
            "j_levels" => join(&self.plan.j_levels),
            "reference" => self.plan.reference.to_string(),
            _ => String::new(),
        }
    }

    pub fn source(&self, key: &str) -> Option<&Source> {
        self.sources.get(key)
    }

    /// Effective configuration as a config document.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.echo {
            let needs_quotes = v.is_empty() || v.contains(['#', '"', '\'']) || v != v.trim();
            if needs_quotes && !v.contains('"') {
                s.push_str(&format!("{k} = \"{v}\"\n"));
            } else {
                s.push_str(&format!("{k} = {v}\n"));
            }
        }
        s
    }

    /// The echo without execution-only keys; hashed for provenance.
    pub fn canonical(&self) -> String {
        self.echo
            .iter()
            .filter(|(k, _)| !matches!(*k, "output_dir" | "cache_dir" | "threads"))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Loads `path` (if any), then applies environment and flag overrides.
pub fn parse_config(
    path: Option<&Path>,
    env: &dyn Fn(&str) -> Option<String>,
    flags: &[(String, String)],
    command: Subcommand,
) -> Result<RunConfig, CliError> {
    let mut raw = RawConfig::defaults();
    if let Some(p) = path {
        raw.apply_file(p)?;
    }
    raw.apply_env(env);
    for (k, v) in flags {
        raw.set_flag(k, v)?;
    }
    RunConfig::from_raw(&raw, command)
}

/// Best-effort output directory of a configuration that failed to
/// validate; `None` if the file itself could not be read.
pub fn requested_output_dir(
    path: Option<&Path>,
    env: &dyn Fn(&str) -> Option<String>,
    flags: &[(String, String)],
) -> Option<PathBuf> {
    let mut raw = RawConfig::defaults();
    if let Some(p) = path {
        raw.apply_file(p).ok()?;
    }
    raw.apply_env(env);
    for (k, v) in flags {
        let _ = raw.set_flag(k, v);
    }
    let dir = raw.get("output_dir").0;
    (!dir.is_empty()).then(|| PathBuf::from(dir))
}
