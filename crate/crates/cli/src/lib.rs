//! `ofbf` command-line front end.

pub mod config;

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ofbf::matcalc::SquareMatrix;
use ofbf::movavg::{check_conditions, quasinorm_g_tilde, GTildeFn, GTildeMode, MAKernelModel};
use ofbf::polar::PolarSystem;
use ofbf::simulate::{parse_vector, simulate_cholesky, simulate_spectral, FrequencyGrid, Lattice, SpectralOptions};
use ofbf::spectral::{singular_example_cov, BuiltinProfile, CovarianceOptions, SpectralModel};
use ofbf::homog::SphericalProfile;
use ofbf::matcalc::validate_exponents;
use ofbf::{Error, Result};

pub use config::{GTildeSource, OutputFormat, ProfileSpec, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Parser, Debug)]
#[command(name = "ofbf", version, about = "Operator fractional Brownian fields: covariances, sampling and moving-average kernels")]
pub struct Cli {
    /// Cap on worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overrides the seed from the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Polar decomposition x = τ^E l with the E-adapted norm, as CSV.
    Polar {
        /// Exponent matrix, e.g. "[[1,0.3],[0,1]]".
        #[arg(long = "E")]
        e: String,
        /// Point, comma-separated.
        #[arg(long, allow_hyphen_values = true)]
        x: String,
    },
    /// Covariance matrix E X(s) X(t)ᵀ by quadrature.
    Cov {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, allow_hyphen_values = true)]
        s: String,
        #[arg(long, allow_hyphen_values = true)]
        t: String,
    },
    /// Sample the field on a lattice.
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        /// "lo:hi:n,lo:hi:n" grid or "x,y;x,y" point list.
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
        #[arg(long)]
        reps: usize,
        #[arg(long, value_enum, default_value = "cholesky")]
        method: MethodArg,
        /// Output path (defaults to output.path from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write flat CSV instead of OFBF1.
        #[arg(long)]
        csv: bool,
    },
    /// Moving-average kernel φ(v).
    Kernel {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, allow_hyphen_values = true)]
        v: String,
    },
    /// Moving-average vs harmonizable covariance on a panel of (s, t) pairs, as a CSV report.
    Equivalence {
        #[command(flatten)]
        config: ConfigArg,
        /// Pair "s:t" with comma-separated points; repeatable. Defaults to a built-in 5-pair panel.
        #[arg(long = "pair", allow_hyphen_values = true)]
        pairs: Vec<String>,
        /// Relative tolerance per entry after the constant fit.
        #[arg(long, default_value_t = 1e-2)]
        tol: f64,
    },
    /// Report exponent, integrability and kernel conditions.
    Check {
        #[command(flatten)]
        config: ConfigArg,
    },
}

#[derive(Args, Debug)]
pub struct ConfigArg {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MethodArg {
    Cholesky,
    Spectral,
}

/// Entry point: parses `argv`, runs the subcommand and returns the exit code. Errors are
/// reported as one JSON line on stderr.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let result = match cli.threads {
        Some(0) => Err(Error::Validation("--threads must be at least 1".into())),
        Some(k) => match rayon::ThreadPoolBuilder::new().num_threads(k).build() {
            Ok(pool) => {
                let mut buf = Vec::new();
                let r = pool.install(|| dispatch(&cli, &mut buf));
                let _ = out.write_all(&buf);
                r
            }
            Err(e) => Err(Error::Validation(format!("--threads: {e}"))),
        },
        None => dispatch(&cli, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let code = match e {
                Error::Numerical(_) | Error::Range(_) => EXIT_NUMERICAL,
                _ => EXIT_VALIDATION,
            };
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string(), "exit": code });
            let _ = writeln!(err, "{line}");
            code
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let load = |c: &ConfigArg| -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&c.config)?;
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    };
    match &cli.command {
        Command::Polar { e, x } => polar(e, x, out),
        Command::Cov { config, s, t } => cov(&load(config)?, s, t, out),
        Command::Simulate { config, grid, reps, method, out: path, csv } => {
            simulate(&load(config)?, grid, *reps, *method, path.as_ref(), *csv, out)
        }
        Command::Kernel { config, v } => kernel(&load(config)?, v, out),
        Command::Equivalence { config, pairs, tol } => equivalence(&load(config)?, pairs, *tol, out),
        Command::Check { config } => check(&load(config)?, out),
    }
}

/// 17 significant digits.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_matrix(out: &mut dyn Write, m: &SquareMatrix) -> Result<()> {
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| num(m[(i, j)])).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

fn polar(e: &str, x: &str, out: &mut dyn Write) -> Result<i32> {
    let e = config::parse_matrix("--E", e)?;
    let x = parse_vector(x)?;
    if x.len() != e.nrows() {
        return Err(Error::Validation(format!("--x has {} components, --E is {1}x{1}", x.len(), e.nrows())));
    }
    let sys = PolarSystem::new(&e)?;
    let d = sys.decompose(&x)?;
    let norm = sys.zero_norm(&x)?;
    let header: Vec<String> = std::iter::once("tau".to_string())
        .chain((1..=x.len()).map(|j| format!("l{j}")))
        .chain(std::iter::once("norm0".to_string()))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    let row: Vec<String> = std::iter::once(d.tau).chain(d.l.iter().copied()).chain(std::iter::once(norm)).map(num).collect();
    writeln!(out, "{}", row.join(","))?;
    Ok(EXIT_OK)
}

/// Spectral model of a config; `None` for the singular-measure counterexample.
pub fn spectral_model(cfg: &RunConfig) -> Result<Option<SpectralModel>> {
    let builtin = |p: BuiltinProfile| SpectralModel::from_builtin(&cfg.e, &cfg.h, &p);
    let model = match &cfg.profile {
        ProfileSpec::Counterexample { .. } => return Ok(None),
        ProfileSpec::Isotropic => builtin(BuiltinProfile::Isotropic)?,
        ProfileSpec::Elliptic { a, b } => builtin(BuiltinProfile::Elliptic { a: *a, b: *b })?,
        ProfileSpec::Quasinorm => builtin(BuiltinProfile::Quasinorm)?,
        ProfileSpec::Csv(path) => {
            let file = File::open(path).map_err(|e| Error::Validation(format!("model.profile: {}: {e}", path.display())))?;
            let profile = SphericalProfile::from_csv(&path.display().to_string(), BufReader::new(file), cfg.n, cfg.n)?;
            SpectralModel::new(validate_exponents(&cfg.e, &cfg.h)?, profile)?
        }
    };
    let q = &cfg.quadrature;
    let mut opts = CovarianceOptions {
        angular_level: q.angular_level,
        max_angular_level: q.max_angular_level,
        rel_tol: q.rel_tol,
        ..CovarianceOptions::default()
    };
    opts.radial.rel_tol = q.radial_rel_tol;
    Ok(Some(model.with_options(opts)))
}

fn require_spectral(cfg: &RunConfig, what: &str) -> Result<SpectralModel> {
    spectral_model(cfg)?.ok_or_else(|| {
        Error::Validation(format!("model.profile: {what} is not available for the singular-measure counterexample (use cov or check)"))
    })
}

fn parse_point(name: &str, raw: &str, m: usize) -> Result<Vec<f64>> {
    let v = parse_vector(raw).map_err(|e| Error::Validation(format!("{name}: {e}")))?;
    if v.len() != m {
        return Err(Error::Validation(format!("{name}: expected {m} components, got {}", v.len())));
    }
    Ok(v)
}

fn cov(cfg: &RunConfig, s: &str, t: &str, out: &mut dyn Write) -> Result<i32> {
    let s = parse_point("--s", s, cfg.m)?;
    let t = parse_point("--t", t, cfg.m)?;
    match spectral_model(cfg)? {
        None => {
            let ProfileSpec::Counterexample { d } = cfg.profile else { unreachable!("only the counterexample has no spectral model") };
            let v = singular_example_cov(&[s[0], s[1]], &[t[0], t[1]], d)?;
            writeln!(out, "{}", num(v))?;
            writeln!(out, "# est_error={}", num(0.0))?;
        }
        Some(model) => {
            let c = model.covariance(&s, &t)?;
            write_matrix(out, &c.value)?;
            writeln!(out, "# est_error={}", num(c.est_error))?;
        }
    }
    Ok(EXIT_OK)
}

fn simulate(
    cfg: &RunConfig,
    grid: &str,
    reps: usize,
    method: MethodArg,
    path: Option<&PathBuf>,
    csv: bool,
    out: &mut dyn Write,
) -> Result<i32> {
    let model = require_spectral(cfg, "simulate")?;
    let lattice = Lattice::parse(grid).map_err(|e| Error::Validation(format!("--grid: {e}")))?;
    if lattice.dim() != cfg.m {
        return Err(Error::Validation(format!("--grid: points have {} coordinates, model.m = {}", lattice.dim(), cfg.m)));
    }
    if reps == 0 {
        return Err(Error::Validation("--reps must be at least 1".into()));
    }
    let path = path
        .cloned()
        .or_else(|| cfg.output_path.clone())
        .ok_or_else(|| Error::Validation("--out: no output path (set --out or output.path)".into()))?;
    let sample = match method {
        MethodArg::Cholesky => simulate_cholesky(&model, &lattice, reps, cfg.seed)?,
        MethodArg::Spectral => {
            let q = &cfg.quadrature;
            let opts = SpectralOptions {
                grid: FrequencyGrid::uniform(cfg.m, q.grid_radius, q.grid_nodes)?,
                replicates: reps,
                tail_closure: q.tail_closure,
            };
            simulate_spectral(&model, &lattice, &opts, cfg.seed)?
        }
    };
    let mut w = BufWriter::new(File::create(&path)?);
    let format = if csv { OutputFormat::Csv } else { cfg.output_format };
    match format {
        OutputFormat::Csv => sample.write_csv(&mut w)?,
        OutputFormat::Ofbf1 => sample.write_ofbf1(&mut w)?,
    }
    w.flush()?;
    writeln!(
        out,
        "# wrote {} replicates x {} points to {} (seed {}, {:?})",
        reps,
        lattice.len(),
        path.display(),
        cfg.seed,
        method
    )?;
    Ok(EXIT_OK)
}

fn g_tilde_for(cfg: &RunConfig, model: &SpectralModel) -> Result<(Option<GTildeFn>, GTildeMode)> {
    if cfg.g_tilde == GTildeSource::FiniteDifference {
        return Ok((None, GTildeMode::FiniteDifference));
    }
    // the isotropic filter coincides with the quasinorm one when every eigenvalue of E is 1, or m = 1
    let closed = match cfg.profile {
        ProfileSpec::Quasinorm => true,
        ProfileSpec::Isotropic => cfg.m == 1 || cfg.e == SquareMatrix::identity(cfg.m, cfg.m),
        _ => false,
    };
    if closed {
        Ok((Some(quasinorm_g_tilde(model.pair())?), GTildeMode::Analytic))
    } else {
        Ok((None, GTildeMode::Analytic))
    }
}

pub fn kernel_model(cfg: &RunConfig) -> Result<MAKernelModel> {
    let model = require_spectral(cfg, "the moving-average kernel")?;
    let (gt, mode) = g_tilde_for(cfg, &model)?;
    MAKernelModel::new(model, gt, mode).map_err(|e| match (&e, mode) {
        (Error::Validation(msg), GTildeMode::Analytic) if msg.contains("(c.1)") => Error::Validation(format!(
            "{msg} (no closed-form g̃ for profile {:?}; set kernel.g_tilde = finite_difference to difference g numerically)",
            cfg.profile
        )),
        _ => e,
    })
}

fn kernel(cfg: &RunConfig, v: &str, out: &mut dyn Write) -> Result<i32> {
    let v = parse_point("--v", v, cfg.m)?;
    let k = kernel_model(cfg)?;
    let phi = k.phi(&v)?;
    write_matrix(out, &phi.phi)?;
    writeln!(out, "# est_error={}", num(phi.est_error))?;
    Ok(EXIT_OK)
}

/// Default (s, t) panel for the equivalence report.
pub fn default_panel(m: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    match m {
        1 => vec![(vec![1.0], vec![1.0]), (vec![0.5], vec![2.0]), (vec![-1.0], vec![1.5]), (vec![2.0], vec![2.0]), (vec![0.3], vec![-0.8])],
        _ => vec![
            (vec![1.0, 0.0], vec![1.0, 0.0]),
            (vec![1.0, 0.4], vec![0.2, -0.9]),
            (vec![0.5, 0.5], vec![0.5, 0.5]),
            (vec![0.0, 1.0], vec![1.0, 1.0]),
            (vec![-0.7, 0.3], vec![0.4, 1.1]),
        ],
    }
}

#[derive(Clone, Debug)]
pub struct EquivalenceRow {
    pub s: Vec<f64>,
    pub t: Vec<f64>,
    pub entry: (usize, usize),
    pub spectral: f64,
    pub ma: f64,
    pub rel_error: f64,
    pub allowed: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct EquivalenceReport {
    pub rows: Vec<EquivalenceRow>,
    /// Least-squares constant `k` in `spectral ≈ k · ma`.
    pub fitted_constant: f64,
    /// `(2π)^m` from the kernel normalization.
    pub expected_constant: f64,
    pub pass: bool,
}

/// Moving-average vs harmonizable covariances on `pairs`, after one fitted constant.
pub fn equivalence_report(k: &MAKernelModel, pairs: &[(Vec<f64>, Vec<f64>)], tol: f64) -> Result<EquivalenceReport> {
    let n = k.n();
    let mut raw = Vec::new();
    for (s, t) in pairs {
        let sp = k.model().covariance(s, t)?;
        let ma = k.ma_covariance(s, t)?;
        raw.push((s.clone(), t.clone(), sp, ma));
    }
    let scale = raw.iter().map(|r| r.2.value.abs().max()).fold(0.0, f64::max);
    // minimize Σ ((sp − k·ma)/sp)² over entries that are not negligible
    let (mut num_, mut den) = (0.0, 0.0);
    for (_, _, sp, ma) in &raw {
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (sp.value[(i, j)], ma.value[(i, j)]);
                if a.abs() > 1e-8 * scale {
                    num_ += b / a;
                    den += (b / a) * (b / a);
                }
            }
        }
    }
    if den == 0.0 {
        return Err(Error::Numerical("equivalence panel has no non-zero covariance entries".into()));
    }
    let fitted = num_ / den;
    let mut rows = Vec::new();
    for (s, t, sp, ma) in &raw {
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (sp.value[(i, j)], ma.value[(i, j)]);
                let diff = (a - fitted * b).abs();
                let allowed = (tol * scale.max(a.abs()).min(a.abs().max(1e-8 * scale))).max(sp.est_error + fitted * ma.est_error);
                let rel_error = diff / a.abs().max(1e-300);
                rows.push(EquivalenceRow {
                    s: s.clone(),
                    t: t.clone(),
                    entry: (i, j),
                    spectral: a,
                    ma: b,
                    rel_error,
                    allowed,
                    pass: diff <= allowed,
                });
            }
        }
    }
    let pass = rows.iter().all(|r| r.pass);
    Ok(EquivalenceReport { rows, fitted_constant: fitted, expected_constant: (2.0 * std::f64::consts::PI).powi(k.m() as i32), pass })
}

fn equivalence(cfg: &RunConfig, pairs: &[String], tol: f64, out: &mut dyn Write) -> Result<i32> {
    let k = kernel_model(cfg)?;
    let panel = if pairs.is_empty() {
        default_panel(cfg.m)
    } else {
        pairs
            .iter()
            .map(|p| {
                let (s, t) = p.split_once(':').ok_or_else(|| Error::Validation(format!("--pair: expected s:t, got `{p}`")))?;
                Ok((parse_point("--pair", s, cfg.m)?, parse_point("--pair", t, cfg.m)?))
            })
            .collect::<Result<Vec<_>>>()?
    };
    let rep = equivalence_report(&k, &panel, tol)?;
    let m = cfg.m;
    let mut header = String::from("pair");
    for j in 1..=m {
        let _ = write!(header, ",s{j}");
    }
    for j in 1..=m {
        let _ = write!(header, ",t{j}");
    }
    header.push_str(",i,j,spectral,ma,fitted_ma,rel_error,pass");
    writeln!(out, "{header}")?;
    for (idx, r) in rep.rows.iter().enumerate() {
        let pair = idx / (k.n() * k.n());
        let mut line = format!("{pair}");
        for x in r.s.iter().chain(&r.t) {
            let _ = write!(line, ",{}", num(*x));
        }
        let _ = write!(
            line,
            ",{},{},{},{},{},{},{}",
            r.entry.0 + 1,
            r.entry.1 + 1,
            num(r.spectral),
            num(r.ma),
            num(rep.fitted_constant * r.ma),
            num(r.rel_error),
            if r.pass { "pass" } else { "fail" }
        );
        writeln!(out, "{line}")?;
    }
    writeln!(
        out,
        "# fitted_constant={} expected={} relative_deviation={} result={}",
        num(rep.fitted_constant),
        num(rep.expected_constant),
        num((rep.fitted_constant / rep.expected_constant - 1.0).abs()),
        if rep.pass { "pass" } else { "fail" }
    )?;
    Ok(if rep.pass { EXIT_OK } else { EXIT_NUMERICAL })
}

fn check(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let pair = validate_exponents(&cfg.e, &cfg.h)?;
    writeln!(
        out,
        "exponents: pass (eig(E) = {}, eig(H) = {})",
        pair.e_spectrum().describe(),
        pair.h_spectrum().describe()
    )?;
    let Some(model) = spectral_model(cfg)? else {
        writeln!(out, "profile: singular control measure on the diagonal, {}", match cfg.profile {
            ProfileSpec::Counterexample { d } => format!("d = {d}"),
            _ => String::new(),
        })?;
        writeln!(out, "kernel conditions: not applicable")?;
        return Ok(EXIT_OK);
    };
    let integ = model.integrability()?;
    writeln!(
        out,
        "integrability: {} (small-r exponent {}, large-r exponent {}, profile bound {}){}",
        if integ.pass { "pass" } else { "fail" },
        integ.small_r_exponent,
        integ.large_r_exponent,
        integ.profile_bound,
        if integ.failures.is_empty() { String::new() } else { format!(": {}", integ.failures.join("; ")) }
    )?;
    if cfg.m > 2 {
        writeln!(out, "kernel conditions: not evaluated (moving-average kernels support m <= 2)")?;
        return Ok(EXIT_OK);
    }
    let (gt, mode) = g_tilde_for(cfg, &model)?;
    let report = check_conditions(&model, gt.as_ref(), mode);
    for (name, c) in [("(c.1)", &report.c1), ("(c.2)", &report.c2), ("(c.3)", &report.c3), ("(c.4)", &report.c4)] {
        writeln!(out, "{name}: {} ({})", if c.pass { "pass" } else { "fail" }, c.detail)?;
    }
    Ok(EXIT_OK)
}
