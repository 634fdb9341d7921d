//! Command-line front end: runs a verification suite from a configuration,
//! writes a JSON report and CSV margin dumps, and maps the outcome to an
//! exit code (0 pass, 1 check failure, 2 configuration error).

use crate::calculus::{make_bump, rng, sample_box, sample_shell, BoxDomain, Gaussian, QuadratureGrid};
use crate::carleman::{check_family, CarlemanTolerance};
use crate::cone::{
    critical_angle, gradient_bound_check, half_plane_samples, lower_threshold, operator_equivalence_residual,
    spectrum_check, threshold_classify, BuRegime, ConeParams,
};
use crate::config::{Config, CONFIG_ENV};
use crate::cutoffs::{band_samples, transition_samples, verify_cutoff_derivative_bound, verify_omega_identity, CutoffSpec};
use crate::error::{Error, Result};
use crate::estimates::{
    calibrate_d, check_lemma33, check_lemma34, check_psi_props, constants_identity_residual, half_space_samples,
    j_sum_residual, whole_space_samples, Calibration, Sample,
};
use crate::fields::{CoefficientField, ConstantField, DomainTag, EllipticityBounds, RadialField};
use crate::identity::{corollary32_convergence, corollary32_residual, default_nodes, imbalance_gap, lemma31_residual, ExpTime};
use crate::mollify::{affine_exactness, verify_mollify_props, Mollifier};
use crate::report::{MarginPoint, MarginReport};
use crate::weights::{default_constants, f_value, weight_eval, Variant, WeightParams};
use clap::{Parser, Subcommand};
use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "carleman-lab", version, about = "Numerical verification of weighted Carleman estimates")]
pub struct Cli {
    /// TOML configuration; defaults to $CARLEMAN_LAB_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub grid_level: Option<u32>,
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Run every suite on a single thread.
    #[arg(long, global = true)]
    pub serial: bool,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    CheckPsi,
    CheckMollify,
    CheckLemma33,
    CheckLemma34,
    CheckIdentity,
    CheckCarleman {
        /// 13 (whole space) or 14 (half space); both when omitted.
        #[arg(long, value_parser = ["13", "14"])]
        prop: Option<String>,
    },
    CheckCone {
        /// Stretch factor; repeat for several values.
        #[arg(long = "l")]
        ls: Vec<f64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0.1)]
        r_min: f64,
    },
    CheckCutoffs,
    CalibrateD {
        #[arg(long, value_parser = ["prop13", "prop14"])]
        variant: Option<String>,
    },
    ReportAll,
}

/// One entry of the `checks` array.
#[derive(Debug, Clone, Serialize)]
pub struct CheckEntry {
    pub name: String,
    pub min_margin: f64,
    pub argmin: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub empirical_constant: Option<f64>,
    pub pass: bool,
    pub sample_count: usize,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<CheckEntry>,
}

impl From<&MarginReport> for CheckEntry {
    fn from(r: &MarginReport) -> Self {
        CheckEntry {
            name: r.name.clone(),
            min_margin: r.min_margin,
            argmin: r.argmin.clone(),
            empirical_constant: r.empirical_constant,
            pass: r.pass,
            sample_count: r.sample_count,
            tolerance: r.tolerance,
            components: r.components.iter().map(CheckEntry::from).collect(),
        }
    }
}

/// Report of one suite.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub params: Value,
    pub checks: Vec<CheckEntry>,
    pub versions: BTreeMap<String, String>,
    pub seed: u64,
    pub pass: bool,
    /// Spatial dimension of margin locations, used to label CSV columns;
    /// `None` when locations are not space-time points.
    #[serde(skip)]
    pub dim: Option<usize>,
    #[serde(skip)]
    pub reports: Vec<MarginReport>,
}

impl SuiteReport {
    fn new(suite: &str, cfg: &Config, dim: Option<usize>, params: Value, reports: Vec<MarginReport>) -> Self {
        SuiteReport {
            suite: suite.into(),
            params,
            checks: reports.iter().map(CheckEntry::from).collect(),
            versions: versions(),
            seed: cfg.seed,
            pass: reports.iter().all(|r| r.pass),
            dim,
            reports,
        }
    }

    pub fn find(&self, name: &str) -> Option<&MarginReport> {
        self.reports.iter().find_map(|r| r.find(name))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateReport {
    pub suite: String,
    pub suites: Vec<SuiteReport>,
    pub versions: BTreeMap<String, String>,
    pub seed: u64,
    pub pass: bool,
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("carleman-lab".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("report_schema".to_string(), "1".to_string()),
    ])
}

/// Exit code for an error: failed calibration is a check failure, the rest
/// are configuration problems.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Calibration { .. } => 1,
        _ => 2,
    }
}

/// Parses arguments, runs the selected suite and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return 2;
        }
    };
    match execute(&cli.command, &cfg) {
        Ok(pass) => {
            if pass {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("{e}");
            exit_code(&e)
        }
    }
}

/// Configuration from `--config`, the environment variable or defaults, with
/// command-line overrides applied.
pub fn load_config(cli: &Cli) -> Result<Config> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => Config::load(&p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(g) = cli.grid_level {
        cfg.grid_level = g;
    }
    if let Some(t) = cli.tol {
        cfg.tol = t;
    }
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    cfg.serial |= cli.serial;
    if let Command::CheckCone { ls, samples, .. } = &cli.command {
        if !ls.is_empty() {
            cfg.cone.ls = ls.clone();
        }
        if let Some(s) = samples {
            cfg.cone.samples = *s;
        }
    }
    if let Command::CheckCarleman { prop: Some(p) } = &cli.command {
        cfg.carleman.prop = p.parse().expect("validated by clap");
    }
    if let Command::CalibrateD { variant: Some(v) } = &cli.command {
        cfg.calibrate.variant = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a command, writes its reports and returns whether every check
/// passed.
pub fn execute(command: &Command, cfg: &Config) -> Result<bool> {
    let work = || -> Result<bool> {
        if let Command::ReportAll = command {
            let agg = report_all(cfg)?;
            for s in &agg.suites {
                write_suite(s, &cfg.output_dir)?;
                print_summary(s);
            }
            write_json(&agg, &cfg.output_dir.join("report-all.json"))?;
            return Ok(agg.pass);
        }
        let r = run_suite(command, cfg)?;
        write_suite(&r, &cfg.output_dir)?;
        print_summary(&r);
        Ok(r.pass)
    };
    if cfg.serial {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
        pool.install(work)
    } else {
        work()
    }
}

pub fn run_suite(command: &Command, cfg: &Config) -> Result<SuiteReport> {
    match command {
        Command::CheckPsi => psi_suite(cfg),
        Command::CheckMollify => mollify_suite(cfg),
        Command::CheckLemma33 => lemma33_suite(cfg),
        Command::CheckLemma34 => lemma34_suite(cfg),
        Command::CheckIdentity => identity_suite(cfg),
        Command::CheckCarleman { .. } => carleman_suite(cfg),
        Command::CheckCone { r_min, .. } => cone_suite(cfg, *r_min),
        Command::CheckCutoffs => cutoffs_suite(cfg),
        Command::CalibrateD { .. } => calibrate_suite(cfg),
        Command::ReportAll => Err(Error::argument("report-all is an aggregate")),
    }
}

pub fn report_all(cfg: &Config) -> Result<AggregateReport> {
    let mut all = cfg.clone();
    all.carleman.prop = 0;
    let suites = vec![
        psi_suite(&all)?,
        mollify_suite(&all)?,
        cone_suite(&all, 0.1)?,
        lemma33_suite(&all)?,
        lemma34_suite(&all)?,
        identity_suite(&all)?,
        carleman_suite(&all)?,
        cutoffs_suite(&all)?,
        calibrate_suite(&all)?,
    ];
    Ok(AggregateReport {
        suite: "report-all".into(),
        pass: suites.iter().all(|s| s.pass),
        suites,
        versions: versions(),
        seed: cfg.seed,
    })
}

fn print_summary(r: &SuiteReport) {
    for c in &r.checks {
        println!(
            "{} {:<5} {} min_margin={:e}",
            r.suite,
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.min_margin
        );
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// `<suite>.json` plus one `<suite>.<check path>.csv` per leaf check with
/// located margins.
pub fn write_suite(r: &SuiteReport, dir: &Path) -> Result<()> {
    write_json(r, &dir.join(format!("{}.json", r.suite)))?;
    let mut leaves = Vec::new();
    for rep in &r.reports {
        collect_leaves(rep, String::new(), &mut leaves);
    }
    for (path, rep) in leaves {
        let file = dir.join(format!("{}.{}.csv", r.suite, path));
        write_csv(&rep.points, r.dim, &file)?;
    }
    Ok(())
}

fn collect_leaves<'a>(r: &'a MarginReport, prefix: String, out: &mut Vec<(String, &'a MarginReport)>) {
    let name: String = r
        .name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    let path = if prefix.is_empty() { name } else { format!("{prefix}.{name}") };
    if r.components.is_empty() {
        if r.points.iter().any(|p| !p.location.is_empty()) {
            out.push((path, r));
        }
    } else {
        for c in &r.components {
            collect_leaves(c, path.clone(), out);
        }
    }
}

/// Columns `x1 … xn, t, margin` for space-time locations, `x1 … xn, margin`
/// for spatial ones and `c1 … ck, margin` otherwise.
fn write_csv(points: &[MarginPoint], dim: Option<usize>, path: &Path) -> Result<()> {
    let k = points.iter().map(|p| p.location.len()).max().unwrap_or(0);
    let mut header: Vec<String> = if dim.is_some_and(|d| k == d + 1) {
        (1..k).map(|i| format!("x{i}")).chain(["t".to_string()]).collect()
    } else if dim == Some(k) {
        (1..=k).map(|i| format!("x{i}")).collect()
    } else {
        (1..=k).map(|i| format!("c{i}")).collect()
    };
    header.push("margin".into());
    let csv_err = |e: csv::Error| Error::Config(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(&header).map_err(csv_err)?;
    for p in points {
        let mut row: Vec<String> = p.location.iter().map(|v| format!("{v:e}")).collect();
        row.resize(k, String::new());
        row.push(format!("{:e}", p.margin));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn seed_for(cfg: &Config, offset: u64) -> u64 {
    cfg.seed.wrapping_mul(1000).wrapping_add(offset)
}

fn renamed(mut r: MarginReport, name: String) -> MarginReport {
    r.name = name;
    r
}

fn scalar_check(name: &str, margin: f64, value: f64) -> MarginReport {
    MarginReport::scalar(name, margin + 0.0, 0.0).with_constant(value)
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

/// `x′` uniform in `[−x_max, x_max]^{n−1}`, `xₙ` uniform in `(0, x_max]`,
/// `t` uniform in `[0, 2)`.
pub fn psi_samples(n: usize, count: usize, x_max: f64, seed: u64) -> Vec<Sample> {
    let mut g = rng(seed);
    (0..count)
        .map(|_| {
            let mut x: Vec<f64> = (0..n - 1).map(|_| g.gen_range(-x_max..x_max)).collect();
            x.push(x_max - g.gen_range(0.0..x_max));
            (x, g.gen_range(0.0..2.0))
        })
        .collect()
}

/// Angle of the rotation applied to `diag(1, …, 1, κ)` for the ψ suite, so
/// the coefficient matrix has off-diagonal entries.
pub const PSI_ROTATION: f64 = 0.3;

pub fn psi_suite(cfg: &Config) -> Result<SuiteReport> {
    let n = cfg.field.n;
    let samples = psi_samples(n, cfg.psi.samples, cfg.psi.x_max, seed_for(cfg, 1));
    let mut by_name: BTreeMap<String, Vec<MarginReport>> = BTreeMap::new();
    let mut order = Vec::new();
    for &kappa in &cfg.psi.kappas {
        let field = ConstantField::rotated_diagonal(n, kappa, PSI_ROTATION, DomainTag::WholeSpace0_2)
            .map_err(|e| Error::Config(e.to_string()))?;
        let r = check_psi_props(kappa, &field, &samples, cfg.tol)?;
        for c in r.components {
            if !by_name.contains_key(&c.name) {
                order.push(c.name.clone());
            }
            by_name
                .entry(c.name.clone())
                .or_default()
                .push(renamed(c, format!("kappa_{kappa}")));
        }
    }
    let reports = order
        .iter()
        .map(|name| MarginReport::combine(name.clone(), by_name.remove(name).unwrap_or_default()))
        .collect();
    let params = json!({
        "n": n,
        "kappas": cfg.psi.kappas,
        "samples": cfg.psi.samples,
        "x_max": cfg.psi.x_max,
        "rotation": PSI_ROTATION,
        "tol": cfg.tol,
    });
    Ok(SuiteReport::new("check-psi", cfg, Some(n), params, reports))
}

pub fn mollify_suite(cfg: &Config) -> Result<SuiteReport> {
    let m = &cfg.mollify;
    let n = cfg.field.n;
    if !(m.r_min >= 1.0 && m.r_max > m.r_min) {
        return Err(Error::Config("mollify needs 1 <= r_min < r_max".into()));
    }
    let field = RadialField::new(n, m.c, m.mu).map_err(|e| Error::Config(e.to_string()))?;
    let moll = Mollifier::new(n, m.epsilon).map_err(|e| Error::Config(e.to_string()))?;
    let mut g = rng(seed_for(cfg, 2));
    let samples: Vec<Sample> = (0..m.samples)
        .map(|_| (sample_shell(&mut g, n, m.r_min, m.r_max), g.gen_range(0.0..2.0)))
        .collect();
    let mut reports = vec![verify_mollify_props(&field, &moll, &field.bounds(), &samples, cfg.tol)?];
    if n == 2 {
        let affine = crate::fields::AffineField::example_2d();
        let pts: Vec<Vec<f64>> = (0..m.samples.min(500))
            .map(|_| sample_box(&mut g, &[-5.0, -5.0], &[5.0, 5.0]))
            .collect();
        reports.push(affine_exactness(&affine, &moll, &pts, 1e-8)?);
    }
    let params = json!({
        "n": n,
        "epsilon": m.epsilon,
        "samples": m.samples,
        "radius": [m.r_min, m.r_max],
        "field": field.name(),
        "declared": field.bounds(),
    });
    Ok(SuiteReport::new("check-mollify", cfg, Some(n), params, reports))
}

pub fn cone_suite(cfg: &Config, r_min: f64) -> Result<SuiteReport> {
    let mut reports = Vec::new();
    let mut orders = Vec::new();
    for (k, &l) in cfg.cone.ls.iter().enumerate() {
        let p = ConeParams::from_l(l).map_err(|e| Error::Config(e.to_string()))?;
        let seed = seed_for(cfg, 30 + k as u64);
        let ys = half_plane_samples(cfg.cone.samples, r_min, 5.0, seed);
        let spec = spectrum_check(&p, &ys, 1e-10)?;
        let grad = gradient_bound_check(&p, &ys, None, cfg.tol)?;
        let phi = Gaussian {
            center: vec![0.2, 1.0],
            width: 0.6,
            amplitude: 1.0,
        };
        let near = half_plane_samples(200, r_min.max(0.3), 2.0, seed + 7);
        let res: Vec<f64> = [40.0, 20.0, 10.0]
            .iter()
            .map(|s| operator_equivalence_residual(&phi, &p, &near, r_min, *s).map(|r| r.max_residual))
            .collect::<Result<_>>()?;
        let order = crate::calculus::convergence_order_halving(&res)?;
        orders.push(json!({"l": l, "residuals": res, "order": order}));
        reports.push(MarginReport::combine(
            format!("l_{l}"),
            vec![spec, grad, scalar_check("operator_equivalence_order", order - 1.8, order)],
        ));
    }
    let lt = lower_threshold();
    let deg = critical_angle().to_degrees();
    let regimes = [
        (lt * (1.0 - 1e-9), BuRegime::BuHolds),
        (lt * (1.0 + 1e-9), BuRegime::Indeterminate),
        (3.0, BuRegime::Indeterminate),
        (3.0 * (1.0 + 1e-9), BuRegime::BuFails),
    ];
    let regime_pts: Vec<MarginPoint> = regimes
        .iter()
        .map(|(e, want)| {
            Ok(MarginPoint {
                location: vec![*e],
                margin: if threshold_classify(*e)? == *want { 0.0 } else { -1.0 },
            })
        })
        .collect::<Result<_>>()?;
    reports.push(MarginReport::combine(
        "thresholds",
        vec![
            scalar_check("lower_threshold", 1e-3 - (lt - 1.7037).abs(), lt),
            scalar_check("critical_angle_degrees", 0.01 - (deg - 109.47).abs(), deg),
            MarginReport::from_points("regime_boundaries", regime_pts, 0.0),
        ],
    ));
    let params = json!({
        "ls": cfg.cone.ls,
        "samples": cfg.cone.samples,
        "r_min": r_min,
        "operator_equivalence": orders,
    });
    Ok(SuiteReport::new("check-cone", cfg, Some(2), params, reports))
}

/// Calibration outcome: calibrated parameters or the failing report.
fn calibrate_or_report(
    field: &dyn CoefficientField,
    moll: &Mollifier,
    template: &WeightParams,
    samples: &[Sample],
    cfg: &Config,
) -> Result<std::result::Result<Calibration, MarginReport>> {
    match calibrate_d(field, moll, template, samples, &cfg.calibrate.d_grid, cfg.tol) {
        Ok(c) => Ok(Ok(c)),
        Err(Error::Calibration { worst_margin, .. }) => Ok(Err(MarginReport::scalar("calibration", worst_margin, cfg.tol))),
        Err(e) => Err(e),
    }
}

fn calibration_params(c: &Calibration) -> Value {
    json!({"d": c.d, "K": c.params.k, "b": c.params.b, "alpha": c.params.alpha, "trials": c.trials})
}

fn constants(bounds: &EllipticityBounds, variant: Variant, big_n: f64, gamma: f64) -> Result<WeightParams> {
    Ok(default_constants(bounds, variant, 1.0, big_n, gamma)?.params)
}

fn mollifier(cfg: &Config, n: usize) -> Result<Mollifier> {
    Mollifier::new(n, cfg.mollify.epsilon).map_err(|e| Error::Config(e.to_string()))
}

pub fn lemma33_suite(cfg: &Config) -> Result<SuiteReport> {
    let c = &cfg.lemma33;
    let built = cfg.field.build(false)?;
    let n = cfg.field.n;
    let moll = mollifier(cfg, n)?;
    let template = constants(&built.bounds, Variant::Prop13, c.big_n, c.gamma)?;
    let samples = whole_space_samples(n, c.samples, c.radius, 1.999, seed_for(cfg, 4));
    let mut params = json!({"n": n, "field": built.field.name(), "bounds": built.bounds, "samples": c.samples, "radius": c.radius, "gamma": c.gamma});
    let reports = match calibrate_or_report(built.field.as_ref(), &moll, &template, &samples, cfg)? {
        Err(fail) => vec![fail],
        Ok(cal) => {
            params["calibration"] = calibration_params(&cal);
            let r = check_lemma33(built.field.as_ref(), &moll, &cal.params, &samples, cfg.tol)?;
            r.all().into_iter().cloned().collect()
        }
    };
    Ok(SuiteReport::new("check-lemma33", cfg, Some(n), params, reports))
}

/// Number of samples at which the multiplier split is compared with the
/// direct evaluation.
pub const J_SUM_POINTS: usize = 500;

pub fn lemma34_suite(cfg: &Config) -> Result<SuiteReport> {
    let c = &cfg.lemma34;
    let built = c.field.build(true)?;
    let n = c.field.n;
    let moll = mollifier(cfg, n)?;
    let template = constants(&built.bounds, Variant::Prop14, c.big_n, c.gamma)?;
    let samples = half_space_samples(n, c.samples, c.radius, 0.999, seed_for(cfg, 5));
    let mut params = json!({"n": n, "field": built.field.name(), "bounds": built.bounds, "samples": c.samples, "radius": c.radius, "gamma": c.gamma});
    let mut reports = Vec::new();
    if built.bounds.e > 0.0 {
        let res = constants_identity_residual(&template);
        reports.push(scalar_check("constants_identity", 1e-12 - res.abs(), res));
    }
    match calibrate_or_report(built.field.as_ref(), &moll, &template, &samples, cfg)? {
        Err(fail) => reports.push(fail),
        Ok(cal) => {
            params["calibration"] = calibration_params(&cal);
            let r = check_lemma34(built.field.as_ref(), &moll, &cal.params, &samples, cfg.tol)?;
            params["c_b"] = json!(r.c_b);
            reports.extend(r.all().into_iter().cloned());
            let pts = samples
                .iter()
                .take(J_SUM_POINTS)
                .map(|(x, t)| {
                    let w = weight_eval(x, *t, built.field.as_ref(), &moll, &cal.params)?;
                    let res = j_sum_residual(&w, r.c_b, built.field.as_ref())?;
                    let mut location = x.clone();
                    location.push(*t);
                    Ok(MarginPoint {
                        location,
                        margin: 1e-6 - res,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            reports.push(MarginReport::from_points("multiplier_split", pts, 0.0));
        }
    }
    Ok(SuiteReport::new("check-lemma34", cfg, Some(n), params, reports))
}

fn support_box(lo: &[f64], hi: &[f64], n: usize, what: &str) -> Result<BoxDomain> {
    if lo.len() != n + 1 || hi.len() != n + 1 {
        return Err(Error::Config(format!("{what} support needs {} coordinates (x and t)", n + 1)));
    }
    BoxDomain::new(lo.to_vec(), hi.to_vec()).map_err(|e| Error::Config(e.to_string()))
}

pub fn identity_suite(cfg: &Config) -> Result<SuiteReport> {
    let c = &cfg.identity;
    let built = cfg.field.build(false)?;
    let n = cfg.field.n;
    let moll = mollifier(cfg, n)?;
    let params_w = default_constants(&built.bounds, Variant::Prop13, c.d, 1.0, c.gamma)?.params;
    let support = support_box(&c.support_lo, &c.support_hi, n, "identity")?;
    let u = make_bump(support.clone(), None)?;
    let base = if c.nodes == 0 { default_nodes(n) } else { c.nodes };
    let nodes = cfg.scaled_nodes(base);
    let grid = QuadratureGrid::gauss(support, nodes)?;
    let field = built.field.as_ref();
    let smoothed = corollary32_residual(&u, field, &moll, &params_w, &grid)?;
    let general = lemma31_residual(&u, field, &moll, &ExpTime { rate: 1.0 }, 0.0, &params_w, &grid)?;
    let gap = imbalance_gap(&general, &smoothed);
    let counts: Vec<usize> = c.convergence_nodes.iter().map(|&m| cfg.scaled_nodes(m)).collect();
    let conv = corollary32_convergence(&u, field, &moll, &params_w, &counts)?;
    let reports = vec![
        scalar_check("smoothed_identity_residual", 1e-3 - smoothed.residual, smoothed.residual),
        scalar_check("general_identity_residual", 1e-3 - general.residual, general.residual),
        scalar_check("specialization_gap", 1e-6 - gap, gap),
        scalar_check("convergence_order", conv.order - 1.8, conv.order),
    ];
    let params = json!({
        "n": n,
        "field": field.name(),
        "nodes": nodes,
        "support": [c.support_lo, c.support_hi],
        "gamma": c.gamma,
        "d": c.d,
        "K": params_w.k,
        "smoothed": smoothed,
        "general": general,
        "convergence": conv,
    });
    Ok(SuiteReport::new("check-identity", cfg, None, params, reports))
}

pub fn carleman_suite(cfg: &Config) -> Result<SuiteReport> {
    let c = &cfg.carleman;
    let tol = CarlemanTolerance { rel: c.tol_rel, abs: c.tol_abs };
    let nodes = cfg.scaled_nodes(c.nodes);
    let mut reports = Vec::new();
    let mut params = json!({"gammas": c.gammas, "seeds": c.seeds, "nodes": nodes, "max_drift": c.max_drift, "tol": tol});
    let props: Vec<u32> = if c.prop == 0 { vec![13, 14] } else { vec![c.prop] };
    for prop in props {
        let (fc, variant, lo, hi, cal_samples) = if prop == 13 {
            let n = cfg.field.n;
            (&cfg.field, Variant::Prop13, &c.support13_lo, &c.support13_hi, whole_space_samples(n, cfg.calibrate.samples, 10.0, 1.999, seed_for(cfg, 6)))
        } else {
            let n = c.field14.n;
            (&c.field14, Variant::Prop14, &c.support14_lo, &c.support14_hi, half_space_samples(n, cfg.calibrate.samples, 10.0, 0.999, seed_for(cfg, 7)))
        };
        let built = fc.build(prop == 14)?;
        let n = fc.n;
        let support = support_box(lo, hi, n, "carleman")?;
        let moll = mollifier(cfg, n)?;
        let template = constants(&built.bounds, variant, c.big_n, 1.0)?;
        let name = format!("prop{prop}");
        match calibrate_or_report(built.field.as_ref(), &moll, &template, &cal_samples, cfg)? {
            Err(fail) => reports.push(renamed(fail, format!("{name}_calibration"))),
            Ok(cal) => {
                let out = check_family(built.field.as_ref(), &cal.params, &support, &c.seeds, &c.gammas, nodes, c.max_drift, tol)?;
                let verdicts: Vec<Value> = out
                    .verdicts
                    .iter()
                    .map(|(s, v)| json!({"seed": s, "gamma": v.gamma, "ratio": v.ratio, "margin": v.margin, "pass": v.pass}))
                    .collect();
                params[name.as_str()] = json!({
                    "field": built.field.name(),
                    "bounds": built.bounds,
                    "support": [lo, hi],
                    "calibration": calibration_params(&cal),
                    "verdicts": verdicts,
                });
                reports.push(renamed(out.report, name));
            }
        }
    }
    Ok(SuiteReport::new("check-carleman", cfg, None, params, reports))
}

pub fn cutoffs_suite(cfg: &Config) -> Result<SuiteReport> {
    let c = &cfg.cutoffs;
    let n = cfg.field.n;
    let bounds = EllipticityBounds::new(n, c.lambda, c.big_lambda, 0.0, c.e).map_err(|e| Error::Config(e.to_string()))?;
    let dc = default_constants(&bounds, Variant::Prop14, c.d, c.big_n, 1.0)?;
    let spec = CutoffSpec::from_constants(&dc)?;
    let band = band_samples(&spec, n, c.samples, seed_for(cfg, 8));
    let wide = transition_samples(&spec, n, c.samples / 5, 20.0, seed_for(cfg, 9));
    let omega = verify_omega_identity(&spec, &band, &wide, 0.0);
    let excess = omega.find("c_star_excess").map(|r| r.min_margin).unwrap_or(f64::NEG_INFINITY);
    let c_star = 1.0 + f_value(0.5, spec.k) * (1.0 / spec.tau + 2.0).powf(spec.alpha);
    let kappa = bounds.big_lambda / bounds.lambda;
    let b = 1.0 / (64.0 * bounds.big_lambda * (kappa + 1.0).powi(4));
    let t1 = (b / (32.0 * c.big_n)).min(1.0 / (12.0 * c.big_n * c.big_n)).min(0.5);
    let unit = default_constants(&EllipticityBounds::new(n, 1.0, 1.0, 0.0, 0.0)?, Variant::Prop14, c.d, 1.0, 1.0)?;
    let derivative = verify_cutoff_derivative_bound(&spec, &transition_samples(&spec, n, c.samples, 8.0, seed_for(cfg, 10)));
    let reports = vec![
        omega,
        scalar_check("omega_margin_at_least_one", excess - 1.0, excess),
        scalar_check("c_star_formula", -(spec.c_star - c_star).abs(), spec.c_star),
        scalar_check("t1_formula", -(dc.t1 - t1).abs(), dc.t1),
        scalar_check("t1_unit_bounds", -(unit.t1 - 1.0 / 32768.0).abs(), unit.t1),
        derivative,
    ];
    let params = json!({
        "n": n,
        "bounds": bounds,
        "N": c.big_n,
        "d": c.d,
        "tau": spec.tau,
        "K": spec.k,
        "alpha": spec.alpha,
        "c_star": spec.c_star,
        "T1": dc.t1,
        "samples": c.samples,
    });
    Ok(SuiteReport::new("check-cutoffs", cfg, Some(n), params, reports))
}

pub fn calibrate_suite(cfg: &Config) -> Result<SuiteReport> {
    let half = cfg.calibrate.variant == "prop14";
    let (fc, variant) = if half {
        (&cfg.lemma34.field, Variant::Prop14)
    } else {
        (&cfg.field, Variant::Prop13)
    };
    let built = fc.build(half)?;
    let n = fc.n;
    let moll = mollifier(cfg, n)?;
    let template = constants(&built.bounds, variant, 1.0, 1.0)?;
    let samples = if half {
        half_space_samples(n, cfg.calibrate.samples, 10.0, 0.999, seed_for(cfg, 11))
    } else {
        whole_space_samples(n, cfg.calibrate.samples, 10.0, 1.999, seed_for(cfg, 11))
    };
    let mut params = json!({"variant": cfg.calibrate.variant, "field": built.field.name(), "bounds": built.bounds, "d_grid": cfg.calibrate.d_grid, "samples": cfg.calibrate.samples});
    let reports = match calibrate_or_report(built.field.as_ref(), &moll, &template, &samples, cfg)? {
        Err(fail) => vec![fail],
        Ok(cal) => {
            params["calibration"] = calibration_params(&cal);
            cal.reports.clone()
        }
    };
    Ok(SuiteReport::new("calibrate-d", cfg, Some(n), params, reports))
}
