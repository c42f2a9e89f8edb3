//! Command-line driver: dataset synthesis, single runs, sweeps, seed suites
//! and report summaries.
//!
//! Exit codes: 0 on success, 1 when training aborts on a non-finite loss,
//! 2 for usage and configuration errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::data::{synthesize, Decay, LongTailProfile, ShotSplit, DEFAULT_TEST_PER_CLASS};
use crate::error::{Error, Result};
use crate::eval::{emit_report, EvalReport, ReportFormat, CSV_HEADER};
use crate::experiment::{self, RunConfig};
use crate::losses::DistillMode;
use crate::train::{Method, TeacherKind};

#[derive(Debug, Parser)]
#[command(
    name = "cbd",
    version,
    about = "Class-balanced distillation experiments on long-tailed data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic long-tailed train/test pair as CSV.
    Synth(SynthArgs),
    /// Run one configured method and write its report and checkpoints.
    Train(TrainArgs),
    /// Sweep one hyper-parameter axis.
    Ablate(AblateArgs),
    /// Run several methods over several seeds and aggregate.
    Suite(SuiteArgs),
    /// Print JSON reports as a percentage table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DecayArg {
    Exponential,
    Zipf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub head: usize,
    #[arg(long)]
    pub tail: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = LongTailProfile::benchmark(0).class_separation)]
    pub separation: f64,
    #[arg(long, default_value_t = LongTailProfile::benchmark(0).noise_sigma)]
    pub noise: f64,
    #[arg(long, value_enum, default_value_t = DecayArg::Exponential)]
    pub decay: DecayArg,
    /// Zipf exponent, used with `--decay zipf`.
    #[arg(long, default_value_t = 1.0)]
    pub zipf_s: f64,
    #[arg(long, default_value_t = DEFAULT_TEST_PER_CLASS)]
    pub test_per_class: usize,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override, repeatable; dotted keys reach into tables.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// One of alpha, beta, K, ensemble_composition.
    #[arg(long, required = true)]
    pub axis: Vec<String>,
    /// Comma-separated sweep points replacing the default grid.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    /// Distillation modes for the alpha sweep.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "feature,classifier,hybrid"
    )]
    pub modes: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SuiteArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "instance,class_balanced,crt,finetune,cbd,cbd_k"
    )]
    pub methods: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report files, or directories searched for `*.json` reports.
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
}

/// Exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NumericalAbort { .. } | Error::Tensor(_) | Error::Fit(_) => 1,
        Error::Config(_) | Error::Parse { .. } | Error::Validation(_) | Error::Io { .. } => 2,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Suite(a) => suite(&a),
        Command::Report(a) => report(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `text` to `path` through a `.partial` sibling and a rename.
fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let mut partial = path.as_os_str().to_owned();
    partial.push(".partial");
    let partial = PathBuf::from(partial);
    fs::write(&partial, text).map_err(|e| Error::io(&partial, e))?;
    fs::rename(&partial, path).map_err(|e| Error::io(path, e))
}

fn synth(a: &SynthArgs) -> Result<()> {
    let profile = LongTailProfile {
        num_classes: a.classes,
        head_count: a.head,
        tail_count: a.tail,
        decay: match a.decay {
            DecayArg::Exponential => Decay::Exponential,
            DecayArg::Zipf => Decay::Zipf { s: a.zipf_s },
        },
        feature_dim: a.dim,
        class_separation: a.separation,
        noise_sigma: a.noise,
        seed: a.seed,
        test_per_class: a.test_per_class,
    };
    let (train, test) = synthesize(&profile)?;
    create_dir(&a.out)?;
    train.save(a.out.join("train.csv"))?;
    test.save(a.out.join("test.csv"))?;
    let counts: Vec<String> = train.class_counts().iter().map(usize::to_string).collect();
    println!(
        "train: {} instances, class counts [{}]",
        train.len(),
        counts.join(", ")
    );
    println!(
        "test: {} instances, {} per class",
        test.len(),
        a.test_per_class
    );
    Ok(())
}

fn load_config(c: &ConfigArgs, fallback: Method) -> Result<RunConfig> {
    match &c.config {
        Some(path) => RunConfig::load(path, &c.overrides),
        None => {
            // Without a file, overrides apply to the benchmark defaults.
            let base = toml::to_string(&RunConfig::benchmark(fallback, 0))
                .map_err(|e| Error::Config(e.to_string()))?;
            RunConfig::parse(&base, &c.overrides)
        }
    }
}

/// Runs `cfg` and writes `<stem>.json`, `<stem>.csv` and checkpoints into
/// `dir`.
fn run_and_write(cfg: &RunConfig, dir: &Path, stem: &str, checkpoints: bool) -> Result<EvalReport> {
    let out = experiment::run(cfg)?;
    create_dir(dir)?;
    let json = dir.join(format!("{stem}.json"));
    let csv = dir.join(format!("{stem}.csv"));
    emit_report(&out.report, ReportFormat::Json, &json)?;
    emit_report(&out.report, ReportFormat::Csv, &csv)?;
    if checkpoints {
        for (name, model) in &out.models {
            model.save(dir.join(format!("{stem}.{name}.ckpt.json")), &cfg.hash())?;
        }
    }
    log::info!(
        "{stem}: overall {:.2}% ncm {}",
        100.0 * out.report.overall_acc,
        out.report
            .ncm_overall_acc
            .map_or("n/a".to_string(), |a| format!("{:.2}%", 100.0 * a))
    );
    Ok(out.report)
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config, Method::Cbd)?;
    let report = run_and_write(&cfg, &a.out, "report", true)?;
    println!("{}", report.to_json()?);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Alpha,
    Beta,
    K,
    EnsembleComposition,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepAxis::Alpha),
            "beta" => Ok(SweepAxis::Beta),
            "K" | "k" => Ok(SweepAxis::K),
            "ensemble_composition" => Ok(SweepAxis::EnsembleComposition),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?}; expected alpha, beta, K or ensemble_composition"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Beta => "beta",
            SweepAxis::K => "K",
            SweepAxis::EnsembleComposition => "ensemble_composition",
        }
    }

    pub fn default_values(&self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepAxis::Alpha => &["0", "0.2", "0.4", "0.6", "0.8", "1.0"],
            SweepAxis::Beta => &["1", "10", "100", "1000"],
            SweepAxis::K => &["1", "2", "3", "4"],
            SweepAxis::EnsembleComposition => &ENSEMBLE_COMPOSITIONS,
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

/// Standard (`S`) and augmented (`A`) teacher mixes for `K` from 1 to 5.
pub const ENSEMBLE_COMPOSITIONS: [&str; 8] = ["S", "A", "SS", "AA", "SA", "SAA", "SSAA", "SSAAA"];

pub fn parse_composition(s: &str) -> Result<Vec<TeacherKind>> {
    if s.is_empty() {
        return Err(Error::Config("empty teacher composition".into()));
    }
    s.chars()
        .map(|c| match c {
            'S' | 's' => Ok(TeacherKind::Standard),
            'A' | 'a' => Ok(TeacherKind::DataAug),
            other => Err(Error::Config(format!(
                "teacher code {other:?} is not S or A"
            ))),
        })
        .collect()
}

/// One configuration per sweep point, tagged with `(value, mode)`.
pub fn sweep_points(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    modes: &[String],
) -> Result<Vec<(String, String, RunConfig)>> {
    let number = |v: &str| -> Result<f64> {
        v.parse()
            .map_err(|_| Error::Config(format!("sweep value {v:?} is not a number")))
    };
    let mut points = Vec::new();
    for v in values {
        match axis {
            SweepAxis::Alpha => {
                for m in modes {
                    let mode = match m.as_str() {
                        "feature" => DistillMode::Feature,
                        "classifier" => DistillMode::Classifier,
                        "hybrid" => DistillMode::Hybrid,
                        other => {
                            return Err(Error::Config(format!(
                                "alpha sweep mode {other:?} is not feature, classifier or hybrid"
                            )))
                        }
                    };
                    let cfg = RunConfig {
                        method: Method::Cbd,
                        alpha: number(v)?,
                        distill_mode: Some(mode),
                        k: None,
                        teacher_types: None,
                        ..base.clone()
                    };
                    points.push((v.clone(), mode.to_string(), cfg));
                }
            }
            SweepAxis::Beta => {
                let cfg = RunConfig {
                    method: Method::Cbd,
                    beta: number(v)?,
                    distill_mode: Some(DistillMode::Feature),
                    k: None,
                    teacher_types: None,
                    ..base.clone()
                };
                points.push((v.clone(), "feature".into(), cfg));
            }
            SweepAxis::K => {
                let k: usize = v
                    .parse()
                    .map_err(|_| Error::Config(format!("K value {v:?} is not a count")))?;
                let cfg = RunConfig {
                    method: Method::CbdK,
                    k: Some(k),
                    teacher_types: None,
                    distill_mode: None,
                    ..base.clone()
                };
                points.push((v.clone(), "ensemble".into(), cfg));
            }
            SweepAxis::EnsembleComposition => {
                let kinds = parse_composition(v)?;
                let cfg = RunConfig {
                    method: Method::CbdK,
                    k: Some(kinds.len()),
                    teacher_types: Some(kinds),
                    distill_mode: None,
                    ..base.clone()
                };
                points.push((v.clone(), "ensemble".into(), cfg));
            }
        }
    }
    for (_, _, cfg) in &points {
        cfg.validate()?;
    }
    Ok(points)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let axes: Vec<&str> = a.axis.iter().flat_map(|s| s.split(',')).collect();
    if axes.len() != 1 {
        return Err(Error::Config(format!(
            "sweep exactly one axis, got {}",
            axes.join(", ")
        )));
    }
    let axis = SweepAxis::parse(axes[0])?;
    let base = load_config(&a.config, Method::Cbd)?;
    let values = if a.values.is_empty() {
        axis.default_values()
    } else {
        a.values.clone()
    };
    let points = sweep_points(&base, axis, &values, &a.modes)?;
    let dir = a.out.join(format!("ablate_{}", axis.name()));
    let rows = pool(a.jobs)?.install(|| {
        points
            .par_iter()
            .map(|(value, mode, cfg)| {
                let stem = format!("{}_{}_{}", axis.name(), value, mode);
                run_and_write(cfg, &dir, &stem, false)
                    .map(|r| format!("{},{},{},{}", r.csv_row(), axis.name(), value, mode))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut text = format!("{CSV_HEADER},axis,value,mode\n");
    for row in rows {
        text.push_str(&row);
        text.push('\n');
    }
    let path = dir.join("sweep.csv");
    write_atomic(&path, &text)?;
    print!("{text}");
    Ok(())
}

/// Mean and sample standard deviation; the deviation of one value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub const AGGREGATE_COLUMNS: [&str; 5] = [
    "overall_acc",
    "many_acc",
    "mid_acc",
    "few_acc",
    "ncm_overall_acc",
];

/// Aggregate CSV over reports: one row per method with mean and sample
/// standard deviation of every rate. Missing values are skipped; a rate with
/// no value at all leaves both cells empty.
pub fn aggregate_csv(reports: &[EvalReport]) -> String {
    let mut by_method: BTreeMap<&str, Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        by_method.entry(r.method.as_str()).or_default().push(r);
    }
    let mut header = vec!["method".to_string(), "runs".to_string()];
    for c in AGGREGATE_COLUMNS {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_std"));
    }
    let mut text = header.join(",") + "\n";
    for (method, runs) in by_method {
        let mut row = vec![method.to_string(), runs.len().to_string()];
        for pick in [
            |r: &EvalReport| Some(r.overall_acc),
            |r: &EvalReport| r.many_acc,
            |r: &EvalReport| r.mid_acc,
            |r: &EvalReport| r.few_acc,
            |r: &EvalReport| r.ncm_overall_acc,
        ] {
            let values: Vec<f64> = runs.iter().filter_map(|r| pick(r)).collect();
            if values.is_empty() {
                row.extend([String::new(), String::new()]);
            } else {
                let (m, s) = mean_std(&values);
                row.extend([format!("{m:?}"), format!("{s:?}")]);
            }
        }
        text.push_str(&row.join(","));
        text.push('\n');
    }
    text
}

fn suite(a: &SuiteArgs) -> Result<()> {
    if a.seeds.is_empty() {
        return Err(Error::Config("suite needs at least one seed".into()));
    }
    let methods = a
        .methods
        .iter()
        .map(|m| Method::parse(m).ok_or_else(|| Error::Config(format!("unknown method {m:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let base = load_config(&a.config, Method::Cbd)?;
    let mut jobs = Vec::new();
    for &seed in &a.seeds {
        for &method in &methods {
            let mut cfg = RunConfig {
                method,
                seed,
                ..base.clone()
            };
            if let Some(p) = &mut cfg.profile {
                p.seed = seed;
            }
            if method != base.method {
                // Teacher counts are method specific unless given explicitly.
                if !matches!(method, Method::CbdK | Method::TeacherEnsemble) {
                    cfg.k = None;
                    cfg.teacher_types = None;
                }
                cfg.distill_mode = None;
            }
            cfg.validate()?;
            jobs.push(cfg);
        }
    }
    let dir = a.out.clone();
    let reports = pool(a.jobs)?.install(|| {
        jobs.par_iter()
            .map(|cfg| {
                run_and_write(
                    cfg,
                    &dir,
                    &format!("{}_seed{}", cfg.method, cfg.seed),
                    false,
                )
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let text = aggregate_csv(&reports);
    write_atomic(&dir.join("aggregate.csv"), &text)?;
    print!("{text}");
    Ok(())
}

fn collect_reports(paths: &[PathBuf]) -> Result<Vec<EvalReport>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let entries = fs::read_dir(p).map_err(|e| Error::io(p, e))?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension().is_some_and(|x| x == "json")
                        && !f.to_string_lossy().ends_with(".ckpt.json")
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    files.iter().map(EvalReport::load).collect()
}

fn report(a: &ReportArgs) -> Result<()> {
    let reports = collect_reports(&a.paths)?;
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
    println!(
        "{:<18} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "method", "seed", "overall", "many", "mid", "few", "ncm"
    );
    for r in &reports {
        println!(
            "{:<18} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}",
            r.method,
            r.seed,
            pct(Some(r.overall_acc)),
            pct(r.many_acc),
            pct(r.mid_acc),
            pct(r.few_acc),
            pct(r.ncm_overall_acc)
        );
    }
    if let Some(split) = reports.first().map(|r| r.split_thresholds) {
        let ShotSplit { many, few } = split;
        println!("splits: many > {many}, few < {few} training instances");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_std() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn compositions_parse() {
        assert_eq!(
            parse_composition("SA").unwrap(),
            vec![TeacherKind::Standard, TeacherKind::DataAug]
        );
        assert!(parse_composition("SX").is_err());
        for c in ENSEMBLE_COMPOSITIONS {
            assert_eq!(parse_composition(c).unwrap().len(), c.len());
        }
    }

    #[test]
    fn sweep_grid_sizes() {
        let base = RunConfig::benchmark(Method::Cbd, 0);
        let modes = vec!["feature".to_string(), "hybrid".to_string()];
        let alpha = sweep_points(
            &base,
            SweepAxis::Alpha,
            &SweepAxis::Alpha.default_values(),
            &modes,
        )
        .unwrap();
        assert_eq!(alpha.len(), 12);
        let beta = sweep_points(
            &base,
            SweepAxis::Beta,
            &SweepAxis::Beta.default_values(),
            &modes,
        )
        .unwrap();
        assert!(beta.iter().any(|(_, _, c)| c.beta == 100.0));
        let comp = sweep_points(
            &base,
            SweepAxis::EnsembleComposition,
            &SweepAxis::EnsembleComposition.default_values(),
            &modes,
        )
        .unwrap();
        let ks: Vec<usize> = comp.iter().map(|(_, _, c)| c.k.unwrap()).collect();
        for k in 1..=4 {
            assert!(ks.contains(&k));
        }
    }
}
