//! Command-line front end: `train`, `spectrum`, `uncertainty`, `rank`,
//! `compare` and `oracle-check`, all driven by one [`RunConfig`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{self, DatasetSource};
use crate::delta::{
    compare_estimators, fp_tp_split_stats, parse_report_csv, predict_uncertainty, predict_uncertainty_sandwich,
    rank_by_score, write_ranking_csv, write_report_csv, EstimatorKind, ReportRecord, SandwichCross,
    UncertaintyReport,
};
use crate::nn::{Checkpoint, Dataset, Network, ParamVector};
use crate::oracle::{run_suite, CheckOutcome};
use crate::spectral::{hessian_topk, opg_topk, spectrum_report, CurvatureKind, SpectralBundle};
use crate::trainer;
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "delta-uq", version, about = "Delta-method epistemic uncertainty for dense classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub kind: Option<KindArg>,
    /// Number of leading eigenpairs, overriding `spectral.k`.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true, value_enum, default_value = "test")]
    pub split: Split,
    /// Global seed, overriding `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train the network and write a checkpoint and training log.
    Train,
    /// Compute top-K curvature eigenpairs and spectrum reports.
    Spectrum,
    /// Per-input predictive variances for one split.
    Uncertainty,
    /// Rank inputs of one split by uncertainty score.
    Rank,
    /// Pairwise estimator regressions and FP/TP score means.
    Compare,
    /// Dense-oracle cross-checks.
    OracleCheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Hessian,
    Opg,
    Sandwich,
}

impl From<KindArg> for EstimatorKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Hessian => EstimatorKind::Hessian,
            KindArg::Opg => EstimatorKind::Opg,
            KindArg::Sandwich => EstimatorKind::Sandwich,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const COMPARE_FILE: &str = "compare.csv";
pub const FP_TP_FILE: &str = "fp_tp.csv";
pub const ORACLE_FILE: &str = "oracle_check.txt";

pub fn bundle_file(kind: CurvatureKind) -> String {
    format!("bundle_{}.json", kind.as_str())
}

pub fn spectrum_files(kind: CurvatureKind) -> (String, String) {
    (format!("spectrum_{}.csv", kind.as_str()), format!("spectrum_{}.json", kind.as_str()))
}

pub fn report_file(kind: EstimatorKind, split: Split) -> String {
    format!("report_{kind}_{}.csv", split.as_str())
}

pub fn banana_file(kind: EstimatorKind, split: Split) -> String {
    format!("banana_{kind}_{}.csv", split.as_str())
}

pub fn ranking_file(kind: EstimatorKind, split: Split) -> String {
    format!("ranking_{kind}_{}.csv", split.as_str())
}

/// Exit status for an error: 2 for user or configuration errors, 1 for
/// numerical and invariant failures.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_user_error() {
        2
    } else {
        1
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Loads the configuration and applies command-line overrides.
pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(k) = cli.k {
        if k == 0 {
            return Err(Error::Config("--k must be positive".into()));
        }
        cfg.spectral.k = k;
    }
    Ok(cfg)
}

/// Runs one command. `Ok(false)` means the command completed but reported
/// failed checks.
pub fn run(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    let kind = cli.kind.map(EstimatorKind::from);
    match cli.command {
        Command::Train => {
            let s = cmd_train(&cfg)?;
            println!(
                "trained {} steps: cost {:.6}, grad norm {:.3e}, train accuracy {:.4}{}",
                s.steps_run,
                s.final_cost,
                s.final_grad_norm,
                s.train_accuracy,
                s.test_accuracy.map(|a| format!(", test accuracy {a:.4}")).unwrap_or_default()
            );
        }
        Command::Spectrum => {
            for b in cmd_spectrum(&cfg, kind)? {
                let r = spectrum_report(&b);
                println!(
                    "{}: K = {}, lambda_1 = {:.6e}, lambda_K = {:.6e}, iterations {}",
                    b.kind.as_str(),
                    b.k(),
                    r.summary.lambda_1,
                    r.summary.lambda_k,
                    b.iterations
                );
            }
        }
        Command::Uncertainty => {
            for (k, records) in cmd_uncertainty(&cfg, kind, cli.split)? {
                let flagged = records.iter().filter(|r| r.report.flags != Default::default()).count();
                println!("{k}: {} inputs, {flagged} flagged", records.len());
            }
        }
        Command::Rank => {
            for (k, entries) in cmd_rank(&cfg, kind, cli.split)? {
                let head: Vec<String> = entries.iter().take(5).map(|e| e.id.to_string()).collect();
                println!("{k}: {} ranked, top ids [{}]", entries.len(), head.join(", "));
            }
        }
        Command::Compare => {
            print!("{}", cmd_compare(&cfg)?.csv);
        }
        Command::OracleCheck => {
            let outcomes = cmd_oracle_check(&cfg)?;
            for c in &outcomes {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(outcomes.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    Ok(&cfg.out_dir)
}

pub fn network(cfg: &RunConfig) -> Result<Network> {
    Ok(Network::new(cfg.network.clone())?.with_chunk_size(cfg.compute.chunk_size))
}

fn source(cfg: &RunConfig, split: Split) -> Result<&DatasetSource> {
    match split {
        Split::Train => Ok(&cfg.data.train),
        Split::Test => cfg
            .data
            .test
            .as_ref()
            .ok_or_else(|| Error::Config("no [data.test] section for the test split".into())),
    }
}

pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let data = data::ingest(source(cfg, split)?, cfg.seed)?;
    if data.input_dim() != cfg.network.input_dim() || data.classes() != cfg.network.classes() {
        return Err(Error::Config(format!(
            "{} data has {} features and {} classes, network expects {} and {}",
            split.as_str(),
            data.input_dim(),
            data.classes(),
            cfg.network.input_dim(),
            cfg.network.classes()
        )));
    }
    Ok(data)
}

/// Loads the checkpoint and checks it against the configured network.
pub fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let ck = Checkpoint::load(&cfg.out_dir.join(CHECKPOINT_FILE))?;
    if ck.network.layer_sizes != cfg.network.layer_sizes || ck.network.l2_rate != cfg.network.l2_rate {
        return Err(Error::Config("checkpoint network differs from the configured network".into()));
    }
    Ok(ck)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps_run: usize,
    pub final_cost: f64,
    pub final_grad_norm: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub param_count: usize,
    pub seed: u64,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let net = network(cfg)?;
    let train = load_split(cfg, Split::Train)?;
    let test = cfg.data.test.as_ref().map(|_| load_split(cfg, Split::Test)).transpose()?;
    let report = trainer::train(&net, &train, test.as_ref(), &cfg.training)?;
    let dir = out_dir(cfg)?;
    let summary = TrainSummary {
        steps_run: report.steps_run,
        final_cost: report.final_cost,
        final_grad_norm: report.final_grad_norm,
        train_accuracy: report.train_accuracy,
        test_accuracy: report.test_accuracy,
        param_count: net.param_count(),
        seed: cfg.seed,
    };
    Checkpoint::new(cfg.network.clone(), cfg.seed, report.params.clone())?.save(&dir.join(CHECKPOINT_FILE))?;
    write(&dir.join(TRAIN_LOG_FILE), &report.log_csv())?;
    write(
        &dir.join(TRAIN_SUMMARY_FILE),
        &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
    )?;
    Ok(summary)
}

fn curvature_kinds(kind: Option<EstimatorKind>) -> Vec<CurvatureKind> {
    match kind {
        Some(EstimatorKind::Hessian) => vec![CurvatureKind::Hessian],
        Some(EstimatorKind::Opg) => vec![CurvatureKind::Opg],
        Some(EstimatorKind::Sandwich) | None => vec![CurvatureKind::Hessian, CurvatureKind::Opg],
    }
}

pub fn compute_bundle(
    cfg: &RunConfig,
    net: &Network,
    w: &ParamVector,
    train: &Dataset,
    kind: CurvatureKind,
) -> Result<SpectralBundle> {
    let k = cfg.spectral.k.min(net.param_count());
    match kind {
        CurvatureKind::Hessian => hessian_topk(net, w, train, &cfg.lanczos(k)),
        CurvatureKind::Opg => opg_topk(net, w, train, &cfg.opg(k)),
    }
}

pub fn cmd_spectrum(cfg: &RunConfig, kind: Option<EstimatorKind>) -> Result<Vec<SpectralBundle>> {
    let ck = load_checkpoint(cfg)?;
    let net = network(cfg)?;
    let train = load_split(cfg, Split::Train)?;
    let dir = out_dir(cfg)?;
    let mut out = Vec::new();
    for ck_kind in curvature_kinds(kind) {
        let bundle = compute_bundle(cfg, &net, &ck.params, &train, ck_kind)?;
        bundle.save(&dir.join(bundle_file(ck_kind)))?;
        let report = spectrum_report(&bundle);
        let (csv, json) = spectrum_files(ck_kind);
        write(&dir.join(csv), &report.to_csv())?;
        write(&dir.join(json), &report.summary_json())?;
        out.push(bundle);
    }
    Ok(out)
}

fn load_bundle(cfg: &RunConfig, kind: CurvatureKind, p: usize) -> Result<SpectralBundle> {
    let path = cfg.out_dir.join(bundle_file(kind));
    let b = SpectralBundle::load(&path)?;
    if b.param_count() != p {
        return Err(Error::BundleMismatch(format!(
            "{} has P = {}, checkpoint has P = {p}",
            path.display(),
            b.param_count()
        )));
    }
    Ok(b)
}

/// Curvature needed by one estimator kind.
pub enum Estimator {
    Single(SpectralBundle),
    Sandwich {
        hessian: SpectralBundle,
        opg: SpectralBundle,
        cross: SandwichCross,
    },
}

impl Estimator {
    pub fn new(kind: EstimatorKind, hessian: Option<&SpectralBundle>, opg: Option<&SpectralBundle>) -> Result<Self> {
        let need = |b: Option<&SpectralBundle>, name: &str| {
            b.cloned().ok_or_else(|| Error::Config(format!("{kind} estimator needs the {name} bundle")))
        };
        Ok(match kind {
            EstimatorKind::Hessian => Estimator::Single(need(hessian, "hessian")?),
            EstimatorKind::Opg => Estimator::Single(need(opg, "opg")?),
            EstimatorKind::Sandwich => {
                let (h, g) = (need(hessian, "hessian")?, need(opg, "opg")?);
                let cross = SandwichCross::new(&h, &g)?;
                Estimator::Sandwich { hessian: h, opg: g, cross }
            }
        })
    }

    pub fn predict(&self, f: &crate::nn::Sensitivity) -> Result<UncertaintyReport> {
        match self {
            Estimator::Single(b) => predict_uncertainty(b, f),
            Estimator::Sandwich { hessian, opg, cross } => predict_uncertainty_sandwich(hessian, opg, cross, f),
        }
    }
}

/// Reports for every input of `data`, ordered by input id. Inputs are
/// evaluated in parallel.
pub fn predict_dataset(net: &Network, w: &ParamVector, data: &Dataset, est: &Estimator) -> Result<Vec<ReportRecord>> {
    let mut records = (0..data.len())
        .into_par_iter()
        .map(|n| {
            let x = data.input(n);
            let f = net.sensitivity(w, x, data.id(n))?;
            Ok(ReportRecord {
                report: est.predict(&f)?,
                predicted: net.predict(w, x)?,
                label: data.label(n),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by_key(|r| r.report.input_id);
    Ok(records)
}

/// `id,class,probability,sigma`, one row per input and class.
pub fn banana_csv(net: &Network, w: &ParamVector, data: &Dataset, records: &[ReportRecord]) -> Result<String> {
    let mut index: Vec<usize> = (0..data.len()).collect();
    index.sort_by_key(|&n| data.id(n));
    let mut out = String::from("id,class,probability,sigma\n");
    for (&n, rec) in index.iter().zip(records) {
        let probs = net.forward(w, data.input(n))?;
        for (m, (p, s)) in probs.iter().zip(&rec.report.sigma).enumerate() {
            let _ = writeln!(out, "{},{m},{p:e},{s:e}", rec.report.input_id);
        }
    }
    Ok(out)
}

fn kinds(cfg: &RunConfig, kind: Option<EstimatorKind>) -> Vec<EstimatorKind> {
    kind.map_or_else(|| cfg.delta.kinds.clone(), |k| vec![k])
}

pub fn cmd_uncertainty(
    cfg: &RunConfig,
    kind: Option<EstimatorKind>,
    split: Split,
) -> Result<Vec<(EstimatorKind, Vec<ReportRecord>)>> {
    let ck = load_checkpoint(cfg)?;
    let net = network(cfg)?;
    let data = load_split(cfg, split)?;
    let kinds = kinds(cfg, kind);
    let p = net.param_count();
    let needs = |c: CurvatureKind| kinds.iter().any(|&k| k == EstimatorKind::Sandwich || k == c.into());
    let hessian = needs(CurvatureKind::Hessian)
        .then(|| load_bundle(cfg, CurvatureKind::Hessian, p))
        .transpose()?;
    let opg = needs(CurvatureKind::Opg).then(|| load_bundle(cfg, CurvatureKind::Opg, p)).transpose()?;
    let dir = out_dir(cfg)?;
    let mut out = Vec::new();
    for k in kinds {
        let est = Estimator::new(k, hessian.as_ref(), opg.as_ref())?;
        let records = predict_dataset(&net, &ck.params, &data, &est)?;
        write(&dir.join(report_file(k, split)), &write_report_csv(&records))?;
        write(&dir.join(banana_file(k, split)), &banana_csv(&net, &ck.params, &data, &records)?)?;
        out.push((k, records));
    }
    Ok(out)
}

pub fn load_reports(cfg: &RunConfig, kind: EstimatorKind, split: Split) -> Result<Vec<ReportRecord>> {
    let path = cfg.out_dir.join(report_file(kind, split));
    parse_report_csv(&read(&path)?, &path)
}

pub fn cmd_rank(
    cfg: &RunConfig,
    kind: Option<EstimatorKind>,
    split: Split,
) -> Result<Vec<(EstimatorKind, Vec<crate::delta::RankEntry>)>> {
    let mut out = Vec::new();
    for k in kinds(cfg, kind) {
        let reports: Vec<UncertaintyReport> = load_reports(cfg, k, split)?.into_iter().map(|r| r.report).collect();
        let entries = rank_by_score(&reports, cfg.delta.order, cfg.delta.top);
        write(&cfg.out_dir.join(ranking_file(k, split)), &write_ranking_csv(&entries))?;
        out.push((k, entries));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub split: Split,
    pub pair: (EstimatorKind, EstimatorKind),
    pub regression: crate::delta::Regression,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareOutput {
    pub rows: Vec<CompareRow>,
    pub split_stats: Vec<(Split, EstimatorKind, crate::delta::SplitStats)>,
    /// `split,pair,r2,alpha,beta,n`.
    pub csv: String,
}

const PAIRS: [(EstimatorKind, EstimatorKind); 3] = [
    (EstimatorKind::Hessian, EstimatorKind::Opg),
    (EstimatorKind::Hessian, EstimatorKind::Sandwich),
    (EstimatorKind::Opg, EstimatorKind::Sandwich),
];

/// Regresses each kind's per-class standard deviations on the others' for
/// every split with reports. A split must have all three kinds or none.
pub fn cmd_compare(cfg: &RunConfig) -> Result<CompareOutput> {
    let mut rows = Vec::new();
    let mut split_stats = Vec::new();
    for split in [Split::Train, Split::Test] {
        let present: Vec<bool> = EstimatorKind::ALL
            .iter()
            .map(|&k| cfg.out_dir.join(report_file(k, split)).is_file())
            .collect();
        if present.iter().all(|p| !p) {
            continue;
        }
        let mut batches = Vec::new();
        for k in EstimatorKind::ALL {
            let records = load_reports(cfg, k, split)?;
            let reports: Vec<UncertaintyReport> = records.iter().map(|r| r.report.clone()).collect();
            let predicted: Vec<usize> = records.iter().map(|r| r.predicted).collect();
            let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
            split_stats.push((split, k, fp_tp_split_stats(&reports, &predicted, &labels)?));
            batches.push((k, reports));
        }
        let get = |k: EstimatorKind| &batches.iter().find(|(b, _)| *b == k).expect("all kinds loaded").1;
        for (a, b) in PAIRS {
            rows.push(CompareRow {
                split,
                pair: (a, b),
                regression: compare_estimators(get(a), get(b))?,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "no report files in {}; run `uncertainty` first",
            cfg.out_dir.display()
        )));
    }
    let mut csv = String::from("split,pair,r2,alpha,beta,n\n");
    for r in &rows {
        let g = &r.regression;
        let _ = writeln!(
            csv,
            "{},{}-{},{:e},{:e},{:e},{}",
            r.split.as_str(),
            r.pair.0,
            r.pair.1,
            g.r2,
            g.alpha,
            g.beta,
            g.n
        );
    }
    let mut fp = String::from("split,kind,tp_mean,tp_count,fp_mean,fp_count\n");
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:e}"));
    for (split, k, s) in &split_stats {
        let _ = writeln!(
            fp,
            "{},{k},{},{},{},{}",
            split.as_str(),
            opt(s.tp_mean),
            s.tp_count,
            opt(s.fp_mean),
            s.fp_count
        );
    }
    let dir = out_dir(cfg)?;
    write(&dir.join(COMPARE_FILE), &csv)?;
    write(&dir.join(FP_TP_FILE), &fp)?;
    Ok(CompareOutput { rows, split_stats, csv })
}

/// The oracle suite plus validation of configured bundles and any bundles
/// already in the output directory.
pub fn cmd_oracle_check(cfg: &RunConfig) -> Result<Vec<CheckOutcome>> {
    let mut suite = cfg.oracle.clone();
    for kind in [CurvatureKind::Hessian, CurvatureKind::Opg] {
        let path = cfg.out_dir.join(bundle_file(kind));
        if path.is_file() && !suite.bundles.contains(&path) {
            suite.bundles.push(path);
        }
    }
    let outcomes = run_suite(&suite);
    let mut text = String::new();
    for c in &outcomes {
        let _ = writeln!(text, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    write(&out_dir(cfg)?.join(ORACLE_FILE), &text)?;
    Ok(outcomes)
}
