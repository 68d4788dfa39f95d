//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use delta_uq::cli::{self, Split};
use delta_uq::config::RunConfig;
use delta_uq::data::{blobs, DatasetSource};
use delta_uq::delta::{lowrank_uncertainty, predict_uncertainty, EstimatorKind};
use delta_uq::nn::{Network, NetworkConfig, ParamVector};
use delta_uq::oracle::suite::{
    check_eigensolvers, check_enclosure, check_fisher, check_opg_floor, definite_tiny_problem, exactness_error,
    gradient_check, sandwich_algebra, TINY_L2, TINY_SIZES,
};
use delta_uq::oracle::{CheckOutcome, DenseCurvature, TinyProblem};
use delta_uq::spectral::{CurvatureKind, SpectralBundle};
use delta_uq::Result;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SEED: u64 = 0;
const OOD_RADIUS: f64 = 5.0;
const OOD_PROBES: usize = 200;

struct Line {
    passed: bool,
    detail: String,
}

fn line(passed: bool, detail: impl Into<String>) -> Line {
    Line {
        passed,
        detail: detail.into(),
    }
}

fn from_result(r: Result<Line>) -> Line {
    r.unwrap_or_else(|e| line(false, format!("error: {e}")))
}

fn within(limit: Duration, started: Instant, l: Line) -> Line {
    let took = started.elapsed();
    if took > limit {
        line(false, format!("{} (took {:.1}s, limit {}s)", l.detail, took.as_secs_f64(), limit.as_secs()))
    } else {
        Line {
            detail: format!("{} ({:.1}s)", l.detail, took.as_secs_f64()),
            ..l
        }
    }
}

fn from_checks(checks: &[CheckOutcome]) -> Line {
    let passed = checks.iter().all(|c| c.passed);
    let detail = checks.iter().map(|c| format!("{}: {}", c.name, c.detail)).collect::<Vec<_>>().join("; ");
    line(passed, detail)
}

fn desk_config(out: &Path) -> Result<RunConfig> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/blobs.toml");
    let mut cfg = RunConfig::load(&path)?;
    cfg.out_dir = out.to_path_buf();
    Ok(cfg)
}

fn pipeline(cfg: &RunConfig) -> Result<cli::CompareOutput> {
    cli::cmd_train(cfg)?;
    cli::cmd_spectrum(cfg, None)?;
    for split in [Split::Train, Split::Test] {
        cli::cmd_uncertainty(cfg, None, split)?;
        cli::cmd_rank(cfg, None, split)?;
    }
    cli::cmd_compare(cfg)
}

fn criterion_1() -> Line {
    let t = Instant::now();
    let p = NetworkConfig::new(vec![6, 14, 4], 0.01).map(|c| c.param_count()).unwrap_or(0);
    let l = from_result(gradient_check(&[6, 14, 4], 20, SEED).map(|(g, h)| {
        line(
            g <= 1e-5 && h <= 1e-5,
            format!("P = {p}, 20 points: grad rel err {g:.2e}, hvp rel err {h:.2e}"),
        )
    }));
    within(Duration::from_secs(10), t, l)
}

/// `fixture` is the time spent training the tiny net and assembling its
/// dense curvature.
fn criterion_2(tp: &TinyProblem, curv: &DenseCurvature, fixture: Duration) -> Line {
    let limit = Duration::from_secs(30).saturating_sub(fixture);
    let l = within(limit, Instant::now(), from_checks(&check_eigensolvers(tp, curv, 20)));
    Line {
        detail: format!("{} (fixture {:.1}s)", l.detail, fixture.as_secs_f64()),
        ..l
    }
}

fn criterion_3(tp: &TinyProblem, curv: &DenseCurvature, seed: u64) -> Line {
    let t = Instant::now();
    let l = from_result(exactness_error(tp, curv, 50).map(|e| {
        let min_eig = curv.h_eig.0.last().copied().unwrap_or(f64::NAN);
        line(
            e <= 1e-8,
            format!(
                "fixture seed {seed}, P = {}, min eig(H) {min_eig:.2e}, 50 inputs, 3 kinds: max relative error {e:.2e}",
                curv.param_count()
            ),
        )
    }));
    within(Duration::from_secs(60), t, l)
}

fn criterion_4(tp: &TinyProblem, curv: &DenseCurvature) -> Line {
    from_checks(&[check_enclosure(tp, curv, &[5, 10, 20], 50)])
}

fn criterion_5(tp: &TinyProblem, curv: &DenseCurvature, desk_opg: Option<&SpectralBundle>) -> Line {
    let tiny = check_opg_floor(tp, curv, &[5, 10, 20]);
    let desk = match desk_opg {
        Some(b) => {
            let min = b.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
            line(
                min >= b.l2_rate,
                format!("desk K = {}: min eigenvalue - lambda = {:.2e}", b.k(), min - b.l2_rate),
            )
        }
        None => line(false, "desk OPG bundle unavailable"),
    };
    line(tiny.passed && desk.passed, format!("{}; {}", tiny.detail, desk.detail))
}

fn criterion_6() -> Line {
    let t = Instant::now();
    let seeds: Vec<u64> = (0..5).map(|s| SEED + s).collect();
    within(Duration::from_secs(60), t, from_checks(&[check_fisher(&[100, 1000, 10000], &seeds)]))
}

fn mean_sigma(cfg: &RunConfig, kinds: [EstimatorKind; 2], split: Split) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in kinds {
        for r in cli::load_reports(cfg, k, split)? {
            sum += r.report.sigma.iter().sum::<f64>();
            count += r.report.sigma.len();
        }
    }
    Ok(sum / count as f64)
}

fn criterion_7(cfg: &RunConfig, cmp: &cli::CompareOutput, took: Duration) -> Result<Line> {
    let mut passed = took <= Duration::from_secs(300);
    let mut parts = Vec::new();
    for row in &cmp.rows {
        let g = &row.regression;
        let scale = mean_sigma(cfg, [row.pair.0, row.pair.1], row.split)?;
        let ok = g.r2 >= 0.95 && g.alpha.abs() <= 0.02 * scale;
        passed &= ok;
        parts.push(format!(
            "{} {}-{}: R2 {:.4}, alpha/mean {:+.4}, beta {:.3}",
            row.split.as_str(),
            row.pair.0,
            row.pair.1,
            g.r2,
            g.alpha / scale,
            g.beta
        ));
    }
    passed &= cmp.rows.len() == 6;
    parts.push(format!("pipeline {:.1}s", took.as_secs_f64()));
    Ok(line(passed, parts.join("; ")))
}

fn criterion_8(cmp: &cli::CompareOutput) -> Line {
    let mut passed = true;
    let mut parts = Vec::new();
    for (split, kind, s) in cmp.split_stats.iter().filter(|(s, _, _)| *s == Split::Test) {
        let ok = matches!((s.fp_mean, s.tp_mean), (Some(fp), Some(tp)) if fp > tp);
        passed &= ok;
        parts.push(format!(
            "{} {kind}: FP {:.4} (n={}) vs TP {:.4} (n={})",
            split.as_str(),
            s.fp_mean.unwrap_or(f64::NAN),
            s.fp_count,
            s.tp_mean.unwrap_or(f64::NAN),
            s.tp_count
        ));
    }
    line(passed && parts.len() == 3, parts.join("; "))
}

fn criterion_9(cfg: &RunConfig) -> Result<Line> {
    let ck = cli::load_checkpoint(cfg)?;
    let net = cli::network(cfg)?;
    let test = cli::load_split(cfg, Split::Test)?;
    let Some(DatasetSource::SyntheticBlobs(bc)) = &cfg.data.test else {
        return Ok(line(false, "desk config has no synthetic test split"));
    };
    let ood = blobs::ood_probes(bc, OOD_PROBES, OOD_RADIUS, SEED + 7)?;
    let mut passed = true;
    let mut parts = Vec::new();
    for kind in [CurvatureKind::Hessian, CurvatureKind::Opg] {
        let b = SpectralBundle::load(&cfg.out_dir.join(cli::bundle_file(kind)))?;
        let mut below = 0usize;
        let mut gap = |data: &delta_uq::nn::Dataset| -> Result<f64> {
            let mut total = 0.0;
            for n in 0..data.len() {
                let f = net.sensitivity(&ck.params, data.input(n), data.id(n))?;
                let full = predict_uncertainty(&b, &f)?;
                let low = lowrank_uncertainty(&b, &f)?;
                below += full.variance.iter().zip(&low).filter(|(fv, lv)| fv < lv).count();
                total += full.score - low.iter().sum::<f64>().sqrt();
            }
            Ok(total / data.len() as f64)
        };
        let g_in = gap(&test)?;
        let g_ood = gap(&ood)?;
        let ratio = g_ood / g_in;
        passed &= below == 0 && ratio >= 2.0;
        parts.push(format!(
            "{}: {below} entries full < low, score gap in {g_in:.4e}, ood {g_ood:.4e}, ratio {ratio:.2}",
            kind.as_str()
        ));
    }
    Ok(line(passed, parts.join("; ")))
}

fn criterion_10() -> Line {
    from_result(sandwich_algebra(&[5, 5, 5], 10, SEED).map(|(d, _, c)| {
        line(
            d <= 1e-10 && c <= 1e-10,
            format!("P = 60: factored vs literal {d:.2e}, G=H collapse {c:.2e}"),
        )
    }))
}

fn artifact_names() -> Vec<String> {
    let mut names = vec![
        cli::CHECKPOINT_FILE.to_string(),
        cli::TRAIN_LOG_FILE.to_string(),
        cli::TRAIN_SUMMARY_FILE.to_string(),
    ];
    for k in [CurvatureKind::Hessian, CurvatureKind::Opg] {
        names.push(cli::bundle_file(k));
        let (csv, json) = cli::spectrum_files(k);
        names.extend([csv, json]);
    }
    for k in EstimatorKind::ALL {
        for s in [Split::Train, Split::Test] {
            names.extend([cli::report_file(k, s), cli::banana_file(k, s), cli::ranking_file(k, s)]);
        }
    }
    names.extend([cli::COMPARE_FILE.to_string(), cli::FP_TP_FILE.to_string()]);
    names
}

fn criterion_11(a: &RunConfig, scratch: &Path) -> Result<Line> {
    let b = desk_config(scratch)?;
    pipeline(&b)?;
    let names = artifact_names();
    let mut differing = Vec::new();
    for name in &names {
        let x = std::fs::read(a.out_dir.join(name)).unwrap_or_default();
        let y = std::fs::read(b.out_dir.join(name)).unwrap_or_default();
        if x.is_empty() || x != y {
            differing.push(name.clone());
        }
    }
    Ok(line(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} files bit-identical across two runs", names.len())
        } else {
            format!("differing or missing: {}", differing.join(", "))
        },
    ))
}

fn orthonormal(p: usize, k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(p, k, |_, _| StandardNormal.sample(&mut rng));
    a.qr().q()
}

/// Best-of-five mean seconds per call.
fn time_per_call(reps: usize, mut f: impl FnMut()) -> f64 {
    (0..5)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..reps {
                f();
            }
            t.elapsed().as_secs_f64() / reps as f64
        })
        .fold(f64::INFINITY, f64::min)
}

fn criterion_12() -> Result<Line> {
    const K: usize = 32;
    const N: usize = 500;
    let data = blobs::generate(&blobs::BlobsConfig {
        classes: 4,
        dim: 16,
        separation: 3.0,
        noise: 1.0,
        n: N,
        seed: SEED,
    })?;
    let mut rows = Vec::new();
    for hidden in [48, 97, 195] {
        let net = Network::new(NetworkConfig::new(vec![16, hidden, 4], 0.01)?)?;
        let p = net.param_count();
        let w = ParamVector::init(net.config(), SEED);
        let v: Vec<f64> = (0..p).map(|i| ((i * 7919) % 101) as f64 / 101.0 - 0.5).collect();
        let t_hvp = time_per_call(10, || {
            std::hint::black_box(net.hvp(&w, &data, &v).unwrap());
        });
        let values: Vec<f64> = (0..K).map(|i| 1.0 / (i + 1) as f64 + 0.02).collect();
        let bundle =
            SpectralBundle::from_eigenpairs(CurvatureKind::Hessian, N, 0.01, values, orthonormal(p, K, SEED), vec![], 0)?;
        let x = data.input(0).to_vec();
        let t_pred = time_per_call(200, || {
            let f = net.sensitivity(&w, &x, 0).unwrap();
            std::hint::black_box(predict_uncertainty(&bundle, &f).unwrap());
        });
        rows.push((p, t_hvp, t_pred));
    }
    let mut passed = true;
    let mut parts = Vec::new();
    for pair in rows.windows(2) {
        let ((p0, h0, q0), (p1, h1, q1)) = (pair[0], pair[1]);
        let scale = p1 as f64 / p0 as f64;
        let (hr, qr) = (h1 / h0, q1 / q0);
        let (hn, qn) = (hr / scale, qr / scale);
        passed &= hn <= 1.5 && qn <= 1.5;
        parts.push(format!(
            "P {p0}->{p1}: hvp x{hr:.2} ({hn:.2} per parameter), predict x{qr:.2} ({qn:.2} per parameter)"
        ));
    }
    Ok(line(passed, parts.join("; ")))
}

fn main() {
    let t_all = Instant::now();
    let mut results: Vec<(usize, &str, Line)> = Vec::new();

    results.push((1, "gradient/HVP correctness", criterion_1()));

    let t = Instant::now();
    let tiny = definite_tiny_problem(&TINY_SIZES, 300, 50, TINY_L2, SEED, 16);
    let fixture = t.elapsed();
    let desk_dir = tempfile::tempdir().expect("temp dir");
    let desk_cfg = desk_config(desk_dir.path());
    let desk_started = Instant::now();
    let desk = desk_cfg.as_ref().map_err(|e| e.to_string()).and_then(|cfg| {
        pipeline(cfg).map(|c| (c, desk_started.elapsed())).map_err(|e| e.to_string())
    });
    let desk_opg = desk_cfg
        .as_ref()
        .ok()
        .filter(|_| desk.is_ok())
        .and_then(|cfg| SpectralBundle::load(&cfg.out_dir.join(cli::bundle_file(CurvatureKind::Opg))).ok());

    match &tiny {
        Ok((tp, curv, seed)) => {
            results.push((2, "eigensolver fidelity", criterion_2(tp, curv, fixture)));
            results.push((3, "K=P exactness", criterion_3(tp, curv, *seed)));
            results.push((4, "enclosure bound", criterion_4(tp, curv)));
            results.push((5, "positive-definiteness contract", criterion_5(tp, curv, desk_opg.as_ref())));
        }
        Err(e) => {
            for (i, name) in [(2, "eigensolver fidelity"), (3, "K=P exactness"), (4, "enclosure bound"), (5, "positive-definiteness contract")] {
                results.push((i, name, line(false, format!("tiny fixture: {e}"))));
            }
        }
    }
    results.push((6, "H = G in expectation", criterion_6()));

    match (&desk_cfg, &desk) {
        (Ok(cfg), Ok((cmp, took))) => {
            results.push((7, "estimator agreement", from_result(criterion_7(cfg, cmp, *took))));
            results.push((8, "FP vs TP uncertainty", criterion_8(cmp)));
            results.push((9, "full-rank vs low-rank", from_result(criterion_9(cfg))));
            results.push((10, "sandwich algebra", criterion_10()));
            let scratch = tempfile::tempdir().expect("temp dir");
            results.push((11, "determinism", from_result(criterion_11(cfg, scratch.path()))));
        }
        (cfg, desk) => {
            let why = match (cfg, desk) {
                (Err(e), _) => format!("desk config: {e}"),
                (_, Err(e)) => format!("desk pipeline: {e}"),
                _ => unreachable!(),
            };
            for (i, name) in [(7, "estimator agreement"), (8, "FP vs TP uncertainty"), (9, "full-rank vs low-rank")] {
                results.push((i, name, line(false, why.clone())));
            }
            results.push((10, "sandwich algebra", criterion_10()));
            results.push((11, "determinism", line(false, why)));
        }
    }
    results.push((12, "complexity contract", from_result(criterion_12())));

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (i, name, l) in &results {
        if !l.passed {
            failed += 1;
        }
        println!("{} {i:>2} {name}: {}", if l.passed { "PASS" } else { "FAIL" }, l.detail);
    }
    println!(
        "{} of {} criteria passed in {:.1}s",
        results.len() - failed,
        results.len(),
        t_all.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
