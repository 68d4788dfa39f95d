//! Prediction phase: per-class predictive variances from spectral bundles,
//! worst-case error bounds, uncertainty scores and estimator comparisons.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::nn::Sensitivity;
use crate::spectral::{CurvatureKind, SpectralBundle};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Hessian,
    Opg,
    Sandwich,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::Hessian, EstimatorKind::Opg, EstimatorKind::Sandwich];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Hessian => "hessian",
            EstimatorKind::Opg => "opg",
            EstimatorKind::Sandwich => "sandwich",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hessian" => Ok(EstimatorKind::Hessian),
            "opg" => Ok(EstimatorKind::Opg),
            "sandwich" => Ok(EstimatorKind::Sandwich),
            other => Err(Error::Config(format!("unknown estimator kind {other:?}"))),
        }
    }
}

impl From<CurvatureKind> for EstimatorKind {
    fn from(k: CurvatureKind) -> Self {
        match k {
            CurvatureKind::Hessian => EstimatorKind::Hessian,
            CurvatureKind::Opg => EstimatorKind::Opg,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReportFlags {
    /// Some `sigma^2 - |delta|` was negative and clamped before the sqrt.
    pub clamped: bool,
    /// Same for the score error.
    pub score_clamped: bool,
    /// A bundle had `lambda_K < lambda`; bounds are heuristic.
    pub heuristic: bool,
}

impl ReportFlags {
    const NAMES: [&'static str; 3] = ["clamped", "score_clamped", "heuristic"];

    fn bits(&self) -> [bool; 3] {
        [self.clamped, self.score_clamped, self.heuristic]
    }

    /// `|`-separated names, or `-` when no flag is set.
    pub fn encode(&self) -> String {
        let set: Vec<&str> = Self::NAMES
            .iter()
            .zip(self.bits())
            .filter_map(|(n, b)| b.then_some(*n))
            .collect();
        if set.is_empty() {
            "-".into()
        } else {
            set.join("|")
        }
    }

    pub fn decode(s: &str) -> Option<Self> {
        let mut flags = Self::default();
        if s == "-" {
            return Some(flags);
        }
        for name in s.split('|') {
            match name {
                "clamped" => flags.clamped = true,
                "score_clamped" => flags.score_clamped = true,
                "heuristic" => flags.heuristic = true,
                _ => return None,
            }
        }
        Some(flags)
    }
}

/// Predictive epistemic uncertainty of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyReport {
    pub input_id: usize,
    pub kind: EstimatorKind,
    pub k: usize,
    /// Per-class variance.
    pub variance: Vec<f64>,
    /// Per-class worst-case variance error.
    pub delta: Vec<f64>,
    /// Per-class standard deviation.
    pub sigma: Vec<f64>,
    /// Per-class standard-deviation error.
    pub epsilon: Vec<f64>,
    pub score: f64,
    pub score_error: f64,
    pub flags: ReportFlags,
}

/// Half-width of `[sqrt(v - d), sqrt(v + d)]`, and whether `v - d` was
/// clamped at zero. The sign of `d` is ignored.
fn sqrt_interval_half_width(v: f64, d: f64) -> (f64, bool) {
    let d = d.abs();
    let lo = v - d;
    (0.5 * ((v + d).max(0.0).sqrt() - lo.max(0.0).sqrt()), lo < 0.0)
}

/// `sqrt(sum sigma^2)` and its error from the summed per-class bounds.
pub fn score_from(variance: &[f64], delta: &[f64]) -> (f64, f64, bool) {
    let v: f64 = variance.iter().sum();
    let d: f64 = delta.iter().sum();
    let (err, clamped) = sqrt_interval_half_width(v, d);
    (v.max(0.0).sqrt(), err, clamped)
}

impl UncertaintyReport {
    pub fn new(
        input_id: usize,
        kind: EstimatorKind,
        k: usize,
        variance: Vec<f64>,
        delta: Vec<f64>,
        heuristic: bool,
    ) -> Self {
        let mut clamped = false;
        let epsilon = variance
            .iter()
            .zip(&delta)
            .map(|(&v, &d)| {
                let (e, c) = sqrt_interval_half_width(v, d);
                clamped |= c;
                e
            })
            .collect();
        let sigma = variance.iter().map(|v| v.max(0.0).sqrt()).collect();
        let (score, score_error, score_clamped) = score_from(&variance, &delta);
        Self {
            input_id,
            kind,
            k,
            variance,
            delta,
            sigma,
            epsilon,
            score,
            score_error,
            flags: ReportFlags {
                clamped,
                score_clamped,
                heuristic,
            },
        }
    }

    pub fn classes(&self) -> usize {
        self.variance.len()
    }
}

/// `(score, score_error)` of a report.
pub fn score(report: &UncertaintyReport) -> (f64, f64) {
    (report.score, report.score_error)
}

fn check_sensitivity(bundle: &SpectralBundle, f: &Sensitivity) -> Result<()> {
    if f.param_count() != bundle.param_count() {
        return Err(Error::Dimension {
            what: "sensitivity columns",
            expected: bundle.param_count(),
            actual: f.param_count(),
        });
    }
    if bundle.n == 0 {
        return Err(Error::Config("bundle has N = 0".into()));
    }
    Ok(())
}

/// Row-wise squared norms of `F - (F Q) Q^T`.
fn complement_energy(f: &DMatrix<f64>, fq: &DMatrix<f64>, q: &DMatrix<f64>) -> Vec<f64> {
    let resid = f - fq * q.transpose();
    resid.row_iter().map(|r| r.norm_squared()).collect()
}

/// Projections `F Q` and the per-class sums `sum_k (F q_k)^2 / lambda_k`.
fn leading_terms(bundle: &SpectralBundle, f: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let b = f * &bundle.eigenvectors;
    let lead = b
        .row_iter()
        .map(|r| r.iter().zip(&bundle.eigenvalues).map(|(x, l)| x * x / l).sum())
        .collect();
    (b, lead)
}

/// Full-rank Hessian- or OPG-kind variances from one bundle.
pub fn predict_uncertainty(bundle: &SpectralBundle, f: &Sensitivity) -> Result<UncertaintyReport> {
    check_sensitivity(bundle, f)?;
    let (tilde, eps) = bundle.linearized()?;
    let inv_n = 1.0 / bundle.n as f64;
    let (b, lead) = leading_terms(bundle, &f.matrix);
    let comp = complement_energy(&f.matrix, &b, &bundle.eigenvectors);
    let variance = lead.iter().zip(&comp).map(|(l, c)| inv_n * (l + c / tilde)).collect();
    let delta = comp.iter().map(|c| eps * inv_n * c).collect();
    Ok(UncertaintyReport::new(
        f.input_id,
        bundle.kind.into(),
        bundle.k(),
        variance,
        delta,
        bundle.flags.bound_degraded,
    ))
}

/// Variances from the leading eigenpairs only, with the complement term
/// dropped.
pub fn lowrank_uncertainty(bundle: &SpectralBundle, f: &Sensitivity) -> Result<Vec<f64>> {
    check_sensitivity(bundle, f)?;
    let inv_n = 1.0 / bundle.n as f64;
    let (_, lead) = leading_terms(bundle, &f.matrix);
    Ok(lead.into_iter().map(|l| inv_n * l).collect())
}

/// Cross-basis matrix `M = Q_H^T Q_G` shared by all sandwich evaluations.
#[derive(Debug, Clone)]
pub struct SandwichCross {
    pub m: DMatrix<f64>,
}

impl SandwichCross {
    pub fn new(hb: &SpectralBundle, gb: &SpectralBundle) -> Result<Self> {
        if hb.kind != CurvatureKind::Hessian || gb.kind != CurvatureKind::Opg {
            return Err(Error::BundleMismatch(format!(
                "sandwich needs a hessian and an opg bundle, got {} and {}",
                hb.kind.as_str(),
                gb.kind.as_str()
            )));
        }
        if hb.param_count() != gb.param_count() {
            return Err(Error::BundleMismatch(format!(
                "P differs: {} vs {}",
                hb.param_count(),
                gb.param_count()
            )));
        }
        if hb.n != gb.n {
            return Err(Error::BundleMismatch(format!("N differs: {} vs {}", hb.n, gb.n)));
        }
        if hb.l2_rate != gb.l2_rate {
            return Err(Error::BundleMismatch(format!(
                "l2 rate differs: {} vs {}",
                hb.l2_rate, gb.l2_rate
            )));
        }
        let m = hb.eigenvectors.transpose() * &gb.eigenvectors;
        let norm = m.singular_values().max();
        if norm > 1.0 + 1e-8 {
            return Err(Error::Invariant(format!("|Q_H^T Q_G|_2 = {norm} exceeds 1")));
        }
        Ok(Self { m })
    }
}

/// The eight sandwich terms, each as its per-class diagonal `diag(F T F^T)`.
/// Symmetric pairs are already summed (`N + N^T`, `D + D^T`).
#[derive(Debug, Clone, PartialEq)]
pub struct SandwichTerms {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub n_sym: Vec<f64>,
    pub d_sym: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

impl SandwichTerms {
    /// Factored evaluation from `F Q_H`, `F Q_G` and `M`; no `P x P` product.
    pub fn factored(hb: &SpectralBundle, gb: &SpectralBundle, cross: &SandwichCross, f: &DMatrix<f64>) -> Self {
        let m = &cross.m;
        let x = f * &hb.eigenvectors;
        let y = f * &gb.eigenvectors;
        let mut u = x.clone();
        for (mut col, l) in u.column_iter_mut().zip(&hb.eigenvalues) {
            col /= *l;
        }
        let um = &u * m;
        let z = &y - &x * m;
        let zm = &z * m.transpose();
        let perp_h = complement_energy(f, &x, &hb.eigenvectors);
        let lg = &gb.eigenvalues;
        let rows = f.nrows();
        let mut t = SandwichTerms {
            s: vec![0.0; rows],
            a: vec![0.0; rows],
            n_sym: vec![0.0; rows],
            d_sym: vec![0.0; rows],
            c: vec![0.0; rows],
            h: vec![0.0; rows],
        };
        for r in 0..rows {
            let mut um2 = 0.0;
            for j in 0..m.ncols() {
                let (umj, zj) = (um[(r, j)], z[(r, j)]);
                t.s[r] += umj * umj * lg[j];
                t.n_sym[r] += 2.0 * zj * lg[j] * umj;
                t.c[r] += zj * zj * lg[j];
                um2 += umj * umj;
            }
            t.a[r] = u.row(r).norm_squared() - um2;
            t.d_sym[r] = -2.0 * zm.row(r).dot(&u.row(r));
            t.h[r] = perp_h[r] - z.row(r).norm_squared();
        }
        t
    }

    /// Combines the terms into `(sigma^2, delta)`.
    pub fn combine(&self, hb: &SpectralBundle, gb: &SpectralBundle) -> Result<(Vec<f64>, Vec<f64>)> {
        let (tilde_h, _) = hb.linearized()?;
        let (tilde_g, _) = gb.linearized()?;
        let lambda = hb.l2_rate;
        let (kh, kg) = (hb.lambda_k(), gb.lambda_k());
        let inv_n = 1.0 / hb.n as f64;
        let g = tilde_g;
        let h = 1.0 / tilde_h;
        let coef = [
            kg - lambda,
            1.0 / lambda - 1.0 / kh,
            kg / lambda - lambda / kh,
            1.0 / (lambda * lambda) - 1.0 / (kh * kh),
            kg / (lambda * lambda) - lambda / (kh * kh),
        ];
        let mut variance = Vec::with_capacity(self.s.len());
        let mut delta = Vec::with_capacity(self.s.len());
        for r in 0..self.s.len() {
            let (a, n, d, c, hh) = (self.a[r], self.n_sym[r], self.d_sym[r], self.c[r], self.h[r]);
            variance.push(inv_n * (self.s[r] + g * a + h * n + g * h * d + h * h * c + g * h * h * hh));
            delta.push(
                0.5 * inv_n * (coef[0] * a + coef[1] * n + coef[2] * d + coef[3] * c + coef[4] * hh),
            );
        }
        Ok((variance, delta))
    }
}

/// Sandwich-kind variances from a Hessian and an OPG bundle over the same
/// parameters and data.
pub fn predict_uncertainty_sandwich(
    hb: &SpectralBundle,
    gb: &SpectralBundle,
    cross: &SandwichCross,
    f: &Sensitivity,
) -> Result<UncertaintyReport> {
    check_sensitivity(hb, f)?;
    check_sensitivity(gb, f)?;
    if cross.m.shape() != (hb.k(), gb.k()) {
        return Err(Error::BundleMismatch("cross matrix does not match bundles".into()));
    }
    let terms = SandwichTerms::factored(hb, gb, cross, &f.matrix);
    let (variance, delta) = terms.combine(hb, gb)?;
    Ok(UncertaintyReport::new(
        f.input_id,
        EstimatorKind::Sandwich,
        hb.k(),
        variance,
        delta,
        hb.flags.bound_degraded || gb.flags.bound_degraded,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankOrder {
    Asc,
    #[default]
    Desc,
}

impl FromStr for RankOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asc" => Ok(RankOrder::Asc),
            "desc" => Ok(RankOrder::Desc),
            other => Err(Error::Config(format!("unknown rank order {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankEntry {
    pub id: usize,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Orders inputs by score; equal scores keep ascending id order.
pub fn rank_by_score(reports: &[UncertaintyReport], order: RankOrder, top: Option<usize>) -> Vec<RankEntry> {
    let mut items: Vec<(usize, f64)> = reports.iter().map(|r| (r.input_id, r.score)).collect();
    items.sort_by_key(|&(id, _)| id);
    items.sort_by(|a, b| match order {
        RankOrder::Desc => b.1.total_cmp(&a.1),
        RankOrder::Asc => a.1.total_cmp(&b.1),
    });
    items
        .into_iter()
        .take(top.unwrap_or(usize::MAX))
        .enumerate()
        .map(|(i, (id, score))| RankEntry { id, score, rank: i + 1 })
        .collect()
}

/// Ordinary least squares `b = alpha + beta a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Regression {
    pub alpha: f64,
    pub beta: f64,
    pub r2: f64,
    pub n: usize,
    /// Mean of the regressand.
    pub mean_b: f64,
}

pub fn ols(a: &[f64], b: &[f64]) -> Result<Regression> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            what: "regression points",
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut saa, mut sab, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        saa += (x - ma) * (x - ma);
        sab += (x - ma) * (y - mb);
        sbb += (y - mb) * (y - mb);
    }
    if !(saa > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let beta = sab / saa;
    let r2 = if sbb > 0.0 { sab * sab / (saa * sbb) } else { 1.0 };
    Ok(Regression {
        alpha: mb - beta * ma,
        beta,
        r2,
        n: a.len(),
        mean_b: mb,
    })
}

fn sorted_by_id(reports: &[UncertaintyReport]) -> Vec<&UncertaintyReport> {
    let mut v: Vec<&UncertaintyReport> = reports.iter().collect();
    v.sort_by_key(|r| r.input_id);
    v
}

/// Regresses the per-class standard deviations of `b` on those of `a`,
/// pooling every (input, class) pair. Both sets must cover the same ids.
pub fn compare_estimators(a: &[UncertaintyReport], b: &[UncertaintyReport]) -> Result<Regression> {
    let (sa, sb) = (sorted_by_id(a), sorted_by_id(b));
    if sa.len() != sb.len() || sa.iter().zip(&sb).any(|(x, y)| x.input_id != y.input_id) {
        return Err(Error::BundleMismatch("report batches cover different input ids".into()));
    }
    let mut xa = Vec::new();
    let mut xb = Vec::new();
    for (ra, rb) in sa.iter().zip(&sb) {
        if ra.classes() != rb.classes() {
            return Err(Error::BundleMismatch(format!(
                "input {} has {} vs {} classes",
                ra.input_id,
                ra.classes(),
                rb.classes()
            )));
        }
        xa.extend_from_slice(&ra.sigma);
        xb.extend_from_slice(&rb.sigma);
    }
    ols(&xa, &xb)
}

/// Mean scores of correctly and incorrectly classified inputs. A mean is
/// `None` when its group is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitStats {
    pub tp_mean: Option<f64>,
    pub tp_count: usize,
    pub fp_mean: Option<f64>,
    pub fp_count: usize,
}

pub fn fp_tp_split_stats(reports: &[UncertaintyReport], predictions: &[usize], targets: &[usize]) -> Result<SplitStats> {
    if predictions.len() != reports.len() || targets.len() != reports.len() {
        return Err(Error::Dimension {
            what: "classification outcomes",
            expected: reports.len(),
            actual: predictions.len().min(targets.len()),
        });
    }
    let (mut tp, mut fp) = ((0.0, 0usize), (0.0, 0usize));
    for ((r, p), t) in reports.iter().zip(predictions).zip(targets) {
        let g = if p == t { &mut tp } else { &mut fp };
        g.0 += r.score;
        g.1 += 1;
    }
    let mean = |(s, c): (f64, usize)| (c > 0).then(|| s / c as f64);
    Ok(SplitStats {
        tp_mean: mean(tp),
        tp_count: tp.1,
        fp_mean: mean(fp),
        fp_count: fp.1,
    })
}

/// A report together with the classifier outcome for its input.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRecord {
    pub report: UncertaintyReport,
    pub predicted: usize,
    pub label: usize,
}

/// Batch file header for `classes` output classes:
/// `id,kind,k,predicted,label,var_0..,delta_0..,score,score_error,flags`.
pub fn report_header(classes: usize) -> String {
    let mut cols: Vec<String> = ["id", "kind", "k", "predicted", "label"].iter().map(|s| s.to_string()).collect();
    cols.extend((0..classes).map(|m| format!("var_{m}")));
    cols.extend((0..classes).map(|m| format!("delta_{m}")));
    cols.extend(["score", "score_error", "flags"].iter().map(|s| s.to_string()));
    cols.join(",")
}

pub fn write_report_csv(records: &[ReportRecord]) -> String {
    let classes = records.first().map_or(0, |r| r.report.classes());
    let mut out = report_header(classes);
    out.push('\n');
    for rec in records {
        let r = &rec.report;
        let mut fields = vec![
            r.input_id.to_string(),
            r.kind.to_string(),
            r.k.to_string(),
            rec.predicted.to_string(),
            rec.label.to_string(),
        ];
        fields.extend(r.variance.iter().map(|v| format!("{v:e}")));
        fields.extend(r.delta.iter().map(|v| format!("{v:e}")));
        fields.push(format!("{:e}", r.score));
        fields.push(format!("{:e}", r.score_error));
        fields.push(r.flags.encode());
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_report_csv(text: &str, path: &Path) -> Result<Vec<ReportRecord>> {
    let err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        reason: format!("line {line}: {reason}"),
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err(1, "empty report file".into()))?;
    let width = header.split(',').count();
    if width < 8 || (width - 8) % 2 != 0 {
        return Err(err(1, "unrecognized report header".into()));
    }
    let classes = (width - 8) / 2;
    if header != report_header(classes) {
        return Err(err(1, "unrecognized report header".into()));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let lineno = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != width {
            return Err(err(lineno, format!("expected {width} fields, found {}", f.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| err(lineno, format!("bad integer {s:?}")));
        let float = |s: &str| s.parse::<f64>().map_err(|_| err(lineno, format!("bad number {s:?}")));
        let variance = f[5..5 + classes].iter().map(|s| float(s)).collect::<Result<Vec<_>>>()?;
        let delta = f[5 + classes..5 + 2 * classes].iter().map(|s| float(s)).collect::<Result<Vec<_>>>()?;
        let flags = ReportFlags::decode(f[width - 1]).ok_or_else(|| err(lineno, format!("bad flags {:?}", f[width - 1])))?;
        let mut report = UncertaintyReport::new(
            int(f[0])?,
            f[1].parse().map_err(|_| err(lineno, format!("bad kind {:?}", f[1])))?,
            int(f[2])?,
            variance,
            delta,
            flags.heuristic,
        );
        report.flags = flags;
        out.push(ReportRecord {
            report,
            predicted: int(f[3])?,
            label: int(f[4])?,
        });
    }
    Ok(out)
}

/// `id,score,rank`.
pub fn write_ranking_csv(entries: &[RankEntry]) -> String {
    let mut out = String::from("id,score,rank\n");
    for e in entries {
        out.push_str(&format!("{},{:e},{}\n", e.id, e.score, e.rank));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::SpectralBundle;

    fn bundle(kind: CurvatureKind, values: Vec<f64>, q: DMatrix<f64>, lambda: f64, n: usize) -> SpectralBundle {
        SpectralBundle::from_eigenpairs(kind, n, lambda, values, q, vec![], 0).unwrap()
    }

    fn sens(rows: usize, p: usize, seed: u64) -> Sensitivity {
        let m = DMatrix::from_fn(rows, p, |r, c| (((r * 31 + c * 17 + seed as usize * 7) % 13) as f64 - 6.0) / 6.0);
        Sensitivity { matrix: m, input_id: 0 }
    }

    fn basis(p: usize, k: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(p, p, |r, c| ((r * 7 + c * 3) % 11) as f64 + if r == c { 20.0 } else { 0.0 });
        a.qr().q().columns(0, k).into_owned()
    }

    #[test]
    fn zero_sensitivity_gives_zero_report() {
        let b = bundle(CurvatureKind::Opg, vec![3.0, 2.0], basis(5, 2), 0.5, 10);
        let f = Sensitivity {
            matrix: DMatrix::zeros(3, 5),
            input_id: 4,
        };
        let r = predict_uncertainty(&b, &f).unwrap();
        assert_eq!(r.variance, vec![0.0; 3]);
        assert_eq!(r.delta, vec![0.0; 3]);
        assert_eq!((r.score, r.score_error), (0.0, 0.0));
        assert_eq!(r.input_id, 4);
    }

    #[test]
    fn flat_gap_has_zero_delta() {
        let b = bundle(CurvatureKind::Opg, vec![3.0, 0.5], basis(5, 2), 0.5, 10);
        let r = predict_uncertainty(&b, &sens(2, 5, 1)).unwrap();
        assert!(r.delta.iter().all(|&d| d == 0.0));
        assert!(r.variance.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn score_hand_values() {
        let (s, e, c) = score_from(&[0.04, 0.09], &[0.0, 0.0]);
        assert!((s - 0.13f64.sqrt()).abs() < 1e-15 && (s - 0.360555127546).abs() < 1e-12);
        assert_eq!((e, c), (0.0, false));
        assert_eq!(score_from(&[0.0, 0.0], &[0.0, 0.0]), (0.0, 0.0, false));
        let (s2, e2, _) = score_from(&[0.08, 0.18], &[0.02, 0.04]);
        let (s1, e1, _) = score_from(&[0.04, 0.09], &[0.01, 0.02]);
        assert!((s2 - 2f64.sqrt() * s1).abs() < 1e-15);
        assert!((e2 - 2f64.sqrt() * e1).abs() < 1e-15);
        let (_, _, clamped) = score_from(&[0.01], &[0.02]);
        assert!(clamped);
    }

    #[test]
    fn lowrank_never_exceeds_full_rank_and_matches_in_span() {
        let q = basis(6, 3);
        let b = bundle(CurvatureKind::Opg, vec![4.0, 2.0, 1.5], q.clone(), 1.0, 7);
        let f = sens(3, 6, 2);
        let full = predict_uncertainty(&b, &f).unwrap();
        let low = lowrank_uncertainty(&b, &f).unwrap();
        assert!(full.variance.iter().zip(&low).all(|(f, l)| f >= l));

        let inside = Sensitivity {
            matrix: (&f.matrix * &q) * q.transpose(),
            input_id: 0,
        };
        let full = predict_uncertainty(&b, &inside).unwrap();
        let low = lowrank_uncertainty(&b, &inside).unwrap();
        for (x, y) in full.variance.iter().zip(&low) {
            assert!((x - y).abs() < 1e-14 * x.max(1.0));
        }
    }

    #[test]
    fn scaling_f_scales_quadratically() {
        let b = bundle(CurvatureKind::Hessian, vec![4.0, 2.0], basis(5, 2), 0.5, 9);
        let f = sens(2, 5, 3);
        let f3 = Sensitivity {
            matrix: &f.matrix * 3.0,
            input_id: 0,
        };
        let r1 = predict_uncertainty(&b, &f).unwrap();
        let r3 = predict_uncertainty(&b, &f3).unwrap();
        for m in 0..2 {
            assert!((r3.variance[m] - 9.0 * r1.variance[m]).abs() < 1e-13 * r3.variance[m]);
            assert!((r3.delta[m] - 9.0 * r1.delta[m]).abs() < 1e-13 * r3.delta[m]);
        }
    }

    #[test]
    fn sandwich_with_equal_bundles_is_hessian_kind() {
        let q = basis(7, 3);
        let values = vec![5.0, 3.0, 2.0];
        let hb = bundle(CurvatureKind::Hessian, values.clone(), q.clone(), 0.5, 11);
        let gb = bundle(CurvatureKind::Opg, values, q, 0.5, 11);
        let f = sens(3, 7, 4);
        let cross = SandwichCross::new(&hb, &gb).unwrap();
        let s = predict_uncertainty_sandwich(&hb, &gb, &cross, &f).unwrap();
        let h = predict_uncertainty(&hb, &f).unwrap();
        for (a, b) in s.variance.iter().zip(&h.variance) {
            assert!((a - b).abs() < 1e-10 * b.max(1.0), "{a} vs {b}");
        }
        assert!(SandwichCross::new(&gb, &hb).is_err());
    }

    #[test]
    fn ranking_order_and_ties() {
        let mk = |id: usize, s: f64| UncertaintyReport::new(id, EstimatorKind::Opg, 1, vec![s * s], vec![0.0], false);
        let reports = vec![mk(0, 3.0), mk(1, 1.0), mk(2, 2.0)];
        let ids: Vec<usize> = rank_by_score(&reports, RankOrder::Desc, None).iter().map(|e| e.id).collect();
        assert_eq!(ids, vec![0, 2, 1]);
        let tied = vec![mk(5, 1.0), mk(2, 1.0), mk(9, 1.0)];
        let ids: Vec<usize> = rank_by_score(&tied, RankOrder::Desc, Some(2)).iter().map(|e| e.id).collect();
        assert_eq!(ids, vec![2, 5]);
        let asc = rank_by_score(&reports, RankOrder::Asc, None);
        assert_eq!(asc[0].id, 1);
        assert_eq!(asc[2].rank, 3);
    }

    #[test]
    fn regression_identities() {
        let a = [1.0, 2.0, 4.0, 7.0];
        let r = ols(&a, &a).unwrap();
        assert!(r.alpha.abs() < 1e-15 && (r.beta - 1.0).abs() < 1e-15 && (r.r2 - 1.0).abs() < 1e-15);
        let b: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();
        let r = ols(&a, &b).unwrap();
        assert!(r.alpha.abs() < 1e-14 && (r.beta - 2.0).abs() < 1e-15 && (r.r2 - 1.0).abs() < 1e-15);
        assert!(matches!(ols(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::ZeroVariance)));
    }

    #[test]
    fn split_stats_hand_case() {
        let mk = |id: usize, s: f64| UncertaintyReport::new(id, EstimatorKind::Opg, 1, vec![s * s], vec![0.0], false);
        let reports = vec![mk(0, 1.0), mk(1, 2.0), mk(2, 4.0), mk(3, 8.0)];
        let s = fp_tp_split_stats(&reports, &[0, 1, 1, 0], &[0, 1, 0, 1]).unwrap();
        assert_eq!((s.tp_mean, s.tp_count), (Some(1.5), 2));
        assert_eq!((s.fp_mean, s.fp_count), (Some(6.0), 2));
        let all = fp_tp_split_stats(&reports, &[0; 4], &[0; 4]).unwrap();
        assert_eq!((all.fp_mean, all.fp_count), (None, 0));
    }

    #[test]
    fn report_csv_round_trips() {
        let mut r = UncertaintyReport::new(7, EstimatorKind::Sandwich, 3, vec![0.25, 1e-9], vec![0.01, 2e-9], true);
        r.flags.clamped = true;
        let rec = ReportRecord {
            report: r,
            predicted: 1,
            label: 0,
        };
        let text = write_report_csv(std::slice::from_ref(&rec));
        assert!(text.starts_with("id,kind,k,predicted,label,var_0,var_1,delta_0,delta_1,score,score_error,flags\n"));
        let back = parse_report_csv(&text, Path::new("r.csv")).unwrap();
        assert_eq!(back, vec![rec]);
    }
}
