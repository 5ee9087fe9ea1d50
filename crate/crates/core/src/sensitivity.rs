//! Pick-freeze evaluation, U-statistic covariance estimators of first-order
//! and total sensitivity functionals, index computation with asymptotic
//! standard errors, and the Loewner comparison of total covariances.
//!
//! All sums over rows use a fixed pairwise tree, so results do not depend on
//! the number of worker threads.

use crate::error::{Error, Result};
use crate::linalg::SquareMatrix;
use crate::models::Model;
use crate::representations::{
    build_representation, BlockStructure, PermutationPlan, Representation, RoutingPlan,
};
use crate::sampling::{generate_panel, ColumnLayout, Generator, Panel, PanelId, SamplePlan};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

/// Relative threshold below which `trace(Σ̂)` counts as zero.
pub const DEGENERATE_TRACE: f64 = 1e-14;
/// Type-2 intervals are skipped when `‖D̂‖ < NULL_NORM · ‖Σ̂‖`.
pub const NULL_NORM: f64 = 1e-10;
/// Normal quantile for two-sided 95% intervals.
pub const Z95: f64 = 1.96;

const PAIRWISE_BLOCK: usize = 64;

/// Sum with a fixed binary tree over blocks of 64.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= PAIRWISE_BLOCK {
        return v.iter().sum();
    }
    let half = v.len().div_ceil(2 * PAIRWISE_BLOCK) * PAIRWISE_BLOCK;
    pairwise_sum(&v[..half]) + pairwise_sum(&v[half..])
}

fn mean(v: &[f64]) -> f64 {
    pairwise_sum(v) / v.len() as f64
}

/// Unbiased sample covariance of two equally long sequences.
fn sample_cov(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let (mx, my) = (mean(x), mean(y));
    let prods: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    pairwise_sum(&prods) / (n - 1) as f64
}

/// Model outputs for a set of rows, row-major `rows × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    pub rows: usize,
    pub n: usize,
    pub data: Vec<f64>,
}

impl Outputs {
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map_or(0, |r| r.len());
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Domain("output rows must be nonempty and of equal length".into()));
        }
        Ok(Outputs {
            rows: rows.len(),
            n,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    fn head(&self, rows: usize) -> &[f64] {
        &self.data[..rows * self.n]
    }
}

/// Evaluates `g_ℓ` on the first `rows` rows of `base`, with columns
/// `frozen` taken from `donor` when given.
pub fn evaluate_panel(
    rep: &Representation,
    base: &Panel,
    donor: Option<(&Panel, &[usize])>,
    rows: usize,
) -> Result<Outputs> {
    if base.cols != rep.layout_len() || donor.is_some_and(|(p, _)| p.cols != base.cols) {
        return Err(Error::Config(format!(
            "panel has {} columns, representation expects {}",
            base.cols,
            rep.layout_len()
        )));
    }
    if rows > base.rows || donor.is_some_and(|(p, _)| rows > p.rows) {
        return Err(Error::Config(format!("requested {rows} rows from a panel of {}", base.rows)));
    }
    let n = rep.output_dim();
    let d = rep.input_dim();
    let mut data = vec![0.0; rows * n];
    let failure = data
        .par_chunks_mut(n)
        .enumerate()
        .map_init(
            || (vec![0.0; base.cols], vec![0.0; d]),
            |(row, x), (i, out)| {
                row.copy_from_slice(base.row(i));
                if let Some((p, cols)) = donor {
                    let src = p.row(i);
                    for &c in cols {
                        row[c] = src[c];
                    }
                }
                rep.evaluate_row(row, x, out).err().map(|m| (i, m))
            },
        )
        .flatten()
        .min_by_key(|(i, _)| *i);
    if let Some((row, message)) = failure {
        return Err(Error::Evaluation { row, message });
    }
    Ok(Outputs { rows, n, data })
}

/// The four output arrays of one pick-freeze design.
#[derive(Debug, Clone)]
pub struct PickFreezeBatch {
    pub m: usize,
    pub n: usize,
    /// `M(X^(1))`, possibly longer than `m` rows.
    pub a: Arc<Outputs>,
    /// `M(X^(2))`, possibly longer than `m` rows.
    pub b: Arc<Outputs>,
    /// Panel 2 with the `u`-part of panel 1 frozen in.
    pub c: Outputs,
    /// Panel 1 with the `u`-part of panel 2 frozen in.
    pub d: Outputs,
}

impl PickFreezeBatch {
    pub fn new(a: Arc<Outputs>, b: Arc<Outputs>, c: Outputs, d: Outputs) -> Result<Self> {
        let (m, n) = (c.rows, c.n);
        if d.rows != m || a.rows < m || b.rows < m || [a.n, b.n, d.n].iter().any(|&k| k != n) {
            return Err(Error::Domain("pick-freeze arrays disagree in shape".into()));
        }
        if m == 0 {
            return Err(Error::Domain("pick-freeze batch needs at least one row".into()));
        }
        Ok(PickFreezeBatch { m, n, a, b, c, d })
    }

    /// Per-row differences `A - D` and `C - B`, row-major.
    fn differences(&self) -> (Vec<f64>, Vec<f64>) {
        let ad = self.a.head(self.m).iter().zip(&self.d.data).map(|(x, y)| x - y).collect();
        let cb = self.c.data.iter().zip(self.b.head(self.m)).map(|(x, y)| x - y).collect();
        (ad, cb)
    }
}

/// Evaluations `A, B` of one representation on both panels.
pub fn base_outputs(rep: &Representation, p1: &Panel, p2: &Panel, rows: usize) -> Result<(Arc<Outputs>, Arc<Outputs>)> {
    Ok((
        Arc::new(evaluate_panel(rep, p1, None, rows)?),
        Arc::new(evaluate_panel(rep, p2, None, rows)?),
    ))
}

/// Builds the batch for subset `u`, routed to `rep`; `a` and `b` are the
/// cached base outputs of `rep`.
pub fn pick_freeze_evaluate(
    rep: &Representation,
    structure: &BlockStructure,
    u: &[usize],
    p1: &Panel,
    p2: &Panel,
    m: usize,
    base: (Arc<Outputs>, Arc<Outputs>),
) -> Result<PickFreezeBatch> {
    let frozen = rep.frozen_columns(structure, u)?;
    let c = evaluate_panel(rep, p2, Some((p1, &frozen)), m)?;
    let d = evaluate_panel(rep, p1, Some((p2, &frozen)), m)?;
    PickFreezeBatch::new(base.0, base.1, c, d)
}

/// Row `i` of the first-order kernel
/// `K = (A-D)(C-B)' + (C-B)(A-D)'`.
pub fn kernel_first_order(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> SquareMatrix {
    let n = a.len();
    let mut k = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let (x_i, y_i) = (a[i] - d[i], c[i] - b[i]);
            let (x_j, y_j) = (a[j] - d[j], c[j] - b[j]);
            k.set(i, j, x_i * y_j + y_i * x_j);
        }
    }
    k
}

/// Row `i` of the total kernel `K_tot = (A-D)(A-D)' + (C-B)(C-B)'`.
pub fn kernel_total(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> SquareMatrix {
    let n = a.len();
    let mut k = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let (x_i, y_i) = (a[i] - d[i], c[i] - b[i]);
            let (x_j, y_j) = (a[j] - d[j], c[j] - b[j]);
            k.set(i, j, x_i * x_j + y_i * y_j);
        }
    }
    k
}

/// `(1/scale) Σ_i f(i, a, b)` for every entry `a <= b`, mirrored.
fn assemble(n: usize, rows: usize, scale: f64, f: impl Fn(usize, usize, usize) -> f64 + Sync) -> SquareMatrix {
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a..n).map(move |b| (a, b))).collect();
    let sums: Vec<f64> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let vals: Vec<f64> = (0..rows).map(|i| f(i, a, b)).collect();
            pairwise_sum(&vals) / scale
        })
        .collect();
    let mut out = SquareMatrix::zeros(n);
    for (&(a, b), &v) in pairs.iter().zip(&sums) {
        out.set(a, b, v);
        out.set(b, a, v);
    }
    out
}

/// `Σ̂ = (1/2M) Σ (A-B)(A-B)'` with per-row quantities for the variance
/// estimates.
#[derive(Debug, Clone)]
pub struct SigmaEstimate {
    pub matrix: SquareMatrix,
    pub rows: usize,
    diffs: Vec<f64>,
}

/// Estimates the output covariance from the first `rows` rows of `a, b`.
pub fn estimate_sigma(a: &Outputs, b: &Outputs, rows: usize) -> Result<SigmaEstimate> {
    if rows < 2 || a.rows < rows || b.rows < rows || a.n != b.n {
        return Err(Error::Domain(format!("sigma estimate needs at least 2 rows of matching outputs, got {rows}")));
    }
    let n = a.n;
    let diffs: Vec<f64> = a.head(rows).iter().zip(b.head(rows)).map(|(x, y)| x - y).collect();
    let matrix = assemble(n, rows, 2.0 * rows as f64, |i, p, q| diffs[i * n + p] * diffs[i * n + q]);
    let sq: Vec<f64> = a.head(rows).iter().chain(b.head(rows)).map(|v| v * v).collect();
    let scale2 = mean(&sq) * n as f64;
    let trace = matrix.trace();
    let threshold = DEGENERATE_TRACE * scale2;
    if !(trace > threshold) {
        return Err(Error::DegenerateVariance { trace, threshold });
    }
    Ok(SigmaEstimate { matrix, rows, diffs })
}

impl SigmaEstimate {
    /// `tr((A-B)(A-B)')/2` per row.
    fn trace_terms(&self) -> Vec<f64> {
        let n = self.matrix.n;
        self.diffs.chunks(n).map(|r| r.iter().map(|v| v * v).sum::<f64>() / 2.0).collect()
    }

    /// `<W, (A-B)(A-B)'>/2` per row.
    fn projected_terms(&self, w: &SquareMatrix) -> Vec<f64> {
        let n = self.matrix.n;
        self.diffs.chunks(n).map(|r| quad(w, r, r) / 2.0).collect()
    }
}

/// `x' W y`.
fn quad(w: &SquareMatrix, x: &[f64], y: &[f64]) -> f64 {
    let n = w.n;
    let mut s = 0.0;
    for i in 0..n {
        let mut t = 0.0;
        for j in 0..n {
            t += w.get(i, j) * y[j];
        }
        s += x[i] * t;
    }
    s
}

/// `D̂_u`, `D̂_u^tot` and `Σ̂`.
#[derive(Debug, Clone)]
pub struct CovarianceEstimates {
    pub first: SquareMatrix,
    pub total: SquareMatrix,
    pub sigma: SquareMatrix,
    pub m: usize,
    pub big_m: usize,
}

pub fn estimate_first_order(batch: &PickFreezeBatch) -> SquareMatrix {
    let (ad, cb) = batch.differences();
    let n = batch.n;
    assemble(n, batch.m, 4.0 * batch.m as f64, |i, p, q| {
        ad[i * n + p] * cb[i * n + q] + cb[i * n + p] * ad[i * n + q]
    })
}

pub fn estimate_total(batch: &PickFreezeBatch) -> SquareMatrix {
    let (ad, cb) = batch.differences();
    let n = batch.n;
    assemble(n, batch.m, 4.0 * batch.m as f64, |i, p, q| {
        ad[i * n + p] * ad[i * n + q] + cb[i * n + p] * cb[i * n + q]
    })
}

/// `(1/2m) Σ (A-D)(A-D)'`, which needs no `C` evaluations.
pub fn total_only_estimator(batch: &PickFreezeBatch) -> SquareMatrix {
    let (ad, _) = batch.differences();
    let n = batch.n;
    assemble(n, batch.m, 2.0 * batch.m as f64, |i, p, q| ad[i * n + p] * ad[i * n + q])
}

pub fn estimate_covariances(batch: &PickFreezeBatch, sigma: &SigmaEstimate) -> CovarianceEstimates {
    CovarianceEstimates {
        first: estimate_first_order(batch),
        total: estimate_total(batch),
        sigma: sigma.matrix.clone(),
        m: batch.m,
        big_m: sigma.rows,
    }
}

/// One index estimate with its uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexEstimate {
    /// Raw estimate (may leave `[0, 1]` in finite samples).
    pub estimate: f64,
    /// Estimate clamped to `[0, 1]`, for display only.
    pub display: f64,
    /// Standard error of the estimate (`SE/√m`); absent when skipped.
    pub stderr: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

impl IndexEstimate {
    fn new(estimate: f64, stderr: Option<f64>, flag: Option<String>) -> Self {
        IndexEstimate {
            estimate,
            display: estimate.clamp(0.0, 1.0),
            stderr,
            ci_lo: stderr.map(|s| estimate - Z95 * s),
            ci_hi: stderr.map(|s| estimate + Z95 * s),
            flag,
        }
    }
}

/// The four indices of one subset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexEntry {
    pub subset: Vec<usize>,
    /// Canonical number of the representation used (0-based).
    pub representation: usize,
    pub first_type1: IndexEstimate,
    pub total_type1: IndexEstimate,
    pub first_type2: IndexEstimate,
    pub total_type2: IndexEstimate,
    pub m: usize,
    pub big_m: usize,
}

impl IndexEntry {
    /// The scalar-output index pair (equal to both types when `N = 1`).
    pub fn ds(&self) -> (&IndexEstimate, &IndexEstimate) {
        (&self.first_type1, &self.total_type1)
    }
}

/// Delta-method variance of `mean(t) / mean(s)` where `t` has `m` rows and
/// `s` has `big_m` rows, the first `min(m, big_m)` rows paired.
fn ratio_variance(t: &[f64], s: &[f64]) -> f64 {
    let (m, big_m) = (t.len() as f64, s.len() as f64);
    let overlap = t.len().min(s.len());
    let (mt, ms) = (mean(t), mean(s));
    let r = mt / ms;
    let vt = sample_cov(t, t);
    let vs = sample_cov(s, s);
    let c = sample_cov(&t[..overlap], &s[..overlap]);
    let v = vt / m - 2.0 * r * c * overlap as f64 / (m * big_m) + r * r * vs / big_m;
    v.max(0.0) / (ms * ms)
}

/// Delta-method variance for `‖D‖/‖Σ‖` given per-row projections
/// `psi_i = <D̂, k_i>` and `phi_i = <Σ̂, s_i>`.
fn norm_ratio_variance(psi: &[f64], phi: &[f64], nd: f64, ns: f64) -> f64 {
    let (m, big_m) = (psi.len() as f64, phi.len() as f64);
    let overlap = psi.len().min(phi.len());
    // Gradients: D/(‖D‖‖Σ‖) and -‖D‖Σ/‖Σ‖³.
    let gd = 1.0 / (nd * ns);
    let gs = -nd / (ns * ns * ns);
    let vp = sample_cov(psi, psi);
    let vf = sample_cov(phi, phi);
    let c = sample_cov(&psi[..overlap], &phi[..overlap]);
    let v = gd * gd * vp / m + gs * gs * vf / big_m + 2.0 * gd * gs * c * overlap as f64 / (m * big_m);
    v.max(0.0)
}

/// Both index types for first-order and total effects of one batch.
pub fn compute_indices(subset: &[usize], representation: usize, batch: &PickFreezeBatch, sigma: &SigmaEstimate) -> IndexEntry {
    let n = batch.n;
    let cov = estimate_covariances(batch, sigma);
    let (ad, cb) = batch.differences();
    let rows = |v: &[f64]| v.chunks(n).map(<[f64]>::to_vec).collect::<Vec<_>>();
    let (ad_rows, cb_rows) = (rows(&ad), rows(&cb));

    let s_trace = sigma.trace_terms();
    let tr_sigma = cov.sigma.trace();
    let first_terms: Vec<f64> = ad_rows
        .iter()
        .zip(&cb_rows)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / 2.0)
        .collect();
    let total_terms: Vec<f64> = ad_rows
        .iter()
        .zip(&cb_rows)
        .map(|(x, y)| (x.iter().map(|v| v * v).sum::<f64>() + y.iter().map(|v| v * v).sum::<f64>()) / 4.0)
        .collect();
    let type1 = |d: &SquareMatrix, terms: &[f64]| {
        let est = d.trace() / tr_sigma;
        IndexEstimate::new(est, Some(ratio_variance(terms, &s_trace).sqrt()), None)
    };
    let first_type1 = type1(&cov.first, &first_terms);
    let total_type1 = type1(&cov.total, &total_terms);

    let ns = cov.sigma.frobenius();
    let phi = sigma.projected_terms(&cov.sigma);
    let type2 = |d: &SquareMatrix, total: bool| {
        let nd = d.frobenius();
        let est = nd / ns;
        if nd < NULL_NORM * ns {
            return IndexEstimate::new(est, None, Some("type-2 interval skipped: D_u estimate is numerically zero".into()));
        }
        let psi: Vec<f64> = ad_rows
            .iter()
            .zip(&cb_rows)
            .map(|(x, y)| {
                if total {
                    (quad(d, x, x) + quad(d, y, y)) / 4.0
                } else {
                    quad(d, x, y) / 2.0
                }
            })
            .collect();
        IndexEstimate::new(est, Some(norm_ratio_variance(&psi, &phi, nd, ns).sqrt()), None)
    };
    let first_type2 = type2(&cov.first, false);
    let total_type2 = type2(&cov.total, true);
    let mut key = subset.to_vec();
    key.sort_unstable();
    IndexEntry {
        subset: key,
        representation,
        first_type1,
        total_type1,
        first_type2,
        total_type2,
        m: batch.m,
        big_m: sigma.rows,
    }
}

/// Outcome of comparing two total covariances in the Loewner order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LoewnerOrder {
    /// Both dominate each other within tolerance.
    Equal,
    /// `D_u ⪯ D_ω`.
    UDominated,
    /// `D_ω ⪯ D_u`.
    OmegaDominated,
    Incomparable,
}

pub fn loewner_rank_check(d_u: &SquareMatrix, d_w: &SquareMatrix, tol: f64) -> Result<LoewnerOrder> {
    if d_u.n != d_w.n {
        return Err(Error::Domain(format!("cannot compare {}×{} with {}×{}", d_u.n, d_u.n, d_w.n, d_w.n)));
    }
    let diff = d_w.sub(d_u);
    let band = tol * diff.frobenius();
    let ev = diff.symmetric_eigenvalues();
    let (lo, hi) = match (ev.first(), ev.last()) {
        (Some(&lo), Some(&hi)) => (lo, hi),
        _ => return Ok(LoewnerOrder::Equal),
    };
    Ok(match (lo >= -band, hi <= band) {
        (true, true) => LoewnerOrder::Equal,
        (true, false) => LoewnerOrder::UDominated,
        (false, true) => LoewnerOrder::OmegaDominated,
        (false, false) => LoewnerOrder::Incomparable,
    })
}

/// Whether both index types rank `u` and `ω` as the Loewner order says.
pub fn rankings_agree(order: LoewnerOrder, u: &IndexEntry, w: &IndexEntry) -> bool {
    let le = |a: &IndexEstimate, b: &IndexEstimate| a.estimate <= b.estimate;
    match order {
        LoewnerOrder::UDominated => le(&u.total_type1, &w.total_type1) && le(&u.total_type2, &w.total_type2),
        LoewnerOrder::OmegaDominated => le(&w.total_type1, &u.total_type1) && le(&w.total_type2, &u.total_type2),
        LoewnerOrder::Equal | LoewnerOrder::Incomparable => true,
    }
}

/// Sampling and estimation settings of one analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationSettings {
    /// Rows of the pick-freeze design.
    pub m: usize,
    /// Rows used for `Σ̂` (defaults to `m`).
    #[serde(default)]
    pub big_m: Option<usize>,
    #[serde(default = "default_generator")]
    pub generator: Generator,
    #[serde(default)]
    pub seed: u64,
    /// Digital shift of Sobol' panels (default on).
    #[serde(default)]
    pub scramble: Option<bool>,
}

fn default_generator() -> Generator {
    Generator::Sobol
}

impl EstimationSettings {
    pub fn new(m: usize, generator: Generator, seed: u64) -> Self {
        EstimationSettings {
            m,
            big_m: None,
            generator,
            seed,
            scramble: None,
        }
    }

    pub fn big_m(&self) -> usize {
        self.big_m.unwrap_or(self.m)
    }

    pub fn sample_plan(&self, layout: ColumnLayout) -> SamplePlan {
        let mut plan = SamplePlan::new(self.generator, self.seed, layout);
        if let Some(s) = self.scramble {
            plan.scramble = s && self.generator == Generator::Sobol;
        }
        plan
    }
}

/// Indices for all requested subsets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexReport {
    pub output_dim: usize,
    pub m: usize,
    pub big_m: usize,
    /// Set when `m = M`: intervals rely on a heuristic, since the asymptotics
    /// assume `m/M → 0`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interval_note: Option<String>,
    pub entries: Vec<IndexEntry>,
}

fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

impl IndexReport {
    pub fn entry(&self, subset: &[usize]) -> Option<&IndexEntry> {
        let mut key = subset.to_vec();
        key.sort_unstable();
        self.entries.iter().find(|e| e.subset == key)
    }

    /// Rows `subset,index_family,order,estimate,stderr,ci_lo,ci_hi`; scalar
    /// models report the `ds` family only, since both types coincide.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("subset,index_family,order,estimate,stderr,ci_lo,ci_hi\n");
        for e in &self.entries {
            let name = e.subset.iter().map(|i| format!("X{i}")).collect::<Vec<_>>().join(":");
            let mut rows: Vec<(&str, &str, &IndexEstimate)> = Vec::new();
            if self.output_dim == 1 {
                rows.push(("ds", "first", &e.first_type1));
                rows.push(("ds", "total", &e.total_type1));
            } else {
                rows.push(("dgsi1", "first", &e.first_type1));
                rows.push(("dgsi1", "total", &e.total_type1));
                rows.push(("dgsi2", "first", &e.first_type2));
                rows.push(("dgsi2", "total", &e.total_type2));
            }
            for (family, order, v) in rows {
                let _ = writeln!(
                    s,
                    "{name},{family},{order},{},{},{},{}",
                    fmt_num(v.estimate),
                    fmt_opt(v.stderr),
                    fmt_opt(v.ci_lo),
                    fmt_opt(v.ci_hi)
                );
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Everything produced by one analysis run.
#[derive(Debug, Clone)]
pub struct AnalysisResult {
    pub plan: PermutationPlan,
    pub routing: RoutingPlan,
    pub report: IndexReport,
    pub layout: ColumnLayout,
    /// Representation whose `A, B` gave `Σ̂`.
    pub sigma_representation: usize,
    pub sigma: SquareMatrix,
    /// `D̂_u^tot` per subset, in request order.
    pub total_covariances: Vec<SquareMatrix>,
    pub first_covariances: Vec<SquareMatrix>,
}

impl AnalysisResult {
    pub fn representations_built(&self) -> usize {
        self.routing.labels.len()
    }
}

/// Routes the subsets, builds only the needed representations, and
/// estimates all indices on one pair of panels.
pub fn run_analysis(
    structure: &BlockStructure,
    model: Arc<dyn Model>,
    subsets: &[Vec<usize>],
    settings: &EstimationSettings,
) -> Result<AnalysisResult> {
    if subsets.is_empty() {
        return Err(Error::Config("no subsets requested".into()));
    }
    let plan = PermutationPlan::for_structure(structure)?;
    let routing = RoutingPlan::build(&plan, structure, subsets)?;
    let reps: Vec<Representation> = routing
        .labels
        .iter()
        .map(|l| build_representation(structure, &plan, model.clone(), l))
        .collect::<Result<_>>()?;
    let layout = ColumnLayout::for_structure(structure);
    let sample = settings.sample_plan(layout.clone());
    let (m, big_m) = (settings.m, settings.big_m());
    let rows = m.max(big_m);
    let p1 = generate_panel(&sample, rows, PanelId::First)?;
    let p2 = generate_panel(&sample, rows, PanelId::Second)?;

    let mut cache: BTreeMap<usize, (Arc<Outputs>, Arc<Outputs>)> = BTreeMap::new();
    for rep in &reps {
        cache.insert(rep.index(), base_outputs(rep, &p1, &p2, rows)?);
    }
    let sigma_rep = reps[0].index();
    let (a0, b0) = &cache[&sigma_rep];
    let sigma = estimate_sigma(a0, b0, big_m)?;

    let mut entries = Vec::with_capacity(subsets.len());
    let mut totals = Vec::with_capacity(subsets.len());
    let mut firsts = Vec::with_capacity(subsets.len());
    for route in &routing.routes {
        let rep = reps
            .iter()
            .find(|r| r.index() == route.representation)
            .expect("routed representation was built");
        let batch = pick_freeze_evaluate(rep, structure, &route.subset, &p1, &p2, m, cache[&rep.index()].clone())?;
        let entry = compute_indices(&route.subset, rep.index(), &batch, &sigma);
        totals.push(estimate_total(&batch));
        firsts.push(estimate_first_order(&batch));
        entries.push(entry);
    }
    let report = IndexReport {
        output_dim: model.output_dim(),
        m,
        big_m,
        interval_note: (m == big_m).then(|| "m=M heuristic".to_string()),
        entries,
    };
    Ok(AnalysisResult {
        plan,
        routing,
        report,
        layout,
        sigma_representation: sigma_rep,
        sigma: sigma.matrix,
        total_covariances: totals,
        first_covariances: firsts,
    })
}
