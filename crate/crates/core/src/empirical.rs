//! Dependency models for distributions known only through samples:
//! rejection sampling of constrained vectors and pinball-loss
//! conditional-quantile fits.

use crate::error::{Error, Result};
use crate::margins::Margin;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

/// Trials after which the acceptance rate is judged.
pub const FEASIBILITY_TRIALS: u64 = 1_000_000;
/// Acceptance rate below which a constraint is declared infeasible.
pub const MIN_ACCEPTANCE: f64 = 1e-4;

type BaseFn = Arc<dyn Fn(&mut ChaCha8Rng, &mut [f64]) + Send + Sync>;
type MapFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type PredicateFn = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

/// Acceptance region for the constraint map `c(x)`.
#[derive(Clone)]
pub enum Region {
    /// `lo <= c(x) <= hi` componentwise, with `c: R^d -> R^n`.
    Box {
        map: MapFn,
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    Predicate(PredicateFn),
}

/// Draws `X ~ F` and keeps the draws with `c(X)` in the region.
#[derive(Clone)]
pub struct ConstrainedSampler {
    dim: usize,
    base: BaseFn,
    region: Region,
}

impl fmt::Debug for ConstrainedSampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConstrainedSampler").field("dim", &self.dim).finish_non_exhaustive()
    }
}

/// Output of [`rejection_sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct RejectionSample {
    pub dim: usize,
    /// Accepted rows, row-major.
    pub data: Vec<f64>,
    pub attempts: u64,
    pub accepted: u64,
}

impl RejectionSample {
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.attempts.max(1) as f64
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.rows().map(|r| r[k]).collect()
    }
}

impl ConstrainedSampler {
    pub fn new(dim: usize, base: impl Fn(&mut ChaCha8Rng, &mut [f64]) + Send + Sync + 'static, region: Region) -> Self {
        ConstrainedSampler {
            dim,
            base: Arc::new(base),
            region,
        }
    }

    /// Independent components with the given margins.
    pub fn independent(margins: Vec<Margin>, region: Region) -> Self {
        let dim = margins.len();
        Self::new(
            dim,
            move |rng, out| {
                for (o, m) in out.iter_mut().zip(&margins) {
                    *o = m.quantile_interior(crate::margins::clamp_open(rng.random::<f64>()));
                }
            },
            region,
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn accepts(&self, x: &[f64], scratch: &mut Vec<f64>) -> bool {
        match &self.region {
            Region::Predicate(p) => p(x),
            Region::Box { map, lo, hi } => {
                scratch.resize(lo.len(), 0.0);
                map(x, scratch);
                scratch.iter().zip(lo.iter().zip(hi)).all(|(c, (l, h))| l <= c && c <= h)
            }
        }
    }
}

impl Region {
    pub fn predicate(p: impl Fn(&[f64]) -> bool + Send + Sync + 'static) -> Self {
        Region::Predicate(Arc::new(p))
    }

    pub fn boxed(map: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        Region::Box {
            map: Arc::new(map),
            lo,
            hi,
        }
    }
}

/// Draws `m` accepted rows; deterministic given `seed`.
///
/// Fails when fewer than `MIN_ACCEPTANCE` of the first
/// `FEASIBILITY_TRIALS` attempts were accepted.
pub fn rejection_sample(sampler: &ConstrainedSampler, m: usize, seed: u64) -> Result<RejectionSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = sampler.dim;
    let mut data = Vec::with_capacity(m * d);
    let mut row = vec![0.0; d];
    let mut scratch = Vec::new();
    let (mut attempts, mut accepted) = (0u64, 0u64);
    while (accepted as usize) < m {
        (sampler.base)(&mut rng, &mut row);
        attempts += 1;
        if sampler.accepts(&row, &mut scratch) {
            accepted += 1;
            data.extend_from_slice(&row);
        }
        if attempts == FEASIBILITY_TRIALS {
            let rate = accepted as f64 / attempts as f64;
            if rate < MIN_ACCEPTANCE {
                return Err(Error::Infeasible { rate, attempts });
            }
        }
    }
    Ok(RejectionSample {
        dim: d,
        data,
        attempts,
        accepted,
    })
}

/// Check loss `L(x, u) = x (u - 1{x < 0})`.
pub fn pinball_loss(x: f64, u: f64) -> f64 {
    x * (u - if x < 0.0 { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    One,
    X,
    X2,
    AbsX,
}

impl Feature {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Feature::One => 1.0,
            Feature::X => x,
            Feature::X2 => x * x,
            Feature::AbsX => x.abs(),
        }
    }
}

pub fn default_features() -> Vec<Feature> {
    vec![Feature::One, Feature::X, Feature::X2]
}

/// `k / (n + 1)` for `k = 1..=n`.
pub fn equispaced_levels(n: usize) -> Vec<f64> {
    (1..=n).map(|k| k as f64 / (n + 1) as f64).collect()
}

/// Options for [`fit_quantile_dm`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub levels: Vec<f64>,
    pub features: Vec<Feature>,
    /// Ridge weight on the non-constant coefficients.
    pub ridge: f64,
    /// Relative objective decrease that stops the iterations.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            levels: equispaced_levels(99),
            features: default_features(),
            ridge: 1e-6,
            tolerance: 1e-6,
            max_iterations: 5000,
        }
    }
}

/// Fitted conditional-quantile curves `x_w ≈ f(x_j; θ(z))` over a level grid.
///
/// JSON layout, in key order: `features`, `ridge`, `levels`,
/// `coefficients` (one row per level, one entry per feature).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileDm {
    pub features: Vec<Feature>,
    pub ridge: f64,
    pub levels: Vec<f64>,
    pub coefficients: Vec<Vec<f64>>,
}

impl QuantileDm {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let q: QuantileDm = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if q.levels.is_empty()
            || q.coefficients.len() != q.levels.len()
            || q.coefficients.iter().any(|c| c.len() != q.features.len())
            || q.levels.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Parameter("inconsistent quantile coefficient table".into()));
        }
        Ok(q)
    }

    fn raw_curve(&self, k: usize, x: f64) -> f64 {
        self.coefficients[k].iter().zip(&self.features).map(|(c, f)| c * f.eval(x)).sum()
    }

    /// Fitted quantiles at `x` for every grid level, made nondecreasing by an
    /// isotonic (pool-adjacent-violators) pass.
    pub fn monotone_curves(&self, x: f64) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.levels.len()).map(|k| self.raw_curve(k, x)).collect();
        isotonic(&raw)
    }

    /// Conditional quantile at level `z`: linear between grid levels,
    /// clamped to the extreme curves outside the grid.
    pub fn evaluate(&self, x: f64, z: f64) -> f64 {
        let q = self.monotone_curves(x);
        let lv = &self.levels;
        let n = lv.len();
        if z <= lv[0] {
            return q[0];
        }
        if z >= lv[n - 1] {
            return q[n - 1];
        }
        let k = lv.partition_point(|&l| l <= z);
        let (l0, l1) = (lv[k - 1], lv[k]);
        let t = (z - l0) / (l1 - l0);
        q[k - 1] + t * (q[k] - q[k - 1])
    }
}

/// Unweighted least-squares isotonic fit.
pub fn isotonic(y: &[f64]) -> Vec<f64> {
    let mut means: Vec<f64> = Vec::with_capacity(y.len());
    let mut counts: Vec<usize> = Vec::with_capacity(y.len());
    for &v in y {
        means.push(v);
        counts.push(1);
        while means.len() > 1 && means[means.len() - 2] > means[means.len() - 1] {
            let (m1, c1) = (means.pop().unwrap(), counts.pop().unwrap());
            let (m0, c0) = (means.pop().unwrap(), counts.pop().unwrap());
            let c = c0 + c1;
            means.push((m0 * c0 as f64 + m1 * c1 as f64) / c as f64);
            counts.push(c);
        }
    }
    let mut out = Vec::with_capacity(y.len());
    for (m, c) in means.into_iter().zip(counts) {
        out.extend(std::iter::repeat_n(m, c));
    }
    out
}

/// Result of one level's fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelFit {
    pub coefficients: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

fn objective(design: &DMatrix<f64>, y: &[f64], theta: &DVector<f64>, z: f64, ridge: f64) -> f64 {
    let fitted = design * theta;
    let loss: f64 = y.iter().zip(fitted.iter()).map(|(yi, fi)| pinball_loss(yi - fi, z)).sum();
    let pen: f64 = theta.iter().skip(1).map(|t| t * t).sum();
    loss + 0.5 * ridge * pen
}

/// Minimizes `Σ L(y_i - f(x_i; θ), z) + (ridge/2) Σ_{k>0} θ_k²` by the
/// majorize-minimize scheme for quantile regression: each step solves a
/// weighted ridge least-squares problem with weights `1/(ε + |r_i|)`.
pub fn fit_level(x: &[f64], y: &[f64], z: f64, features: &[Feature], ridge: f64, tolerance: f64, max_iterations: usize) -> Result<LevelFit> {
    let m = x.len();
    let p = features.len();
    let design = DMatrix::from_fn(m, p, |i, k| features[k].eval(x[i]));
    let yv = DVector::from_column_slice(y);
    let mut penalty = DMatrix::<f64>::identity(p, p) * ridge;
    if let Some(k) = features.iter().position(|f| *f == Feature::One) {
        penalty[(k, k)] = 0.0;
    }
    let mean = y.iter().sum::<f64>() / m as f64;
    let spread = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64).sqrt();
    let eps = 1e-7 * (spread + 1e-9 * (1.0 + mean.abs()));
    // Objectives below this are exact fits up to rounding.
    let negligible = 1e-14 * y.iter().map(|v| v.abs()).sum::<f64>();

    // Least-squares start.
    let gram = design.transpose() * &design + &penalty;
    let mut theta = solve(&gram, &(design.transpose() * &yv))
        .or_else(|| solve(&(gram.clone() + DMatrix::identity(p, p) * 1e-12 * gram.trace().max(1.0)), &(design.transpose() * &yv)))
        .ok_or_else(|| Error::Fitting("singular design matrix".into()))?;
    let mut obj = objective(&design, y, &theta, z, ridge);
    let ones_proj = design.transpose() * DVector::from_element(m, z - 0.5);
    for it in 1..=max_iterations {
        if obj <= negligible {
            return Ok(LevelFit {
                coefficients: theta.iter().copied().collect(),
                objective: obj,
                iterations: it - 1,
            });
        }
        let resid = &yv - &design * &theta;
        let w: Vec<f64> = resid.iter().map(|r| 1.0 / (eps + r.abs())).collect();
        let mut lhs = penalty.clone();
        let mut rhs = ones_proj.clone();
        for i in 0..m {
            let wi = 0.5 * w[i];
            for a in 0..p {
                let xa = design[(i, a)];
                rhs[a] += wi * xa * y[i];
                for b in 0..=a {
                    lhs[(a, b)] += wi * xa * design[(i, b)];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                lhs[(b, a)] = lhs[(a, b)];
            }
        }
        let next = solve(&lhs, &rhs).ok_or_else(|| Error::Fitting(format!("singular weighted system at level {z}")))?;
        let next_obj = objective(&design, y, &next, z, ridge);
        let decrease = (obj - next_obj) / obj.abs();
        if next_obj <= obj {
            theta = next;
        }
        let done = decrease.abs() < tolerance;
        obj = obj.min(next_obj);
        if done {
            return Ok(LevelFit {
                coefficients: theta.iter().copied().collect(),
                objective: obj,
                iterations: it,
            });
        }
    }
    Err(Error::Fitting(format!(
        "level {z}: no convergence after {max_iterations} iterations (objective {obj:.6e})"
    )))
}

fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().cholesky().map(|c| c.solve(b))
}

/// Fits one curve per grid level (levels in parallel).
pub fn fit_quantile_dm(x_cond: &[f64], x_dep: &[f64], options: &FitOptions) -> Result<QuantileDm> {
    let m = x_cond.len();
    if m != x_dep.len() {
        return Err(Error::Parameter(format!("sample columns differ in length: {m} vs {}", x_dep.len())));
    }
    if m < 50 {
        return Err(Error::Parameter(format!("quantile fit needs at least 50 points, got {m}")));
    }
    if options.features.is_empty() {
        return Err(Error::Parameter("feature set is empty".into()));
    }
    if options.levels.iter().any(|&z| !(z > 0.0 && z < 1.0)) || options.levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter("levels must be increasing and inside (0, 1)".into()));
    }
    if !(options.ridge >= 0.0) {
        return Err(Error::Parameter("ridge weight must be >= 0".into()));
    }
    if x_cond.iter().chain(x_dep).any(|v| !v.is_finite()) {
        return Err(Error::Parameter("sample contains non-finite values".into()));
    }
    let fits = options
        .levels
        .par_iter()
        .map(|&z| {
            fit_level(
                x_cond,
                x_dep,
                z,
                &options.features,
                options.ridge,
                options.tolerance,
                options.max_iterations,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantileDm {
        features: options.features.clone(),
        ridge: options.ridge,
        levels: options.levels.clone(),
        coefficients: fits.into_iter().map(|f| f.coefficients).collect(),
    })
}
