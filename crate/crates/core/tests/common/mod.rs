#![allow(dead_code)]
// Shared statistics and direct samplers for the integration tests.

use dgsi::depmodel::{CopulaKind, DependencyModel, DmFamily};
use dgsi::linalg::SquareMatrix;
use dgsi::margins::Margin;
use dgsi::representations::BlockStructure;
use dgsi::special::{norm_cdf, student_cdf};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng) -> f64 {
    // Open interval, avoiding exact 0.
    (r.random::<u64>() >> 11) as f64 * (1.0 / (1u64 << 53) as f64) + 0.5 / (1u64 << 53) as f64
}

pub fn std_normal(r: &mut ChaCha8Rng) -> f64 {
    dgsi::special::norm_quantile(uniform(r))
}

/// One-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS p-value with Stephens' finite-sample correction.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lam = (sn + 0.12 + 0.11 / sn) * d;
    if lam < 0.2 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * kf * kf * lam * lam).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

pub fn ks_pass(sample: &[f64], cdf: impl Fn(f64) -> f64, alpha: f64) -> (bool, f64) {
    let p = ks_pvalue(ks_statistic(sample, cdf), sample.len());
    (p > alpha, p)
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    for (k, &i) in idx.iter().enumerate() {
        r[i] = k as f64;
    }
    r
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

/// Standardized difference of two independent Spearman correlations
/// (Fisher scale, variance 1.06/(n-3)).
pub fn spearman_z(r1: f64, n1: usize, r2: f64, n2: usize) -> f64 {
    let se = (1.06 / (n1 as f64 - 3.0) + 1.06 / (n2 as f64 - 3.0)).sqrt();
    (r1.atanh() - r2.atanh()) / se
}

/// `∫ (F_x - F_y)^2 dt` for the empirical CDFs; the 1-D energy distance is
/// twice this.
fn cramer_distance(x: &[f64], y: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = x.iter().map(|&v| (v, true)).chain(y.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let (mut fx, mut fy, mut acc) = (0.0, 0.0, 0.0);
    for w in 0..all.len() {
        if all[w].1 {
            fx += 1.0 / nx;
        } else {
            fy += 1.0 / ny;
        }
        if w + 1 < all.len() {
            let dt = all[w + 1].0 - all[w].0;
            acc += (fx - fy) * (fx - fy) * dt;
        }
    }
    acc
}

/// Permutation p-value of the two-sample energy statistic for scalars.
pub fn energy_test(x: &[f64], y: &[f64], permutations: usize, seed: u64) -> f64 {
    let observed = cramer_distance(x, y);
    let mut pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let mut r = rng(seed);
    let mut exceed = 0;
    for _ in 0..permutations {
        for i in (1..pooled.len()).rev() {
            let j = r.random_range(0..=i);
            pooled.swap(i, j);
        }
        if cramer_distance(&pooled[..x.len()], &pooled[x.len()..]) >= observed {
            exceed += 1;
        }
    }
    (exceed + 1) as f64 / (permutations + 1) as f64
}

/// Draws `n` rows (columns in local block order) from a dependency model
/// with independent uniform slot inputs; returns column-major components.
pub fn push_forward(dm: &DependencyModel, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let d = dm.dim();
    let mut r = rng(seed);
    let mut cols = vec![Vec::with_capacity(n); d];
    let mut inputs = vec![0.0; dm.slots().len()];
    let mut out = vec![0.0; d];
    for _ in 0..n {
        for (k, v) in inputs.iter_mut().enumerate() {
            *v = dm.sample_slot(k, uniform(&mut r));
        }
        dm.evaluate(&inputs, &mut out);
        for (pos, &local) in dm.order().iter().enumerate() {
            cols[local].push(out[pos]);
        }
    }
    cols
}

fn chi_square(r: &mut ChaCha8Rng, nu: f64) -> f64 {
    let k = nu.round() as usize;
    assert!((nu - k as f64).abs() < 1e-12, "direct Student sampler needs integer nu");
    (0..k).map(|_| std_normal(r).powi(2)).sum()
}

/// Direct draw of one block: Cholesky for copulas, rejection for the simplex.
pub fn direct_block(family: &DmFamily, r: &mut ChaCha8Rng) -> Vec<f64> {
    match family {
        DmFamily::Copula { copula, margins } => {
            let d = copula.dim();
            let l: &SquareMatrix = copula.cholesky();
            let n: Vec<f64> = (0..d).map(|_| std_normal(r)).collect();
            let y: Vec<f64> = (0..d).map(|i| (0..=i).map(|k| l.get(i, k) * n[k]).sum()).collect();
            let ms: Vec<Margin> = margins.iter().cloned().map(|m| Margin::new(m).unwrap()).collect();
            match copula.kind() {
                CopulaKind::Gaussian => y.iter().zip(&ms).map(|(v, m)| m.inverse_cdf(norm_cdf(*v)).unwrap()).collect(),
                CopulaKind::Student { nu } => {
                    let s = (nu / chi_square(r, nu)).sqrt();
                    y.iter()
                        .zip(&ms)
                        .map(|(v, m)| m.inverse_cdf(student_cdf(v * s, nu)).unwrap())
                        .collect()
                }
            }
        }
        DmFamily::Simplex => loop {
            let (a, b) = (uniform(r), uniform(r));
            if a + b <= 1.0 {
                break vec![a, b];
            }
        },
        other => panic!("no direct sampler for {}", other.name()),
    }
}

/// Direct joint draw of all `d` inputs of a structure (0-based vector).
pub fn direct_inputs(structure: &BlockStructure, r: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = vec![0.0; structure.d()];
    for (&i, m) in structure.independent().iter().zip(structure.independent_margins()) {
        x[i - 1] = m.inverse_cdf(uniform(r)).unwrap();
    }
    for blk in structure.dependent() {
        let v = direct_block(&blk.family, r);
        for (&i, val) in blk.indices.iter().zip(v) {
            x[i - 1] = val;
        }
    }
    x
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Outcome of a statistical battery: the checks that failed.
#[derive(Debug, Default)]
pub struct Battery {
    pub checks: usize,
    pub failures: Vec<String>,
}

impl Battery {
    pub fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failures.push(what());
        }
    }
}

/// Pushed-forward samples of every lead order of `family` against the
/// direct sampler: per-margin KS and pairwise Spearman differences, each at
/// level `alpha / checks` so that the whole battery has level `alpha`.
pub fn dm_battery(family: &DmFamily, n: usize, alpha: f64, seed: u64, bat: &mut Battery) {
    let d = family.dim();
    let has_margins = matches!(family, DmFamily::Copula { .. });
    let checks = d * (if has_margins { d } else { 0 } + d * (d - 1) / 2);
    let level = alpha / checks as f64;
    let z_crit = dgsi::special::norm_quantile(1.0 - level / 2.0).max(3.0);
    let mut r = rng(seed ^ 0x5eed);
    let direct: Vec<Vec<f64>> = (0..n).map(|_| direct_block(family, &mut r)).collect();
    let dcol = |k: usize| direct.iter().map(|row| row[k]).collect::<Vec<f64>>();
    let margins: Vec<Option<Margin>> = match family {
        DmFamily::Copula { margins, .. } => margins.iter().cloned().map(|m| Some(Margin::new(m).unwrap())).collect(),
        _ => vec![None; d],
    };
    for j in 0..d {
        let order: Vec<usize> = std::iter::once(j).chain((0..d).filter(|&k| k != j)).collect();
        let dm = family.build(&order).unwrap();
        let cols = push_forward(&dm, n, seed + j as u64);
        for a in 0..d {
            if let Some(m) = &margins[a] {
                let (ok, p) = ks_pass(&cols[a], |x| m.cdf(x), level);
                bat.check(ok, || format!("{} lead {j}: margin {a} KS p = {p:.2e}", family.name()));
            }
            for b in a + 1..d {
                let rho = spearman(&cols[a], &cols[b]);
                let rho0 = spearman(&dcol(a), &dcol(b));
                let z = spearman_z(rho, n, rho0, n);
                bat.check(z.abs() < z_crit, || {
                    format!("{} lead {j}: Spearman({a},{b}) {rho:.4} vs direct {rho0:.4} (z = {z:.2})", family.name())
                });
            }
        }
    }
}
