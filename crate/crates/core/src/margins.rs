//! Univariate marginal distributions and the distributional transform.
//!
//! A [`MarginSpec`] is the serializable description (family plus parameters,
//! tagged by `family` in JSON). [`Margin`] is the validated form that answers
//! CDF, generalized-inverse and distributional-transform queries.
//!
//! Discrete families (Bernoulli, finite support, empirical samples) share a
//! single atom-table implementation so that `inverse_cdf(tau(x, u)) == x`
//! holds exactly, draw by draw.

use crate::error::{Error, Result};
use crate::special;
use serde::{Deserialize, Serialize};

/// Serializable description of a univariate margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MarginSpec {
    Uniform {
        a: f64,
        b: f64,
    },
    Normal {
        mu: f64,
        sigma: f64,
    },
    StudentT {
        nu: f64,
        #[serde(default)]
        location: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    Beta {
        alpha: f64,
        beta: f64,
    },
    Bernoulli {
        p: f64,
    },
    DiscreteFinite {
        values: Vec<f64>,
        probabilities: Vec<f64>,
    },
    /// Sample values; sorted on validation.
    Empirical {
        sample: Vec<f64>,
    },
}

fn one() -> f64 {
    1.0
}

impl MarginSpec {
    pub fn standard_uniform() -> Self {
        MarginSpec::Uniform { a: 0.0, b: 1.0 }
    }

    pub fn standard_normal() -> Self {
        MarginSpec::Normal {
            mu: 0.0,
            sigma: 1.0,
        }
    }
}

/// Atoms of a discrete law: strictly increasing support points with their
/// masses and cumulative masses.
#[derive(Debug, Clone, PartialEq)]
struct Atoms {
    values: Vec<f64>,
    masses: Vec<f64>,
    cumulative: Vec<f64>,
}

impl Atoms {
    fn from_pairs(mut pairs: Vec<(f64, f64)>) -> Self {
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut values: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut masses: Vec<f64> = Vec::with_capacity(pairs.len());
        for (v, p) in pairs {
            match values.last() {
                Some(&last) if last == v => *masses.last_mut().unwrap() += p,
                _ => {
                    values.push(v);
                    masses.push(p);
                }
            }
        }
        let mut cumulative = Vec::with_capacity(masses.len());
        let mut acc = 0.0;
        for &p in &masses {
            acc += p;
            cumulative.push(acc);
        }
        // Pin the last cumulative mass to one; the sum was validated to 1e-12.
        if let Some(last) = cumulative.last_mut() {
            *last = 1.0;
        }
        Atoms {
            values,
            masses,
            cumulative,
        }
    }

    /// Index of the largest atom `<= x`, if any.
    fn floor_index(&self, x: f64) -> Option<usize> {
        let n = self.values.partition_point(|&v| v <= x);
        n.checked_sub(1)
    }

    fn cdf(&self, x: f64) -> f64 {
        self.floor_index(x).map_or(0.0, |k| self.cumulative[k])
    }

    /// `(P(X < x), P(X = x))`.
    fn split(&self, x: f64) -> (f64, f64) {
        let below = self.values.partition_point(|&v| v < x);
        let lower = if below == 0 {
            0.0
        } else {
            self.cumulative[below - 1]
        };
        let mass = if below < self.values.len() && self.values[below] == x {
            self.masses[below]
        } else {
            0.0
        };
        (lower, mass)
    }

    /// `inf { x : F(x) >= p }`.
    fn inverse(&self, p: f64) -> f64 {
        let k = self.cumulative.partition_point(|&c| c < p);
        self.values[k.min(self.values.len() - 1)]
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Uniform { a: f64, b: f64 },
    Normal { mu: f64, sigma: f64 },
    StudentT { nu: f64, location: f64, scale: f64 },
    Beta { alpha: f64, beta: f64 },
    Discrete(Atoms),
}

/// A validated univariate margin.
#[derive(Debug, Clone, PartialEq)]
pub struct Margin {
    spec: MarginSpec,
    kind: Kind,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must be finite and > 0, got {v}")))
    }
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must be finite, got {v}")))
    }
}

impl Margin {
    pub fn new(spec: MarginSpec) -> Result<Self> {
        let kind = match &spec {
            MarginSpec::Uniform { a, b } => {
                finite("a", *a)?;
                finite("b", *b)?;
                if a >= b {
                    return Err(Error::Parameter(format!("uniform requires a < b, got [{a}, {b}]")));
                }
                Kind::Uniform { a: *a, b: *b }
            }
            MarginSpec::Normal { mu, sigma } => {
                finite("mu", *mu)?;
                positive("sigma", *sigma)?;
                Kind::Normal {
                    mu: *mu,
                    sigma: *sigma,
                }
            }
            MarginSpec::StudentT {
                nu,
                location,
                scale,
            } => {
                positive("nu", *nu)?;
                finite("location", *location)?;
                positive("scale", *scale)?;
                Kind::StudentT {
                    nu: *nu,
                    location: *location,
                    scale: *scale,
                }
            }
            MarginSpec::Beta { alpha, beta } => {
                positive("alpha", *alpha)?;
                positive("beta", *beta)?;
                Kind::Beta {
                    alpha: *alpha,
                    beta: *beta,
                }
            }
            MarginSpec::Bernoulli { p } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::Parameter(format!("bernoulli p must lie in [0, 1], got {p}")));
                }
                Kind::Discrete(Atoms::from_pairs(vec![(0.0, 1.0 - p), (1.0, *p)]))
            }
            MarginSpec::DiscreteFinite {
                values,
                probabilities,
            } => {
                if values.is_empty() || values.len() != probabilities.len() {
                    return Err(Error::Parameter(format!(
                        "discrete support needs matching non-empty values/probabilities ({} vs {})",
                        values.len(),
                        probabilities.len()
                    )));
                }
                for &v in values {
                    finite("support value", v)?;
                }
                if probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(Error::Parameter("probabilities must lie in [0, 1]".into()));
                }
                let total: f64 = probabilities.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::Parameter(format!("probabilities sum to {total}, expected 1")));
                }
                Kind::Discrete(Atoms::from_pairs(
                    values.iter().copied().zip(probabilities.iter().copied()).collect(),
                ))
            }
            MarginSpec::Empirical { sample } => {
                if sample.is_empty() {
                    return Err(Error::Parameter("empirical margin needs at least one value".into()));
                }
                for &v in sample {
                    finite("sample value", v)?;
                }
                let w = 1.0 / sample.len() as f64;
                Kind::Discrete(Atoms::from_pairs(sample.iter().map(|&v| (v, w)).collect()))
            }
        };
        Ok(Margin { spec, kind })
    }

    pub fn spec(&self) -> &MarginSpec {
        &self.spec
    }

    /// `true` for families with a continuous CDF.
    pub fn is_continuous(&self) -> bool {
        !matches!(self.kind, Kind::Discrete(_))
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match &self.kind {
            Kind::Uniform { a, b } => ((x - a) / (b - a)).clamp(0.0, 1.0),
            Kind::Normal { mu, sigma } => special::norm_cdf((x - mu) / sigma),
            Kind::StudentT {
                nu,
                location,
                scale,
            } => special::student_cdf((x - location) / scale, *nu),
            Kind::Beta { alpha, beta } => special::beta_cdf(x, *alpha, *beta),
            Kind::Discrete(atoms) => atoms.cdf(x),
        }
    }

    /// Generalized inverse `inf { x : F(x) >= p }`.
    ///
    /// At `p = 0` or `p = 1` the support infimum/supremum is returned when
    /// finite; an infinite endpoint is a domain error.
    pub fn inverse_cdf(&self, p: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
        }
        if p == 0.0 || p == 1.0 {
            let (lo, hi) = self.support();
            let v = if p == 0.0 { lo } else { hi };
            return if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Domain(format!("generalized inverse is infinite at p = {p}")))
            };
        }
        Ok(self.quantile_interior(p))
    }

    /// Quantile for `p` strictly inside `(0, 1)`; no domain checks.
    pub(crate) fn quantile_interior(&self, p: f64) -> f64 {
        match &self.kind {
            Kind::Uniform { a, b } => a + p * (b - a),
            Kind::Normal { mu, sigma } => mu + sigma * special::norm_quantile(p),
            Kind::StudentT {
                nu,
                location,
                scale,
            } => location + scale * special::student_quantile(p, *nu),
            Kind::Beta { alpha, beta } => special::beta_quantile(p, *alpha, *beta),
            Kind::Discrete(atoms) => atoms.inverse(p),
        }
    }

    /// Support `[inf, sup]`, possibly infinite.
    pub fn support(&self) -> (f64, f64) {
        match &self.kind {
            Kind::Uniform { a, b } => (*a, *b),
            Kind::Normal { .. } | Kind::StudentT { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            Kind::Beta { .. } => (0.0, 1.0),
            Kind::Discrete(atoms) => (atoms.values[0], *atoms.values.last().unwrap()),
        }
    }

    /// `tau(x, lambda) = P(X < x) + lambda * P(X = x)`; equals `F(x)` for
    /// continuous margins whatever `lambda` is.
    pub fn distributional_transform(&self, x: f64, lambda: f64) -> f64 {
        match &self.kind {
            Kind::Discrete(atoms) => {
                let (lower, mass) = atoms.split(x);
                lower + lambda * mass
            }
            _ => self.cdf(x),
        }
    }

    /// `F^{-1}(Φ(y))`, exact for normal margins.
    pub(crate) fn from_normal_score(&self, y: f64) -> f64 {
        match &self.kind {
            Kind::Normal { mu, sigma } => mu + sigma * y,
            _ => self.quantile_interior(clamp_open(special::norm_cdf(y))),
        }
    }

    /// `Φ^{-1}(v)` where `v` is this margin's (distributional) transform of `x`.
    pub(crate) fn to_normal_score(&self, x: f64, lambda: f64) -> f64 {
        match &self.kind {
            Kind::Normal { mu, sigma } => (x - mu) / sigma,
            _ => special::norm_quantile(clamp_open(self.distributional_transform(x, lambda))),
        }
    }

    /// `F^{-1}(T_nu(y))`, exact for Student margins with the same `nu`.
    pub(crate) fn from_t_score(&self, y: f64, copula_nu: f64) -> f64 {
        match &self.kind {
            Kind::StudentT {
                nu,
                location,
                scale,
            } if *nu == copula_nu => location + scale * y,
            _ => self.quantile_interior(clamp_open(special::student_cdf(y, copula_nu))),
        }
    }

    pub(crate) fn to_t_score(&self, x: f64, lambda: f64, copula_nu: f64) -> f64 {
        match &self.kind {
            Kind::StudentT {
                nu,
                location,
                scale,
            } if *nu == copula_nu => (x - location) / scale,
            _ => special::student_quantile(
                clamp_open(self.distributional_transform(x, lambda)),
                copula_nu,
            ),
        }
    }
}

/// Smallest positive probability used to keep quantiles finite.
pub const OPEN_EPS: f64 = 5.421_010_862_427_522e-20; // 2^-64

/// Clamp a probability into the open unit interval.
pub fn clamp_open(p: f64) -> f64 {
    p.clamp(OPEN_EPS, 1.0 - f64::EPSILON / 2.0)
}

pub fn cdf(margin: &Margin, x: f64) -> f64 {
    margin.cdf(x)
}

pub fn inverse_cdf(margin: &Margin, p: f64) -> Result<f64> {
    margin.inverse_cdf(p)
}

pub fn distributional_transform(margin: &Margin, x: f64, lambda: f64) -> f64 {
    margin.distributional_transform(x, lambda)
}
