//! Dependency models: triangular maps that express the remaining components
//! of a dependent block as functions of one conditioning component and
//! independent latent variables.
//!
//! A [`DependencyModel`] is built for one ordering `(j, w_1, ..., w_{d-1})`
//! of the block's local indices. It consumes a flat list of independent
//! inputs described by its [`Slot`]s:
//!
//! * position 0: the lead value `x_j` (plus its distributional-transform
//!   uniform `lambda_j` when the lead margin is discrete);
//! * position `i >= 1`: the latent `Z_{w_i}` (plus a Rademacher sign for
//!   absolute-value symmetric models).
//!
//! Output component `i` depends on slots at positions `<= i` only, which is
//! what makes prefix conditioning a matter of freezing slots.

use crate::empirical::QuantileDm;
use crate::error::{Error, Result};
use crate::linalg::SquareMatrix;
use crate::margins::{clamp_open, Margin, MarginSpec};
use crate::special;
use std::fmt;
use std::sync::Arc;

/// Smallest admissible eigenvalue of a copula correlation matrix.
pub const MIN_EIGENVALUE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CopulaKind {
    Gaussian,
    Student { nu: f64 },
}

/// Elliptical copula with a validated correlation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CopulaSpec {
    kind: CopulaKind,
    correlation: SquareMatrix,
    cholesky: SquareMatrix,
}

impl CopulaSpec {
    pub fn gaussian(correlation: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(CopulaKind::Gaussian, correlation)
    }

    pub fn student(nu: f64, correlation: Vec<Vec<f64>>) -> Result<Self> {
        if !(nu.is_finite() && nu > 0.0) {
            return Err(Error::Parameter(format!("student copula nu must be > 0, got {nu}")));
        }
        Self::new(CopulaKind::Student { nu }, correlation)
    }

    pub fn new(kind: CopulaKind, correlation: Vec<Vec<f64>>) -> Result<Self> {
        let r = SquareMatrix::from_rows(&correlation)?;
        if r.n < 2 {
            return Err(Error::Construction("copula dimension must be at least 2".into()));
        }
        if r.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Construction("correlation matrix has non-finite entries".into()));
        }
        for i in 0..r.n {
            if (r.get(i, i) - 1.0).abs() > 1e-12 {
                return Err(Error::Construction(format!(
                    "correlation diagonal entry {} is {}, expected 1",
                    i + 1,
                    r.get(i, i)
                )));
            }
        }
        if r.max_asymmetry() > 1e-12 {
            return Err(Error::Construction("correlation matrix is not symmetric".into()));
        }
        let min_ev = r.symmetric_eigenvalues()[0];
        if min_ev < MIN_EIGENVALUE {
            return Err(Error::Construction(format!(
                "copula not positive definite: smallest eigenvalue {min_ev:.3e}"
            )));
        }
        let cholesky = r.cholesky()?;
        Ok(CopulaSpec {
            kind,
            correlation: r,
            cholesky,
        })
    }

    pub fn kind(&self) -> CopulaKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.correlation.n
    }

    pub fn correlation(&self) -> &SquareMatrix {
        &self.correlation
    }

    /// Cholesky factor in the natural index order.
    pub fn cholesky(&self) -> &SquareMatrix {
        &self.cholesky
    }

    /// Cholesky factor of `R` with rows/columns taken in `order`.
    pub fn cholesky_in_order(&self, order: &[usize]) -> Result<SquareMatrix> {
        self.correlation.permuted(order).cholesky()
    }
}

/// Law of a latent variable, as consumed by a model slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LatentLaw {
    StandardNormal,
    StudentT { nu: f64 },
    Uniform,
}

impl LatentLaw {
    /// Maps a uniform in `(0, 1)` to a draw from the law.
    pub fn quantile(&self, u: f64) -> f64 {
        match self {
            LatentLaw::StandardNormal => special::norm_quantile(clamp_open(u)),
            LatentLaw::StudentT { nu } => special::student_quantile(clamp_open(u), *nu),
            LatentLaw::Uniform => u,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlotKind {
    /// The conditioning input itself, in model space.
    Lead,
    /// Uniform `lambda` of the lead's distributional transform.
    LeadLambda,
    Latent(LatentLaw),
    /// Rademacher sign, fed as a uniform and mapped to `sign(2u - 1)`.
    Sign,
}

/// One independent input of a dependency model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slot {
    /// Position in the model's ordering (0 = lead).
    pub position: usize,
    pub kind: SlotKind,
}

/// A scalar map with an optional inverse.
#[derive(Clone)]
pub struct ScalarTransform {
    pub label: String,
    forward: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    inverse: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
}

impl fmt::Debug for ScalarTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarTransform")
            .field("label", &self.label)
            .field("invertible", &self.inverse.is_some())
            .finish()
    }
}

impl ScalarTransform {
    pub fn new(
        label: impl Into<String>,
        forward: impl Fn(f64) -> f64 + Send + Sync + 'static,
        inverse: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
    ) -> Self {
        ScalarTransform {
            label: label.into(),
            forward: Arc::new(forward),
            inverse,
        }
    }

    pub fn invertible(
        label: impl Into<String>,
        forward: impl Fn(f64) -> f64 + Send + Sync + 'static,
        inverse: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(label, forward, Some(Arc::new(inverse)))
    }

    pub fn identity() -> Self {
        Self::invertible("identity", |x| x, |y| y)
    }

    pub fn exp() -> Self {
        Self::invertible("exp", f64::exp, f64::ln)
    }

    pub fn affine(a: f64, b: f64) -> Self {
        Self::invertible(format!("affine({a}, {b})"), move |x| a + b * x, move |y| (y - a) / b)
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        (self.forward)(x)
    }

    pub fn apply_inverse(&self, y: f64) -> Option<f64> {
        self.inverse.as_ref().map(|f| f(y))
    }

    pub fn has_inverse(&self) -> bool {
        self.inverse.is_some()
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Gaussian {
        margins: Vec<Margin>,
        chol: SquareMatrix,
    },
    Student {
        nu: f64,
        margins: Vec<Margin>,
        chol: SquareMatrix,
    },
    Simplex {
        lead: Margin,
    },
    Transformed {
        base: Box<DependencyModel>,
        lead: ScalarTransform,
        components: Vec<ScalarTransform>,
    },
    AbsSymmetric {
        inner: Box<DependencyModel>,
    },
    Quantile {
        lead: Margin,
        curve: Arc<QuantileDm>,
    },
}

/// An evaluatable dependency model for one ordering of a block.
#[derive(Debug, Clone)]
pub struct DependencyModel {
    order: Vec<usize>,
    slots: Vec<Slot>,
    kind: Kind,
}

fn check_order(order: &[usize], d: usize) -> Result<()> {
    let mut seen = vec![false; d];
    if order.len() != d {
        return Err(Error::Construction(format!(
            "ordering has {} entries for a block of dimension {d}",
            order.len()
        )));
    }
    for &k in order {
        if k >= d || seen[k] {
            return Err(Error::Construction(format!("ordering {order:?} is not a permutation of 0..{d}")));
        }
        seen[k] = true;
    }
    Ok(())
}

fn full_order(j: usize, rest: &[usize]) -> Vec<usize> {
    std::iter::once(j).chain(rest.iter().copied()).collect()
}

fn copula_slots(d: usize, lead_discrete: bool, law: impl Fn(usize) -> LatentLaw) -> Vec<Slot> {
    let mut slots = vec![Slot {
        position: 0,
        kind: SlotKind::Lead,
    }];
    for i in 1..d {
        slots.push(Slot {
            position: i,
            kind: SlotKind::Latent(law(i)),
        });
    }
    if lead_discrete {
        slots.push(Slot {
            position: 0,
            kind: SlotKind::LeadLambda,
        });
    }
    slots
}

fn copula_parts(
    copula: &CopulaSpec,
    margins: &[MarginSpec],
    j: usize,
    rest: &[usize],
) -> Result<(Vec<usize>, Vec<Margin>, SquareMatrix)> {
    let d = copula.dim();
    if margins.len() != d {
        return Err(Error::Construction(format!(
            "copula of dimension {d} given {} margins",
            margins.len()
        )));
    }
    let order = full_order(j, rest);
    check_order(&order, d)?;
    let built = order
        .iter()
        .map(|&k| Margin::new(margins[k].clone()))
        .collect::<Result<Vec<_>>>()?;
    let chol = copula.cholesky_in_order(&order)?;
    Ok((order, built, chol))
}

/// Gaussian-copula model: `Y = L [Φ^{-1}(τ_j(x_j, λ_j)), Z]`,
/// `X_{w_i} = F_{w_i}^{-1}(Φ(Y_{w_i}))` with `Z ~ N(0, I)`.
///
/// `j` and `rest` are local indices into `margins`.
pub fn gaussian_dm(copula: &CopulaSpec, margins: &[MarginSpec], j: usize, rest: &[usize]) -> Result<DependencyModel> {
    if !matches!(copula.kind, CopulaKind::Gaussian) {
        return Err(Error::Construction("gaussian_dm needs a Gaussian copula".into()));
    }
    let (order, margins, chol) = copula_parts(copula, margins, j, rest)?;
    let d = order.len();
    let slots = copula_slots(d, !margins[0].is_continuous(), |_| LatentLaw::StandardNormal);
    Ok(DependencyModel {
        order,
        slots,
        kind: Kind::Gaussian { margins, chol },
    })
}

/// Student-copula model with latents `Z_{w_i} ~ t(ν + i)` and the
/// radial rescaling of the conditional t law.
pub fn student_dm(copula: &CopulaSpec, margins: &[MarginSpec], j: usize, rest: &[usize]) -> Result<DependencyModel> {
    let nu = match copula.kind {
        CopulaKind::Student { nu } => nu,
        CopulaKind::Gaussian => {
            return Err(Error::Construction("student_dm needs a Student copula".into()));
        }
    };
    let (order, margins, chol) = copula_parts(copula, margins, j, rest)?;
    let d = order.len();
    let slots = copula_slots(d, !margins[0].is_continuous(), |i| LatentLaw::StudentT { nu: nu + i as f64 });
    Ok(DependencyModel {
        order,
        slots,
        kind: Kind::Student { nu, margins, chol },
    })
}

/// Either copula family, dispatched on the copula kind.
pub fn copula_dm(copula: &CopulaSpec, margins: &[MarginSpec], j: usize, rest: &[usize]) -> Result<DependencyModel> {
    match copula.kind {
        CopulaKind::Gaussian => gaussian_dm(copula, margins, j, rest),
        CopulaKind::Student { .. } => student_dm(copula, margins, j, rest),
    }
}

/// The pair of models for `(X_a, X_b)` uniform on `{x >= 0, x_a + x_b <= 1}`:
/// the lead is Beta(1, 2) and the other component is `U (1 - x_lead)`.
/// Index 0 conditions on the first coordinate, index 1 on the second.
pub fn simplex_dm() -> [DependencyModel; 2] {
    [simplex_in_order(0), simplex_in_order(1)]
}

fn simplex_in_order(lead: usize) -> DependencyModel {
    let beta = Margin::new(MarginSpec::Beta {
        alpha: 1.0,
        beta: 2.0,
    })
    .expect("Beta(1, 2) is valid");
    DependencyModel {
        order: vec![lead, 1 - lead],
        slots: copula_slots(2, false, |_| LatentLaw::Uniform),
        kind: Kind::Simplex { lead: beta },
    }
}

/// `Y_{~j} = T_{~j}(r_j(T_j^{-1}(Y_j), Z))`, componentwise in `T_{~j}`.
///
/// `components[i]` is applied to output `w_{i+1}`. The lead map must carry an
/// inverse that is exact on the lead's support (checked on its centiles).
pub fn transform_dm(dm: DependencyModel, lead: ScalarTransform, components: Vec<ScalarTransform>) -> Result<DependencyModel> {
    let d = dm.dim();
    if components.len() != d - 1 {
        return Err(Error::Construction(format!(
            "transform needs {} component maps, got {}",
            d - 1,
            components.len()
        )));
    }
    if !lead.has_inverse() {
        return Err(Error::Construction("lead transform has no inverse".into()));
    }
    for k in 1..100 {
        let x = dm.sample_lead(k as f64 / 100.0);
        let back = lead.apply_inverse(lead.apply(x)).unwrap();
        if !((back - x).abs() < 1e-9) {
            return Err(Error::Construction(format!(
                "lead transform '{}' fails to invert at x = {x}: got {back}",
                lead.label
            )));
        }
    }
    Ok(DependencyModel {
        order: dm.order.clone(),
        slots: dm.slots.clone(),
        kind: Kind::Transformed {
            base: Box::new(dm),
            lead,
            components,
        },
    })
}

/// `Y_{~j} = diag(R) T_{~j}(r_j(T_j^{-1}(|Y_j|), Z))` with independent
/// Rademacher signs `R`, one extra slot per dependent component.
///
/// The lead `Y_j` is drawn as `s |Y_j|`: one uniform `u` yields the sign of
/// `2u - 1` and the magnitude from `|2u - 1|`.
pub fn abs_symmetric_dm(dm: DependencyModel, lead: ScalarTransform, components: Vec<ScalarTransform>) -> Result<DependencyModel> {
    let inner = transform_dm(dm, lead, components)?;
    let d = inner.dim();
    let mut slots = inner.slots.clone();
    for i in 1..d {
        slots.push(Slot {
            position: i,
            kind: SlotKind::Sign,
        });
    }
    Ok(DependencyModel {
        order: inner.order.clone(),
        slots,
        kind: Kind::AbsSymmetric {
            inner: Box::new(inner),
        },
    })
}

/// Two-component model driven by a fitted conditional-quantile curve;
/// the latent is the uniform quantile level.
pub fn quantile_dm(lead_margin: Margin, curve: Arc<QuantileDm>, order: [usize; 2]) -> Result<DependencyModel> {
    check_order(&order, 2)?;
    Ok(DependencyModel {
        order: order.to_vec(),
        slots: copula_slots(2, false, |_| LatentLaw::Uniform),
        kind: Kind::Quantile {
            lead: lead_margin,
            curve,
        },
    })
}

#[inline]
fn sign_of(u: f64) -> f64 {
    if 2.0 * u - 1.0 < 0.0 {
        -1.0
    } else {
        1.0
    }
}

impl DependencyModel {
    pub fn dim(&self) -> usize {
        self.order.len()
    }

    /// Local indices `(j, w_1, ..., w_{d-1})`.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// Laws of the latents `Z_{w_1..w_{d-1}}`, in order.
    pub fn latent_laws(&self) -> Vec<LatentLaw> {
        let mut laws = Vec::with_capacity(self.dim() - 1);
        for s in &self.slots {
            if let SlotKind::Latent(law) = s.kind {
                laws.push(law);
            }
        }
        laws
    }

    /// Count of uniforms consumed besides the lead and the latents.
    pub fn auxiliary_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s.kind, SlotKind::LeadLambda | SlotKind::Sign))
            .count()
    }

    /// Draws the lead from its law given a uniform.
    pub fn sample_lead(&self, u: f64) -> f64 {
        match &self.kind {
            Kind::Gaussian { margins, .. } | Kind::Student { margins, .. } => margins[0].quantile_interior(clamp_open(u)),
            Kind::Simplex { lead } | Kind::Quantile { lead, .. } => lead.quantile_interior(clamp_open(u)),
            Kind::Transformed { base, lead, .. } => lead.apply(base.sample_lead(u)),
            Kind::AbsSymmetric { inner } => sign_of(u) * inner.sample_lead((2.0 * u - 1.0).abs()),
        }
    }

    /// Maps a uniform to the value of slot `index`.
    pub fn sample_slot(&self, index: usize, u: f64) -> f64 {
        match self.slots[index].kind {
            SlotKind::Lead => self.sample_lead(u),
            SlotKind::LeadLambda => u,
            SlotKind::Latent(law) => law.quantile(u),
            SlotKind::Sign => sign_of(u),
        }
    }

    /// Evaluates all `d` components (lead first, then `w_1..w_{d-1}`) from
    /// slot values.
    pub fn evaluate(&self, inputs: &[f64], out: &mut [f64]) {
        debug_assert_eq!(inputs.len(), self.slots.len());
        debug_assert_eq!(out.len(), self.dim());
        let d = self.dim();
        match &self.kind {
            Kind::Gaussian { margins, chol } => {
                let lead = inputs[0];
                let lambda = if inputs.len() > d { inputs[d] } else { 0.0 };
                let y0 = margins[0].to_normal_score(lead, lambda);
                out[0] = lead;
                for i in 1..d {
                    let row = &chol.data[i * d..i * d + i + 1];
                    let mut y = row[0] * y0;
                    for k in 1..=i {
                        y += row[k] * inputs[k];
                    }
                    out[i] = margins[i].from_normal_score(y);
                }
            }
            Kind::Student { nu, margins, chol } => {
                let lead = inputs[0];
                let lambda = if inputs.len() > d { inputs[d] } else { 0.0 };
                let y0 = margins[0].to_t_score(lead, lambda, *nu);
                out[0] = lead;
                // out[i] first holds the radially rescaled latent W_i.
                let mut numer = nu + y0 * y0;
                let mut denom = 1.0;
                for i in 1..d {
                    let z = inputs[i];
                    let df = nu + i as f64;
                    denom *= df;
                    out[i] = (numer / denom).sqrt() * z;
                    numer *= df + z * z;
                }
                for i in (1..d).rev() {
                    let row = &chol.data[i * d..i * d + i + 1];
                    let mut y = row[0] * y0;
                    for k in 1..=i {
                        y += row[k] * out[k];
                    }
                    out[i] = margins[i].from_t_score(y, *nu);
                }
            }
            Kind::Simplex { .. } => {
                out[0] = inputs[0];
                out[1] = inputs[1] * (1.0 - inputs[0]);
            }
            Kind::Transformed { base, lead, components } => {
                let mut shifted = inputs.to_vec();
                shifted[0] = lead.apply_inverse(inputs[0]).expect("checked at construction");
                base.evaluate(&shifted, out);
                out[0] = inputs[0];
                for i in 1..d {
                    out[i] = components[i - 1].apply(out[i]);
                }
            }
            Kind::AbsSymmetric { inner } => {
                let n = inner.slots.len();
                let mut shifted = inputs[..n].to_vec();
                shifted[0] = inputs[0].abs();
                inner.evaluate(&shifted, out);
                out[0] = inputs[0];
                for i in 1..d {
                    out[i] *= inputs[n + i - 1];
                }
            }
            Kind::Quantile { curve, .. } => {
                out[0] = inputs[0];
                out[1] = curve.evaluate(inputs[0], inputs[1]);
            }
        }
    }

    /// Convenience form of [`evaluate`](Self::evaluate) from named parts:
    /// lead value, lead `lambda`, latent values and Rademacher signs
    /// (`±1`). Unused parts are ignored.
    pub fn evaluate_parts(&self, lead: f64, lambda: f64, latents: &[f64], signs: &[f64]) -> Vec<f64> {
        let mut inputs = Vec::with_capacity(self.slots.len());
        let (mut li, mut si) = (0, 0);
        for s in &self.slots {
            inputs.push(match s.kind {
                SlotKind::Lead => lead,
                SlotKind::LeadLambda => lambda,
                SlotKind::Latent(_) => {
                    li += 1;
                    latents[li - 1]
                }
                SlotKind::Sign => {
                    si += 1;
                    signs.get(si - 1).copied().unwrap_or(1.0)
                }
            });
        }
        let mut out = vec![0.0; self.dim()];
        self.evaluate(&inputs, &mut out);
        out
    }

    /// Splits the model after position `p`: the prefix covers
    /// `(j, w_1, ..., w_p)` and the suffix model produces
    /// `w_{p+1}, ..., w_{d-1}` from the prefix slots plus the remaining ones.
    pub fn condition_prefix(&self, p: usize) -> Result<(PrefixLaw, SuffixModel)> {
        let d = self.dim();
        if p >= d {
            return Err(Error::Domain(format!("prefix length {p} out of range 0..={}", d - 1)));
        }
        let (cond, free): (Vec<usize>, Vec<usize>) = (0..self.slots.len()).partition(|&s| self.slots[s].position <= p);
        let prefix = PrefixLaw {
            components: self.order[..=p].to_vec(),
            slots: cond.iter().map(|&s| self.slots[s]).collect(),
        };
        let suffix = SuffixModel {
            base: self.clone(),
            p,
            conditioning: cond,
            free,
        };
        Ok((prefix, suffix))
    }
}

/// What a prefix of a dependency model covers.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixLaw {
    /// Local indices `(j, w_1, ..., w_p)`.
    pub components: Vec<usize>,
    /// The independent inputs that determine them.
    pub slots: Vec<Slot>,
}

/// `X_{~u} = r_u(conditioning, Z_{w_{p+1}}, ...)` for a prefix `u`.
#[derive(Debug, Clone)]
pub struct SuffixModel {
    base: DependencyModel,
    p: usize,
    conditioning: Vec<usize>,
    free: Vec<usize>,
}

impl SuffixModel {
    /// Local indices of the produced components.
    pub fn components(&self) -> &[usize] {
        &self.base.order[self.p + 1..]
    }

    pub fn conditioning_slots(&self) -> Vec<Slot> {
        self.conditioning.iter().map(|&s| self.base.slots[s]).collect()
    }

    pub fn free_slots(&self) -> Vec<Slot> {
        self.free.iter().map(|&s| self.base.slots[s]).collect()
    }

    pub fn evaluate(&self, conditioning: &[f64], free: &[f64]) -> Vec<f64> {
        let mut inputs = vec![0.0; self.base.slots.len()];
        for (&s, &v) in self.conditioning.iter().zip(conditioning) {
            inputs[s] = v;
        }
        for (&s, &v) in self.free.iter().zip(free) {
            inputs[s] = v;
        }
        let mut out = vec![0.0; self.base.dim()];
        self.base.evaluate(&inputs, &mut out);
        out.split_off(self.p + 1)
    }
}

/// Blueprint of a dependent block, able to build its model in any ordering.
#[derive(Debug, Clone)]
pub enum DmFamily {
    Copula {
        copula: CopulaSpec,
        margins: Vec<MarginSpec>,
    },
    /// Uniform law on the 2-simplex `{x >= 0, x_1 + x_2 <= 1}`.
    Simplex,
    /// Per-component transforms of a base family (lead maps need inverses).
    Transformed {
        base: Box<DmFamily>,
        maps: Vec<ScalarTransform>,
        abs_symmetric: bool,
    },
    /// Fitted conditional-quantile curves for both directions of a pair.
    /// `curves[k]` gives the other component given component `k`.
    Quantile {
        margins: [Margin; 2],
        curves: [Arc<QuantileDm>; 2],
    },
}

impl DmFamily {
    pub fn dim(&self) -> usize {
        match self {
            DmFamily::Copula { copula, .. } => copula.dim(),
            DmFamily::Simplex | DmFamily::Quantile { .. } => 2,
            DmFamily::Transformed { base, .. } => base.dim(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DmFamily::Copula { copula, .. } => match copula.kind() {
                CopulaKind::Gaussian => "gaussian_copula",
                CopulaKind::Student { .. } => "student_copula",
            },
            DmFamily::Simplex => "simplex",
            DmFamily::Transformed { abs_symmetric: false, .. } => "transformed",
            DmFamily::Transformed { abs_symmetric: true, .. } => "abs_symmetric",
            DmFamily::Quantile { .. } => "quantile",
        }
    }

    /// Whether some component has a discrete margin (so a lead may need a
    /// distributional-transform uniform).
    pub fn has_discrete_margin(&self) -> bool {
        match self {
            DmFamily::Copula { margins, .. } => margins.iter().any(|m| {
                matches!(
                    m,
                    MarginSpec::Bernoulli { .. } | MarginSpec::DiscreteFinite { .. } | MarginSpec::Empirical { .. }
                )
            }),
            DmFamily::Transformed { base, .. } => base.has_discrete_margin(),
            DmFamily::Simplex | DmFamily::Quantile { .. } => false,
        }
    }

    pub fn is_abs_symmetric(&self) -> bool {
        matches!(self, DmFamily::Transformed { abs_symmetric: true, .. })
    }

    /// Builds the model for local ordering `order` (`order[0]` conditions).
    pub fn build(&self, order: &[usize]) -> Result<DependencyModel> {
        check_order(order, self.dim())?;
        match self {
            DmFamily::Copula { copula, margins } => copula_dm(copula, margins, order[0], &order[1..]),
            DmFamily::Simplex => Ok(simplex_in_order(order[0])),
            DmFamily::Transformed {
                base,
                maps,
                abs_symmetric,
            } => {
                if maps.len() != self.dim() {
                    return Err(Error::Construction(format!(
                        "transformed block needs {} maps, got {}",
                        self.dim(),
                        maps.len()
                    )));
                }
                let dm = base.build(order)?;
                let lead = maps[order[0]].clone();
                let rest = order[1..].iter().map(|&k| maps[k].clone()).collect();
                if *abs_symmetric {
                    abs_symmetric_dm(dm, lead, rest)
                } else {
                    transform_dm(dm, lead, rest)
                }
            }
            DmFamily::Quantile { margins, curves } => {
                let k = order[0];
                quantile_dm(margins[k].clone(), curves[k].clone(), [order[0], order[1]])
            }
        }
    }
}
