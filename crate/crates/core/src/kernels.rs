//! Coagulation kernels `K(x, y, dz)`, majorants, conserved quantities and the
//! sampling-based classifiers that check them.
//!
//! A kernel is a total rate `kbar(x, y)` together with a finite offspring law
//! for the merged cluster. Every built-in rate is symmetric by construction:
//! each form is assembled from commutative floating-point operations on the
//! two arguments, so `kbar(x, y)` and `kbar(y, x)` agree bit for bit.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CoagError, Result};
use crate::state::{ClusterState, DiscreteMeasure, Mass};

/// Dense `d x d` matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Matrix {
    dim: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(CoagError::InvalidParameter(format!(
                "matrix needs {} entries for dimension {dim}, got {}",
                dim * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoagError::InvalidParameter("matrix entries must be finite".into()));
        }
        Ok(Self { dim, data })
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.dim).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn is_nonnegative(&self) -> bool {
        self.data.iter().all(|v| *v >= 0.0)
    }

    pub fn max_entry(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// `x^T M y`, summed in row-major order.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                acc += x[i] * self.get(i, j) * y[j];
            }
        }
        acc
    }

    /// `x^T M y` for symmetric `M`, grouped so that swapping `x` and `y`
    /// gives the identical floating-point result.
    fn symmetric_bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dim {
            acc += self.get(i, i) * (x[i] * y[i]);
            for j in (i + 1)..self.dim {
                acc += self.get(i, j) * (x[i] * y[j] + x[j] * y[i]);
            }
        }
        acc
    }
}

/// Named bounded, positive functions of a cluster's attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EllPreset {
    /// `l == 1`.
    One,
    /// `l(x) = 1 + 1 / (1 + |attrs(x)|^2)`, valued in `(1, 2]`.
    Bump,
}

impl EllPreset {
    #[inline]
    pub fn eval(self, x: &ClusterState) -> f64 {
        match self {
            EllPreset::One => 1.0,
            EllPreset::Bump => {
                let r2: f64 = x.attributes().iter().map(|a| a * a).sum();
                1.0 + 1.0 / (1.0 + r2)
            }
        }
    }

    pub fn sup(self) -> f64 {
        match self {
            EllPreset::One => 1.0,
            EllPreset::Bump => 2.0,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "one" => Ok(EllPreset::One),
            "bump" => Ok(EllPreset::Bump),
            other => Err(CoagError::InvalidParameter(format!("unknown ell preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HomogeneousBase {
    /// `(m(x) m(y))^(gamma/2)`.
    Product,
    /// `m(x)^gamma + m(y)^gamma`.
    Sum,
}

/// Rate rule for the toy spatial models: position-dependent but with
/// `kbar((p, n), (s, o)) / n -> l(s)` as `n -> inf`, independent of `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpatialRate {
    pub ell: EllPreset,
    /// Strength of the bounded short-range term `c * exp(-|p - s|^2)`.
    pub interaction: f64,
}

impl SpatialRate {
    /// `l(s, o)`, the large-mass limit of `kbar((p, n), (s, o)) / n`.
    pub fn limit(&self, y: &ClusterState) -> f64 {
        self.ell.eval(y)
    }
}

type PairFn = Arc<dyn Fn(&ClusterState, &ClusterState) -> f64 + Send + Sync>;

/// A named user-supplied function of two clusters.
#[derive(Clone)]
pub struct CustomPair {
    name: String,
    f: PairFn,
}

impl CustomPair {
    pub fn new<F>(name: impl Into<String>, f: F) -> Self
    where
        F: Fn(&ClusterState, &ClusterState) -> f64 + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    #[inline]
    pub fn call(&self, x: &ClusterState, y: &ClusterState) -> f64 {
        (self.f)(x, y)
    }
}

impl fmt::Debug for CustomPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomPair({})", self.name)
    }
}

#[derive(Debug, Clone)]
pub enum RateForm {
    Constant(f64),
    Additive,
    Multiplicative,
    Homogeneous { gamma: f64, base: HomogeneousBase },
    /// `x^T A y` on `[0, inf)^d`, reading the attribute vector.
    Bilinear(Matrix),
    /// `s (1 + ln(1 + s))^(3 + eps)` with `s = m(x) ∧ m(y)`.
    MinLog { eps: f64 },
    SpatialToy(SpatialRate),
    /// Symmetrised user rate `(f(x, y) + f(y, x)) / 2`.
    Custom(CustomPair),
    Scaled(f64, Box<RateForm>),
    Sum(Vec<RateForm>),
}

impl RateForm {
    fn eval(&self, x: &ClusterState, y: &ClusterState) -> f64 {
        match self {
            RateForm::Constant(c) => *c,
            RateForm::Additive => x.m() + y.m(),
            RateForm::Multiplicative => x.m() * y.m(),
            RateForm::Homogeneous { gamma, base } => match base {
                HomogeneousBase::Product => x.m().powf(gamma / 2.0) * y.m().powf(gamma / 2.0),
                HomogeneousBase::Sum => x.m().powf(*gamma) + y.m().powf(*gamma),
            },
            RateForm::Bilinear(a) => a.symmetric_bilinear(x.attributes(), y.attributes()),
            RateForm::MinLog { eps } => {
                let s = x.m().min(y.m());
                s * (1.0 + s.ln_1p()).powf(3.0 + eps)
            }
            RateForm::SpatialToy(rule) => {
                let d2: f64 = x
                    .attributes()
                    .iter()
                    .zip(y.attributes())
                    .map(|(p, s)| (p - s) * (p - s))
                    .sum();
                x.m() * rule.ell.eval(y)
                    + y.m() * rule.ell.eval(x)
                    + rule.interaction * (-d2).exp()
            }
            RateForm::Custom(f) => 0.5 * (f.call(x, y) + f.call(y, x)),
            RateForm::Scaled(c, inner) => c * inner.eval(x, y),
            RateForm::Sum(parts) => parts.iter().map(|p| p.eval(x, y)).sum(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            RateForm::Constant(c) if !(c.is_finite() && *c >= 0.0) => Err(
                CoagError::InvalidKernel(format!("constant rate must be non-negative, got {c}")),
            ),
            RateForm::Homogeneous { gamma, .. } if !gamma.is_finite() => {
                Err(CoagError::InvalidKernel("homogeneity exponent must be finite".into()))
            }
            RateForm::Bilinear(a) if !a.is_symmetric() => Err(CoagError::InvalidKernel(
                "bilinear matrix A is not symmetric".into(),
            )),
            RateForm::Bilinear(a) if !a.is_nonnegative() => Err(CoagError::InvalidKernel(
                "bilinear matrix A has negative entries".into(),
            )),
            RateForm::MinLog { eps } if !(eps.is_finite() && *eps > 0.0) => Err(
                CoagError::InvalidKernel(format!("min-log exponent eps must be positive, got {eps}")),
            ),
            RateForm::SpatialToy(rule) if !(rule.interaction.is_finite() && rule.interaction >= 0.0) => {
                Err(CoagError::InvalidKernel("spatial interaction must be non-negative".into()))
            }
            RateForm::Scaled(c, inner) => {
                if !(c.is_finite() && *c >= 0.0) {
                    return Err(CoagError::InvalidKernel(format!("scale must be non-negative, got {c}")));
                }
                inner.validate()
            }
            RateForm::Sum(parts) => parts.iter().try_for_each(RateForm::validate),
            _ => Ok(()),
        }
    }

    fn name(&self) -> String {
        match self {
            RateForm::Constant(c) => format!("constant({c})"),
            RateForm::Additive => "additive".into(),
            RateForm::Multiplicative => "multiplicative".into(),
            RateForm::Homogeneous { gamma, base } => format!("homogeneous({gamma},{base:?})"),
            RateForm::Bilinear(_) => "bilinear".into(),
            RateForm::MinLog { eps } => format!("min_log({eps})"),
            RateForm::SpatialToy(_) => "spatial_toy".into(),
            RateForm::Custom(f) => f.name().to_string(),
            RateForm::Scaled(c, inner) => format!("{c}*{}", inner.name()),
            RateForm::Sum(parts) => parts.iter().map(RateForm::name).collect::<Vec<_>>().join("+"),
        }
    }
}

/// Where the merged cluster sits in attribute space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Mass-weighted average `(m(x) p + m(y) q) / (m(x) + m(y))`.
    MassWeighted,
    /// Component-wise sum (bilinear kernels on `[0, inf)^d`).
    Sum,
    /// Attributes of the heavier cluster; ties go to the canonically smaller one.
    Heavier,
}

impl Placement {
    fn place(self, x: &ClusterState, y: &ClusterState) -> Vec<f64> {
        let (px, py) = (x.attributes(), y.attributes());
        match self {
            Placement::MassWeighted => {
                let (mx, my) = (x.m(), y.m());
                let total = mx + my;
                px.iter()
                    .zip(py)
                    .map(|(a, b)| (mx * a + my * b) / total)
                    .collect()
            }
            Placement::Sum => px.iter().zip(py).map(|(a, b)| a + b).collect(),
            Placement::Heavier => {
                let x_wins = match x.m().total_cmp(&y.m()) {
                    std::cmp::Ordering::Greater => true,
                    std::cmp::Ordering::Less => false,
                    std::cmp::Ordering::Equal => x.canonical_cmp(y).is_le(),
                };
                if x_wins { px.to_vec() } else { py.to_vec() }
            }
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mass_weighted" => Ok(Placement::MassWeighted),
            "sum" => Ok(Placement::Sum),
            "heavier" => Ok(Placement::Heavier),
            other => Err(CoagError::InvalidParameter(format!("unknown placement `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OffspringForm {
    DeltaSum(Placement),
    Mixture(Vec<(Placement, f64)>),
}

/// A coagulation kernel: total rate plus offspring law.
#[derive(Debug, Clone)]
pub struct KernelSpec {
    rate: RateForm,
    offspring: OffspringForm,
}

impl KernelSpec {
    pub fn new(rate: RateForm, offspring: OffspringForm) -> Result<Self> {
        rate.validate()?;
        if let OffspringForm::Mixture(parts) = &offspring {
            if parts.is_empty() {
                return Err(CoagError::InvalidKernel("empty offspring mixture".into()));
            }
            if parts.iter().any(|(_, p)| !(p.is_finite() && *p >= 0.0)) {
                return Err(CoagError::InvalidKernel("mixture probabilities must be non-negative".into()));
            }
            let total: f64 = parts.iter().map(|(_, p)| p).sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(CoagError::InvalidKernel(format!(
                    "mixture probabilities sum to {total}, expected 1"
                )));
            }
        }
        Ok(Self { rate, offspring })
    }

    fn mass_only(rate: RateForm) -> Self {
        Self {
            rate,
            offspring: OffspringForm::DeltaSum(Placement::MassWeighted),
        }
    }

    pub fn constant(c: f64) -> Result<Self> {
        Self::new(RateForm::Constant(c), OffspringForm::DeltaSum(Placement::MassWeighted))
    }

    pub fn additive() -> Self {
        Self::mass_only(RateForm::Additive)
    }

    pub fn multiplicative() -> Self {
        Self::mass_only(RateForm::Multiplicative)
    }

    pub fn homogeneous(gamma: f64, base: HomogeneousBase) -> Result<Self> {
        Self::new(
            RateForm::Homogeneous { gamma, base },
            OffspringForm::DeltaSum(Placement::MassWeighted),
        )
    }

    pub fn bilinear(a: Matrix) -> Result<Self> {
        Self::new(RateForm::Bilinear(a), OffspringForm::DeltaSum(Placement::Sum))
    }

    pub fn min_log(eps: f64) -> Result<Self> {
        Self::new(RateForm::MinLog { eps }, OffspringForm::DeltaSum(Placement::MassWeighted))
    }

    pub fn spatial_toy(rule: SpatialRate, offspring: OffspringForm) -> Result<Self> {
        Self::new(RateForm::SpatialToy(rule), offspring)
    }

    pub fn custom(f: CustomPair, offspring: OffspringForm) -> Result<Self> {
        Self::new(RateForm::Custom(f), offspring)
    }

    pub fn rate_form(&self) -> &RateForm {
        &self.rate
    }

    pub fn offspring_form(&self) -> &OffspringForm {
        &self.offspring
    }

    pub fn name(&self) -> String {
        self.rate.name()
    }

    /// Whether every offspring is a deterministic function of the pair.
    pub fn is_deterministic(&self) -> bool {
        match &self.offspring {
            OffspringForm::DeltaSum(_) => true,
            OffspringForm::Mixture(parts) => parts.iter().filter(|(_, p)| *p > 0.0).count() <= 1,
        }
    }

    /// Total rate `kbar(x, y) = K(x, y, E)`.
    #[inline]
    pub fn kbar(&self, x: &ClusterState, y: &ClusterState) -> Result<f64> {
        let v = self.rate.eval(x, y);
        if v.is_finite() && v >= 0.0 {
            Ok(v)
        } else {
            Err(CoagError::RateOverflow {
                x: x.to_string(),
                y: y.to_string(),
                value: v,
            })
        }
    }

    fn child(&self, x: &ClusterState, y: &ClusterState, placement: Placement) -> Result<ClusterState> {
        let mass: Mass = x.mass().checked_add(y.mass())?;
        let label = match (x.label(), y.label()) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        let attrs = if x.dim() == y.dim() {
            placement.place(x, y)
        } else {
            return Err(CoagError::InvalidState(format!(
                "attribute dimensions differ: {x} / {y}"
            )));
        };
        ClusterState::new(mass, attrs, label)
    }

    /// The finite offspring law `K(x, y, .) / kbar(x, y)` as
    /// `(child, probability)` pairs.
    pub fn offspring_outcomes(&self, x: &ClusterState, y: &ClusterState) -> Result<Vec<(ClusterState, f64)>> {
        match &self.offspring {
            OffspringForm::DeltaSum(p) => Ok(vec![(self.child(x, y, *p)?, 1.0)]),
            OffspringForm::Mixture(parts) => parts
                .iter()
                .filter(|(_, prob)| *prob > 0.0)
                .map(|(p, prob)| Ok((self.child(x, y, *p)?, *prob)))
                .collect(),
        }
    }

    /// Draws the merged cluster from `K(x, y, .) / kbar(x, y)`.
    pub fn sample_offspring<R: Rng + ?Sized>(
        &self,
        x: &ClusterState,
        y: &ClusterState,
        rng: &mut R,
    ) -> Result<ClusterState> {
        if self.kbar(x, y)? <= 0.0 {
            return Err(CoagError::ZeroRate {
                x: x.to_string(),
                y: y.to_string(),
            });
        }
        self.draw_child(x, y, rng)
    }

    /// Offspring draw without the rate check; callers guarantee `kbar > 0`.
    pub(crate) fn draw_child<R: Rng + ?Sized>(
        &self,
        x: &ClusterState,
        y: &ClusterState,
        rng: &mut R,
    ) -> Result<ClusterState> {
        match &self.offspring {
            OffspringForm::DeltaSum(p) => self.child(x, y, *p),
            OffspringForm::Mixture(parts) => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = parts.last().map(|(p, _)| *p).unwrap_or(Placement::MassWeighted);
                for (p, prob) in parts {
                    acc += prob;
                    if u < acc {
                        chosen = *p;
                        break;
                    }
                }
                self.child(x, y, chosen)
            }
        }
    }

    /// A product majorant `xi(m(x)) xi(m(y)) >= kbar` for the built-in forms
    /// that admit one.
    pub fn default_majorant(&self) -> Option<MajorantSpec> {
        default_majorant_for(&self.rate).map(MajorantSpec::product)
    }
}

fn default_majorant_for(rate: &RateForm) -> Option<Xi> {
    match rate {
        RateForm::Constant(c) => Some(Xi::new(c.sqrt(), 0.0, 1.0)),
        RateForm::Additive => Some(Xi::new(1.0, 1.0, 1.0)),
        RateForm::Multiplicative => Some(Xi::power(1.0, 1.0)),
        RateForm::Homogeneous { gamma, base } => match base {
            HomogeneousBase::Product if *gamma >= 0.0 => Some(Xi::power(1.0, gamma / 2.0)),
            HomogeneousBase::Sum if *gamma >= 0.0 => Some(Xi::new(1.0, 1.0, *gamma)),
            _ => None,
        },
        // Components are non-negative and sum to the mass.
        RateForm::Bilinear(a) => Some(Xi::power(a.max_entry().sqrt(), 1.0)),
        RateForm::SpatialToy(rule) => {
            let a = rule.interaction.sqrt().max(1.0);
            Some(Xi::new(a, rule.ell.sup() / a, 1.0))
        }
        RateForm::Scaled(c, inner) => default_majorant_for(inner).map(|xi| Xi {
            intercept: xi.intercept * c.sqrt(),
            coef: xi.coef * c.sqrt(),
            exponent: xi.exponent,
        }),
        RateForm::MinLog { .. } | RateForm::Custom(_) | RateForm::Sum(_) => None,
    }
}

/// `xi(s) = intercept + coef * s^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Xi {
    pub intercept: f64,
    pub coef: f64,
    pub exponent: f64,
}

impl Xi {
    pub fn new(intercept: f64, coef: f64, exponent: f64) -> Self {
        Self {
            intercept,
            coef,
            exponent,
        }
    }

    pub fn power(coef: f64, exponent: f64) -> Self {
        Self::new(0.0, coef, exponent)
    }

    pub fn sqrt() -> Self {
        Self::power(1.0, 0.5)
    }

    #[inline]
    pub fn eval(&self, s: f64) -> f64 {
        if self.coef == 0.0 {
            self.intercept
        } else {
            self.intercept + self.coef * s.powf(self.exponent)
        }
    }

    /// Continuity and sub-additivity on `[0, inf)`, which make
    /// `xi(m(x)) xi(m(y))` doubly sub-conservative.
    pub fn is_subadditive(&self) -> bool {
        self.intercept >= 0.0 && self.coef >= 0.0 && (0.0..=1.0).contains(&self.exponent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MajorantForm {
    /// `xi(m(x)) xi(m(y))`.
    Product(Xi),
    /// `m(x) ∧ m(y)`.
    Min,
    /// Explicit values on mass pairs; unlisted pairs are unbounded.
    Table(Vec<(f64, f64, f64)>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MajorantSpec {
    pub form: MajorantForm,
}

impl MajorantSpec {
    pub fn product(xi: Xi) -> Self {
        Self {
            form: MajorantForm::Product(xi),
        }
    }

    pub fn min() -> Self {
        Self {
            form: MajorantForm::Min,
        }
    }

    pub fn table(entries: Vec<(f64, f64, f64)>) -> Self {
        Self {
            form: MajorantForm::Table(entries),
        }
    }

    #[inline]
    pub fn value(&self, x: &ClusterState, y: &ClusterState) -> f64 {
        majorant_value(self, x, y)
    }

    pub fn xi(&self) -> Option<Xi> {
        match self.form {
            MajorantForm::Product(xi) => Some(xi),
            _ => None,
        }
    }
}

/// `phi'(x, y)` for a majorant.
pub fn majorant_value(mj: &MajorantSpec, x: &ClusterState, y: &ClusterState) -> f64 {
    match &mj.form {
        MajorantForm::Product(xi) => xi.eval(x.m()) * xi.eval(y.m()),
        MajorantForm::Min => x.m().min(y.m()),
        MajorantForm::Table(entries) => {
            let (a, b) = (x.m().min(y.m()), x.m().max(y.m()));
            entries
                .iter()
                .find(|(p, q, _)| p.min(*q) == a && p.max(*q) == b)
                .map_or(f64::INFINITY, |e| e.2)
        }
    }
}

#[derive(Debug, Clone)]
pub enum QuantityForm {
    Zero,
    /// `m(x) l(y)`.
    MassTimesEll(EllPreset),
    /// `m(x) m(y)`.
    MassProduct,
    /// `x^T M y` on the attribute vectors.
    Bilinear(Matrix),
    /// `m(x) ∧ m(y)`.
    MinMass,
    Custom(CustomPair),
}

/// Flags recorded by [`classify_quantity`]; all false until a classifier run
/// finds zero counterexamples for the corresponding condition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct QuantityFlags {
    pub is_conservative: bool,
    pub is_sub_conservative: bool,
    pub is_doubly_conservative: bool,
    pub is_doubly_sub_conservative: bool,
}

/// A candidate conserved quantity `phi: E x E -> R`.
#[derive(Debug, Clone)]
pub struct ConservedQuantity {
    form: QuantityForm,
    flags: QuantityFlags,
}

impl ConservedQuantity {
    pub fn new(form: QuantityForm) -> Self {
        Self {
            form,
            flags: QuantityFlags::default(),
        }
    }

    pub fn zero() -> Self {
        Self::new(QuantityForm::Zero)
    }

    pub fn mass_times_ell(ell: EllPreset) -> Self {
        Self::new(QuantityForm::MassTimesEll(ell))
    }

    pub fn mass_product() -> Self {
        Self::new(QuantityForm::MassProduct)
    }

    pub fn bilinear(m: Matrix) -> Self {
        Self::new(QuantityForm::Bilinear(m))
    }

    pub fn min_mass() -> Self {
        Self::new(QuantityForm::MinMass)
    }

    /// `phi(x, y) = m(x)^2`: neither conservative nor sub-conservative.
    pub fn mass_squared() -> Self {
        Self::new(QuantityForm::Custom(CustomPair::new("m(x)^2", |x, _| x.m() * x.m())))
    }

    pub fn form(&self) -> &QuantityForm {
        &self.form
    }

    pub fn flags(&self) -> QuantityFlags {
        self.flags
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.form, QuantityForm::Zero)
    }

    /// Copies the verdicts of a classifier run into the flags.
    pub fn with_classification(mut self, report: &ClassificationReport) -> Self {
        self.flags = report.flags();
        self
    }

    pub fn name(&self) -> String {
        match &self.form {
            QuantityForm::Zero => "zero".into(),
            QuantityForm::MassTimesEll(l) => format!("mass_times_ell({l:?})"),
            QuantityForm::MassProduct => "mass_product".into(),
            QuantityForm::Bilinear(_) => "bilinear".into(),
            QuantityForm::MinMass => "min_mass".into(),
            QuantityForm::Custom(f) => f.name().to_string(),
        }
    }
}

/// `phi(x, y)`.
#[inline]
pub fn phi_value(q: &ConservedQuantity, x: &ClusterState, y: &ClusterState) -> f64 {
    match &q.form {
        QuantityForm::Zero => 0.0,
        QuantityForm::MassTimesEll(l) => x.m() * l.eval(y),
        QuantityForm::MassProduct => x.m() * y.m(),
        QuantityForm::Bilinear(m) => m.bilinear(x.attributes(), y.attributes()),
        QuantityForm::MinMass => x.m().min(y.m()),
        QuantityForm::Custom(f) => f.call(x, y),
    }
}

/// A function of two clusters that can be audited along a trajectory.
pub trait PairFunction: Send + Sync {
    fn name(&self) -> String;

    fn pair_value(&self, x: &ClusterState, y: &ClusterState) -> f64;

    /// `sum_{i != j} f(x_i, x_j)` over ordered pairs of distinct indices.
    fn ordered_pair_sum(&self, states: &[ClusterState]) -> f64 {
        let mut acc = 0.0;
        for (i, x) in states.iter().enumerate() {
            for (j, y) in states.iter().enumerate() {
                if i != j {
                    acc += self.pair_value(x, y);
                }
            }
        }
        acc
    }
}

fn product_pair_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (s1, s2) = values.fold((0.0, 0.0), |(a, b), v| (a + v, b + v * v));
    s1 * s1 - s2
}

fn min_pair_sum(states: &[ClusterState]) -> f64 {
    let mut masses: Vec<f64> = states.iter().map(ClusterState::m).collect();
    masses.sort_by(f64::total_cmp);
    let n = masses.len();
    2.0 * masses
        .iter()
        .enumerate()
        .map(|(k, m)| m * (n - 1 - k) as f64)
        .sum::<f64>()
}

impl PairFunction for ConservedQuantity {
    fn name(&self) -> String {
        ConservedQuantity::name(self)
    }

    fn pair_value(&self, x: &ClusterState, y: &ClusterState) -> f64 {
        phi_value(self, x, y)
    }

    fn ordered_pair_sum(&self, states: &[ClusterState]) -> f64 {
        match &self.form {
            QuantityForm::Zero => 0.0,
            QuantityForm::MassProduct => product_pair_sum(states.iter().map(ClusterState::m)),
            QuantityForm::MinMass => min_pair_sum(states),
            _ => {
                let mut acc = 0.0;
                for (i, x) in states.iter().enumerate() {
                    for (j, y) in states.iter().enumerate() {
                        if i != j {
                            acc += phi_value(self, x, y);
                        }
                    }
                }
                acc
            }
        }
    }
}

impl PairFunction for MajorantSpec {
    fn name(&self) -> String {
        match &self.form {
            MajorantForm::Product(xi) => format!(
                "product_xi({}+{}*s^{})",
                xi.intercept, xi.coef, xi.exponent
            ),
            MajorantForm::Min => "min_mass".into(),
            MajorantForm::Table(_) => "table".into(),
        }
    }

    fn pair_value(&self, x: &ClusterState, y: &ClusterState) -> f64 {
        majorant_value(self, x, y)
    }

    fn ordered_pair_sum(&self, states: &[ClusterState]) -> f64 {
        match &self.form {
            MajorantForm::Product(xi) => product_pair_sum(states.iter().map(|s| xi.eval(s.m()))),
            MajorantForm::Min => min_pair_sum(states),
            MajorantForm::Table(_) => {
                let mut acc = 0.0;
                for (i, x) in states.iter().enumerate() {
                    for (j, y) in states.iter().enumerate() {
                        if i != j {
                            acc += majorant_value(self, x, y);
                        }
                    }
                }
                acc
            }
        }
    }
}

/// Source of random cluster states for the sampling-based classifiers. The
/// sampler owns the randomness, which is also used for offspring draws.
pub trait StateSampler {
    fn sample(&mut self) -> Result<ClusterState>;
    fn rng(&mut self) -> &mut dyn RngCore;
}

/// Mass-only integer clusters, uniform on `1..=max_mass`.
pub struct IntegerMassSampler {
    max_mass: u64,
    rng: ChaCha8Rng,
}

impl IntegerMassSampler {
    pub fn new(max_mass: u64, seed: u64) -> Self {
        Self {
            max_mass: max_mass.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl StateSampler for IntegerMassSampler {
    fn sample(&mut self) -> Result<ClusterState> {
        Ok(ClusterState::integer(self.rng.gen_range(1..=self.max_mass)))
    }

    fn rng(&mut self) -> &mut dyn RngCore {
        &mut self.rng
    }
}

/// Integer-mass clusters with uniform positions in `[-extent, extent]^dim`.
pub struct SpatialSampler {
    max_mass: u64,
    dim: usize,
    extent: f64,
    rng: ChaCha8Rng,
}

impl SpatialSampler {
    pub fn new(max_mass: u64, dim: usize, extent: f64, seed: u64) -> Self {
        Self {
            max_mass: max_mass.max(1),
            dim,
            extent,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl StateSampler for SpatialSampler {
    fn sample(&mut self) -> Result<ClusterState> {
        let m = self.rng.gen_range(1..=self.max_mass);
        let attrs = (0..self.dim)
            .map(|_| self.rng.gen_range(-self.extent..=self.extent))
            .collect();
        ClusterState::integer(m).with_attributes(attrs)
    }

    fn rng(&mut self) -> &mut dyn RngCore {
        &mut self.rng
    }
}

/// Non-zero integer component vectors with entries in `0..=max_component`.
pub struct ComponentSampler {
    dim: usize,
    max_component: u64,
    rng: ChaCha8Rng,
}

impl ComponentSampler {
    pub fn new(dim: usize, max_component: u64, seed: u64) -> Self {
        Self {
            dim: dim.max(1),
            max_component: max_component.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl StateSampler for ComponentSampler {
    fn sample(&mut self) -> Result<ClusterState> {
        loop {
            let v: Vec<f64> = (0..self.dim)
                .map(|_| self.rng.gen_range(0..=self.max_component) as f64)
                .collect();
            if v.iter().any(|c| *c > 0.0) {
                return ClusterState::from_components(&v);
            }
        }
    }

    fn rng(&mut self) -> &mut dyn RngCore {
        &mut self.rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// `phi(z, q) = phi(x, q) + phi(y, q)`.
    ConservativeFirst,
    /// `phi(z, q) <= phi(x, q) + phi(y, q)`.
    SubConservativeFirst,
    /// `phi(q, z) = phi(q, x) + phi(q, y)`.
    ConservativeSecond,
    /// `phi(q, z) <= phi(q, x) + phi(q, y)`.
    SubConservativeSecond,
}

const CONDITIONS: [Condition; 4] = [
    Condition::ConservativeFirst,
    Condition::SubConservativeFirst,
    Condition::ConservativeSecond,
    Condition::SubConservativeSecond,
];

/// A sampled triple `(x, y, q)` with offspring `z` violating a condition:
/// `lhs` is the value at `z`, `rhs` the sum over `x` and `y`.
#[derive(Debug, Clone, Serialize)]
pub struct Counterexample {
    pub condition: Condition,
    pub x: ClusterState,
    pub y: ClusterState,
    pub q: ClusterState,
    pub z: ClusterState,
    pub lhs: f64,
    pub rhs: f64,
}

impl Counterexample {
    fn size(&self) -> f64 {
        self.x.m() + self.y.m() + self.q.m()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionTally {
    pub condition: Condition,
    pub passed: usize,
    pub failed: usize,
    /// The violating triple of smallest total mass seen.
    pub minimal_witness: Option<Counterexample>,
}

pub const MAX_COUNTEREXAMPLES: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct ClassificationReport {
    pub quantity: String,
    pub kernel: String,
    pub n_samples: usize,
    /// Triples skipped because `kbar(x, y) = 0` leaves the offspring undefined.
    pub skipped_zero_rate: usize,
    pub tol: f64,
    pub tallies: Vec<ConditionTally>,
    pub counterexamples: Vec<Counterexample>,
}

impl ClassificationReport {
    pub fn tally(&self, c: Condition) -> &ConditionTally {
        self.tallies
            .iter()
            .find(|t| t.condition == c)
            .expect("all conditions tallied")
    }

    fn clean(&self, c: Condition) -> bool {
        let t = self.tally(c);
        t.failed == 0 && t.passed > 0
    }

    pub fn flags(&self) -> QuantityFlags {
        QuantityFlags {
            is_conservative: self.clean(Condition::ConservativeFirst),
            is_sub_conservative: self.clean(Condition::SubConservativeFirst),
            is_doubly_conservative: self.clean(Condition::ConservativeFirst)
                && self.clean(Condition::ConservativeSecond),
            is_doubly_sub_conservative: self.clean(Condition::SubConservativeFirst)
                && self.clean(Condition::SubConservativeSecond),
        }
    }

    /// A triple where the sub-conservative inequality is strict, if seen.
    pub fn strict_witness(&self) -> Option<&Counterexample> {
        self.tally(Condition::ConservativeFirst)
            .minimal_witness
            .as_ref()
            .filter(|c| c.lhs < c.rhs)
    }
}

/// Sampling-based falsifier for the conservativity conditions: draws
/// `n_samples` triples `(x, y, q)` and an offspring `z ~ K(x, y, .)`, and
/// checks the first- and second-argument equalities and inequalities.
pub fn classify_quantity<F>(
    q: &F,
    k: &KernelSpec,
    sampler: &mut dyn StateSampler,
    n_samples: usize,
    tol: f64,
) -> Result<ClassificationReport>
where
    F: PairFunction + ?Sized,
{
    if n_samples == 0 {
        return Err(CoagError::InvalidParameter("n_samples must be at least 1".into()));
    }
    let mut tallies: Vec<ConditionTally> = CONDITIONS
        .iter()
        .map(|c| ConditionTally {
            condition: *c,
            passed: 0,
            failed: 0,
            minimal_witness: None,
        })
        .collect();
    let mut counterexamples = Vec::new();
    let mut skipped = 0;

    for _ in 0..n_samples {
        let x = sampler.sample()?;
        let y = sampler.sample()?;
        let probe = sampler.sample()?;
        if k.kbar(&x, &y)? <= 0.0 {
            skipped += 1;
            continue;
        }
        let z = k.draw_child(&x, &y, sampler.rng())?;
        let first = (
            q.pair_value(&z, &probe),
            q.pair_value(&x, &probe) + q.pair_value(&y, &probe),
        );
        let second = (
            q.pair_value(&probe, &z),
            q.pair_value(&probe, &x) + q.pair_value(&probe, &y),
        );
        for tally in tallies.iter_mut() {
            let (lhs, rhs) = match tally.condition {
                Condition::ConservativeFirst | Condition::SubConservativeFirst => first,
                _ => second,
            };
            let ok = match tally.condition {
                Condition::ConservativeFirst | Condition::ConservativeSecond => {
                    (lhs - rhs).abs() <= tol
                }
                _ => lhs <= rhs + tol,
            };
            if ok {
                tally.passed += 1;
                continue;
            }
            tally.failed += 1;
            let cx = Counterexample {
                condition: tally.condition,
                x: x.clone(),
                y: y.clone(),
                q: probe.clone(),
                z: z.clone(),
                lhs,
                rhs,
            };
            let smaller = tally
                .minimal_witness
                .as_ref()
                .is_none_or(|w| cx.size() < w.size());
            if counterexamples.len() < MAX_COUNTEREXAMPLES {
                counterexamples.push(cx.clone());
            }
            if smaller {
                tally.minimal_witness = Some(cx);
            }
        }
    }

    Ok(ClassificationReport {
        quantity: q.name(),
        kernel: k.name(),
        n_samples,
        skipped_zero_rate: skipped,
        tol,
        tallies,
        counterexamples,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PairViolation {
    pub i: usize,
    pub j: usize,
    pub kbar: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EventualReport {
    pub r: f64,
    pub c_bound: f64,
    /// `d(x) = sum_j phi(x, y_j) mu0_j` for each grid state.
    pub d_values: Vec<f64>,
    /// Membership of each grid state in `D_R = {x : d(x) <= R}`.
    pub in_d_r: Vec<bool>,
    /// `kbar <= c_bound * phi` on every grid pair.
    pub dominated: bool,
    pub domination_violations: Vec<PairViolation>,
    /// `kbar = phi` on every grid pair outside `D_R x D_R`.
    pub equal_outside: bool,
    pub equality_violations: Vec<PairViolation>,
    pub phi_symmetric: bool,
}

impl EventualReport {
    pub fn holds(&self) -> bool {
        self.dominated && self.equal_outside
    }
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

/// Checks the eventually-conservative hypotheses on a finite grid of states.
pub fn eventually_conservative_check(
    k: &KernelSpec,
    q: &ConservedQuantity,
    mu0: &DiscreteMeasure,
    grid: &[ClusterState],
    r: f64,
    c_bound: f64,
) -> Result<EventualReport> {
    let d_values: Vec<f64> = grid
        .iter()
        .map(|x| mu0.iter().fold(0.0, |acc, (y, w)| acc + phi_value(q, x, y) * w))
        .collect();
    let in_d_r: Vec<bool> = d_values.iter().map(|d| *d <= r).collect();

    let mut domination_violations = Vec::new();
    let mut equality_violations = Vec::new();
    let mut phi_symmetric = true;
    for (i, x) in grid.iter().enumerate() {
        for (j, y) in grid.iter().enumerate() {
            let kb = k.kbar(x, y)?;
            let phi = phi_value(q, x, y);
            if !close(phi, phi_value(q, y, x)) {
                phi_symmetric = false;
            }
            if kb > c_bound * phi && !close(kb, c_bound * phi) {
                domination_violations.push(PairViolation { i, j, kbar: kb, phi });
            }
            let outside = !(in_d_r[i] && in_d_r[j]);
            if outside && !close(kb, phi) {
                equality_violations.push(PairViolation { i, j, kbar: kb, phi });
            }
        }
    }
    Ok(EventualReport {
        r,
        c_bound,
        d_values,
        in_d_r,
        dominated: domination_violations.is_empty(),
        domination_violations,
        equal_outside: equality_violations.is_empty(),
        equality_violations,
        phi_symmetric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(n: u64) -> ClusterState {
        ClusterState::integer(n)
    }

    fn at(n: u64, p: Vec<f64>) -> ClusterState {
        m(n).with_attributes(p).unwrap()
    }

    fn spatial(placement: Placement) -> KernelSpec {
        KernelSpec::spatial_toy(
            SpatialRate {
                ell: EllPreset::Bump,
                interaction: 0.5,
            },
            OffspringForm::DeltaSum(placement),
        )
        .unwrap()
    }

    fn all_kernels() -> Vec<KernelSpec> {
        vec![
            KernelSpec::constant(1.0).unwrap(),
            KernelSpec::additive(),
            KernelSpec::multiplicative(),
            KernelSpec::homogeneous(1.5, HomogeneousBase::Product).unwrap(),
            KernelSpec::homogeneous(0.5, HomogeneousBase::Sum).unwrap(),
            KernelSpec::min_log(0.5).unwrap(),
            spatial(Placement::MassWeighted),
            KernelSpec::spatial_toy(
                SpatialRate {
                    ell: EllPreset::One,
                    interaction: 2.0,
                },
                OffspringForm::Mixture(vec![(Placement::MassWeighted, 0.3), (Placement::Heavier, 0.7)]),
            )
            .unwrap(),
        ]
    }

    #[test]
    fn kbar_examples() {
        assert_eq!(KernelSpec::multiplicative().kbar(&m(2), &m(3)).unwrap(), 6.0);
        let c = KernelSpec::constant(1.0).unwrap();
        assert_eq!(c.kbar(&m(7), &m(100)).unwrap(), 1.0);
        let b = KernelSpec::bilinear(Matrix::identity(2)).unwrap();
        let x = ClusterState::from_components(&[1.0, 0.0]).unwrap();
        let y = ClusterState::from_components(&[0.0, 1.0]).unwrap();
        assert_eq!(b.kbar(&x, &y).unwrap(), 0.0);
    }

    #[test]
    fn kbar_overflow_is_reported() {
        let k = KernelSpec::homogeneous(400.0, HomogeneousBase::Sum).unwrap();
        assert!(matches!(
            k.kbar(&m(10), &m(10)),
            Err(CoagError::RateOverflow { .. })
        ));
    }

    #[test]
    fn offspring_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = KernelSpec::multiplicative().sample_offspring(&m(2), &m(3), &mut rng).unwrap();
        assert_eq!(z.mass().value(), 5.0);
        assert!(z.mass().is_integer());

        let k = spatial(Placement::MassWeighted);
        let z = k
            .sample_offspring(&at(1, vec![0.0, 4.0]), &at(3, vec![4.0, 0.0]), &mut rng)
            .unwrap();
        assert_eq!(z.m(), 4.0);
        assert_eq!(z.attributes(), &[3.0, 1.0]);

        let b = KernelSpec::bilinear(Matrix::identity(2)).unwrap();
        let x = ClusterState::from_components(&[1.0, 0.0]).unwrap();
        let y = ClusterState::from_components(&[0.0, 1.0]).unwrap();
        // kbar(x, y) = 0 here, so use the unchecked draw for the placement.
        let z = b.draw_child(&x, &y, &mut rng).unwrap();
        assert_eq!(z.attributes(), &[1.0, 1.0]);
        assert_eq!(z.m(), 2.0);
        assert!(matches!(
            b.sample_offspring(&x, &y, &mut rng),
            Err(CoagError::ZeroRate { .. })
        ));
        let zero = KernelSpec::constant(0.0).unwrap();
        assert!(zero.sample_offspring(&m(1), &m(1), &mut rng).is_err());
    }

    #[test]
    fn majorant_examples() {
        assert_eq!(MajorantSpec::product(Xi::power(1.0, 1.0)).value(&m(2), &m(3)), 6.0);
        assert_eq!(MajorantSpec::min().value(&m(2), &m(5)), 2.0);
        assert_eq!(MajorantSpec::product(Xi::sqrt()).value(&m(4), &m(9)), 6.0);
        let t = MajorantSpec::table(vec![(1.0, 2.0, 7.0)]);
        assert_eq!(t.value(&m(2), &m(1)), 7.0);
        assert_eq!(t.value(&m(3), &m(1)), f64::INFINITY);
    }

    #[test]
    fn phi_examples() {
        assert_eq!(phi_value(&ConservedQuantity::mass_product(), &m(2), &m(3)), 6.0);
        assert_eq!(phi_value(&ConservedQuantity::zero(), &m(2), &m(3)), 0.0);
        assert_eq!(
            phi_value(&ConservedQuantity::mass_times_ell(EllPreset::One), &m(7), &m(1)),
            7.0
        );
    }

    #[test]
    fn classify_mass_product_is_doubly_conservative() {
        let mut s = IntegerMassSampler::new(50, 3);
        let r = classify_quantity(
            &ConservedQuantity::mass_product(),
            &KernelSpec::constant(1.0).unwrap(),
            &mut s,
            10_000,
            0.0,
        )
        .unwrap();
        assert!(r.flags().is_doubly_conservative);
        assert!(r.counterexamples.is_empty());
    }

    /// Brute force over integer masses `<= 5`: min(m) is sub-additive in each
    /// argument, with strict inequality somewhere.
    #[test]
    fn min_mass_brute_force_oracle() {
        let mut strict = Vec::new();
        for a in 1..=5u64 {
            for b in 1..=5u64 {
                for c in 1..=5u64 {
                    let lhs = (a + b).min(c);
                    let rhs = a.min(c) + b.min(c);
                    assert!(lhs <= rhs);
                    if lhs < rhs {
                        strict.push((a, b, c));
                    }
                }
            }
        }
        assert_eq!(strict[0], (1, 1, 1));

        let mut s = IntegerMassSampler::new(5, 11);
        let r = classify_quantity(
            &ConservedQuantity::min_mass(),
            &KernelSpec::additive(),
            &mut s,
            5_000,
            0.0,
        )
        .unwrap();
        let f = r.flags();
        assert!(f.is_sub_conservative && f.is_doubly_sub_conservative);
        assert!(!f.is_conservative);
        let w = r.strict_witness().unwrap();
        assert_eq!((w.x.m(), w.y.m(), w.q.m()), (1.0, 1.0, 1.0));
        assert_eq!((w.lhs, w.rhs), (1.0, 2.0));
    }

    #[test]
    fn mass_squared_is_rejected_with_minimal_witness() {
        let mut s = IntegerMassSampler::new(10, 5);
        let r = classify_quantity(
            &ConservedQuantity::mass_squared(),
            &KernelSpec::constant(1.0).unwrap(),
            &mut s,
            10_000,
            0.0,
        )
        .unwrap();
        assert!(!r.flags().is_sub_conservative);
        let w = r.tally(Condition::SubConservativeFirst).minimal_witness.as_ref().unwrap();
        assert_eq!((w.x.m(), w.y.m()), (1.0, 1.0));
        assert_eq!((w.lhs, w.rhs), (4.0, 2.0));
        assert!(r.counterexamples.len() <= MAX_COUNTEREXAMPLES);
    }

    #[test]
    fn classifier_rejects_zero_samples() {
        let mut s = IntegerMassSampler::new(10, 5);
        assert!(classify_quantity(&ConservedQuantity::zero(), &KernelSpec::additive(), &mut s, 0, 0.0).is_err());
    }

    #[test]
    fn mass_times_ell_is_conservative_in_first_argument() {
        let ells = [EllPreset::One, EllPreset::Bump];
        for k in all_kernels() {
            for ell in ells {
                let mut s = SpatialSampler::new(20, 2, 3.0, 17);
                let r = classify_quantity(&ConservedQuantity::mass_times_ell(ell), &k, &mut s, 2_000, 1e-9)
                    .unwrap();
                assert!(r.flags().is_conservative, "{} / {ell:?}", k.name());
            }
        }
    }

    #[test]
    fn bilinear_quantity_is_doubly_conservative() {
        let a = Matrix::new(2, vec![1.0, 2.0, 2.0, 0.5]).unwrap();
        let k = KernelSpec::bilinear(a).unwrap();
        let mq = Matrix::new(2, vec![1.0, -3.0, 0.5, 2.0]).unwrap();
        let mut s = ComponentSampler::new(2, 6, 9);
        let r = classify_quantity(&ConservedQuantity::bilinear(mq), &k, &mut s, 5_000, 1e-9).unwrap();
        assert!(r.flags().is_doubly_conservative);
    }

    #[test]
    fn subadditive_product_majorants_are_doubly_sub_conservative() {
        for xi in [Xi::sqrt(), Xi::power(1.0, 1.0), Xi::new(1.0, 1.0, 1.0), Xi::new(2.0, 0.5, 0.3)] {
            assert!(xi.is_subadditive());
            let mut s = IntegerMassSampler::new(100, 21);
            let r = classify_quantity(&MajorantSpec::product(xi), &KernelSpec::additive(), &mut s, 5_000, 1e-9)
                .unwrap();
            assert!(r.flags().is_doubly_sub_conservative, "{xi:?}");
        }
    }

    #[test]
    fn eventually_conservative_examples() {
        let grid: Vec<ClusterState> = (1..=10).map(m).collect();
        let mu0 = DiscreteMeasure::dirac(m(1), 1.0).unwrap();
        let q = ConservedQuantity::mass_product();

        let rep = eventually_conservative_check(&KernelSpec::multiplicative(), &q, &mu0, &grid, 3.0, 1.0)
            .unwrap();
        assert!(rep.holds());

        let rep = eventually_conservative_check(&KernelSpec::constant(1.0).unwrap(), &q, &mu0, &grid, 3.0, 1.0)
            .unwrap();
        assert!(rep.dominated);
        assert!(!rep.equal_outside);
        assert_eq!(rep.in_d_r, (1..=10).map(|k| k <= 3).collect::<Vec<_>>());
        // Enumeration: every ordered pair with a mass above 3 violates 1 = m(x) m(y).
        let mut expected = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                if i >= 3 || j >= 3 {
                    expected.push((i, j));
                }
            }
        }
        let got: Vec<_> = rep.equality_violations.iter().map(|v| (v.i, v.j)).collect();
        assert_eq!(got, expected);
        assert!(rep.equality_violations.iter().all(|v| v.kbar == 1.0 && v.phi >= 4.0));

        let a = Matrix::new(2, vec![2.0, 1.0, 1.0, 3.0]).unwrap();
        let vgrid: Vec<ClusterState> = [[1.0, 0.0], [0.0, 1.0], [2.0, 1.0], [1.0, 3.0]]
            .iter()
            .map(|v| ClusterState::from_components(v).unwrap())
            .collect();
        let mu0 = DiscreteMeasure::dirac(vgrid[0].clone(), 1.0).unwrap();
        let rep = eventually_conservative_check(
            &KernelSpec::bilinear(a.clone()).unwrap(),
            &ConservedQuantity::bilinear(a),
            &mu0,
            &vgrid,
            0.0,
            1.0,
        )
        .unwrap();
        assert!(rep.equal_outside && rep.phi_symmetric);
    }

    #[test]
    fn asymmetric_phi_is_flagged() {
        let grid: Vec<ClusterState> = (1..=4).map(m).collect();
        let mu0 = DiscreteMeasure::dirac(m(1), 1.0).unwrap();
        let q = ConservedQuantity::mass_times_ell(EllPreset::One);
        let rep = eventually_conservative_check(&KernelSpec::additive(), &q, &mu0, &grid, 1.0, 2.0).unwrap();
        assert!(!rep.phi_symmetric);
    }

    #[test]
    fn spatial_rate_limit_is_position_free() {
        let k = spatial(Placement::MassWeighted);
        let rule = SpatialRate {
            ell: EllPreset::Bump,
            interaction: 0.5,
        };
        let y = at(3, vec![0.7, -1.2]);
        let mut prev = f64::INFINITY;
        for n in [100u64, 1_000, 10_000] {
            let mut worst = 0.0f64;
            for p in [[0.0, 0.0], [5.0, -3.0], [0.7, -1.2]] {
                let x = at(n, p.to_vec());
                let ratio = k.kbar(&x, &y).unwrap() / n as f64;
                worst = worst.max((ratio - rule.limit(&y)).abs());
            }
            // The remainder is (o l(p) + c exp(-d^2)) / n <= (3 * 2 + 0.5) / n.
            assert!(worst <= 6.5 / n as f64 + 1e-15, "n = {n}: {worst}");
            assert!(worst < prev);
            prev = worst;
        }
    }

    #[test]
    fn invalid_kernels() {
        assert!(KernelSpec::bilinear(Matrix::new(2, vec![1.0, 2.0, 3.0, 1.0]).unwrap()).is_err());
        assert!(KernelSpec::constant(-1.0).is_err());
        assert!(KernelSpec::min_log(0.0).is_err());
        assert!(KernelSpec::new(
            RateForm::Additive,
            OffspringForm::Mixture(vec![(Placement::Sum, 0.5)])
        )
        .is_err());
    }

    #[test]
    fn custom_rate_is_symmetrised() {
        let f = CustomPair::new("skew", |x: &ClusterState, y: &ClusterState| x.m() * 2.0 + y.m());
        let k = KernelSpec::custom(f, OffspringForm::DeltaSum(Placement::MassWeighted)).unwrap();
        assert_eq!(k.kbar(&m(1), &m(4)).unwrap(), k.kbar(&m(4), &m(1)).unwrap());
    }

    fn arb_state() -> impl Strategy<Value = ClusterState> {
        (1u64..1_000, proptest::collection::vec(-10.0f64..10.0, 2))
            .prop_map(|(n, p)| at(n, p))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2_000))]

        #[test]
        fn rates_are_symmetric_and_finite(x in arb_state(), y in arb_state()) {
            for k in all_kernels() {
                let a = k.kbar(&x, &y).unwrap();
                let b = k.kbar(&y, &x).unwrap();
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            let a = Matrix::new(2, vec![1.5, 0.25, 0.25, 3.0]).unwrap();
            let k = KernelSpec::bilinear(a).unwrap();
            let (u, v) = (
                ClusterState::from_components(&[x.m(), (x.attributes()[0].abs()).floor()]).unwrap(),
                ClusterState::from_components(&[y.m(), (y.attributes()[1].abs()).floor()]).unwrap(),
            );
            prop_assert_eq!(k.kbar(&u, &v).unwrap().to_bits(), k.kbar(&v, &u).unwrap().to_bits());
        }

        #[test]
        fn offspring_adds_mass_exactly(x in arb_state(), y in arb_state(), seed in 0u64..1_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for k in all_kernels() {
                let z = k.sample_offspring(&x, &y, &mut rng).unwrap();
                match (z.mass(), x.mass(), y.mass()) {
                    (Mass::Integer(c), Mass::Integer(a), Mass::Integer(b)) => prop_assert_eq!(c, a + b),
                    _ => prop_assert!(false, "integer masses must stay integer"),
                }
            }
        }

        #[test]
        fn default_majorants_dominate(x in arb_state(), y in arb_state()) {
            let mut kernels = all_kernels();
            kernels.push(KernelSpec::bilinear(Matrix::new(2, vec![1.5, 0.25, 0.25, 3.0]).unwrap()).unwrap());
            for k in kernels {
                let (x, y) = if matches!(k.rate_form(), RateForm::Bilinear(_)) {
                    (
                        ClusterState::from_components(&[x.m(), x.attributes()[0].abs().floor()]).unwrap(),
                        ClusterState::from_components(&[y.m(), y.attributes()[0].abs().floor()]).unwrap(),
                    )
                } else {
                    (x.clone(), y.clone())
                };
                if let Some(mj) = k.default_majorant() {
                    prop_assert!(k.kbar(&x, &y).unwrap() <= mj.value(&x, &y), "{}", k.name());
                }
            }
        }

        #[test]
        fn homogeneous_scaling(mx in 1.0f64..100.0, my in 1.0f64..100.0, gamma in 0.5f64..2.5) {
            for base in [HomogeneousBase::Product, HomogeneousBase::Sum] {
                let k = KernelSpec::homogeneous(gamma, base).unwrap();
                let base_rate = k.kbar(&ClusterState::real(mx).unwrap(), &ClusterState::real(my).unwrap()).unwrap();
                for c in [2.0f64, 3.0, 10.0] {
                    let scaled = k
                        .kbar(&ClusterState::real(c * mx).unwrap(), &ClusterState::real(c * my).unwrap())
                        .unwrap();
                    let expect = c.powf(gamma) * base_rate;
                    prop_assert!((scaled - expect).abs() <= 1e-12 * expect);
                }
            }
        }
    }
}
