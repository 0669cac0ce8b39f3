//! Points of the cluster space, finite measures over them, and the pairing
//! `<f, mu>` between bounded test functions and measures.
//!
//! A cluster is a positive mass, a fixed-length attribute vector (spatial
//! position, composition vector, ...) and an optional discrete label. Masses
//! are either exact integers or reals; the integer variant keeps mass
//! bookkeeping bit-exact through arbitrarily many merges.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{CoagError, Result};

/// Relative tolerance used when comparing real-valued states.
pub const STATE_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Mass {
    Integer(u64),
    Real(f64),
}

impl Mass {
    #[inline]
    pub fn value(self) -> f64 {
        match self {
            Mass::Integer(n) => n as f64,
            Mass::Real(r) => r,
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(self, Mass::Integer(_))
    }

    /// Exact in integer mode; mixing an integer with a real mass yields a real.
    pub fn checked_add(self, other: Mass) -> Result<Mass> {
        match (self, other) {
            (Mass::Integer(a), Mass::Integer(b)) => a
                .checked_add(b)
                .map(Mass::Integer)
                .ok_or_else(|| CoagError::InvalidState(format!("integer mass overflow {a} + {b}"))),
            (a, b) => Ok(Mass::Real(a.value() + b.value())),
        }
    }

    fn validate(self) -> Result<()> {
        match self {
            Mass::Integer(0) => Err(CoagError::InvalidState("mass must be positive".into())),
            Mass::Integer(_) => Ok(()),
            Mass::Real(r) if r.is_finite() && r > 0.0 => Ok(()),
            Mass::Real(r) => Err(CoagError::InvalidState(format!(
                "mass must be positive and finite, got {r}"
            ))),
        }
    }
}

impl fmt::Display for Mass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mass::Integer(n) => write!(f, "{n}"),
            Mass::Real(r) => write!(f, "{r:?}"),
        }
    }
}

fn rel_eq(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= STATE_REL_TOL * a.abs().max(b.abs())
}

#[derive(Debug, Clone, Deserialize)]
struct RawState {
    mass: Mass,
    #[serde(default)]
    attributes: Vec<f64>,
    #[serde(default)]
    label: Option<u32>,
}

/// One point of the cluster space.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawState")]
pub struct ClusterState {
    mass: Mass,
    attributes: Vec<f64>,
    label: Option<u32>,
}

impl TryFrom<RawState> for ClusterState {
    type Error = CoagError;

    fn try_from(raw: RawState) -> Result<Self> {
        ClusterState::new(raw.mass, raw.attributes, raw.label)
    }
}

impl ClusterState {
    pub fn new(mass: Mass, attributes: Vec<f64>, label: Option<u32>) -> Result<Self> {
        mass.validate()?;
        if let Some(bad) = attributes.iter().find(|a| !a.is_finite()) {
            return Err(CoagError::InvalidState(format!("non-finite attribute {bad}")));
        }
        Ok(Self {
            mass,
            attributes,
            label,
        })
    }

    /// Mass-only cluster with an integer mass. Panics on zero mass.
    pub fn integer(mass: u64) -> Self {
        assert!(mass > 0, "cluster mass must be positive");
        Self {
            mass: Mass::Integer(mass),
            attributes: Vec::new(),
            label: None,
        }
    }

    /// Mass-only cluster with a real mass.
    pub fn real(mass: f64) -> Result<Self> {
        Self::new(Mass::Real(mass), Vec::new(), None)
    }

    /// A point of `[0, inf)^d` for bilinear kernels: the attributes are the
    /// component vector and the mass is the component sum (an integer when
    /// every component is integral).
    pub fn from_components(components: &[f64]) -> Result<Self> {
        if components.iter().any(|c| *c < 0.0) {
            return Err(CoagError::InvalidState(
                "components must be non-negative".into(),
            ));
        }
        let sum: f64 = components.iter().sum();
        let integral = components.iter().all(|c| c.fract() == 0.0 && *c < 2f64.powi(53));
        let mass = if integral {
            Mass::Integer(sum as u64)
        } else {
            Mass::Real(sum)
        };
        Self::new(mass, components.to_vec(), None)
    }

    pub fn with_attributes(mut self, attributes: Vec<f64>) -> Result<Self> {
        if let Some(bad) = attributes.iter().find(|a| !a.is_finite()) {
            return Err(CoagError::InvalidState(format!("non-finite attribute {bad}")));
        }
        self.attributes = attributes;
        Ok(self)
    }

    pub fn with_label(mut self, label: u32) -> Self {
        self.label = Some(label);
        self
    }

    #[inline]
    pub fn mass(&self) -> Mass {
        self.mass
    }

    #[inline]
    pub fn m(&self) -> f64 {
        self.mass.value()
    }

    #[inline]
    pub fn attributes(&self) -> &[f64] {
        &self.attributes
    }

    pub fn label(&self) -> Option<u32> {
        self.label
    }

    pub fn dim(&self) -> usize {
        self.attributes.len()
    }

    /// Euclidean norm of `(mass, attributes...)`.
    pub fn norm(&self) -> f64 {
        let m = self.m();
        (m * m + self.attributes.iter().map(|a| a * a).sum::<f64>()).sqrt()
    }

    /// Total order used to canonicalise supports: mass, then integer before
    /// real, then label, then attributes lexicographically.
    pub fn canonical_cmp(&self, other: &Self) -> Ordering {
        let by_mass = match (self.mass, other.mass) {
            (Mass::Integer(a), Mass::Integer(b)) => a.cmp(&b),
            (a, b) => a
                .value()
                .total_cmp(&b.value())
                .then_with(|| b.is_integer().cmp(&a.is_integer())),
        };
        by_mass
            .then_with(|| self.label.cmp(&other.label))
            .then_with(|| {
                for (a, b) in self.attributes.iter().zip(&other.attributes) {
                    match a.total_cmp(b) {
                        Ordering::Equal => {}
                        ord => return ord,
                    }
                }
                self.attributes.len().cmp(&other.attributes.len())
            })
    }

    /// Bitwise identity of all fields.
    pub fn same_bits(&self, other: &Self) -> bool {
        let mass_eq = match (self.mass, other.mass) {
            (Mass::Integer(a), Mass::Integer(b)) => a == b,
            (Mass::Real(a), Mass::Real(b)) => a.to_bits() == b.to_bits(),
            _ => false,
        };
        mass_eq
            && self.label == other.label
            && self.attributes.len() == other.attributes.len()
            && self
                .attributes
                .iter()
                .zip(&other.attributes)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Exact key suitable for hashing.
    pub fn key(&self) -> StateKey {
        StateKey {
            mass: match self.mass {
                Mass::Integer(n) => (0, n),
                Mass::Real(r) => (1, r.to_bits()),
            },
            label: self.label,
            attributes: self.attributes.iter().map(|a| a.to_bits()).collect(),
        }
    }
}

/// Exact (bitwise) identity of a [`ClusterState`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StateKey {
    mass: (u8, u64),
    label: Option<u32>,
    attributes: Vec<u64>,
}

impl PartialEq for ClusterState {
    /// Exact when both masses are integers, relative tolerance
    /// [`STATE_REL_TOL`] otherwise.
    fn eq(&self, other: &Self) -> bool {
        if self.label != other.label || self.attributes.len() != other.attributes.len() {
            return false;
        }
        match (self.mass, other.mass) {
            (Mass::Integer(a), Mass::Integer(b)) => {
                a == b && self.attributes == other.attributes
            }
            (a, b) => {
                rel_eq(a.value(), b.value())
                    && self
                        .attributes
                        .iter()
                        .zip(&other.attributes)
                        .all(|(x, y)| rel_eq(*x, *y))
            }
        }
    }
}

impl fmt::Display for ClusterState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m={}", self.mass)?;
        if let Some(l) = self.label {
            write!(f, " label={l}")?;
        }
        if !self.attributes.is_empty() {
            write!(f, " attrs={:?}", self.attributes)?;
        }
        Ok(())
    }
}

/// A finite measure with finite support.
#[derive(Debug, Clone, Default, Serialize)]
pub struct DiscreteMeasure {
    support: Vec<ClusterState>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(support: Vec<ClusterState>, weights: Vec<f64>) -> Result<Self> {
        if support.len() != weights.len() {
            return Err(CoagError::InvalidMeasure(format!(
                "support has {} entries but {} weights",
                support.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(CoagError::InvalidMeasure(format!(
                "weights must be finite and non-negative, got {w}"
            )));
        }
        let mut order: Vec<usize> = (0..support.len()).collect();
        order.sort_by(|&a, &b| support[a].canonical_cmp(&support[b]));
        for pair in order.windows(2) {
            if support[pair[0]] == support[pair[1]] {
                return Err(CoagError::InvalidMeasure(format!(
                    "duplicate support point {}",
                    support[pair[0]]
                )));
            }
        }
        Ok(Self { support, weights })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Point mass `weight * delta_x`.
    pub fn dirac(x: ClusterState, weight: f64) -> Result<Self> {
        Self::new(vec![x], vec![weight])
    }

    /// `scale * sum_i delta_{x_i}`, with identical states aggregated and
    /// the support sorted canonically.
    pub fn from_states<'a, I>(states: I, scale: f64) -> Self
    where
        I: IntoIterator<Item = &'a ClusterState>,
    {
        let mut refs: Vec<&ClusterState> = states.into_iter().collect();
        refs.sort_by(|a, b| a.canonical_cmp(b));
        let mut support: Vec<ClusterState> = Vec::new();
        let mut counts: Vec<u64> = Vec::new();
        for s in refs {
            match support.last() {
                Some(last) if last.same_bits(s) => *counts.last_mut().unwrap() += 1,
                _ => {
                    support.push(s.clone());
                    counts.push(1);
                }
            }
        }
        let weights = counts.into_iter().map(|c| c as f64 * scale).collect();
        Self { support, weights }
    }

    pub fn support(&self) -> &[ClusterState] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ClusterState, f64)> {
        self.support.iter().zip(self.weights.iter().copied())
    }

    /// Total variation `||mu||`.
    pub fn total_variation(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn total_mass(&self) -> f64 {
        total_mass(self)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor >= 0.0) {
            return Err(CoagError::InvalidParameter(format!(
                "scale factor must be finite and non-negative, got {factor}"
            )));
        }
        Ok(Self {
            support: self.support.clone(),
            weights: self.weights.iter().map(|w| w * factor).collect(),
        })
    }

    /// `self + other`, merging equal support points. Entries of `self` keep
    /// their positions; new points from `other` are appended.
    pub fn add(&self, other: &Self) -> Self {
        let mut support = self.support.clone();
        let mut weights = self.weights.clone();
        for (x, w) in other.iter() {
            match support.iter().position(|s| s == x) {
                Some(i) => weights[i] += w,
                None => {
                    support.push(x.clone());
                    weights.push(w);
                }
            }
        }
        Self { support, weights }
    }
}

type Evaluator = Arc<dyn Fn(&ClusterState) -> f64 + Send + Sync>;

/// A bounded function on the cluster space.
#[derive(Clone)]
pub struct TestFunction {
    name: String,
    evaluator: Evaluator,
    bound: f64,
    lipschitz: Option<f64>,
    support_radius: Option<f64>,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("name", &self.name)
            .field("bound", &self.bound)
            .field("lipschitz", &self.lipschitz)
            .field("support_radius", &self.support_radius)
            .finish()
    }
}

impl TestFunction {
    pub fn new<F>(name: impl Into<String>, bound: f64, evaluator: F) -> Self
    where
        F: Fn(&ClusterState) -> f64 + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            evaluator: Arc::new(evaluator),
            bound,
            lipschitz: None,
            support_radius: None,
        }
    }

    pub fn with_lipschitz(mut self, l: f64) -> Self {
        self.lipschitz = Some(l);
        self
    }

    /// Declares compact support: the function vanishes outside the ball of
    /// radius `r` (in [`ClusterState::norm`]).
    pub fn with_support_radius(mut self, r: f64) -> Self {
        self.support_radius = Some(r);
        self
    }

    /// `f == c`.
    pub fn constant(c: f64) -> Self {
        Self::new(format!("const({c})"), c.abs(), move |_| c).with_lipschitz(0.0)
    }

    /// `f(x) = m(x) ∧ cap`.
    pub fn mass_capped(cap: f64) -> Self {
        Self::new(format!("min(m,{cap})"), cap, move |x| x.m().min(cap)).with_lipschitz(1.0)
    }

    /// Smoothed indicator of the mass band `[lo, hi]`: one on the band,
    /// linear ramps of width `ramp` on both sides.
    pub fn mass_band(lo: f64, hi: f64, ramp: f64) -> Self {
        Self::new(format!("band(m,{lo},{hi})"), 1.0, move |x| {
            let m = x.m();
            if m < lo {
                (1.0 - (lo - m) / ramp).max(0.0)
            } else if m > hi {
                (1.0 - (m - hi) / ramp).max(0.0)
            } else {
                1.0
            }
        })
        .with_lipschitz(1.0 / ramp)
    }

    /// Logistic transform of attribute `k` (zero when the attribute is absent).
    pub fn attribute_sigmoid(k: usize) -> Self {
        Self::new(format!("sigmoid(attr_{k})"), 1.0, move |x| {
            x.attributes()
                .get(k)
                .map_or(0.0, |a| 1.0 / (1.0 + (-a).exp()))
        })
        .with_lipschitz(0.25)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }

    pub fn support_radius(&self) -> Option<f64> {
        self.support_radius
    }

    pub fn evaluate(&self, x: &ClusterState) -> Result<f64> {
        if let Some(r) = self.support_radius {
            if x.norm() > r {
                return Ok(0.0);
            }
        }
        let v = (self.evaluator)(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CoagError::NonFiniteEvaluation {
                name: self.name.clone(),
                state: x.to_string(),
                value: v,
            })
        }
    }
}

/// `<f, mu> = sum_i w_i f(x_i)`, summed in ascending support order.
pub fn integrate(f: &TestFunction, mu: &DiscreteMeasure) -> Result<f64> {
    let mut acc = 0.0;
    for (x, w) in mu.iter() {
        acc += w * f.evaluate(x)?;
    }
    Ok(acc)
}

/// `<m, mu>`.
pub fn total_mass(mu: &DiscreteMeasure) -> f64 {
    mu.iter().fold(0.0, |acc, (x, w)| acc + w * x.m())
}

/// `max_f |<f, mu> - <f, nu>|` over a finite family of bounded functions.
pub fn bl_distance(mu: &DiscreteMeasure, nu: &DiscreteMeasure, fs: &[TestFunction]) -> Result<f64> {
    if fs.is_empty() {
        return Err(CoagError::EmptyFamily);
    }
    let mut worst = 0.0f64;
    for f in fs {
        let d = (integrate(f, mu)? - integrate(f, nu)?).abs();
        worst = worst.max(d);
    }
    Ok(worst)
}

/// The bounded test family used for weak-convergence checks: the constant,
/// `m ∧ c` for `c` in {2, 5, 10}, three smoothed mass bands, and a logistic
/// marginal for each of the first `attribute_dims` attributes.
pub fn standard_family(attribute_dims: usize) -> Vec<TestFunction> {
    let mut fs = vec![
        TestFunction::constant(1.0),
        TestFunction::mass_capped(2.0),
        TestFunction::mass_capped(5.0),
        TestFunction::mass_capped(10.0),
        TestFunction::mass_band(1.0, 1.0, 0.5),
        TestFunction::mass_band(2.0, 4.0, 0.5),
        TestFunction::mass_band(5.0, 10.0, 0.5),
    ];
    fs.extend((0..attribute_dims).map(TestFunction::attribute_sigmoid));
    fs
}

/// Look up a named test family.
pub fn test_family(name: &str, attribute_dims: usize) -> Result<Vec<TestFunction>> {
    match name {
        "standard" => Ok(standard_family(attribute_dims)),
        "count" => Ok(vec![TestFunction::constant(1.0)]),
        "capped_mass" => Ok(vec![
            TestFunction::mass_capped(2.0),
            TestFunction::mass_capped(5.0),
            TestFunction::mass_capped(10.0),
        ]),
        other => Err(CoagError::InvalidParameter(format!(
            "unknown test family `{other}`"
        ))),
    }
}
