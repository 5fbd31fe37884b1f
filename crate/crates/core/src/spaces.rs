//! Trajectories and the weighted sup-norms used to measure them.

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::params::{CutoffData, ParamSeq};
use crate::quadratic::{iterate_gbar, VTriple};

/// A trajectory `x_j = (K_j, V_j)` for `j = 0..=J`.
///
/// `k[j]` holds the coordinates of the irrelevant block at scale `j`; its
/// length may vary with `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSequence {
    pub k: Vec<Vec<f64>>,
    pub v: Vec<VTriple>,
}

impl FlowSequence {
    pub fn zeros(dims: &[usize]) -> Self {
        FlowSequence {
            k: dims.iter().map(|&d| vec![0.0; d]).collect(),
            v: vec![VTriple::default(); dims.len()],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.dims())
    }

    pub fn dims(&self) -> Vec<usize> {
        self.k.iter().map(Vec::len).collect()
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    /// Index of the last entry.
    pub fn horizon(&self) -> usize {
        self.v.len().saturating_sub(1)
    }

    pub fn same_shape(&self, other: &FlowSequence) -> bool {
        self.v.len() == other.v.len()
            && self.k.len() == other.k.len()
            && self.k.iter().zip(&other.k).all(|(a, b)| a.len() == b.len())
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &FlowSequence) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.k.iter_mut().zip(&other.k) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
        for (a, b) in self.v.iter_mut().zip(&other.v) {
            a.g += s * b.g;
            a.z += s * b.z;
            a.mu += s * b.mu;
        }
    }

    pub fn sub(&self, other: &FlowSequence) -> FlowSequence {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.k {
            for x in a {
                *x *= s;
            }
        }
        for a in &mut self.v {
            a.g *= s;
            a.z *= s;
            a.mu *= s;
        }
    }

    /// Total number of scalar coordinates.
    pub fn flat_len(&self) -> usize {
        self.k.iter().map(Vec::len).sum::<usize>() + 3 * self.v.len()
    }

    /// Coordinates laid out as `K_0, g_0, z_0, mu_0, K_1, ...`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for (k, v) in self.k.iter().zip(&self.v) {
            out.extend_from_slice(k);
            out.extend_from_slice(&[v.g, v.z, v.mu]);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) with the shape of `self`.
    pub fn unflatten(&self, data: &[f64]) -> FlowSequence {
        let mut out = self.zeros_like();
        let mut p = 0;
        for (k, v) in out.k.iter_mut().zip(out.v.iter_mut()) {
            let d = k.len();
            k.copy_from_slice(&data[p..p + d]);
            p += d;
            *v = VTriple::new(data[p], data[p + 1], data[p + 2]);
            p += 3;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.k.iter().flatten().all(|x| x.is_finite())
            && self.v.iter().all(|v| v.g.is_finite() && v.z.is_finite() && v.mu.is_finite())
    }

    /// Restriction to `j = 0..=last`.
    pub fn truncated(&self, last: usize) -> FlowSequence {
        FlowSequence {
            k: self.k[..=last].to_vec(),
            v: self.v[..=last].to_vec(),
        }
    }
}

pub(crate) fn sup_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Which of the two weight families to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    W,
    V,
}

/// Coordinate blocks of a single entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    K,
    G,
    Z,
    Mu,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::K, Component::G, Component::Z, Component::Mu];

    pub fn name(self) -> &'static str {
        match self {
            Component::K => "K",
            Component::G => "g",
            Component::Z => "z",
            Component::Mu => "mu",
        }
    }
}

/// Weights built from a reference sequence `gring` and the cut-off envelope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightScheme {
    pub a: f64,
    pub a_star: f64,
    pub h: f64,
    pub gring: Vec<f64>,
    pub chi: Vec<f64>,
}

impl WeightScheme {
    pub fn new(a: f64, a_star: f64, h: f64, gring: Vec<f64>, cutoff: &CutoffData) -> Result<Self> {
        if !(a.is_finite() && a_star.is_finite() && h.is_finite()) {
            return Err(FlowError::InvalidInput("a, a_star and h must be finite".into()));
        }
        if !(a > 0.0 && a_star > 0.0 && h > 0.0) {
            return Err(FlowError::InvalidInput("a, a_star and h must be positive".into()));
        }
        if a_star >= a {
            return Err(FlowError::InvalidInput(format!(
                "a_star = {a_star} must be below a = {a}"
            )));
        }
        if gring.is_empty() {
            return Err(FlowError::EmptySequence);
        }
        if let Some(j) = gring.iter().position(|&g| !(g > 0.0 && g < 1.0)) {
            return Err(FlowError::InvalidInput(format!(
                "reference g at j = {j} is {} (needs 0 < g < 1)",
                gring[j]
            )));
        }
        let chi = (0..gring.len()).map(|j| cutoff.chi(j)).collect();
        Ok(WeightScheme {
            a,
            a_star,
            h,
            gring,
            chi,
        })
    }

    /// Weights around the quadratic reference started at `gring0`.
    pub fn from_reference(
        gring0: f64,
        params: &ParamSeq,
        cutoff: &CutoffData,
        a: f64,
        a_star: f64,
        h: f64,
        horizon: usize,
    ) -> Result<Self> {
        let gring = iterate_gbar(gring0, params, horizon)?;
        Self::new(a, a_star, h, gring, cutoff)
    }

    pub fn len(&self) -> usize {
        self.gring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gring.is_empty()
    }

    pub fn with_ah(&self, a: f64, a_star: f64, h: f64) -> Self {
        WeightScheme {
            a,
            a_star,
            h,
            ..self.clone()
        }
    }

    pub fn w(&self, c: Component, j: usize) -> f64 {
        let g = self.gring[j];
        let chi = self.chi[j];
        let lg = g.ln().abs();
        match c {
            Component::K => (self.a - self.a_star) * chi * g * g * g,
            Component::G => self.h * g * g * lg,
            Component::Z | Component::Mu => self.h * chi * g * g * lg,
        }
    }

    pub fn v(&self, c: Component, j: usize) -> f64 {
        let g = self.gring[j];
        let chi = self.chi[j];
        match c {
            Component::K => (self.a - self.a_star) * chi * g * g * g,
            _ => self.h * chi * g * g * g,
        }
    }

    pub fn weight(&self, which: Which, c: Component, j: usize) -> f64 {
        match which {
            Which::W => self.w(c, j),
            Which::V => self.v(c, j),
        }
    }
}

/// Per-component maxima of `|x_{alpha,j}| / weight_{alpha,j}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentRatios {
    pub k: f64,
    pub g: f64,
    pub z: f64,
    pub mu: f64,
    /// Index and component where the overall maximum sits.
    pub argmax_j: usize,
    pub argmax_component: Component,
}

impl ComponentRatios {
    pub fn max(&self) -> f64 {
        self.k.max(self.g).max(self.z).max(self.mu)
    }

    pub fn get(&self, c: Component) -> f64 {
        match c {
            Component::K => self.k,
            Component::G => self.g,
            Component::Z => self.z,
            Component::Mu => self.mu,
        }
    }
}

pub fn component_ratios(x: &FlowSequence, scheme: &WeightScheme, which: Which) -> Result<ComponentRatios> {
    if x.is_empty() {
        return Err(FlowError::EmptySequence);
    }
    if x.len() > scheme.len() {
        return Err(FlowError::InvalidInput(format!(
            "sequence has {} entries but weights cover {}",
            x.len(),
            scheme.len()
        )));
    }
    let mut out = ComponentRatios {
        k: 0.0,
        g: 0.0,
        z: 0.0,
        mu: 0.0,
        argmax_j: 0,
        argmax_component: Component::K,
    };
    let mut best = -1.0;
    for j in 0..x.len() {
        let vals = [
            (Component::K, sup_norm(&x.k[j])),
            (Component::G, x.v[j].g.abs()),
            (Component::Z, x.v[j].z.abs()),
            (Component::Mu, x.v[j].mu.abs()),
        ];
        for (c, a) in vals {
            let r = a / scheme.weight(which, c, j);
            let slot = match c {
                Component::K => &mut out.k,
                Component::G => &mut out.g,
                Component::Z => &mut out.z,
                Component::Mu => &mut out.mu,
            };
            if r > *slot {
                *slot = r;
            }
            if r > best {
                best = r;
                out.argmax_j = j;
                out.argmax_component = c;
            }
        }
    }
    Ok(out)
}

/// `sup_j max_alpha weight_{alpha,j}^{-1} |x_{alpha,j}|`.
pub fn weighted_norm(x: &FlowSequence, scheme: &WeightScheme, which: Which) -> Result<f64> {
    Ok(component_ratios(x, scheme, which)?.max())
}
