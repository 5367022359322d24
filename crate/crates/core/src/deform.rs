//! Time-smooth polynomial deformation fields.
//!
//! A displacement field `D(r, t)` with one polynomial per output component:
//! every term is a spatial monomial in (possibly normalized) sample
//! coordinates times a positive power of time, so the field vanishes
//! identically at `t = 0` — the reference configuration is the undeformed
//! sample and no time-constant displacement is representable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Dim;
use crate::scalar::Scalar;

/// One polynomial term: spatial exponents per axis and the time power.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub exponents: [u32; 3],
    pub time_power: u32,
}

/// Polynomial deformation model.
///
/// `coeffs[m][k]` is the coefficient of term `m` in output component `k`
/// (0 = x, 1 = y, 2 = z). Coordinates are divided by `coordinate_scale`
/// before monomial evaluation, so coefficients of a normalized model are
/// all expressed in displacement units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationModel<S> {
    dim: Dim,
    spatial_degree: usize,
    temporal_degree: usize,
    /// Sample axes allowed to appear in monomials. Doming fields for thin
    /// 3D samples conventionally exclude z (constant along the depth).
    spatial_axes: [bool; 3],
    coordinate_scale: [S; 3],
    /// Output components treated as free parameters by the fits; the other
    /// components stay pinned at zero.
    active_components: Vec<usize>,
    terms: Vec<Term>,
    coeffs: Vec<[S; 3]>,
}

impl<S: Scalar> DeformationModel<S> {
    pub fn new(
        dim: Dim,
        spatial_degree: usize,
        temporal_degree: usize,
        spatial_axes: [bool; 3],
        coordinate_scale: [S; 3],
        active_components: Vec<usize>,
    ) -> Result<Self> {
        if temporal_degree < 1 {
            return Err(Error::InvalidConfig(
                "temporal degree must be >= 1".into(),
            ));
        }
        if coordinate_scale.iter().any(|s| *s <= S::zero()) {
            return Err(Error::InvalidConfig(
                "coordinate scales must be positive".into(),
            ));
        }
        let mut active = active_components;
        active.sort_unstable();
        active.dedup();
        if active.iter().any(|k| *k > 2) {
            return Err(Error::InvalidConfig("component index out of range".into()));
        }
        if dim == Dim::Two && (spatial_axes[1] || active.contains(&1)) {
            return Err(Error::InvalidConfig(
                "2D fields cannot involve the y axis".into(),
            ));
        }
        let terms = enumerate_terms(spatial_degree, temporal_degree, spatial_axes);
        let coeffs = vec![[S::zero(); 3]; terms.len()];
        Ok(Self {
            dim,
            spatial_degree,
            temporal_degree,
            spatial_axes,
            coordinate_scale,
            active_components: active,
            terms,
            coeffs,
        })
    }

    pub fn dim(&self) -> Dim {
        self.dim
    }

    pub fn spatial_degree(&self) -> usize {
        self.spatial_degree
    }

    pub fn temporal_degree(&self) -> usize {
        self.temporal_degree
    }

    pub fn coordinate_scale(&self) -> [S; 3] {
        self.coordinate_scale
    }

    pub fn active_components(&self) -> &[usize] {
        &self.active_components
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn coeffs(&self) -> &[[S; 3]] {
        &self.coeffs
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().flatten().all(|c| c.is_zero())
    }

    /// Same structure, all coefficients zero.
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for c in &mut out.coeffs {
            *c = [S::zero(); 3];
        }
        out
    }

    fn term_index(&self, exponents: [u32; 3], time_power: u32) -> Result<usize> {
        self.terms
            .iter()
            .position(|t| t.exponents == exponents && t.time_power == time_power)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "term x^{} y^{} z^{} t^{} not in basis (degree {} / {})",
                    exponents[0],
                    exponents[1],
                    exponents[2],
                    time_power,
                    self.spatial_degree,
                    self.temporal_degree
                ))
            })
    }

    pub fn set_coeff(
        &mut self,
        exponents: [u32; 3],
        time_power: u32,
        component: usize,
        value: S,
    ) -> Result<()> {
        if self.dim == Dim::Two && component == 1 {
            return Err(Error::InvalidConfig(
                "2D fields cannot displace along y".into(),
            ));
        }
        let m = self.term_index(exponents, time_power)?;
        self.coeffs[m][component] = value;
        Ok(())
    }

    pub fn coeff(&self, exponents: [u32; 3], time_power: u32, component: usize) -> Result<S> {
        Ok(self.coeffs[self.term_index(exponents, time_power)?][component])
    }

    /// Displacement at sample point `r` and time `t`.
    pub fn eval(&self, r: &[S; 3], t: S) -> [S; 3] {
        let mut out = [S::zero(); 3];
        let rn = self.normalized(r);
        for (term, c) in self.terms.iter().zip(&self.coeffs) {
            let mono = monomial(&rn, term, t);
            for k in 0..3 {
                out[k] = out[k] + c[k] * mono;
            }
        }
        out
    }

    /// Monomial values per term at `(r, t)`: entry `m` is
    /// `∂D_k/∂coeffs[m][k]`, identical for every component `k`.
    pub fn param_monomials(&self, r: &[S; 3], t: S) -> Vec<S> {
        let rn = self.normalized(r);
        self.terms
            .iter()
            .map(|term| monomial(&rn, term, t))
            .collect()
    }

    /// Spatial Jacobian `J[k][a] = ∂D_k/∂r_a` at `(r, t)`.
    pub fn spatial_jacobian(&self, r: &[S; 3], t: S) -> [[S; 3]; 3] {
        let rn = self.normalized(r);
        let mut jac = [[S::zero(); 3]; 3];
        for (term, c) in self.terms.iter().zip(&self.coeffs) {
            let tp = t.powi(term.time_power as i32);
            if tp.is_zero() {
                continue;
            }
            for a in 0..3 {
                let ea = term.exponents[a];
                if ea == 0 {
                    continue;
                }
                let mut d = S::from_usize_c(ea as usize) / self.coordinate_scale[a];
                for b in 0..3 {
                    let e = if b == a {
                        term.exponents[b] - 1
                    } else {
                        term.exponents[b]
                    };
                    d = d * rn[b].powi(e as i32);
                }
                d = d * tp;
                for k in 0..3 {
                    jac[k][a] = jac[k][a] + c[k] * d;
                }
            }
        }
        jac
    }

    /// Free parameters (active components, component-major) as a flat vector.
    pub fn params(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.n_params());
        for &k in &self.active_components {
            for c in &self.coeffs {
                out.push(c[k]);
            }
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.active_components.len() * self.terms.len()
    }

    pub fn set_params(&mut self, params: &[S]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::ShapeMismatch {
                context: "deformation parameter vector".into(),
                expected: format!("{}", self.n_params()),
                actual: format!("{}", params.len()),
            });
        }
        let n = self.terms.len();
        for (i, &k) in self.active_components.iter().enumerate() {
            for m in 0..n {
                self.coeffs[m][k] = params[i * n + m];
            }
        }
        Ok(())
    }

    /// Maps a flat parameter index back to `(term index, component)`.
    pub fn param_location(&self, param_index: usize) -> (usize, usize) {
        let n = self.terms.len();
        (param_index % n, self.active_components[param_index / n])
    }

    fn normalized(&self, r: &[S; 3]) -> [S; 3] {
        [
            r[0] / self.coordinate_scale[0],
            r[1] / self.coordinate_scale[1],
            r[2] / self.coordinate_scale[2],
        ]
    }
}

fn monomial<S: Scalar>(rn: &[S; 3], term: &Term, t: S) -> S {
    let mut v = t.powi(term.time_power as i32);
    for a in 0..3 {
        if term.exponents[a] > 0 {
            v = v * rn[a].powi(term.exponents[a] as i32);
        }
    }
    v
}

/// Deterministic term order: time power, then lexicographic exponents.
fn enumerate_terms(d_p: usize, d_t: usize, axes: [bool; 3]) -> Vec<Term> {
    let mut terms = Vec::new();
    let cap = |on: bool| if on { d_p as u32 } else { 0 };
    for zeta in 1..=d_t as u32 {
        for ex in 0..=cap(axes[0]) {
            for ey in 0..=cap(axes[1]).saturating_sub(ex) {
                for ez in 0..=cap(axes[2]).saturating_sub(ex + ey) {
                    terms.push(Term {
                        exponents: [ex, ey, ez],
                        time_power: zeta,
                    });
                }
            }
        }
    }
    terms
}
