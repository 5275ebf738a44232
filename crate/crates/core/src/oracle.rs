//! Exact second moments of linear observables of the evolved spliced field.
//!
//! An observable is written through its dual spectra `(α, β)` as
//! `X = L⁻³ Σ_k (α(k) û₀(k) + β(k) v̂₀(k))`, i.e. `X = ⟨a, u₀⟩ + ⟨b, v₀⟩` with
//! `a(y) = L⁻³ Σ α(k) e^{ik·y}`. For `Y₀ = ζ₋ Y₋ + ζ₊ Y₊` with independent homogeneous
//! components this gives
//! `Cov(X₁, X₂) = Σ_± L⁻³ Σ_k [s₀₀^± Re(conj(ŵ₁) ŵ₂) + s₁₁^± Re(conj(ẑ₁) ẑ₂)]`
//! where `w = a ζ±` and `z = b ζ±`. The formula only involves covariances, so it also applies
//! to odd pushforwards once their pushed-forward densities are supplied.

use num_complex::Complex64;

use crate::error::Result;
use crate::fields::{splice_weights, MeasureSpec, TwoTempSpec};
use crate::lattice::{Lattice, Transform};
use crate::propagate::PropagatorPlan;
use crate::testfn::TestFunction;

/// Scalar field components that can be probed pointwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    U,
    V,
    /// `∂_j u` for `j = 0, 1, 2`.
    Grad(usize),
}

/// Dual spectra of a linear observable of the initial data.
#[derive(Debug, Clone, PartialEq)]
pub struct Observable {
    pub alpha: Vec<Complex64>,
    pub beta: Vec<Complex64>,
}

impl Observable {
    /// The value of `component` at lattice `site` at the time of `plan`.
    pub fn point(plan: &PropagatorPlan, component: Component, site: usize) -> Self {
        let lattice = *plan.lattice();
        let x = lattice.position(site);
        let kd = lattice.derivative_wavenumbers();
        let n = lattice.len();
        let mut alpha = Vec::with_capacity(n);
        let mut beta = Vec::with_capacity(n);
        for idx in 0..n {
            let k = lattice.kvec(idx);
            let phase = Complex64::from_polar(1.0, -(k[0] * x[0] + k[1] * x[1] + k[2] * x[2]));
            let (c, s, ks) = plan.multipliers(idx);
            let (a, b) = match component {
                Component::U => (Complex64::new(c, 0.0), Complex64::new(s, 0.0)),
                Component::V => (Complex64::new(-ks, 0.0), Complex64::new(c, 0.0)),
                Component::Grad(j) => {
                    let kj = kd[lattice.unravel(idx)[j]];
                    (Complex64::new(0.0, -kj * c), Complex64::new(0.0, -kj * s))
                }
            };
            alpha.push(a * phase);
            beta.push(b * phase);
        }
        Self { alpha, beta }
    }

    /// `⟨Y(t), Ψ⟩` at the time of `plan`.
    pub fn functional(plan: &PropagatorPlan, psi0: &[Complex64], psi1: &[Complex64]) -> Self {
        let n = plan.lattice().len();
        let mut alpha = Vec::with_capacity(n);
        let mut beta = Vec::with_capacity(n);
        for idx in 0..n {
            let (c, s, ks) = plan.multipliers(idx);
            let (p0, p1) = (psi0[idx].conj(), psi1[idx].conj());
            alpha.push(p0 * c - p1 * ks);
            beta.push(p0 * s + p1 * c);
        }
        Self { alpha, beta }
    }

    pub fn functional_of(plan: &PropagatorPlan, transform: &Transform, psi: &TestFunction) -> Self {
        let (a, b) = psi.spectra(transform);
        Self::functional(plan, &a, &b)
    }
}

/// Per-phase spectra of `a ζ±` and `b ζ±` for one observable.
#[derive(Debug, Clone)]
pub struct DualRep {
    minus_u: Vec<Complex64>,
    minus_v: Vec<Complex64>,
    plus_u: Vec<Complex64>,
    plus_v: Vec<Complex64>,
}

/// Exact covariance of linear observables under a spliced measure.
pub struct CovarianceOracle<'a> {
    transform: &'a Transform,
    minus: MeasureSpec,
    plus: MeasureSpec,
    zeta_minus: Vec<f64>,
    zeta_plus: Vec<f64>,
}

impl<'a> CovarianceOracle<'a> {
    /// Oracle for the splice geometry of `spec` with effective (possibly pushed-forward)
    /// densities `minus` and `plus`.
    pub fn new(transform: &'a Transform, spec: &TwoTempSpec, minus: MeasureSpec, plus: MeasureSpec) -> Result<Self> {
        let lattice = *transform.lattice();
        lattice.same_as(&spec.lattice())?;
        lattice.same_as(&minus.lattice())?;
        lattice.same_as(&plus.lattice())?;
        let (zeta_minus, zeta_plus) = splice_weights(&lattice, spec.half_width_a, spec.profile);
        Ok(Self { transform, minus, plus, zeta_minus, zeta_plus })
    }

    /// Oracle for a homogeneous measure (no splice).
    pub fn homogeneous(transform: &'a Transform, spec: MeasureSpec) -> Result<Self> {
        let lattice = *transform.lattice();
        lattice.same_as(&spec.lattice())?;
        let n = lattice.n();
        Ok(Self {
            transform,
            minus: MeasureSpec::zeros(lattice),
            plus: spec,
            zeta_minus: vec![0.0; n],
            zeta_plus: vec![1.0; n],
        })
    }

    fn lattice(&self) -> &Lattice {
        self.transform.lattice()
    }

    pub fn dual(&self, obs: &Observable) -> DualRep {
        let lattice = *self.lattice();
        let conj = |v: &[Complex64]| -> Vec<Complex64> { v.iter().map(|z| z.conj()).collect() };
        let (a, b) = self.transform.inverse_pair(&conj(&obs.alpha), &conj(&obs.beta));
        let n = lattice.n();
        let weighted = |f: &[f64], zeta: &[f64]| -> Vec<f64> {
            f.iter().enumerate().map(|(i, x)| x * zeta[i % n]).collect()
        };
        let (minus_u, minus_v) =
            self.transform.forward_pair(&weighted(&a, &self.zeta_minus), &weighted(&b, &self.zeta_minus));
        let (plus_u, plus_v) =
            self.transform.forward_pair(&weighted(&a, &self.zeta_plus), &weighted(&b, &self.zeta_plus));
        DualRep { minus_u, minus_v, plus_u, plus_v }
    }

    pub fn covariance(&self, d1: &DualRep, d2: &DualRep) -> f64 {
        let pair = |s: &[f64], x: &[Complex64], y: &[Complex64]| -> f64 {
            s.iter().zip(x).zip(y).map(|((&s, a), b)| s * (a.conj() * b).re).sum()
        };
        let total = pair(&self.minus.s00.values, &d1.minus_u, &d2.minus_u)
            + pair(&self.minus.s11.values, &d1.minus_v, &d2.minus_v)
            + pair(&self.plus.s00.values, &d1.plus_u, &d2.plus_u)
            + pair(&self.plus.s11.values, &d1.plus_v, &d2.plus_v);
        total / self.lattice().volume()
    }

    pub fn variance(&self, obs: &Observable) -> f64 {
        let d = self.dual(obs);
        self.covariance(&d, &d)
    }

    /// `E[Y^i(x,t) Y^j(y,t)]` for two lattice sites.
    pub fn point_covariance(&self, plan: &PropagatorPlan, ci: Component, x: usize, cj: Component, y: usize) -> f64 {
        let a = self.dual(&Observable::point(plan, ci, x));
        let b = self.dual(&Observable::point(plan, cj, y));
        self.covariance(&a, &b)
    }

    /// Exact mean current `E[−v ∇u]` at a lattice site.
    pub fn mean_current(&self, plan: &PropagatorPlan, site: usize) -> [f64; 3] {
        let v = self.dual(&Observable::point(plan, Component::V, site));
        let mut j = [0.0; 3];
        for (a, ja) in j.iter_mut().enumerate() {
            let g = self.dual(&Observable::point(plan, Component::Grad(a), site));
            *ja = -self.covariance(&v, &g);
        }
        j
    }
}
