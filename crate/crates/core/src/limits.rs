//! Equilibrium limit objects: the kernels `E` and `P`, the direction-averaged plane-integral
//! operators and their verifiers, the limit correlation matrix, the Gibbs closed forms and the
//! energy-current constant.
//!
//! `E` is the fundamental solution of the Laplacian (multiplier `−1/|k|²`) and `P` has
//! multiplier `−i sgn(k₃)/|k|`. On the torus both act on the mean-zero sector; their zero modes
//! are pinned to 0 and, because `P` is odd, its multiplier also vanishes on the `k₃` Nyquist
//! plane where a real odd multiplier cannot be represented.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::{MeasureSpec, SmoothingKernel};
use crate::lattice::{Lattice, Transform};
use crate::quadrature::{HemisphereRule, SphereQuadrature};
use crate::testfn::{Profile, TestFunction};

/// A convolution kernel stored by its Fourier multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub lattice: Lattice,
    pub multiplier: Vec<Complex64>,
}

impl Kernel {
    /// `K ∗ f` for a real field.
    pub fn apply(&self, transform: &Transform, f: &[f64]) -> Vec<f64> {
        let mut spec = transform.forward_real(f);
        for (z, m) in spec.iter_mut().zip(&self.multiplier) {
            *z *= m;
        }
        transform.inverse_real(&spec)
    }

    /// Real-space samples `K(x) = L⁻³ Σ K̂ e^{-ik·x}`.
    pub fn real_space(&self, transform: &Transform) -> Vec<f64> {
        transform.inverse_real(&self.multiplier)
    }

    /// Largest violation of `K̂(−k) = conj(K̂(k))`.
    pub fn hermitian_defect(&self) -> f64 {
        (0..self.multiplier.len())
            .map(|i| (self.multiplier[self.lattice.partner(i)] - self.multiplier[i].conj()).norm())
            .fold(0.0, f64::max)
    }
}

/// `Ê(k) = −1/|k|²` with `Ê(0) = 0`.
pub fn kernel_e(lattice: Lattice) -> Kernel {
    let multiplier = lattice
        .kappa_table()
        .iter()
        .map(|&k| Complex64::new(if k > 0.0 { -1.0 / (k * k) } else { 0.0 }, 0.0))
        .collect();
    Kernel { lattice, multiplier }
}

/// `sgn(k₃)` with the `k₃ = 0` and `k₃` Nyquist planes set to 0.
fn sgn3(lattice: &Lattice, idx: usize) -> f64 {
    let i3 = lattice.unravel(idx)[2];
    if i3 == 0 || i3 == lattice.nyquist() {
        0.0
    } else if lattice.signed(i3) > 0 {
        1.0
    } else {
        -1.0
    }
}

/// `P̂(k) = −i sgn(k₃)/|k|`.
pub fn kernel_p(lattice: Lattice) -> Kernel {
    let kap = lattice.kappa_table();
    let multiplier = (0..lattice.len())
        .map(|i| {
            let s = sgn3(&lattice, i);
            if s == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::new(0.0, -s / kap[i])
            }
        })
        .collect();
    Kernel { lattice, multiplier }
}

/// Spectral Laplacian with the continuum symbol `−|k|²`.
pub fn laplacian(transform: &Transform, f: &[f64]) -> Vec<f64> {
    let kap = transform.lattice().kappa_table();
    let mut spec = transform.forward_real(f);
    for (z, &k) in spec.iter_mut().zip(&kap) {
        *z *= -k * k;
    }
    transform.inverse_real(&spec)
}

/// How the direction-averaged plane-integral operators are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RadonMethod {
    Spectral,
    PlaneQuadrature { sphere_order: usize, plane_points: usize },
}

/// `R f = −¼ E ∗ f` through the multiplier.
pub fn operator_r_spectral(transform: &Transform, f: &[f64]) -> Vec<f64> {
    kernel_e(*transform.lattice()).apply(transform, f).iter().map(|x| -0.25 * x).collect()
}

/// `𝒫 f = ¼ P ∗ f` through the multiplier.
pub fn operator_pcal_spectral(transform: &Transform, f: &[f64]) -> Vec<f64> {
    kernel_p(*transform.lattice()).apply(transform, f).iter().map(|x| 0.25 * x).collect()
}

/// Trapezoid integral over the plane `{p : p·ω = s}` of `g`, restricted to the disk where the
/// plane meets the ball of radius `support`. Returns 0 when the plane misses the ball.
pub fn plane_integral(g: &dyn Fn([f64; 3]) -> f64, omega: [f64; 3], s: f64, support: f64, points: usize) -> f64 {
    if s.abs() >= support {
        return 0.0;
    }
    let rho = (support * support - s * s).sqrt();
    let (e1, e2) = orthonormal_frame(omega);
    let step = 2.0 * rho / points as f64;
    let foot = [s * omega[0], s * omega[1], s * omega[2]];
    let mut total = 0.0;
    for i in 0..points {
        let a = -rho + (i as f64 + 0.5) * step;
        for j in 0..points {
            let b = -rho + (j as f64 + 0.5) * step;
            if a * a + b * b >= rho * rho {
                continue;
            }
            let p = [
                foot[0] + a * e1[0] + b * e2[0],
                foot[1] + a * e1[1] + b * e2[1],
                foot[2] + a * e1[2] + b * e2[2],
            ];
            total += g(p);
        }
    }
    total * step * step
}

/// Two unit vectors completing `ω` to an orthonormal frame.
pub fn orthonormal_frame(omega: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if omega[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let d = helper[0] * omega[0] + helper[1] * omega[1] + helper[2] * omega[2];
    let mut e1 = [helper[0] - d * omega[0], helper[1] - d * omega[1], helper[2] - d * omega[2]];
    let n1 = (e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]).sqrt();
    e1.iter_mut().for_each(|c| *c /= n1);
    let e2 = [
        omega[1] * e1[2] - omega[2] * e1[1],
        omega[2] * e1[0] - omega[0] * e1[2],
        omega[0] * e1[1] - omega[1] * e1[0],
    ];
    (e1, e2)
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Full-sphere direction average `(1/(4π)²) ∫_{S²} dω ∫_{p·ω = x·ω} f(p) dp` at each point.
/// For compactly supported `f` this equals `−½ E ∗ f` on ℝ³.
pub fn sphere_plane_average(f: &dyn Profile, points: &[[f64; 3]], quad: &SphereQuadrature, plane_points: usize) -> Vec<f64> {
    let support = f.support_radius();
    let g = |p: [f64; 3]| f.value(p);
    points
        .par_iter()
        .map(|&x| {
            let s: f64 = quad
                .nodes()
                .iter()
                .zip(quad.weights())
                .map(|(&om, &w)| w * plane_integral(&g, om, dot(x, om), support, plane_points))
                .sum();
            s / (16.0 * PI * PI)
        })
        .collect()
}

/// `R f(x) = (1/(4π)²) ∫_{ω₃>0} dω ∫_{p·ω = x·ω} f(p) dp`. The plane integral is even in `ω`,
/// so the hemisphere integral is half of the full-sphere one.
pub fn operator_r_quadrature(f: &dyn Profile, points: &[[f64; 3]], quad: &SphereQuadrature, plane_points: usize) -> Vec<f64> {
    sphere_plane_average(f, points, quad, plane_points).into_iter().map(|v| 0.5 * v).collect()
}

/// `𝒫 f(x) = (1/(4π)²) ∫_{ω₃>0} dω ∫_{p·ω = x·ω} ∇f(p)·ω dp` with a hemisphere product rule
/// (the integrand is odd in `ω`).
pub fn operator_pcal_quadrature(f: &dyn Profile, points: &[[f64; 3]], rule: &HemisphereRule, plane_points: usize) -> Vec<f64> {
    let support = f.support_radius();
    points
        .par_iter()
        .map(|&x| {
            let s: f64 = rule
                .nodes
                .iter()
                .zip(&rule.weights)
                .map(|(&om, &w)| {
                    let g = |p: [f64; 3]| dot(f.gradient(p), om);
                    w * plane_integral(&g, om, dot(x, om), support, plane_points)
                })
                .sum();
            s / (16.0 * PI * PI)
        })
        .collect()
}

fn check_support(lattice: &Lattice, f: &dyn Profile) -> Result<()> {
    if f.support_radius() > lattice.side() / 4.0 {
        return Err(Error::Support(format!(
            "profile support radius {} exceeds L/4 = {}",
            f.support_radius(),
            lattice.side() / 4.0
        )));
    }
    Ok(())
}

/// `R f` at lattice sites by the chosen method. The quadrature path needs an analytic
/// compactly supported profile; the spectral path samples it on the lattice.
pub fn operator_r(transform: &Transform, f: &dyn Profile, sites: &[usize], method: RadonMethod) -> Result<Vec<f64>> {
    let lattice = *transform.lattice();
    match method {
        RadonMethod::Spectral => {
            let r = operator_r_spectral(transform, &f.sample(&lattice));
            Ok(sites.iter().map(|&i| r[i]).collect())
        }
        RadonMethod::PlaneQuadrature { sphere_order, plane_points } => {
            check_support(&lattice, f)?;
            let quad = SphereQuadrature::for_order(sphere_order)?;
            let pts: Vec<[f64; 3]> = sites.iter().map(|&i| lattice.position(i)).collect();
            Ok(operator_r_quadrature(f, &pts, &quad, plane_points))
        }
    }
}

/// `𝒫 f` at lattice sites by the chosen method.
pub fn operator_pcal(transform: &Transform, f: &dyn Profile, sites: &[usize], method: RadonMethod) -> Result<Vec<f64>> {
    let lattice = *transform.lattice();
    match method {
        RadonMethod::Spectral => {
            let r = operator_pcal_spectral(transform, &f.sample(&lattice));
            Ok(sites.iter().map(|&i| r[i]).collect())
        }
        RadonMethod::PlaneQuadrature { sphere_order, plane_points } => {
            check_support(&lattice, f)?;
            let rule = HemisphereRule::new(sphere_order);
            let pts: Vec<[f64; 3]> = sites.iter().map(|&i| lattice.position(i)).collect();
            Ok(operator_pcal_quadrature(f, &pts, &rule, plane_points))
        }
    }
}

/// Relative sup-norm distance of two probe vectors after removing their values at a
/// reference probe (the torus operators are defined modulo constants).
pub fn relative_residual_mod_constant(a: &[f64], b: &[f64], reference: usize) -> f64 {
    let da: Vec<f64> = a.iter().map(|x| x - a[reference]).collect();
    let db: Vec<f64> = b.iter().map(|x| x - b[reference]).collect();
    let scale = db.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return da.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    }
    da.iter().zip(&db).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Residual of the full-sphere plane-average identity `= −½ E ∗ f` at the given sites: direction
/// quadrature against the multiplier evaluation, compared modulo constants with the last site
/// as reference.
pub fn verify_radon_identity(
    transform: &Transform,
    f: &dyn Profile,
    sites: &[usize],
    sphere_order: usize,
    plane_points: usize,
) -> Result<f64> {
    let lattice = *transform.lattice();
    check_support(&lattice, f)?;
    if sites.is_empty() {
        return Err(Error::InvalidParameter("no probe sites".into()));
    }
    let quad = SphereQuadrature::for_order(sphere_order)?;
    let pts: Vec<[f64; 3]> = sites.iter().map(|&i| lattice.position(i)).collect();
    let direct = sphere_plane_average(f, &pts, &quad, plane_points);
    let full = kernel_e(lattice).apply(transform, &f.sample(&lattice));
    let spectral: Vec<f64> = sites.iter().map(|&i| -0.5 * full[i]).collect();
    Ok(relative_residual_mod_constant(&direct, &spectral, sites.len() - 1))
}

/// Sup-norm of `R(Δg) + ¼g` relative to `‖g‖` after removing the mean of `g`.
pub fn laplacian_identity_residual(transform: &Transform, g: &[f64]) -> f64 {
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    let g0: Vec<f64> = g.iter().map(|x| x - mean).collect();
    let r = operator_r_spectral(transform, &laplacian(transform, &g0));
    let scale = g0.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let d = r.iter().zip(&g0).fold(0.0f64, |m, (a, b)| m.max((a + 0.25 * b).abs()));
    if scale == 0.0 {
        d
    } else {
        d / scale
    }
}

/// Real-space correlation matrix `q^{ij}(z)` on the lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSet {
    pub lattice: Lattice,
    pub q00: Vec<f64>,
    pub q01: Vec<f64>,
    pub q10: Vec<f64>,
    pub q11: Vec<f64>,
}

/// The equilibrium correlation matrix `q∞^{ij}(z)`.
pub type LimitCorrelations = CorrelationSet;

impl CorrelationSet {
    /// Correlations of a measure with vanishing cross terms.
    pub fn from_measure(transform: &Transform, spec: &MeasureSpec) -> Result<Self> {
        transform.lattice().same_as(&spec.lattice())?;
        let lattice = spec.lattice();
        Ok(Self {
            lattice,
            q00: spec.s00.correlation(transform),
            q01: vec![0.0; lattice.len()],
            q10: vec![0.0; lattice.len()],
            q11: spec.s11.correlation(transform),
        })
    }

    /// Largest `|q¹⁰ + q⁰¹|`.
    pub fn antisymmetry_defect(&self) -> f64 {
        self.q10.iter().zip(&self.q01).fold(0.0f64, |m, (a, b)| m.max((a + b).abs()))
    }

    /// Sup-norm of `q¹¹ + Δq⁰⁰` relative to `sup|q¹¹|`, on the mean-zero sector.
    pub fn laplacian_defect(&self, transform: &Transform) -> f64 {
        let lap = laplacian(transform, &self.q00);
        let mean = self.q11.iter().sum::<f64>() / self.q11.len() as f64;
        let scale = self.q11.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let d = self.q11.iter().zip(&lap).fold(0.0f64, |m, (a, b)| m.max((a - mean + b).abs()));
        if scale == 0.0 {
            d
        } else {
            d / scale
        }
    }
}

/// Limit spectra `(q̂⁰⁰∞, q̂¹⁰∞, q̂¹¹∞)`; `q̂⁰¹∞ = −q̂¹⁰∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitSpectra {
    pub lattice: Lattice,
    pub q00: Vec<Complex64>,
    pub q10: Vec<Complex64>,
    pub q11: Vec<Complex64>,
}

impl LimitSpectra {
    /// Multiplier calculus of the limit formulas for general input spectra.
    pub fn from_spectra(
        lattice: Lattice,
        minus: [&[Complex64]; 4],
        plus: [&[Complex64]; 4],
    ) -> Self {
        let kap = lattice.kappa_table();
        let pk = kernel_p(lattice).multiplier;
        let n = lattice.len();
        let mut q00 = Vec::with_capacity(n);
        let mut q10 = Vec::with_capacity(n);
        let mut q11 = Vec::with_capacity(n);
        let [m00, m01, m10, m11] = minus;
        let [p00, p01, p10, p11] = plus;
        for i in 0..n {
            let k2 = kap[i] * kap[i];
            let e = if k2 > 0.0 { -1.0 / k2 } else { 0.0 };
            let p = pk[i];
            q00.push(0.25 * (p00[i] + m00[i] - (p11[i] + m11[i]) * e + p * (p01[i] - m01[i] - p10[i] + m10[i])));
            q10.push(0.25 * (p10[i] + m10[i] - p01[i] - m01[i] + p * (p11[i] - m11[i] + (p00[i] - m00[i]) * k2)));
            q11.push(0.25 * (p11[i] + m11[i] + (p00[i] + m00[i]) * k2 - p * (p10[i] - m10[i] - p01[i] + m01[i]) * k2));
        }
        Self { lattice, q00, q10, q11 }
    }

    /// Limit spectra for two measures with vanishing cross terms.
    pub fn from_measures(minus: &MeasureSpec, plus: &MeasureSpec) -> Result<Self> {
        minus.lattice().same_as(&plus.lattice())?;
        let lattice = minus.lattice();
        let c = |v: &[f64]| -> Vec<Complex64> { v.iter().map(|&x| Complex64::new(x, 0.0)).collect() };
        let zero = vec![Complex64::new(0.0, 0.0); lattice.len()];
        let (m00, m11, p00, p11) = (c(&minus.s00.values), c(&minus.s11.values), c(&plus.s00.values), c(&plus.s11.values));
        Ok(Self::from_spectra(lattice, [&m00, &zero, &zero, &m11], [&p00, &zero, &zero, &p11]))
    }

    /// Gibbs closed forms smoothed by `θ`.
    pub fn gibbs(transform: &Transform, t_minus: f64, t_plus: f64, theta: &SmoothingKernel) -> Result<Self> {
        if !(t_minus >= 0.0) || !(t_plus >= 0.0) {
            return Err(Error::InvalidParameter("temperatures must be nonnegative".into()));
        }
        let lattice = *transform.lattice();
        lattice.same_as(&theta.lattice)?;
        let pw = theta.power_spectrum(transform);
        let kap = lattice.kappa_table();
        let pk = kernel_p(lattice).multiplier;
        let sum = 0.5 * (t_plus + t_minus);
        let diff = 0.5 * (t_plus - t_minus);
        let q00 = pw
            .iter()
            .zip(&kap)
            .map(|(&p, &k)| Complex64::new(if k > 0.0 { sum * p / (k * k) } else { 0.0 }, 0.0))
            .collect();
        let q10 = pw.iter().zip(&pk).map(|(&p, &m)| m * (diff * p)).collect();
        let q11 = pw.iter().map(|&p| Complex64::new(sum * p, 0.0)).collect();
        Ok(Self { lattice, q00, q10, q11 })
    }

    /// Real-space correlation matrix.
    pub fn to_correlations(&self, transform: &Transform) -> LimitCorrelations {
        let q00 = transform.inverse_real(&self.q00);
        let q10 = transform.inverse_real(&self.q10);
        let q11 = transform.inverse_real(&self.q11);
        let q01 = q10.iter().map(|x| -x).collect();
        CorrelationSet { lattice: self.lattice, q00, q01, q10, q11 }
    }

    /// `q¹¹∞(0)`.
    pub fn q11_at_origin(&self) -> f64 {
        self.q11.iter().map(|z| z.re).sum::<f64>() / self.lattice.volume()
    }

    /// Mean current in the limit, `∇q¹⁰∞(0) = L⁻³ Σ (−ik) q̂¹⁰∞`.
    pub fn current(&self) -> [f64; 3] {
        let kd = self.lattice.derivative_wavenumbers();
        let mut j = [0.0; 3];
        for (idx, z) in self.q10.iter().enumerate() {
            let ii = self.lattice.unravel(idx);
            for a in 0..3 {
                j[a] += (Complex64::new(0.0, -kd[ii[a]]) * z).re;
            }
        }
        j.map(|x| x / self.lattice.volume())
    }

    /// `Q∞(Ψ, Ψ) = L⁻³ Σ_k Σ_ij q̂^{ij} conj(Ψ̂ⁱ) Ψ̂ʲ`.
    pub fn quadratic_form(&self, psi0: &[Complex64], psi1: &[Complex64]) -> f64 {
        let mut s = 0.0;
        for i in 0..psi0.len() {
            let (a, b) = (psi0[i], psi1[i]);
            s += (self.q00[i] * a.conj() * a).re
                + (self.q11[i] * b.conj() * b).re
                + (self.q10[i] * b.conj() * a).re
                - (self.q10[i] * a.conj() * b).re;
        }
        s / self.lattice.volume()
    }
}

/// Limit correlation matrix from lattice samplings of the two input correlation sets.
pub fn limit_correlations(transform: &Transform, minus: &CorrelationSet, plus: &CorrelationSet) -> Result<LimitCorrelations> {
    minus.lattice.same_as(&plus.lattice)?;
    transform.lattice().same_as(&minus.lattice)?;
    let f = |v: &[f64]| transform.forward_real(v);
    let (m00, m01, m10, m11) = (f(&minus.q00), f(&minus.q01), f(&minus.q10), f(&minus.q11));
    let (p00, p01, p10, p11) = (f(&plus.q00), f(&plus.q01), f(&plus.q10), f(&plus.q11));
    let spectra = LimitSpectra::from_spectra(minus.lattice, [&m00, &m01, &m10, &m11], [&p00, &p01, &p10, &p11]);
    Ok(spectra.to_correlations(transform))
}

/// Gibbs limit correlations smoothed by `θ`.
pub fn gibbs_limit_correlations(transform: &Transform, t_minus: f64, t_plus: f64, theta: &SmoothingKernel) -> Result<LimitCorrelations> {
    Ok(LimitSpectra::gibbs(transform, t_minus, t_plus, theta)?.to_correlations(transform))
}

/// `Q∞(Ψ, Ψ)` from a real-space limit correlation matrix.
pub fn quadratic_form_qinf(transform: &Transform, psi: &TestFunction, q: &LimitCorrelations) -> Result<f64> {
    transform.lattice().same_as(&psi.lattice)?;
    transform.lattice().same_as(&q.lattice)?;
    let (a, b) = psi.spectra(transform);
    let f = |v: &[f64]| transform.forward_real(v);
    let (q00, q01, q10, q11) = (f(&q.q00), f(&q.q01), f(&q.q10), f(&q.q11));
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (q00[i] * a[i].conj() * a[i]).re
            + (q01[i] * a[i].conj() * b[i]).re
            + (q10[i] * b[i].conj() * a[i]).re
            + (q11[i] * b[i].conj() * b[i]).re;
    }
    Ok(s / q.lattice.volume())
}

/// Predicted limit energy current `−C_θ (0, 0, T₊ − T₋)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurrentPrediction {
    pub c_theta: f64,
    pub j_vector: [f64; 3],
}

/// `C_θ = (1/(2L³)) Σ_k |θ̂|² |k₃|/|k|`, the lattice Riemann sum of `(1/(2(2π)³)) ∫ |θ̂|² |k₃|/|k| dk`.
/// Without axial symmetry the full vector `−(T₊−T₋)/(2L³) Σ |θ̂|² k sgn(k₃)/|k|` is returned.
pub fn current_constant(transform: &Transform, theta: &SmoothingKernel, t_minus: f64, t_plus: f64) -> Result<CurrentPrediction> {
    let lattice = *transform.lattice();
    lattice.same_as(&theta.lattice)?;
    let pw = theta.power_spectrum(transform);
    let kap = lattice.kappa_table();
    let kd = lattice.derivative_wavenumbers();
    let mut v = [0.0; 3];
    for idx in 0..lattice.len() {
        let s = sgn3(&lattice, idx);
        if s == 0.0 {
            continue;
        }
        let ii = lattice.unravel(idx);
        for a in 0..3 {
            v[a] += pw[idx] * kd[ii[a]] * s / kap[idx];
        }
    }
    let scale = 1.0 / (2.0 * lattice.volume());
    let c_theta = v[2] * scale;
    let dt = t_plus - t_minus;
    let j_vector = if theta.axially_symmetric {
        [0.0, 0.0, -c_theta * dt]
    } else {
        [-v[0] * scale * dt, -v[1] * scale * dt, -c_theta * dt]
    };
    Ok(CurrentPrediction { c_theta, j_vector })
}

/// Periodic Green function of the Laplacian with zero cell mean, `ΔG = δ − L⁻³`, by Ewald
/// summation with splitting parameter `alpha`.
pub fn ewald_green(x: [f64; 3], side: f64, alpha: f64) -> f64 {
    let l = side;
    let mut real = 0.0;
    let images = (6.0 / (alpha * l)).ceil() as i64 + 1;
    for a in -images..=images {
        for b in -images..=images {
            for c in -images..=images {
                let y = [x[0] + a as f64 * l, x[1] + b as f64 * l, x[2] + c as f64 * l];
                let r = (y[0] * y[0] + y[1] * y[1] + y[2] * y[2]).sqrt();
                if r < 1e-300 {
                    continue;
                }
                real -= libm::erfc(alpha * r) / (4.0 * PI * r);
            }
        }
    }
    let kmax = (2.0 * alpha * 6.5 * l / (2.0 * PI)).ceil() as i64;
    let mut recip = 0.0;
    for a in -kmax..=kmax {
        for b in -kmax..=kmax {
            for c in -kmax..=kmax {
                if a == 0 && b == 0 && c == 0 {
                    continue;
                }
                let k = [2.0 * PI * a as f64 / l, 2.0 * PI * b as f64 / l, 2.0 * PI * c as f64 / l];
                let k2 = dot(k, k);
                recip -= (-k2 / (4.0 * alpha * alpha)).exp() * dot(k, x).cos() / k2;
            }
        }
    }
    real + recip / (l * l * l) + 1.0 / (4.0 * alpha * alpha * l * l * l)
}

/// Periodization correction `G_torus(x) − E(x)` of the Laplacian Green function: the smooth
/// part left after removing the free-space `−1/(4π|x|)`, finite at `x = 0`.
pub fn periodization_correction(x: [f64; 3], side: f64) -> f64 {
    let alpha = 5.0 / side;
    let r = dot(x, x).sqrt();
    if r < 1e-6 * side {
        let at = |s: f64| ewald_green([s, 0.0, 0.0], side, alpha) + 1.0 / (4.0 * PI * s);
        return at(1e-3 * side);
    }
    ewald_green(x, side, alpha) + 1.0 / (4.0 * PI * r)
}

/// One row of a radial profile: shell centre and shell averages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RadialRow {
    pub radius: f64,
    pub count: usize,
    pub q00: f64,
    pub q10: f64,
    pub q11: f64,
}

/// Shell averages of the limit correlations over `|z|` bins of width `h`.
pub fn radial_profile(q: &LimitCorrelations) -> Vec<RadialRow> {
    let lattice = q.lattice;
    let h = lattice.h();
    let nbins = (lattice.side() * 3f64.sqrt() / (2.0 * h)).ceil() as usize + 1;
    let mut rows: Vec<RadialRow> = (0..nbins)
        .map(|b| RadialRow { radius: b as f64 * h, count: 0, q00: 0.0, q10: 0.0, q11: 0.0 })
        .collect();
    for idx in 0..lattice.len() {
        let b = (lattice.radius_sq(idx).sqrt() / h).round() as usize;
        let r = &mut rows[b];
        r.count += 1;
        r.q00 += q.q00[idx];
        r.q10 += q.q10[idx];
        r.q11 += q.q11[idx];
    }
    rows.retain(|r| r.count > 0);
    for r in &mut rows {
        let c = r.count as f64;
        r.q00 /= c;
        r.q10 /= c;
        r.q11 /= c;
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{spectral_density_example, SpectralDensity};
    use crate::testfn::{BumpProfile, LaplacianOf, RadialBump};

    fn setup(n: usize, h: f64) -> (Lattice, Transform) {
        let l = Lattice::new(n, h).unwrap();
        (l, Transform::new(l))
    }

    #[test]
    fn kernels_are_hermitian_and_p_is_odd() {
        let (l, tr) = setup(16, 1.0);
        let e = kernel_e(l);
        let p = kernel_p(l);
        assert_eq!(e.hermitian_defect(), 0.0);
        assert_eq!(p.hermitian_defect(), 0.0);
        let pr = p.real_space(&tr);
        for idx in 0..l.len() {
            let [a, b, c] = l.unravel(idx);
            let m = l.index(a, b, (16 - c) % 16);
            assert!((pr[idx] + pr[m]).abs() < 1e-12);
            let s = l.index((16 - a) % 16, b, c);
            assert!((pr[idx] - pr[s]).abs() < 1e-12);
        }
    }

    #[test]
    fn e_inverts_laplacian_on_mean_zero_fields() {
        let (l, tr) = setup(16, 0.5);
        let g = BumpProfile::single(RadialBump::new([0.2, 0.0, -0.1], 2.0, 6, 1.0).unwrap()).sample(&l);
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        let f: Vec<f64> = g.iter().map(|x| x - mean).collect();
        let back = laplacian(&tr, &kernel_e(l).apply(&tr, &f));
        let scale = f.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(back.iter().zip(&f).all(|(a, b)| (a - b).abs() < 1e-10 * scale));
    }

    #[test]
    fn p_quadratic_form_vanishes() {
        let (l, tr) = setup(16, 0.5);
        let f = BumpProfile::single(RadialBump::new([0.4, 0.3, 0.7], 2.5, 5, 1.0).unwrap()).sample(&l);
        let pf = kernel_p(l).apply(&tr, &f);
        let s: f64 = pf.iter().zip(&f).map(|(a, b)| a * b).sum();
        let n: f64 = f.iter().map(|x| x * x).sum();
        assert!(s.abs() < 1e-12 * n);
    }

    #[test]
    fn ewald_is_independent_of_splitting() {
        let x = [1.3, -0.4, 2.2];
        let a = ewald_green(x, 8.0, 0.5);
        let b = ewald_green(x, 8.0, 0.9);
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn periodization_correction_is_smooth_and_scales() {
        let c0 = periodization_correction([0.0; 3], 8.0);
        let c1 = periodization_correction([0.05, 0.0, 0.0], 8.0);
        assert!((c0 - c1).abs() < 1e-4 * c0.abs(), "{c0} vs {c1}");
        let big = periodization_correction([1.0, 2.0, -0.5], 16.0);
        let small = periodization_correction([0.5, 1.0, -0.25], 8.0);
        assert!((big - 0.5 * small).abs() < 1e-9, "{big} vs {small}");
    }

    #[test]
    fn torus_e_matches_ewald() {
        let (l, tr) = setup(32, 0.5);
        let e = kernel_e(l).real_space(&tr);
        let i1 = l.point_index([4, 2, 0]);
        let i2 = l.point_index([9, 3, -6]);
        let d_lat = e[i1] - e[i2];
        let d_ew = ewald_green(l.position(i1), l.side(), 0.4) - ewald_green(l.position(i2), l.side(), 0.4);
        assert!((d_lat - d_ew).abs() < 0.02 * d_ew.abs(), "{d_lat} vs {d_ew}");
    }

    #[test]
    fn equal_measures_cancel_cross_terms() {
        let (l, tr) = setup(16, 1.0);
        let spec = MeasureSpec::new(
            spectral_density_example(2.0, 1, l).unwrap(),
            SpectralDensity::constant(l, 0.4).unwrap(),
        )
        .unwrap();
        let q = CorrelationSet::from_measure(&tr, &spec).unwrap();
        let lim = limit_correlations(&tr, &q, &q).unwrap();
        assert!(lim.q10.iter().all(|x| x.abs() < 1e-14));
        let half = kernel_e(l).apply(&tr, &q.q11);
        for i in 0..l.len() {
            let expect = 0.5 * (q.q00[i] - half[i]);
            assert!((lim.q00[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn limit_identities_hold() {
        let (l, tr) = setup(16, 1.0);
        let mk = |a: f64, b: f64| {
            MeasureSpec::new(
                spectral_density_example(2.0, 2, l).unwrap().scaled(a).unwrap(),
                spectral_density_example(2.0, 2, l).unwrap().scaled(b).unwrap(),
            )
            .unwrap()
        };
        let (m, p) = (mk(0.02, 1.0), mk(0.04, 2.0));
        let lim = limit_correlations(
            &tr,
            &CorrelationSet::from_measure(&tr, &m).unwrap(),
            &CorrelationSet::from_measure(&tr, &p).unwrap(),
        )
        .unwrap();
        assert!(lim.antisymmetry_defect() < 1e-14);
        assert!(lim.laplacian_defect(&tr) < 1e-10);
        let direct = LimitSpectra::from_measures(&m, &p).unwrap().to_correlations(&tr);
        for i in 0..l.len() {
            assert!((direct.q00[i] - lim.q00[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn gibbs_closed_forms() {
        let (l, tr) = setup(16, 1.0);
        let th = SmoothingKernel::radial_bump(l, 1.9, 6, 1.0).unwrap();
        let eq = gibbs_limit_correlations(&tr, 1.5, 1.5, &th).unwrap();
        assert!(eq.q10.iter().all(|&x| x == 0.0));
        let mut delta = vec![0.0; l.len()];
        delta[0] = 1.0;
        let flat = SmoothingKernel::from_values(l, delta, 0.5, true).unwrap();
        let g = gibbs_limit_correlations(&tr, 0.5, 1.5, &flat).unwrap();
        assert!((g.q11[0] - 1.0).abs() < 1e-12);
        assert!(g.q11[1..].iter().all(|x| x.abs() < 1e-12));
        assert!(gibbs_limit_correlations(&tr, -1.0, 1.0, &th).is_err());
    }

    #[test]
    fn current_constant_scaling() {
        let (l, tr) = setup(16, 1.0);
        let th = SmoothingKernel::radial_bump(l, 1.9, 6, 1.0).unwrap();
        let th2 = SmoothingKernel::radial_bump(l, 1.9, 6, 2.0).unwrap();
        let c1 = current_constant(&tr, &th, 1.0, 2.0).unwrap();
        let c2 = current_constant(&tr, &th2, 1.0, 2.0).unwrap();
        assert!(c1.c_theta > 0.0);
        assert!((c2.c_theta - 4.0 * c1.c_theta).abs() < 1e-12 * c2.c_theta);
        assert_eq!(c1.j_vector[0], 0.0);
        assert!((c1.j_vector[2] + c1.c_theta).abs() < 1e-15);
        let zero = SmoothingKernel::from_values(l, vec![0.0; l.len()], 1.0, true).unwrap();
        assert_eq!(current_constant(&tr, &zero, 1.0, 2.0).unwrap().c_theta, 0.0);
        let spectra = LimitSpectra::gibbs(&tr, 1.0, 2.0, &th).unwrap();
        let j = spectra.current();
        assert!((j[2] - c1.j_vector[2]).abs() < 1e-12 * c1.c_theta);
    }

    #[test]
    fn radon_quadrature_matches_multiplier() {
        let (l, tr) = setup(32, 0.5);
        let g = BumpProfile::single(RadialBump::new([0.0; 3], 3.0, 8, 1.0).unwrap());
        let f = LaplacianOf(g);
        let sites: Vec<usize> = [[0, 0, 0], [2, 1, 0], [0, 0, 3], [-3, 2, 1], [10, 0, 0]]
            .iter()
            .map(|&p| l.point_index(p))
            .collect();
        let res = verify_radon_identity(&tr, &f, &sites, 17, 64).unwrap();
        assert!(res < 1e-2, "residual {res}");
    }

    #[test]
    fn radial_profile_counts_all_sites() {
        let (l, tr) = setup(8, 1.0);
        let th = SmoothingKernel::radial_bump(l, 0.9, 2, 1.0).unwrap();
        let q = gibbs_limit_correlations(&tr, 1.0, 1.0, &th).unwrap();
        let rows = radial_profile(&q);
        assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), l.len());
        assert!(rows.windows(2).all(|w| w[0].radius < w[1].radius));
    }
}
