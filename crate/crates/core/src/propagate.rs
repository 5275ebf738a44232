//! Exact spectral propagation of the wave equation `ü = Δu` and pointwise observables.
//!
//! Every mode rotates with the continuum frequency `|k|`, so the lattice dynamics is the
//! continuum dynamics restricted to bandlimited fields. The Kirchhoff spherical-mean
//! representation is evaluated independently per probe point and serves as a cross-check.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::FieldState;
use crate::lattice::{Lattice, Transform};
use crate::quadrature::SphereQuadrature;
use crate::testfn::{min_image_distance, TestFunction};

/// Per-mode multipliers of the solution operator at time `t`:
/// `cos(|k|t)`, `sin(|k|t)/|k|` (equal to `t` at `k = 0`) and `|k| sin(|k|t)`.
#[derive(Debug, Clone)]
pub struct PropagatorPlan {
    lattice: Lattice,
    t: f64,
    cos: Vec<f64>,
    sinc: Vec<f64>,
    ksin: Vec<f64>,
}

impl PropagatorPlan {
    pub fn new(lattice: Lattice, t: f64) -> Self {
        let kap = lattice.kappa_table();
        let mut cos = Vec::with_capacity(kap.len());
        let mut sinc = Vec::with_capacity(kap.len());
        let mut ksin = Vec::with_capacity(kap.len());
        for &k in &kap {
            let (s, c) = (k * t).sin_cos();
            cos.push(c);
            sinc.push(if k > 0.0 { s / k } else { t });
            ksin.push(k * s);
        }
        Self { lattice, t, cos, sinc, ksin }
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    /// `(cos, sin/|k|, |k| sin)` at one mode.
    #[inline]
    pub fn multipliers(&self, idx: usize) -> (f64, f64, f64) {
        (self.cos[idx], self.sinc[idx], self.ksin[idx])
    }

    /// Propagates spectra in place.
    pub fn apply(&self, u: &mut [Complex64], v: &mut [Complex64]) {
        assert_eq!(u.len(), self.lattice.len());
        assert_eq!(v.len(), self.lattice.len());
        for idx in 0..u.len() {
            let (c, s, ks) = self.multipliers(idx);
            let (a, b) = (u[idx], v[idx]);
            u[idx] = a * c + b * s;
            v[idx] = b * c - a * ks;
        }
    }
}

/// `U(t) Y₀` through the per-mode rotation.
pub fn evolve_spectral(transform: &Transform, y0: &FieldState, t: f64) -> Result<FieldState> {
    transform.lattice().same_as(&y0.lattice)?;
    let plan = PropagatorPlan::new(y0.lattice, t);
    let (mut uh, mut vh) = transform.forward_pair(&y0.u, &y0.v);
    plan.apply(&mut uh, &mut vh);
    let (u, v) = transform.inverse_pair(&uh, &vh);
    Ok(FieldState { lattice: y0.lattice, u, v })
}

/// Spectral gradient `∇u`; odd multipliers vanish on Nyquist planes.
pub fn spectral_gradient(transform: &Transform, u: &[f64]) -> [Vec<f64>; 3] {
    let lattice = *transform.lattice();
    let uh = transform.forward_real(u);
    let kd = lattice.derivative_wavenumbers();
    let n = lattice.n();
    let component = |axis: usize| -> Vec<Complex64> {
        uh.iter()
            .enumerate()
            .map(|(idx, &z)| {
                let i = lattice.unravel(idx)[axis];
                z * Complex64::new(0.0, -kd[i])
            })
            .collect()
    };
    let (g0, g1) = transform.inverse_pair(&component(0), &component(1));
    let g2 = transform.inverse_real(&component(2));
    debug_assert_eq!(g2.len(), n * n * n);
    [g0, g1, g2]
}

/// Total energy `½ ∫ (|∇u|² + v²) dx` evaluated spectrally; conserved exactly by the dynamics.
pub fn total_energy(transform: &Transform, y: &FieldState) -> Result<f64> {
    transform.lattice().same_as(&y.lattice)?;
    let (uh, vh) = transform.forward_pair(&y.u, &y.v);
    let kap = y.lattice.kappa_table();
    let s: f64 = uh
        .iter()
        .zip(&vh)
        .zip(&kap)
        .map(|((a, b), &k)| k * k * a.norm_sqr() + b.norm_sqr())
        .sum();
    Ok(0.5 * s / y.lattice.volume())
}

/// Local energy seminorm `∫_{|x−c|<R} (u² + |∇u|² + v²) dx` as a Riemann sum.
pub fn local_energy(transform: &Transform, y: &FieldState, radius: f64, center: [f64; 3]) -> Result<f64> {
    transform.lattice().same_as(&y.lattice)?;
    let lattice = y.lattice;
    if !(radius > 0.0) || radius >= lattice.side() / 2.0 {
        return Err(Error::InvalidParameter(format!("radius {radius} must be in (0, L/2)")));
    }
    let g = spectral_gradient(transform, &y.u);
    let mut s = 0.0;
    for idx in 0..lattice.len() {
        if min_image_distance(&lattice, lattice.position(idx), center) < radius {
            s += y.u[idx] * y.u[idx]
                + g[0][idx] * g[0][idx]
                + g[1][idx] * g[1][idx]
                + g[2][idx] * g[2][idx]
                + y.v[idx] * y.v[idx];
        }
    }
    Ok(s * lattice.cell_volume())
}

/// `⟨Y, Ψ⟩ = h³ Σ (u Ψ⁰ + v Ψ¹)`.
pub fn pair_with_functional(y: &FieldState, psi: &TestFunction) -> Result<f64> {
    y.lattice.same_as(&psi.lattice)?;
    let s: f64 = y
        .u
        .iter()
        .zip(&psi.psi0)
        .zip(y.v.iter().zip(&psi.psi1))
        .map(|((u, p0), (v, p1))| u * p0 + v * p1)
        .sum();
    Ok(s * y.lattice.cell_volume())
}

/// Energy current `j = −v ∇u` at one lattice site.
pub fn energy_current(transform: &Transform, y: &FieldState, site: usize) -> Result<[f64; 3]> {
    transform.lattice().same_as(&y.lattice)?;
    if site >= y.lattice.len() {
        return Err(Error::UnknownProbe(format!("site {site}")));
    }
    let g = spectral_gradient(transform, &y.u);
    let v = y.v[site];
    Ok([-v * g[0][site], -v * g[1][site], -v * g[2][site]])
}

/// How off-grid sphere nodes are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Periodic trilinear interpolation: local (stencil radius `√3 h`), second-order accurate.
    #[default]
    Trilinear,
    /// Evaluation of the trigonometric interpolant: exact for bandlimited fields.
    Spectral,
}

#[derive(Debug, Clone)]
enum Sampler {
    Trilinear { u: Vec<f64>, v: Vec<f64>, grad: [Vec<f64>; 3] },
    Spectral { band: Vec<usize>, u: Vec<Complex64>, v: Vec<Complex64> },
}

/// Kirchhoff evaluator `u(x,t) = (1/4πt) ∫_{S_t(x)} (v₀ + u₀/t + ∇u₀·n) dS` for fixed data.
#[derive(Debug, Clone)]
pub struct KirchhoffEvaluator {
    lattice: Lattice,
    sampler: Sampler,
}

impl KirchhoffEvaluator {
    pub fn new(transform: &Transform, y0: &FieldState, interp: Interpolation) -> Result<Self> {
        transform.lattice().same_as(&y0.lattice)?;
        let lattice = y0.lattice;
        let sampler = match interp {
            Interpolation::Trilinear => Sampler::Trilinear {
                u: y0.u.clone(),
                v: y0.v.clone(),
                grad: spectral_gradient(transform, &y0.u),
            },
            Interpolation::Spectral => {
                let (uh, vh) = transform.forward_pair(&y0.u, &y0.v);
                let scale = uh.iter().chain(&vh).fold(0.0f64, |m, z| m.max(z.norm()));
                let mut bw = 0usize;
                for idx in 0..lattice.len() {
                    if uh[idx].norm() > 1e-14 * scale || vh[idx].norm() > 1e-14 * scale {
                        for i in lattice.unravel(idx) {
                            bw = bw.max(lattice.signed(i).unsigned_abs() as usize);
                        }
                    }
                }
                let n = lattice.n();
                let band: Vec<usize> = if 2 * bw + 1 >= n {
                    (0..n).collect()
                } else {
                    (0..=bw).chain(n - bw..n).collect()
                };
                let nb = band.len();
                let mut cu = Vec::with_capacity(nb * nb * nb);
                let mut cv = Vec::with_capacity(nb * nb * nb);
                for &a in &band {
                    for &b in &band {
                        for &c in &band {
                            let idx = lattice.index(a, b, c);
                            cu.push(uh[idx]);
                            cv.push(vh[idx]);
                        }
                    }
                }
                Sampler::Spectral { band, u: cu, v: cv }
            }
        };
        Ok(Self { lattice, sampler })
    }

    /// `(u, v, ∇u)` at an arbitrary point.
    pub fn sample(&self, x: [f64; 3]) -> (f64, f64, [f64; 3]) {
        match &self.sampler {
            Sampler::Trilinear { u, v, grad } => {
                let (idx, w) = trilinear_stencil(&self.lattice, x);
                let mut out = (0.0, 0.0, [0.0; 3]);
                for (&i, &wi) in idx.iter().zip(&w) {
                    out.0 += wi * u[i];
                    out.1 += wi * v[i];
                    out.2[0] += wi * grad[0][i];
                    out.2[1] += wi * grad[1][i];
                    out.2[2] += wi * grad[2][i];
                }
                out
            }
            Sampler::Spectral { band, u, v } => spectral_sample(&self.lattice, band, u, v, x),
        }
    }

    /// Kirchhoff value at `x` and time `t > 0`, rejecting light cones that wrap the cell.
    pub fn evaluate(&self, x: [f64; 3], t: f64, quad: &SphereQuadrature) -> Result<f64> {
        check_wrap(&self.lattice, t)?;
        let mut s = 0.0;
        for (w, &om) in quad.weights().iter().zip(quad.nodes()) {
            let p = [x[0] + t * om[0], x[1] + t * om[1], x[2] + t * om[2]];
            let (u, v, g) = self.sample(p);
            s += w * (v + u / t + g[0] * om[0] + g[1] * om[1] + g[2] * om[2]);
        }
        Ok(s * t / (4.0 * PI))
    }

    /// Kirchhoff values at many points, evaluated in parallel.
    pub fn evaluate_many(&self, points: &[[f64; 3]], t: f64, quad: &SphereQuadrature) -> Result<Vec<f64>> {
        check_wrap(&self.lattice, t)?;
        points.par_iter().map(|&x| self.evaluate(x, t, quad)).collect()
    }
}

/// Stencil radius of trilinear interpolation; the light cone plus this margin must not wrap.
pub fn stencil_radius(lattice: &Lattice) -> f64 {
    3f64.sqrt() * lattice.h()
}

fn check_wrap(lattice: &Lattice, t: f64) -> Result<()> {
    if !(t > 0.0) {
        return Err(Error::InvalidParameter(format!("Kirchhoff time must be positive (got {t})")));
    }
    if t + stencil_radius(lattice) >= lattice.side() / 2.0 {
        return Err(Error::WrapSafety(format!(
            "t = {t} plus stencil radius reaches the periodic image (L/2 = {})",
            lattice.side() / 2.0
        )));
    }
    Ok(())
}

/// One-shot Kirchhoff evaluation.
pub fn evolve_kirchhoff(
    transform: &Transform,
    y0: &FieldState,
    x: [f64; 3],
    t: f64,
    quad: &SphereQuadrature,
    interp: Interpolation,
) -> Result<f64> {
    check_wrap(&y0.lattice, t)?;
    KirchhoffEvaluator::new(transform, y0, interp)?.evaluate(x, t, quad)
}

/// Indices and weights of the 8 lattice sites around `x` (periodic).
pub fn trilinear_stencil(lattice: &Lattice, x: [f64; 3]) -> ([usize; 8], [f64; 8]) {
    let h = lattice.h();
    let mut base = [0i64; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let s = x[a] / h;
        let f = s.floor();
        base[a] = f as i64;
        frac[a] = s - f;
    }
    let mut idx = [0usize; 8];
    let mut w = [0.0; 8];
    for c in 0..8 {
        let mut wt = 1.0;
        let mut p = [0i64; 3];
        for a in 0..3 {
            let bit = (c >> (2 - a)) & 1;
            p[a] = base[a] + bit as i64;
            wt *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        idx[c] = lattice.point_index(p);
        w[c] = wt;
    }
    (idx, w)
}

/// Per-axis phases of the trigonometric interpolant at coordinate `x`, together with the
/// derivative factors `−i k` (zero at Nyquist, where the phase is `cos(k x)`).
fn axis_phases(lattice: &Lattice, band: &[usize], x: f64) -> (Vec<Complex64>, Vec<Complex64>) {
    let nyq = lattice.nyquist();
    let mut e = Vec::with_capacity(band.len());
    let mut d = Vec::with_capacity(band.len());
    for &i in band {
        let k = lattice.wavenumber(i);
        if i == nyq {
            e.push(Complex64::new((k * x).cos(), 0.0));
            d.push(Complex64::new(0.0, 0.0));
        } else {
            e.push(Complex64::from_polar(1.0, -k * x));
            d.push(Complex64::new(0.0, -k));
        }
    }
    (e, d)
}

fn spectral_sample(
    lattice: &Lattice,
    band: &[usize],
    cu: &[Complex64],
    cv: &[Complex64],
    x: [f64; 3],
) -> (f64, f64, [f64; 3]) {
    let nb = band.len();
    let (e1, d1) = axis_phases(lattice, band, x[0]);
    let (e2, d2) = axis_phases(lattice, band, x[1]);
    let (e3, d3) = axis_phases(lattice, band, x[2]);
    let zero = Complex64::new(0.0, 0.0);
    // Accumulators: u, ∂₁u, ∂₂u, ∂₃u, v.
    let mut acc = [zero; 5];
    for a in 0..nb {
        let mut s2 = [zero; 4];
        for b in 0..nb {
            let off = (a * nb + b) * nb;
            let mut su = zero;
            let mut sd3 = zero;
            let mut sv = zero;
            for c in 0..nb {
                let pu = cu[off + c] * e3[c];
                su += pu;
                sd3 += pu * d3[c];
                sv += cv[off + c] * e3[c];
            }
            s2[0] += su * e2[b];
            s2[1] += su * e2[b] * d2[b];
            s2[2] += sd3 * e2[b];
            s2[3] += sv * e2[b];
        }
        acc[0] += s2[0] * e1[a];
        acc[1] += s2[0] * e1[a] * d1[a];
        acc[2] += s2[1] * e1[a];
        acc[3] += s2[2] * e1[a];
        acc[4] += s2[3] * e1[a];
    }
    let s = 1.0 / lattice.volume();
    (acc[0].re * s, acc[4].re * s, [acc[1].re * s, acc[2].re * s, acc[3].re * s])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{sample_homogeneous, MeasureSpec, RngStream, SpectralDensity};

    fn lat(n: usize, h: f64) -> Lattice {
        Lattice::new(n, h).unwrap()
    }

    #[test]
    fn single_mode_rotation() {
        let l = lat(16, 0.5);
        let tr = Transform::new(l);
        let kap = 2.0 * PI / l.side();
        let y = FieldState::from_fn(l, |x| ((kap * x[2]).cos(), 0.0));
        for t in [0.3, 1.7, -2.2] {
            let yt = evolve_spectral(&tr, &y, t).unwrap();
            for i in 0..l.len() {
                let x = l.position(i);
                assert!((yt.u[i] - (kap * t).cos() * (kap * x[2]).cos()).abs() < 1e-12);
                assert!((yt.v[i] + kap * (kap * t).sin() * (kap * x[2]).cos()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_velocity_grows_linearly() {
        let l = lat(8, 1.0);
        let tr = Transform::new(l);
        let y = FieldState::from_fn(l, |_| (0.0, 0.7));
        let yt = evolve_spectral(&tr, &y, 3.0).unwrap();
        assert!(yt.u.iter().all(|&u| (u - 2.1).abs() < 1e-12));
        let q = SphereQuadrature::lebedev(11).unwrap();
        for interp in [Interpolation::Trilinear, Interpolation::Spectral] {
            let k = evolve_kirchhoff(&tr, &y, [0.3, 0.1, -0.4], 2.0, &q, interp).unwrap();
            assert!((k - 1.4).abs() < 1e-12);
        }
        let y = FieldState::from_fn(l, |_| (1.3, 0.0));
        let k = evolve_kirchhoff(&tr, &y, [0.0; 3], 2.0, &q, Interpolation::Trilinear).unwrap();
        assert!((k - 1.3).abs() < 1e-12);
    }

    #[test]
    fn kirchhoff_rejects_wrapping_cone() {
        let l = lat(8, 1.0);
        let tr = Transform::new(l);
        let y = FieldState::zeros(l);
        let q = SphereQuadrature::lebedev(11).unwrap();
        let r = evolve_kirchhoff(&tr, &y, [0.0; 3], 3.0, &q, Interpolation::Trilinear);
        assert!(matches!(r, Err(Error::WrapSafety(_))));
    }

    #[test]
    fn spectral_interpolant_reproduces_grid_and_smooth_fields() {
        let l = lat(16, 0.5);
        let tr = Transform::new(l);
        let k = 2.0 * PI / l.side();
        let y = FieldState::from_fn(l, |x| ((k * x[0] + 2.0 * k * x[2]).sin(), (3.0 * k * x[1]).cos()));
        let ev = KirchhoffEvaluator::new(&tr, &y, Interpolation::Spectral).unwrap();
        let x = [0.37, -1.21, 2.05];
        let (u, v, g) = ev.sample(x);
        assert!((u - (k * x[0] + 2.0 * k * x[2]).sin()).abs() < 1e-12);
        assert!((v - (3.0 * k * x[1]).cos()).abs() < 1e-12);
        let c = (k * x[0] + 2.0 * k * x[2]).cos();
        assert!((g[0] - k * c).abs() < 1e-12 && g[1].abs() < 1e-12 && (g[2] - 2.0 * k * c).abs() < 1e-12);
        let (u0, _, _) = ev.sample(l.position(37));
        assert!((u0 - y.u[37]).abs() < 1e-12);
    }

    #[test]
    fn trilinear_weights_partition_unity() {
        let l = lat(8, 0.7);
        let (_, w) = trilinear_stencil(&l, [0.31, -2.9, 5.5]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn energy_conservation_and_reversibility() {
        let l = lat(16, 1.0);
        let tr = Transform::new(l);
        let spec = MeasureSpec::new(
            crate::fields::spectral_density_example(2.0, 1, l).unwrap(),
            SpectralDensity::constant(l, 0.5).unwrap(),
        )
        .unwrap();
        let y = sample_homogeneous(&tr, &spec, RngStream::new(3, 0)).unwrap();
        let e0 = total_energy(&tr, &y).unwrap();
        let yt = evolve_spectral(&tr, &y, 5.3).unwrap();
        assert!((total_energy(&tr, &yt).unwrap() - e0).abs() < 1e-12 * e0);
        let back = evolve_spectral(&tr, &yt, -5.3).unwrap();
        let d = back.u.iter().zip(&y.u).chain(back.v.iter().zip(&y.v)).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(d < 1e-12 * y.sup_norm());
    }

    #[test]
    fn local_energy_of_unit_velocity() {
        let l = lat(64, 0.05);
        let tr = Transform::new(l);
        let y = FieldState::from_fn(l, |_| (0.0, 1.0));
        let e = local_energy(&tr, &y, 1.0, [0.0; 3]).unwrap();
        assert!((e - 4.0 * PI / 3.0).abs() <= 3.0 * 0.05 * 4.0 * PI / 3.0);
    }

    #[test]
    fn current_of_rightward_wave_is_positive() {
        let l = lat(16, 0.5);
        let tr = Transform::new(l);
        let k = 2.0 * PI / l.side();
        // u = cos(k(x₃ − t)), v = k sin(k(x₃ − t)) at t = 0.
        let y = FieldState::from_fn(l, |x| ((k * x[2]).cos(), k * (k * x[2]).sin()));
        let site = l.point_index([0, 0, 3]);
        let j = energy_current(&tr, &y, site).unwrap();
        assert!(j[2] > 0.0 && j[0].abs() < 1e-14 && j[1].abs() < 1e-14);
        let zero = FieldState::from_fn(l, |x| ((k * x[2]).cos(), 0.0));
        assert_eq!(energy_current(&tr, &zero, site).unwrap(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn pairing_with_bump() {
        let l = lat(32, 0.25);
        let psi = TestFunction::bump(l, [0.5, 0.0, 0.0], 1.0, 4, 1.0, 2.0).unwrap();
        let y = FieldState::from_fn(l, |_| (1.0, 1.0));
        let mass: f64 = psi.psi0.iter().sum::<f64>() * l.cell_volume();
        assert!((pair_with_functional(&y, &psi).unwrap() - 3.0 * mass).abs() < 1e-12);
    }
}
