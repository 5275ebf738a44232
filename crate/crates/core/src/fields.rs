//! Random initial data: homogeneous Gaussian fields with prescribed spectral densities,
//! two-temperature splicing, odd pushforwards and θ-smoothed Gibbs fields.
//!
//! Sampling is spectral. A homogeneous field with density `S` is
//! `u(x) = L⁻³ Σ_k a_k e^{-ik·x}` with `a_{-k} = conj(a_k)` and `E|a_k|² = L³ S(k)`:
//! paired modes get `√(L³S/2)(ξ + iη)`, self-conjugate modes (every axis index 0 or n/2)
//! get a real `√(L³S) ξ`. The lattice covariance `E u(x)u(y)` is then exactly the inverse
//! transform of `S` at `x − y`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Lattice, Transform};
use crate::quadrature::gauss_hermite_normal;

/// Position/velocity pair `(u, v)` on a lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub lattice: Lattice,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FieldState {
    pub fn new(lattice: Lattice, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != lattice.len() || v.len() != lattice.len() {
            return Err(Error::LatticeMismatch(format!(
                "arrays of length {} and {} on a lattice of {} sites",
                u.len(),
                v.len(),
                lattice.len()
            )));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("field contains non-finite values".into()));
        }
        Ok(Self { lattice, u, v })
    }

    pub fn zeros(lattice: Lattice) -> Self {
        Self { lattice, u: vec![0.0; lattice.len()], v: vec![0.0; lattice.len()] }
    }

    /// Builds a state by evaluating `(u, v)` at every site position.
    pub fn from_fn(lattice: Lattice, f: impl Fn([f64; 3]) -> (f64, f64)) -> Self {
        let (u, v) = (0..lattice.len()).map(|i| f(lattice.position(i))).unzip();
        Self { lattice, u, v }
    }

    pub fn sup_norm(&self) -> f64 {
        self.u.iter().chain(&self.v).fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

/// Nonnegative, even spectral density on the dual lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDensity {
    pub lattice: Lattice,
    pub values: Vec<f64>,
}

impl SpectralDensity {
    pub fn new(lattice: Lattice, values: Vec<f64>) -> Result<Self> {
        if values.len() != lattice.len() {
            return Err(Error::LatticeMismatch("density length".into()));
        }
        let scale = values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (idx, &s) in values.iter().enumerate() {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::InvalidParameter(format!("density negative at mode {idx}")));
            }
            let p = values[lattice.partner(idx)];
            if (s - p).abs() > 1e-12 * scale {
                return Err(Error::InvalidParameter(format!("density not even at mode {idx}")));
            }
        }
        Ok(Self { lattice, values })
    }

    pub fn zeros(lattice: Lattice) -> Self {
        Self { lattice, values: vec![0.0; lattice.len()] }
    }

    pub fn constant(lattice: Lattice, c: f64) -> Result<Self> {
        Self::new(lattice, vec![c; lattice.len()])
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.lattice, self.values.iter().map(|s| s * factor).collect())
    }

    /// Real-space correlation `q(z) = L⁻³ Σ_k S(k) e^{-ik·z}`.
    pub fn correlation(&self, transform: &Transform) -> Vec<f64> {
        let spec: Vec<Complex64> = self.values.iter().map(|&s| Complex64::new(s, 0.0)).collect();
        transform.inverse_real(&spec)
    }

    /// Density whose correlation is the given real-space lattice function; tiny negative
    /// values produced by round-off are clamped to zero.
    pub fn from_correlation(transform: &Transform, q: &[f64]) -> Result<Self> {
        let spec = transform.forward_real(q);
        let scale = spec.iter().fold(0.0f64, |m, z| m.max(z.re.abs()));
        let mut values = Vec::with_capacity(spec.len());
        for (idx, z) in spec.iter().enumerate() {
            if z.re < -1e-9 * scale {
                return Err(Error::InvalidParameter(format!(
                    "correlation is not positive definite at mode {idx} ({})",
                    z.re
                )));
            }
            values.push(z.re.max(0.0));
        }
        let lattice = *transform.lattice();
        // Symmetrize exactly so the evenness check is not at the mercy of round-off.
        let sym: Vec<f64> =
            (0..values.len()).map(|i| 0.5 * (values[i] + values[lattice.partner(i)])).collect();
        Self::new(lattice, sym)
    }

    /// Variance `q(0)` of the corresponding field.
    pub fn variance(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.lattice.volume()
    }
}

/// Spectral densities of a translation-invariant Gaussian measure with `q⁰¹ = q¹⁰ = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureSpec {
    pub s00: SpectralDensity,
    pub s11: SpectralDensity,
}

impl MeasureSpec {
    pub fn new(s00: SpectralDensity, s11: SpectralDensity) -> Result<Self> {
        s00.lattice.same_as(&s11.lattice)?;
        Ok(Self { s00, s11 })
    }

    pub fn zeros(lattice: Lattice) -> Self {
        Self { s00: SpectralDensity::zeros(lattice), s11: SpectralDensity::zeros(lattice) }
    }

    pub fn lattice(&self) -> Lattice {
        self.s00.lattice
    }
}

/// Centered cardinal B-spline of order `m` (support `[-m/2, m/2]`, unit integral).
pub fn centered_bspline(m: usize, x: f64) -> f64 {
    let mf = m as f64;
    if x.abs() >= mf / 2.0 {
        return 0.0;
    }
    let mut s = 0.0;
    let mut binom = 1.0;
    let mut fact = 1.0;
    for k in 1..m {
        fact *= k as f64;
    }
    for j in 0..=m {
        let t = x + mf / 2.0 - j as f64;
        if t > 0.0 {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            s += sign * binom * t.powi(m as i32 - 1);
        }
        binom = binom * (m - j) as f64 / (j + 1) as f64;
    }
    (s / fact).max(0.0)
}

/// Continuum one-axis factor `f(z) = ((1 − cos(c z))/z²)^N` with `c = r₀/√3`.
pub fn example_factor(z: f64, r0: f64, n_exp: u32) -> f64 {
    let c = r0 / 3f64.sqrt();
    let base = if (c * z).abs() < 1e-4 {
        // Taylor expansion of (1 - cos(cz))/z² near 0.
        let cz2 = (c * z) * (c * z);
        c * c * (0.5 - cz2 / 24.0 + cz2 * cz2 / 720.0)
    } else {
        (1.0 - (c * z).cos()) / (z * z)
    };
    base.powi(n_exp as i32)
}

/// Real-space one-axis correlation factor: the inverse transform of `example_factor`,
/// `g(x) = 2^{-N} c^{2N-1} M_{2N}(x/c)`, supported in `|x| ≤ N c`.
pub fn example_correlation_factor(x: f64, r0: f64, n_exp: u32) -> f64 {
    let c = r0 / 3f64.sqrt();
    let n = n_exp as i32;
    2f64.powi(-n) * c.powi(2 * n - 1) * centered_bspline(2 * n_exp as usize, x / c)
}

/// Radius outside which the example correlation vanishes: `N·r₀` (the per-axis support is
/// `N r₀/√3`).
pub fn example_support_radius(r0: f64, n_exp: u32) -> f64 {
    n_exp as f64 * r0
}

/// Lattice spectrum of the example density: the lattice transform of the exact real-space
/// correlation samples, i.e. the alias sum of the separable continuum density. It is
/// nonnegative, even, separable and its correlation is exactly compactly supported.
pub fn spectral_density_example(r0: f64, n_exp: u32, lattice: Lattice) -> Result<SpectralDensity> {
    if n_exp < 1 {
        return Err(Error::InvalidParameter("N must be ≥ 1".into()));
    }
    if !(r0 > 0.0) {
        return Err(Error::InvalidParameter("r0 must be positive".into()));
    }
    let n = lattice.n();
    let h = lattice.h();
    let axis: Vec<f64> = (0..n)
        .map(|j| {
            let mut s = 0.0;
            for i in 0..n {
                let x = lattice.coord(i);
                let g = example_correlation_factor(x, r0, n_exp);
                if g != 0.0 {
                    s += g * (lattice.wavenumber(j) * x).cos();
                }
            }
            (h * s).max(0.0)
        })
        .collect();
    let mut values = Vec::with_capacity(lattice.len());
    for &a in &axis {
        for &b in &axis {
            for &c in &axis {
                values.push(a * b * c);
            }
        }
    }
    SpectralDensity::new(lattice, values)
}

/// Splice transition profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CutoffProfile {
    /// Quintic smoothstep `S` on `[-a, a]`; `ζ₊(0) = ½`.
    #[default]
    Smoothstep,
    /// `ζ₊ = sin(π S/2)`, so `ζ₋² + ζ₊² = 1` everywhere; `ζ₊(0) = 1/√2`.
    PowerPreserving,
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (10.0 - 15.0 * x + 6.0 * x * x)
}

/// `ζ₊(s)`: exactly 0 for `s ≤ -a`, exactly 1 for `s ≥ a`, nondecreasing and `C²`.
pub fn cutoff_plus(s: f64, a: f64, profile: CutoffProfile) -> f64 {
    if s <= -a {
        return 0.0;
    }
    if s >= a {
        return 1.0;
    }
    let v = smoothstep((s + a) / (2.0 * a));
    match profile {
        CutoffProfile::Smoothstep => v,
        CutoffProfile::PowerPreserving => (0.5 * PI * v).sin(),
    }
}

/// `ζ₋(s) = ζ₊(-s)`.
pub fn cutoff_minus(s: f64, a: f64, profile: CutoffProfile) -> f64 {
    cutoff_plus(-s, a, profile)
}

/// Splice geometry for a two-temperature initial measure.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoTempSpec {
    pub minus: MeasureSpec,
    pub plus: MeasureSpec,
    pub half_width_a: f64,
    pub profile: CutoffProfile,
}

impl TwoTempSpec {
    pub fn new(minus: MeasureSpec, plus: MeasureSpec, a: f64, profile: CutoffProfile) -> Result<Self> {
        minus.lattice().same_as(&plus.lattice())?;
        validate_half_width(&minus.lattice(), a)?;
        Ok(Self { minus, plus, half_width_a: a, profile })
    }

    pub fn lattice(&self) -> Lattice {
        self.minus.lattice()
    }
}

pub fn validate_half_width(lattice: &Lattice, a: f64) -> Result<()> {
    if !(a > 0.0) || a >= lattice.side() / 4.0 {
        return Err(Error::InvalidParameter(format!(
            "splice half-width a = {a} must satisfy 0 < a < L/4 = {}",
            lattice.side() / 4.0
        )));
    }
    Ok(())
}

/// Per-`x₃` splice weights `(ζ₋, ζ₊)` on the periodic cell. The interface sits at `x₃ = 0`;
/// the second interface forced by periodicity at `x₃ = ±L/2` uses the mirrored profile so the
/// splice is smooth across the wrap.
pub fn splice_weights(lattice: &Lattice, a: f64, profile: CutoffProfile) -> (Vec<f64>, Vec<f64>) {
    let l = lattice.side();
    let plus = |x3: f64| -> f64 {
        if x3.abs() <= l / 4.0 {
            cutoff_plus(x3, a, profile)
        } else if x3 > 0.0 {
            cutoff_plus(l / 2.0 - x3, a, profile)
        } else {
            cutoff_plus(-l / 2.0 - x3, a, profile)
        }
    };
    let n = lattice.n();
    let zp: Vec<f64> = (0..n).map(|i| plus(lattice.coord(i))).collect();
    let zm: Vec<f64> = (0..n).map(|i| plus(-lattice.coord(i))).collect();
    (zm, zp)
}

/// `Y₀ = ζ₋(x₃) Y₋ + ζ₊(x₃) Y₊` component-wise.
pub fn splice_two_temperature(
    y_minus: &FieldState,
    y_plus: &FieldState,
    a: f64,
    profile: CutoffProfile,
) -> Result<FieldState> {
    y_minus.lattice.same_as(&y_plus.lattice)?;
    let lattice = y_minus.lattice;
    validate_half_width(&lattice, a)?;
    let (zm, zp) = splice_weights(&lattice, a, profile);
    let n = lattice.n();
    let mut out = FieldState::zeros(lattice);
    for idx in 0..lattice.len() {
        let i3 = idx % n;
        out.u[idx] = zm[i3] * y_minus.u[idx] + zp[i3] * y_plus.u[idx];
        out.v[idx] = zm[i3] * y_minus.v[idx] + zp[i3] * y_plus.v[idx];
    }
    Ok(out)
}

/// Reproducible random stream: a ChaCha generator keyed by `seed` on stream `stream_id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Draws the Hermitian Fourier coefficients of a real Gaussian field with density `s`.
pub fn sample_spectrum(density: &SpectralDensity, rng: &mut impl Rng) -> Vec<Complex64> {
    let lattice = density.lattice;
    let vol = lattice.volume();
    let mut out = vec![Complex64::new(0.0, 0.0); lattice.len()];
    for idx in 0..lattice.len() {
        let p = lattice.partner(idx);
        if p < idx {
            continue;
        }
        let s = density.values[idx];
        if p == idx {
            let xi: f64 = rng.sample(StandardNormal);
            out[idx] = Complex64::new((vol * s).sqrt() * xi, 0.0);
        } else {
            let xi: f64 = rng.sample(StandardNormal);
            let eta: f64 = rng.sample(StandardNormal);
            let a = Complex64::new(xi, eta) * (0.5 * vol * s).sqrt();
            out[idx] = a;
            out[p] = a.conj();
        }
    }
    out
}

/// Spectra `(û, v̂)` of one homogeneous Gaussian draw.
pub fn sample_homogeneous_spectra(
    spec: &MeasureSpec,
    stream: RngStream,
) -> (Vec<Complex64>, Vec<Complex64>) {
    let mut rng = stream.rng();
    let u = sample_spectrum(&spec.s00, &mut rng);
    let v = sample_spectrum(&spec.s11, &mut rng);
    (u, v)
}

/// One homogeneous Gaussian draw in real space.
pub fn sample_homogeneous(
    transform: &Transform,
    spec: &MeasureSpec,
    stream: RngStream,
) -> Result<FieldState> {
    transform.lattice().same_as(&spec.lattice())?;
    let (uh, vh) = sample_homogeneous_spectra(spec, stream);
    let (u, v) = transform.inverse_pair(&uh, &vh);
    Ok(FieldState { lattice: spec.lattice(), u, v })
}

/// Odd, bounded scalar maps used for non-Gaussian pushforwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OddMap {
    Identity,
    /// `w ↦ gain · tanh(scale · w)`.
    Tanh { scale: f64, gain: f64 },
}

impl OddMap {
    pub fn apply(&self, w: f64) -> f64 {
        match *self {
            OddMap::Identity => w,
            OddMap::Tanh { scale, gain } => gain * (scale * w).tanh(),
        }
    }
}

/// `(f0(u), f1(v))` pointwise.
pub fn pushforward_non_gaussian(y: &FieldState, f0: OddMap, f1: OddMap) -> FieldState {
    FieldState {
        lattice: y.lattice,
        u: y.u.iter().map(|&w| f0.apply(w)).collect(),
        v: y.v.iter().map(|&w| f1.apply(w)).collect(),
    }
}

/// Correlation of `f(X)` where `X` is a centered Gaussian lattice field with correlation `q`:
/// `E f(X(x)) f(X(y))` evaluated by tensor Gauss–Hermite quadrature on the bivariate normal
/// law at correlation `q(x−y)/q(0)`. Lags with zero correlation give zero because `f` is odd.
pub fn pushforward_correlation(q: &[f64], map: OddMap) -> Vec<f64> {
    if map == OddMap::Identity {
        return q.to_vec();
    }
    let var = q[0];
    if var <= 0.0 {
        return vec![0.0; q.len()];
    }
    let sigma = var.sqrt();
    let (x, w) = gauss_hermite_normal(120);
    let mut cache: Vec<(f64, f64)> = Vec::new();
    q.iter()
        .map(|&qz| {
            let rho = (qz / var).clamp(-1.0, 1.0);
            if rho.abs() < 1e-300 {
                return 0.0;
            }
            if let Some(&(_, v)) = cache.iter().find(|(r, _)| *r == rho) {
                return v;
            }
            let al = ((1.0 + rho) / 2.0).sqrt();
            let be = ((1.0 - rho) / 2.0).sqrt();
            let mut s = 0.0;
            for (&a, &wa) in x.iter().zip(&w) {
                let mut row = 0.0;
                for (&b, &wb) in x.iter().zip(&w) {
                    row += wb * map.apply(sigma * (al * a + be * b)) * map.apply(sigma * (al * a - be * b));
                }
                s += wa * row;
            }
            if cache.len() < 4096 {
                cache.push((rho, s));
            }
            s
        })
        .collect()
}

/// Compactly supported smoothing kernel θ for the Gibbs construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingKernel {
    pub lattice: Lattice,
    pub theta: Vec<f64>,
    pub radius: f64,
    pub axially_symmetric: bool,
}

impl SmoothingKernel {
    /// Radial bump `amplitude · (1 − |x|²/R²)^p` for `|x| < R`.
    pub fn radial_bump(lattice: Lattice, radius: f64, power: u32, amplitude: f64) -> Result<Self> {
        let theta = (0..lattice.len())
            .map(|i| {
                let r2 = lattice.radius_sq(i) / (radius * radius);
                if r2 < 1.0 {
                    amplitude * (1.0 - r2).powi(power as i32)
                } else {
                    0.0
                }
            })
            .collect();
        Self::from_values(lattice, theta, radius, true)
    }

    /// Zero-mass radial kernel `b_R − λ b_r` with `λ` balancing the lattice masses of the two
    /// bumps `(1 − |x|²/R²)^p`. A vanishing `θ̂(0)` removes the `1/|x|` tail of the smoothed
    /// `q⁰⁰`, so the smoothed Gibbs correlations become short-ranged.
    pub fn balanced_bump(lattice: Lattice, outer: f64, inner: f64, power: u32, amplitude: f64) -> Result<Self> {
        if !(inner > 0.0 && inner < outer) {
            return Err(Error::InvalidParameter(format!("need 0 < inner {inner} < outer {outer}")));
        }
        let big = Self::radial_bump(lattice, outer, power, 1.0)?;
        let small = Self::radial_bump(lattice, inner, power, 1.0)?;
        let lambda = big.theta.iter().sum::<f64>() / small.theta.iter().sum::<f64>();
        let theta = big.theta.iter().zip(&small.theta).map(|(b, s)| amplitude * (b - lambda * s)).collect();
        Self::from_values(lattice, theta, outer, true)
    }

    /// Wraps explicit values, checking the support radius and, when claimed, the grid
    /// symmetries of axial symmetry (x₁ ↔ x₂ swap and sign flips of x₁, x₂).
    pub fn from_values(lattice: Lattice, theta: Vec<f64>, radius: f64, axially_symmetric: bool) -> Result<Self> {
        if theta.len() != lattice.len() {
            return Err(Error::LatticeMismatch("kernel length".into()));
        }
        if !(radius < lattice.side() / 8.0) {
            return Err(Error::Support(format!("θ radius {radius} must be < L/8")));
        }
        for (idx, &t) in theta.iter().enumerate() {
            if t != 0.0 && lattice.radius_sq(idx).sqrt() > radius + 1e-12 {
                return Err(Error::Support(format!("θ nonzero outside radius {radius}")));
            }
        }
        if axially_symmetric {
            let scale = theta.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for idx in 0..lattice.len() {
                let [i1, i2, i3] = lattice.unravel(idx);
                let n = lattice.n();
                let images = [
                    lattice.index(i2, i1, i3),
                    lattice.index((n - i1) % n, i2, i3),
                    lattice.index(i1, (n - i2) % n, i3),
                ];
                for j in images {
                    if (theta[j] - theta[idx]).abs() > 1e-12 * scale {
                        return Err(Error::InvalidParameter("θ is not axially symmetric".into()));
                    }
                }
            }
        }
        Ok(Self { lattice, theta, radius, axially_symmetric })
    }

    /// `|θ̂(k)|²` for every mode.
    pub fn power_spectrum(&self, transform: &Transform) -> Vec<f64> {
        transform.forward_real(&self.theta).iter().map(|z| z.norm_sqr()).collect()
    }

    /// `∫θ` as a Riemann sum.
    pub fn mass(&self) -> f64 {
        self.theta.iter().sum::<f64>() * self.lattice.cell_volume()
    }
}

/// Densities of the θ-smoothed Gibbs measure at temperature `T`:
/// `s00 = T|θ̂|²/|k|²` (zero mode 0) and `s11 = T|θ̂|²`.
pub fn gibbs_smoothed_spec(transform: &Transform, temperature: f64, theta: &SmoothingKernel) -> Result<MeasureSpec> {
    if !(temperature >= 0.0) {
        return Err(Error::InvalidParameter(format!("temperature {temperature} < 0")));
    }
    let lattice = *transform.lattice();
    lattice.same_as(&theta.lattice)?;
    let p = theta.power_spectrum(transform);
    let kap = lattice.kappa_table();
    let s11: Vec<f64> = p.iter().map(|x| temperature * x).collect();
    let s00: Vec<f64> = p
        .iter()
        .zip(&kap)
        .map(|(x, &k)| if k > 0.0 { temperature * x / (k * k) } else { 0.0 })
        .collect();
    MeasureSpec::new(
        SpectralDensity::from_even(lattice, s00),
        SpectralDensity::from_even(lattice, s11),
    )
}

impl SpectralDensity {
    /// Symmetrizes values that are even up to round-off.
    pub fn from_even(lattice: Lattice, values: Vec<f64>) -> Self {
        let values = (0..values.len())
            .map(|i| (0.5 * (values[i] + values[lattice.partner(i)])).max(0.0))
            .collect();
        Self { lattice, values }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bspline_basics() {
        // Unit integral and partition of unity for integer shifts.
        for m in [2usize, 4, 6] {
            let sum: f64 = (-10..=10).map(|j| centered_bspline(m, j as f64 + 0.3)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert_eq!(centered_bspline(m, m as f64 / 2.0 + 0.01), 0.0);
        }
        assert!((centered_bspline(2, 0.0) - 1.0).abs() < 1e-15);
        assert!((centered_bspline(4, 0.0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn example_factor_at_zero() {
        assert!((example_factor(0.0, 6f64.sqrt(), 1) - 1.0).abs() < 1e-15);
        assert!((example_factor(1e-9, 6f64.sqrt(), 1) - 1.0).abs() < 1e-12);
        let r0 = 2.0;
        assert!((example_factor(0.0, r0, 3) - (r0 * r0 / 6.0).powi(3)).abs() < 1e-15);
    }

    #[test]
    fn example_rejects_zero_power() {
        let lat = Lattice::new(8, 1.0).unwrap();
        assert!(spectral_density_example(1.0, 0, lat).is_err());
    }

    #[test]
    fn lattice_spectrum_is_alias_sum() {
        // Oracle: brute-force alias sum of the continuum factor.
        let lat = Lattice::new(16, 0.5).unwrap();
        let (r0, n_exp) = (2.0, 2);
        let dens = spectral_density_example(r0, n_exp, lat).unwrap();
        let axis = |j: usize| -> f64 {
            let k = lat.wavenumber(j);
            let period = 2.0 * PI / lat.h();
            (-4000..=4000).map(|m| example_factor(k + m as f64 * period, r0, n_exp)).sum()
        };
        for &(a, b, c) in &[(0, 0, 0), (1, 2, 3), (8, 0, 5), (15, 9, 8)] {
            let expect = axis(a) * axis(b) * axis(c);
            let got = dens.values[lat.index(a, b, c)];
            assert!((got - expect).abs() < 1e-6 * expect.max(1e-12), "{got} vs {expect}");
        }
    }

    #[test]
    fn cutoff_plateaus_and_midpoint() {
        for p in [CutoffProfile::Smoothstep, CutoffProfile::PowerPreserving] {
            assert_eq!(cutoff_plus(3.0, 2.0, p), 1.0);
            assert_eq!(cutoff_plus(-3.0, 2.0, p), 0.0);
            assert_eq!(cutoff_minus(0.7, 2.0, p), cutoff_plus(-0.7, 2.0, p));
        }
        assert!((cutoff_plus(0.0, 2.0, CutoffProfile::Smoothstep) - 0.5).abs() < 1e-15);
        for s in [-1.9, -0.3, 0.0, 0.4, 1.7] {
            let zp = cutoff_plus(s, 2.0, CutoffProfile::PowerPreserving);
            let zm = cutoff_minus(s, 2.0, CutoffProfile::PowerPreserving);
            assert!((zp * zp + zm * zm - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn splice_weights_are_periodic_and_smooth_at_wrap() {
        let lat = Lattice::new(32, 1.0).unwrap();
        let (zm, zp) = splice_weights(&lat, 3.0, CutoffProfile::Smoothstep);
        // Index n/2 is x₃ = -L/2: both weights ½ there.
        assert!((zp[16] - 0.5).abs() < 1e-15 && (zm[16] - 0.5).abs() < 1e-15);
        assert_eq!(zp[8], 1.0);
        assert_eq!(zm[8], 0.0);
        assert_eq!(zp[24], 0.0);
        for i in 0..32 {
            let mirror = (32 - i) % 32;
            assert_eq!(zm[i], zp[mirror]);
        }
    }

    #[test]
    fn gibbs_zero_temperature_and_flat_theta() {
        let lat = Lattice::new(16, 1.0).unwrap();
        let t = Transform::new(lat);
        let th = SmoothingKernel::radial_bump(lat, 1.5, 4, 1.0).unwrap();
        let s = gibbs_smoothed_spec(&t, 0.0, &th).unwrap();
        assert!(s.s00.values.iter().chain(&s.s11.values).all(|&x| x == 0.0));
        let mut delta = vec![0.0; lat.len()];
        delta[0] = 1.0 / lat.cell_volume();
        let flat = SmoothingKernel::from_values(lat, delta, 0.5, true).unwrap();
        let s = gibbs_smoothed_spec(&t, 2.5, &flat).unwrap();
        assert!(s.s11.values.iter().all(|&x| (x - 2.5).abs() < 1e-12));
        assert!(gibbs_smoothed_spec(&t, -1.0, &flat).is_err());
    }

    #[test]
    fn smoothing_kernel_validation() {
        let lat = Lattice::new(16, 1.0).unwrap();
        assert!(SmoothingKernel::radial_bump(lat, 2.5, 4, 1.0).is_err());
        let mut v = vec![0.0; lat.len()];
        v[lat.point_index([1, 0, 0])] = 1.0;
        assert!(SmoothingKernel::from_values(lat, v.clone(), 1.5, true).is_err());
        assert!(SmoothingKernel::from_values(lat, v, 1.5, false).is_ok());
    }

    #[test]
    fn sampling_is_deterministic_and_real() {
        let lat = Lattice::new(8, 1.0).unwrap();
        let t = Transform::new(lat);
        let spec = MeasureSpec::new(
            spectral_density_example(2.0, 1, lat).unwrap(),
            SpectralDensity::constant(lat, 0.3).unwrap(),
        )
        .unwrap();
        let a = sample_homogeneous(&t, &spec, RngStream::new(7, 3)).unwrap();
        let b = sample_homogeneous(&t, &spec, RngStream::new(7, 3)).unwrap();
        let c = sample_homogeneous(&t, &spec, RngStream::new(7, 4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let (uh, _) = sample_homogeneous_spectra(&spec, RngStream::new(7, 3));
        let mut buf = uh.clone();
        t.inverse(&mut buf);
        let sup = buf.iter().fold(0.0f64, |m, z| m.max(z.re.abs()));
        assert!(buf.iter().all(|z| z.im.abs() <= 1e-12 * sup));
    }

    #[test]
    fn zero_density_gives_zero_field() {
        let lat = Lattice::new(8, 1.0).unwrap();
        let t = Transform::new(lat);
        let y = sample_homogeneous(&t, &MeasureSpec::zeros(lat), RngStream::new(1, 0)).unwrap();
        assert!(y.u.iter().chain(&y.v).all(|&x| x == 0.0));
    }

    #[test]
    fn pushforward_identity_and_bounds() {
        let lat = Lattice::new(8, 1.0).unwrap();
        let y = FieldState::from_fn(lat, |x| (3.0 * x[0], -2.0 * x[2]));
        assert_eq!(pushforward_non_gaussian(&y, OddMap::Identity, OddMap::Identity), y);
        let t = OddMap::Tanh { scale: 1.0, gain: 1.0 };
        let z = pushforward_non_gaussian(&y, t, t);
        assert!(z.sup_norm() <= 1.0);
    }

    #[test]
    fn pushforward_correlation_oracle() {
        // Oracle: dense Gauss–Legendre integration of the bivariate normal density.
        let map = OddMap::Tanh { scale: 0.8, gain: 1.3 };
        let var = 1.7;
        let rho = 0.45;
        let q = [var, rho * var, 0.0];
        let got = pushforward_correlation(&q, map);
        let (x, w) = crate::quadrature::gauss_legendre_on(400, -9.0, 9.0);
        let s = var.sqrt();
        let det = 1.0 - rho * rho;
        let mut expect = 0.0;
        for (&a, &wa) in x.iter().zip(&w) {
            for (&b, &wb) in x.iter().zip(&w) {
                let dens = (-(a * a - 2.0 * rho * a * b + b * b) / (2.0 * det)).exp()
                    / (2.0 * PI * det.sqrt());
                expect += wa * wb * dens * map.apply(s * a) * map.apply(s * b);
            }
        }
        assert!((got[1] - expect).abs() < 1e-10, "{} vs {expect}", got[1]);
        assert_eq!(got[2], 0.0);
    }
}
