//! Compactly supported test functions `Ψ = (Ψ⁰, Ψ¹)` and analytic radial bump profiles.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::lattice::{Lattice, Transform};

/// Analytic radial bump `A (1 − |x − c|²/R²)^p` for `|x − c| < R`, zero outside.
///
/// With `p ≥ 3` the bump is `C²`, which is what the Laplacian-based identities need.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialBump {
    pub center: [f64; 3],
    pub radius: f64,
    pub power: u32,
    pub amplitude: f64,
}

impl RadialBump {
    pub fn new(center: [f64; 3], radius: f64, power: u32, amplitude: f64) -> Result<Self> {
        if !(radius > 0.0) || power < 1 {
            return Err(Error::InvalidParameter("bump needs radius > 0 and power ≥ 1".into()));
        }
        Ok(Self { center, radius, power, amplitude })
    }

    fn offset(&self, x: [f64; 3]) -> ([f64; 3], f64) {
        let d = [x[0] - self.center[0], x[1] - self.center[1], x[2] - self.center[2]];
        (d, d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    }

    pub fn value(&self, x: [f64; 3]) -> f64 {
        let (_, r2) = self.offset(x);
        let w = 1.0 - r2 / (self.radius * self.radius);
        if w <= 0.0 {
            0.0
        } else {
            self.amplitude * w.powi(self.power as i32)
        }
    }

    pub fn gradient(&self, x: [f64; 3]) -> [f64; 3] {
        let (d, r2) = self.offset(x);
        let r2max = self.radius * self.radius;
        let w = 1.0 - r2 / r2max;
        if w <= 0.0 {
            return [0.0; 3];
        }
        let p = self.power as f64;
        let s = -2.0 * p * self.amplitude * w.powi(self.power as i32 - 1) / r2max;
        [s * d[0], s * d[1], s * d[2]]
    }

    pub fn laplacian(&self, x: [f64; 3]) -> f64 {
        let (_, r2) = self.offset(x);
        let rr = self.radius * self.radius;
        let w = 1.0 - r2 / rr;
        if w <= 0.0 {
            return 0.0;
        }
        let p = self.power as f64;
        let a = self.amplitude;
        let second = if self.power >= 2 {
            4.0 * p * (p - 1.0) * w.powi(self.power as i32 - 2) * r2 / (rr * rr)
        } else {
            0.0
        };
        a * (second - 6.0 * p * w.powi(self.power as i32 - 1) / rr)
    }

    /// `∇Δ` of the bump; continuous for `p ≥ 3`.
    pub fn laplacian_gradient(&self, x: [f64; 3]) -> [f64; 3] {
        let (d, r2) = self.offset(x);
        let rr = self.radius * self.radius;
        let w = 1.0 - r2 / rr;
        if w <= 0.0 || self.power < 2 {
            return [0.0; 3];
        }
        let p = self.power as f64;
        let third = if self.power >= 3 {
            4.0 * (p - 2.0) * w.powi(self.power as i32 - 3) * r2 / rr
        } else {
            0.0
        };
        let s = 2.0 * self.amplitude * p * (p - 1.0) / (rr * rr) * (10.0 * w.powi(self.power as i32 - 2) - third);
        [s * d[0], s * d[1], s * d[2]]
    }

    /// `∫ A (1 − r²/R²)^p dx = 2π A R³ B(3/2, p+1)`.
    pub fn integral(&self) -> f64 {
        let p = self.power as f64;
        let beta = (libm::lgamma(1.5) + libm::lgamma(p + 1.0) - libm::lgamma(p + 2.5)).exp();
        2.0 * std::f64::consts::PI * self.amplitude * self.radius.powi(3) * beta
    }
}

/// Finite sum of radial bumps, used as an analytic compactly supported profile.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BumpProfile {
    pub bumps: Vec<RadialBump>,
}

impl BumpProfile {
    pub fn new(bumps: Vec<RadialBump>) -> Self {
        Self { bumps }
    }

    pub fn single(b: RadialBump) -> Self {
        Self { bumps: vec![b] }
    }

    pub fn value(&self, x: [f64; 3]) -> f64 {
        self.bumps.iter().map(|b| b.value(x)).sum()
    }

    pub fn gradient(&self, x: [f64; 3]) -> [f64; 3] {
        self.bumps.iter().fold([0.0; 3], |acc, b| {
            let g = b.gradient(x);
            [acc[0] + g[0], acc[1] + g[1], acc[2] + g[2]]
        })
    }

    pub fn laplacian(&self, x: [f64; 3]) -> f64 {
        self.bumps.iter().map(|b| b.laplacian(x)).sum()
    }

    pub fn laplacian_gradient(&self, x: [f64; 3]) -> [f64; 3] {
        self.bumps.iter().fold([0.0; 3], |acc, b| {
            let g = b.laplacian_gradient(x);
            [acc[0] + g[0], acc[1] + g[1], acc[2] + g[2]]
        })
    }

    /// Radius of the smallest origin-centred ball containing every bump.
    pub fn support_radius(&self) -> f64 {
        self.bumps
            .iter()
            .map(|b| {
                let c = b.center;
                (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt() + b.radius
            })
            .fold(0.0, f64::max)
    }

    /// Lattice samples of the profile at minimum-image positions.
    pub fn sample(&self, lattice: &Lattice) -> Vec<f64> {
        (0..lattice.len()).map(|i| self.value(lattice.position(i))).collect()
    }

    pub fn sample_laplacian(&self, lattice: &Lattice) -> Vec<f64> {
        (0..lattice.len()).map(|i| self.laplacian(lattice.position(i))).collect()
    }
}

/// A compactly supported analytic scalar profile with its gradient.
pub trait Profile: Sync {
    fn value(&self, x: [f64; 3]) -> f64;
    fn gradient(&self, x: [f64; 3]) -> [f64; 3];
    /// Radius of an origin-centred ball outside which the profile vanishes.
    fn support_radius(&self) -> f64;

    fn sample(&self, lattice: &Lattice) -> Vec<f64> {
        (0..lattice.len()).map(|i| self.value(lattice.position(i))).collect()
    }
}

impl Profile for BumpProfile {
    fn value(&self, x: [f64; 3]) -> f64 {
        BumpProfile::value(self, x)
    }

    fn gradient(&self, x: [f64; 3]) -> [f64; 3] {
        BumpProfile::gradient(self, x)
    }

    fn support_radius(&self) -> f64 {
        BumpProfile::support_radius(self)
    }
}

/// The Laplacian `Δg` of a bump profile `g`, itself a compactly supported profile.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianOf(pub BumpProfile);

impl Profile for LaplacianOf {
    fn value(&self, x: [f64; 3]) -> f64 {
        self.0.laplacian(x)
    }

    fn gradient(&self, x: [f64; 3]) -> [f64; 3] {
        self.0.laplacian_gradient(x)
    }

    fn support_radius(&self) -> f64 {
        self.0.support_radius()
    }
}

/// A compactly supported test pair `Ψ = (Ψ⁰, Ψ¹)` on a lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    pub lattice: Lattice,
    pub psi0: Vec<f64>,
    pub psi1: Vec<f64>,
    pub center: [f64; 3],
    pub radius: f64,
}

impl TestFunction {
    /// Wraps explicit arrays, checking that both vanish outside the ball `|x − center| ≤ radius`
    /// (minimum-image distance).
    pub fn new(lattice: Lattice, psi0: Vec<f64>, psi1: Vec<f64>, center: [f64; 3], radius: f64) -> Result<Self> {
        if psi0.len() != lattice.len() || psi1.len() != lattice.len() {
            return Err(Error::LatticeMismatch("test function length".into()));
        }
        if !(radius > 0.0) || radius >= lattice.side() / 2.0 {
            return Err(Error::Support(format!("test function radius {radius} must be in (0, L/2)")));
        }
        for i in 0..lattice.len() {
            if (psi0[i] != 0.0 || psi1[i] != 0.0) && min_image_distance(&lattice, lattice.position(i), center) > radius + 1e-12 {
                return Err(Error::Support(format!("test function nonzero outside radius {radius}")));
            }
        }
        Ok(Self { lattice, psi0, psi1, center, radius })
    }

    /// `Ψ⁰ = a₀·b`, `Ψ¹ = a₁·b` with `b` the unit-amplitude radial bump of given radius and power.
    pub fn bump(lattice: Lattice, center: [f64; 3], radius: f64, power: u32, a0: f64, a1: f64) -> Result<Self> {
        let b = RadialBump::new([0.0; 3], radius, power, 1.0)?;
        let shape: Vec<f64> = (0..lattice.len())
            .map(|i| {
                let d = min_image_offset(&lattice, lattice.position(i), center);
                b.value(d)
            })
            .collect();
        let psi0 = shape.iter().map(|s| a0 * s).collect();
        let psi1 = shape.iter().map(|s| a1 * s).collect();
        Self::new(lattice, psi0, psi1, center, radius)
    }

    pub fn zero(lattice: Lattice) -> Self {
        Self {
            lattice,
            psi0: vec![0.0; lattice.len()],
            psi1: vec![0.0; lattice.len()],
            center: [0.0; 3],
            radius: lattice.h(),
        }
    }

    /// Largest distance from the origin reached by the support.
    pub fn extent(&self) -> f64 {
        let c = self.center;
        (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt() + self.radius
    }

    /// Spectra `(Ψ̂⁰, Ψ̂¹)`.
    pub fn spectra(&self, transform: &Transform) -> (Vec<Complex64>, Vec<Complex64>) {
        transform.forward_pair(&self.psi0, &self.psi1)
    }
}

/// Minimum-image displacement `x − c` on the periodic cell.
pub fn min_image_offset(lattice: &Lattice, x: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let l = lattice.side();
    let mut d = [0.0; 3];
    for a in 0..3 {
        let mut s = x[a] - c[a];
        s -= l * (s / l).round();
        d[a] = s;
    }
    d
}

pub fn min_image_distance(lattice: &Lattice, x: [f64; 3], c: [f64; 3]) -> f64 {
    let d = min_image_offset(lattice, x, c);
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bump_derivatives_match_finite_differences() {
        let b = RadialBump::new([0.3, -0.2, 0.1], 2.0, 4, 1.7).unwrap();
        let x = [0.9, 0.4, -0.5];
        let e = 1e-4;
        let mut lap = 0.0;
        let g = b.gradient(x);
        for a in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[a] += e;
            xm[a] -= e;
            let fd = (b.value(xp) - b.value(xm)) / (2.0 * e);
            assert!((fd - g[a]).abs() < 1e-7);
            lap += (b.value(xp) - 2.0 * b.value(x) + b.value(xm)) / (e * e);
        }
        assert!((lap - b.laplacian(x)).abs() < 1e-5);
        let gl = b.laplacian_gradient(x);
        for a in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[a] += e;
            xm[a] -= e;
            let fd = (b.laplacian(xp) - b.laplacian(xm)) / (2.0 * e);
            assert!((fd - gl[a]).abs() < 1e-6, "{fd} vs {}", gl[a]);
        }
    }

    #[test]
    fn bump_integral_matches_riemann_sum() {
        let lat = Lattice::new(64, 0.1).unwrap();
        let b = RadialBump::new([0.0; 3], 2.0, 3, 1.0).unwrap();
        let s: f64 = BumpProfile::single(b).sample(&lat).iter().sum::<f64>() * lat.cell_volume();
        assert!((s - b.integral()).abs() < 1e-4 * b.integral());
    }

    #[test]
    fn test_function_support_is_checked() {
        let lat = Lattice::new(16, 1.0).unwrap();
        let psi = TestFunction::bump(lat, [0.0, 0.0, 7.0], 2.5, 3, 1.0, 0.0).unwrap();
        // The bump wraps across x₃ = ±L/2.
        assert!(psi.psi0[lat.point_index([0, 0, -8])] > 0.0);
        let mut v = vec![0.0; lat.len()];
        v[lat.point_index([5, 0, 0])] = 1.0;
        assert!(TestFunction::new(lat, v, vec![0.0; lat.len()], [0.0; 3], 2.0).is_err());
    }
}
