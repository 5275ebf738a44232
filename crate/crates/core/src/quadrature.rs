//! One-dimensional Gauss rules, adaptive Gauss–Kronrod integration and sphere quadrature.
//!
//! Sphere rules come from a bundled table of Lebedev rules (degrees 3–31 and 35–59) with a
//! Gauss–Legendre × trapezoid product rule used for every other degree. Every rule is checked
//! against the exact monomial moments of the sphere when it is built.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        dp = if d != 0.0 { d } else { dp };
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p, d)
}

/// Gauss–Legendre rule mapped to `[a, b]`.
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    let c = 0.5 * (a + b);
    let s = 0.5 * (b - a);
    (x.iter().map(|&t| c + s * t).collect(), w.iter().map(|&v| v * s).collect())
}

/// Gauss–Hermite rule for the standard normal weight: `E f(Z) ≈ Σ w_i f(x_i)`.
pub fn gauss_hermite_normal(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    // Newton iteration on orthonormal physicists' Hermite functions, then rescale.
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let pim4 = PI.powf(-0.25);
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        w[i] = 2.0 / (pp * pp);
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        nodes[i] = -x[i] * std::f64::consts::SQRT_2;
        nodes[n - 1 - i] = x[i] * std::f64::consts::SQRT_2;
        weights[i] = w[i] / PI.sqrt();
        weights[n - 1 - i] = w[i] / PI.sqrt();
    }
    (nodes, weights)
}

const GK_XK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const GK_WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * GK_WK[7];
    let mut gauss = fc * GK_WG[3];
    for j in 0..7 {
        let dx = h * GK_XK[j];
        let s = f(c - dx) + f(c + dx);
        kron += GK_WK[j] * s;
        if j % 2 == 1 {
            gauss += GK_WG[j / 2] * s;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// Adaptive Gauss–Kronrod (7/15) integration of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn integrate_adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (v, err) = gk15(f, a, b);
        if err <= tol || depth >= 50 || (b - a).abs() < 1e-14 {
            return v;
        }
        let m = 0.5 * (a + b);
        rec(f, a, m, 0.5 * tol, depth + 1) + rec(f, m, b, 0.5 * tol, depth + 1)
    }
    if a == b {
        return 0.0;
    }
    rec(f, a, b, tol, 0)
}

/// Where a sphere rule came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleKind {
    Lebedev,
    Product,
    Table,
}

/// Quadrature rule on the unit sphere: `∫_{S²} f dS ≈ Σ w_i f(ω_i)` with `Σ w_i = 4π`.
#[derive(Debug, Clone)]
pub struct SphereQuadrature {
    nodes: Vec<[f64; 3]>,
    weights: Vec<f64>,
    order: usize,
    kind: RuleKind,
}

fn lebedev_tables() -> &'static Vec<(usize, Vec<[f64; 4]>)> {
    static TABLES: OnceLock<Vec<(usize, Vec<[f64; 4]>)>> = OnceLock::new();
    TABLES.get_or_init(|| {
        let text = include_str!("../data/lebedev.txt");
        let mut out: Vec<(usize, Vec<[f64; 4]>)> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# order") {
                let order: usize = rest.split_whitespace().next().unwrap().parse().unwrap();
                out.push((order, Vec::new()));
            } else if !line.is_empty() {
                let v: Vec<f64> = line.split_whitespace().map(|t| t.parse().unwrap()).collect();
                out.last_mut().unwrap().1.push([v[0], v[1], v[2], v[3]]);
            }
        }
        out
    })
}

impl SphereQuadrature {
    /// Degrees available from the bundled Lebedev table.
    pub fn lebedev_orders() -> Vec<usize> {
        lebedev_tables().iter().map(|(o, _)| *o).collect()
    }

    /// Rule exact for spherical harmonics up to degree `order`: Lebedev when tabulated,
    /// otherwise the product rule.
    pub fn for_order(order: usize) -> Result<Self> {
        match Self::lebedev(order) {
            Ok(q) => Ok(q),
            Err(_) => Self::product(order),
        }
    }

    pub fn lebedev(order: usize) -> Result<Self> {
        let table = lebedev_tables()
            .iter()
            .find(|(o, _)| *o == order)
            .ok_or_else(|| Error::InvalidParameter(format!("no Lebedev rule of order {order}")))?;
        let nodes = table.1.iter().map(|r| [r[0], r[1], r[2]]).collect();
        let weights = table.1.iter().map(|r| r[3] * 4.0 * PI).collect();
        let q = Self { nodes, weights, order, kind: RuleKind::Lebedev };
        q.verify()?;
        Ok(q)
    }

    /// Gauss–Legendre in `cos θ` times the trapezoid rule in `φ`, exact up to degree `order`.
    pub fn product(order: usize) -> Result<Self> {
        let m = (order + 2) / 2;
        let p = order + 1;
        let (ct, wt) = gauss_legendre(m.max(1));
        let mut nodes = Vec::with_capacity(m * p);
        let mut weights = Vec::with_capacity(m * p);
        for (&c, &w) in ct.iter().zip(&wt) {
            let s = (1.0 - c * c).max(0.0).sqrt();
            for j in 0..p {
                let phi = 2.0 * PI * (j as f64 + 0.5) / p as f64;
                nodes.push([s * phi.cos(), s * phi.sin(), c]);
                weights.push(w * 2.0 * PI / p as f64);
            }
        }
        let q = Self { nodes, weights, order, kind: RuleKind::Product };
        q.verify()?;
        Ok(q)
    }

    /// Parses a text table with one `x y z weight` row per node. Weights may be normalized to
    /// either 1 or 4π; lines starting with `#` are ignored.
    pub fn from_table(text: &str, order: usize) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v: std::result::Result<Vec<f64>, _> =
                line.split_whitespace().map(str::parse::<f64>).collect();
            let v = v.map_err(|e| Error::Format(format!("line {}: {e}", ln + 1)))?;
            if v.len() != 4 {
                return Err(Error::Format(format!("line {}: expected 4 columns", ln + 1)));
            }
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if (r - 1.0).abs() > 1e-10 {
                return Err(Error::Format(format!("line {}: node is not a unit vector", ln + 1)));
            }
            if !(v[3] > 0.0) {
                return Err(Error::Format(format!("line {}: weight must be positive", ln + 1)));
            }
            nodes.push([v[0], v[1], v[2]]);
            weights.push(v[3]);
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() < 1e-10 {
            weights.iter_mut().for_each(|w| *w *= 4.0 * PI);
        } else if (total - 4.0 * PI).abs() > 1e-10 {
            return Err(Error::Format(format!("weights sum to {total}, expected 1 or 4π")));
        }
        let q = Self { nodes, weights, order, kind: RuleKind::Table };
        q.verify()?;
        Ok(q)
    }

    pub fn nodes(&self) -> &[[f64; 3]] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn kind(&self) -> RuleKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn([f64; 3]) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }

    /// Checks the weight sum and the exactness on every monomial of degree ≤ order.
    pub fn verify(&self) -> Result<()> {
        let total: f64 = self.weights.iter().sum();
        if (total - 4.0 * PI).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("sphere weights sum to {total}")));
        }
        let d = self.order;
        for a in 0..=d {
            for b in 0..=(d - a) {
                for c in 0..=(d - a - b) {
                    let exact = sphere_monomial(a, b, c);
                    let approx = self.integrate(|x| {
                        x[0].powi(a as i32) * x[1].powi(b as i32) * x[2].powi(c as i32)
                    });
                    if (approx - exact).abs() > 1e-12 * 4.0 * PI {
                        return Err(Error::InvalidParameter(format!(
                            "rule of order {d} fails on x^{a} y^{b} z^{c}: {approx} vs {exact}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `∫_{S²} x^a y^b z^c dS`.
pub fn sphere_monomial(a: usize, b: usize, c: usize) -> f64 {
    if a % 2 == 1 || b % 2 == 1 || c % 2 == 1 {
        return 0.0;
    }
    let g = |p: usize| libm::lgamma((p as f64 + 1.0) / 2.0);
    let lg = g(a) + g(b) + g(c) - libm::lgamma((a + b + c) as f64 / 2.0 + 1.5);
    2.0 * lg.exp()
}

/// Product rule on the upper hemisphere `ω₃ > 0` (weights sum to 2π): Gauss–Legendre in `ω₃`
/// and trapezoid in azimuth. Integrands that are smooth up to the equator converge
/// spectrally in `order`.
#[derive(Debug, Clone)]
pub struct HemisphereRule {
    pub nodes: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl HemisphereRule {
    pub fn new(order: usize) -> Self {
        let m = order.div_ceil(2).max(1);
        let p = order + 1;
        let (c, w) = gauss_legendre_on(m, 0.0, 1.0);
        let mut nodes = Vec::with_capacity(m * p);
        let mut weights = Vec::with_capacity(m * p);
        for (&z, &wz) in c.iter().zip(&w) {
            let s = (1.0 - z * z).sqrt();
            for j in 0..p {
                let phi = 2.0 * PI * (j as f64 + 0.5) / p as f64;
                nodes.push([s * phi.cos(), s * phi.sin(), z]);
                weights.push(wz * 2.0 * PI / p as f64);
            }
        }
        Self { nodes, weights }
    }
}
