//! Monte Carlo ensembles of `sample → evolve → probe` and their estimators.
//!
//! Every monitored scalar is accumulated with exact (error-free) summation of its first four
//! powers, so the merged statistics are a correctly rounded function of the multiset of samples:
//! results are bit-identical for any worker count and any merge order.
//!
//! Per realization the initial spectra are propagated once per scheduled time in a single pass
//! over half of the dual lattice. That pass accumulates the functionals `⟨Y(t), Ψ⟩` and, for
//! every probed plane `x₃ = z`, the sums `Σ_{k₃} F̂(k, t) e^{-ik₃z}` from which one 2D transform
//! yields `u`, `v` and `∇u` on the whole plane.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{
    pushforward_correlation, sample_spectrum, splice_weights, MeasureSpec, OddMap, RngStream, SpectralDensity,
    TwoTempSpec,
};
use crate::lattice::{Lattice, Transform};
use crate::propagate::PropagatorPlan;
use crate::quadrature::{integrate_adaptive, SphereQuadrature};
use crate::testfn::{min_image_distance, TestFunction};

/// Exact floating-point sum (Shewchuk's non-overlapping partials); `value` is the correctly
/// rounded sum of everything added, independent of insertion order.
#[derive(Debug, Clone, Default)]
pub struct ExactSum {
    partials: Vec<f64>,
    special: f64,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, mut x: f64) {
        if !x.is_finite() {
            self.special += x;
            return;
        }
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn merge(&mut self, other: &ExactSum) {
        for &p in &other.partials {
            self.add(p);
        }
        self.special += other.special;
    }

    pub fn value(&self) -> f64 {
        if self.special != 0.0 || self.special.is_nan() {
            return self.special;
        }
        let p = &self.partials;
        let Some(&last) = p.last() else { return 0.0 };
        let mut hi = last;
        let mut lo = 0.0;
        let mut k = p.len() - 1;
        while k > 0 {
            k -= 1;
            let x = hi;
            let y = p[k];
            hi = x + y;
            lo = y - (hi - x);
            if lo != 0.0 {
                break;
            }
        }
        if k > 0 && ((lo < 0.0 && p[k - 1] < 0.0) || (lo > 0.0 && p[k - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

/// Exact power sums of one monitored scalar, plus `cos` and `sin` sums for characteristic
/// functionals.
#[derive(Debug, Clone, Default)]
pub struct ScalarAcc {
    pub powers: [ExactSum; 4],
    pub cos: ExactSum,
    pub sin: ExactSum,
}

impl ScalarAcc {
    pub fn add(&mut self, w: f64, trig: bool) {
        let mut p = w;
        for s in &mut self.powers {
            s.add(p);
            p *= w;
        }
        if trig {
            self.cos.add(w.cos());
            self.sin.add(w.sin());
        }
    }

    pub fn merge(&mut self, other: &ScalarAcc) {
        for (a, b) in self.powers.iter_mut().zip(&other.powers) {
            a.merge(b);
        }
        self.cos.merge(&other.cos);
        self.sin.merge(&other.sin);
    }
}

/// Mean with standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn z_score(&self, target: f64) -> f64 {
        if self.stderr > 0.0 {
            (self.value - target) / self.stderr
        } else if self.value == target {
            0.0
        } else {
            f64::INFINITY.copysign(self.value - target)
        }
    }
}

/// Mergeable accumulators for a fixed layout of scalars.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub count: u64,
    pub scalars: Vec<ScalarAcc>,
    trig: Vec<bool>,
}

impl EnsembleStats {
    pub fn new(trig: Vec<bool>) -> Self {
        Self { count: 0, scalars: vec![ScalarAcc::default(); trig.len()], trig }
    }

    pub fn len(&self) -> usize {
        self.scalars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scalars.is_empty()
    }

    pub fn push(&mut self, record: &[f64]) {
        assert_eq!(record.len(), self.scalars.len());
        for ((acc, &w), &t) in self.scalars.iter_mut().zip(record).zip(&self.trig) {
            acc.add(w, t);
        }
        self.count += 1;
    }

    pub fn merge(mut self, other: &EnsembleStats) -> Self {
        assert_eq!(self.trig, other.trig, "merging statistics with different layouts");
        for (a, b) in self.scalars.iter_mut().zip(&other.scalars) {
            a.merge(b);
        }
        self.count += other.count;
        self
    }

    fn power_means(&self, i: usize) -> [f64; 4] {
        let m = self.count as f64;
        let p = &self.scalars[i].powers;
        [p[0].value() / m, p[1].value() / m, p[2].value() / m, p[3].value() / m]
    }

    /// Sample mean and `sd/√M` of scalar `i`.
    pub fn estimate(&self, i: usize) -> Result<Estimate> {
        if self.count < 2 {
            return Err(Error::InsufficientSamples(format!("{} samples", self.count)));
        }
        let m = self.count as f64;
        let [m1, m2, _, _] = self.power_means(i);
        let var = ((m2 - m1 * m1) * m / (m - 1.0)).max(0.0);
        Ok(Estimate { value: m1, stderr: (var / m).sqrt() })
    }

    /// Central moments `(μ, m₂, m₃, m₄)` of scalar `i`.
    pub fn central_moments(&self, i: usize) -> [f64; 4] {
        let [a1, a2, a3, a4] = self.power_means(i);
        let m2 = a2 - a1 * a1;
        let m3 = a3 - 3.0 * a1 * a2 + 2.0 * a1 * a1 * a1;
        let m4 = a4 - 4.0 * a1 * a3 + 6.0 * a1 * a1 * a2 - 3.0 * a1.powi(4);
        [a1, m2.max(0.0), m3, m4.max(0.0)]
    }

    /// Sample mean of `exp(i w)` for scalar `i`.
    pub fn characteristic(&self, i: usize) -> Result<Complex64> {
        if !self.trig[i] {
            return Err(Error::InvalidParameter(format!("scalar {i} has no characteristic accumulator")));
        }
        if self.count == 0 {
            return Err(Error::InsufficientSamples("no samples".into()));
        }
        let m = self.count as f64;
        Ok(Complex64::new(self.scalars[i].cos.value() / m, self.scalars[i].sin.value() / m))
    }
}

/// A correlation probe between two lattice sites given by signed offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairProbe {
    pub x: [i64; 3],
    pub y: [i64; 3],
}

/// Ball over which the local energy seminorm is monitored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBall {
    pub center: [f64; 3],
    pub radius: f64,
}

/// Everything recorded per realization and time.
#[derive(Debug, Clone, Default)]
pub struct ProbeSet {
    pub pairs: Vec<PairProbe>,
    pub functionals: Vec<TestFunction>,
    pub current_points: Vec<[i64; 3]>,
    pub energy_balls: Vec<EnergyBall>,
    /// Average pair products and currents over all `(x₁, x₂)` translates.
    pub transverse_average: bool,
}

impl ProbeSet {
    fn per_time(&self) -> usize {
        4 * self.pairs.len() + 3 * self.current_points.len() + self.functionals.len() + self.energy_balls.len()
    }

    /// Checks `|probe| + t_max + a < L/2` for every probe. Transverse-averaged probes only
    /// constrain `|x₃|`, because the wrap interface is the plane `x₃ = ±L/2`.
    pub fn validate(&self, lattice: &Lattice, t_max: f64, a: f64) -> Result<()> {
        let half = lattice.side() / 2.0;
        let h = lattice.h();
        let reach = |p: [i64; 3]| -> f64 {
            let q = [lattice.coord(lattice.wrap(p[0])), lattice.coord(lattice.wrap(p[1])), lattice.coord(lattice.wrap(p[2]))];
            if self.transverse_average {
                q[2].abs()
            } else {
                (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt()
            }
        };
        let fail = |what: String, r: f64| -> Result<()> {
            if r + t_max + a >= half {
                Err(Error::WrapSafety(format!(
                    "{what}: reach {r} + t_max {t_max} + a {a} ≥ L/2 = {half}"
                )))
            } else {
                Ok(())
            }
        };
        for (i, p) in self.pairs.iter().enumerate() {
            fail(format!("pair {i}"), reach(p.x).max(reach(p.y)))?;
        }
        for (i, &p) in self.current_points.iter().enumerate() {
            fail(format!("current point {i}"), reach(p))?;
        }
        for (i, f) in self.functionals.iter().enumerate() {
            lattice.same_as(&f.lattice)?;
            fail(format!("functional {i}"), f.extent())?;
        }
        for (i, b) in self.energy_balls.iter().enumerate() {
            let c = b.center;
            fail(format!("energy ball {i}"), (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt() + b.radius + h)?;
        }
        Ok(())
    }
}

/// Initial measure of an ensemble: a spliced pair of homogeneous Gaussian measures, optionally
/// pushed forward pointwise by odd maps before splicing.
#[derive(Debug, Clone)]
pub struct InitialMeasure {
    pub spec: TwoTempSpec,
    pub f0: OddMap,
    pub f1: OddMap,
}

impl InitialMeasure {
    pub fn gaussian(spec: TwoTempSpec) -> Self {
        Self { spec, f0: OddMap::Identity, f1: OddMap::Identity }
    }

    /// Densities of the (pushed-forward) homogeneous components, for exact covariance oracles
    /// and limit predictions.
    pub fn effective_specs(&self, transform: &Transform) -> Result<(MeasureSpec, MeasureSpec)> {
        let push = |s: &SpectralDensity, map: OddMap| -> Result<SpectralDensity> {
            if map == OddMap::Identity {
                return Ok(s.clone());
            }
            let q = pushforward_correlation(&s.correlation(transform), map);
            SpectralDensity::from_correlation(transform, &q)
        };
        let one = |m: &MeasureSpec| -> Result<MeasureSpec> {
            MeasureSpec::new(push(&m.s00, self.f0)?, push(&m.s11, self.f1)?)
        };
        Ok((one(&self.spec.minus)?, one(&self.spec.plus)?))
    }
}

/// Layout of the per-realization record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pairs: usize,
    currents: usize,
    functionals: usize,
    balls: usize,
    times: usize,
}

impl Layout {
    fn per_time(&self) -> usize {
        4 * self.pairs + 3 * self.currents + self.functionals + self.balls
    }

    pub fn len(&self) -> usize {
        self.per_time() * self.times
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of `Q^{ij}` for pair `p` at time index `ti`.
    pub fn pair(&self, ti: usize, p: usize, i: usize, j: usize) -> usize {
        ti * self.per_time() + 4 * p + 2 * i + j
    }

    pub fn current(&self, ti: usize, c: usize, axis: usize) -> usize {
        ti * self.per_time() + 4 * self.pairs + 3 * c + axis
    }

    pub fn functional(&self, ti: usize, f: usize) -> usize {
        ti * self.per_time() + 4 * self.pairs + 3 * self.currents + f
    }

    pub fn ball(&self, ti: usize, b: usize) -> usize {
        ti * self.per_time() + 4 * self.pairs + 3 * self.currents + self.functionals + b
    }

    fn trig_flags(&self) -> Vec<bool> {
        let mut v = vec![false; self.len()];
        for ti in 0..self.times {
            for f in 0..self.functionals {
                v[self.functional(ti, f)] = true;
            }
        }
        v
    }
}

/// Result of an ensemble run: statistics plus the schedule they refer to.
#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub stats: EnsembleStats,
    pub layout: Layout,
    pub times: Vec<f64>,
}

/// Plane fields `u, v, ∂₁u, ∂₂u, ∂₃u` on one `x₃` plane, indexed `i1·n + i2`.
struct PlaneFields {
    u: Vec<f64>,
    v: Vec<f64>,
    grad: [Vec<f64>; 3],
}

/// Fused sampler/propagator/probe engine.
pub struct EnsembleRunner {
    transform: Transform,
    measure: InitialMeasure,
    times: Vec<f64>,
    probes: ProbeSet,
    plans: Vec<PropagatorPlan>,
    zeta_minus: Vec<f64>,
    zeta_plus: Vec<f64>,
    psi: Vec<(Vec<Complex64>, Vec<Complex64>)>,
    planes: Vec<usize>,
    ball_sites: Vec<Vec<usize>>,
    layout: Layout,
}

impl EnsembleRunner {
    pub fn new(transform: Transform, measure: InitialMeasure, times: Vec<f64>, probes: ProbeSet) -> Result<Self> {
        let lattice = *transform.lattice();
        lattice.same_as(&measure.spec.lattice())?;
        if times.is_empty() || times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::InvalidParameter("times must be a nonempty list of t ≥ 0".into()));
        }
        let t_max = times.iter().cloned().fold(0.0, f64::max);
        probes.validate(&lattice, t_max, measure.spec.half_width_a)?;
        let plans = times.iter().map(|&t| PropagatorPlan::new(lattice, t)).collect();
        let (zeta_minus, zeta_plus) = splice_weights(&lattice, measure.spec.half_width_a, measure.spec.profile);
        let psi = probes
            .functionals
            .iter()
            .map(|f| {
                let (a, b) = f.spectra(&transform);
                (a.iter().map(|z| z.conj()).collect(), b.iter().map(|z| z.conj()).collect())
            })
            .collect();
        let mut planes: Vec<usize> = probes
            .pairs
            .iter()
            .flat_map(|p| [lattice.wrap(p.x[2]), lattice.wrap(p.y[2])])
            .chain(probes.current_points.iter().map(|p| lattice.wrap(p[2])))
            .collect();
        planes.sort_unstable();
        planes.dedup();
        let layout = Layout {
            pairs: probes.pairs.len(),
            currents: probes.current_points.len(),
            functionals: probes.functionals.len(),
            balls: probes.energy_balls.len(),
            times: times.len(),
        };
        debug_assert_eq!(layout.per_time(), probes.per_time());
        let ball_sites = probes
            .energy_balls
            .iter()
            .map(|b| (0..lattice.len()).filter(|&i| min_image_distance(&lattice, lattice.position(i), b.center) < b.radius).collect())
            .collect();
        Ok(Self { transform, measure, times, probes, plans, zeta_minus, zeta_plus, psi, planes, ball_sites, layout })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn transform(&self) -> &Transform {
        &self.transform
    }

    pub fn measure(&self) -> &InitialMeasure {
        &self.measure
    }

    pub fn probes(&self) -> &ProbeSet {
        &self.probes
    }

    /// Spectra `(û₀, v̂₀)` of one spliced initial draw.
    pub fn initial_spectra(&self, seed: u64, stream_id: u64) -> (Vec<Complex64>, Vec<Complex64>) {
        let (u, v) = self.initial_fields(seed, stream_id);
        self.transform.forward_pair(&u, &v)
    }

    /// Real-space `(u₀, v₀)` of one spliced initial draw.
    pub fn initial_fields(&self, seed: u64, stream_id: u64) -> (Vec<f64>, Vec<f64>) {
        let spec = &self.measure.spec;
        let mut rng = RngStream::new(seed, stream_id).rng();
        let um = sample_spectrum(&spec.minus.s00, &mut rng);
        let vm = sample_spectrum(&spec.minus.s11, &mut rng);
        let up = sample_spectrum(&spec.plus.s00, &mut rng);
        let vp = sample_spectrum(&spec.plus.s11, &mut rng);
        let (mut a, mut b) = self.transform.inverse_pair(&um, &vm);
        let (c, d) = self.transform.inverse_pair(&up, &vp);
        let n = self.transform.lattice().n();
        let (f0, f1) = (self.measure.f0, self.measure.f1);
        for idx in 0..a.len() {
            let i3 = idx % n;
            let (zm, zp) = (self.zeta_minus[i3], self.zeta_plus[i3]);
            a[idx] = zm * f0.apply(a[idx]) + zp * f0.apply(c[idx]);
            b[idx] = zm * f1.apply(b[idx]) + zp * f1.apply(d[idx]);
        }
        (a, b)
    }

    /// All recorded scalars of one realization.
    pub fn realization(&self, seed: u64, stream_id: u64) -> Vec<f64> {
        let (uh, vh) = self.initial_spectra(seed, stream_id);
        let mut out = vec![0.0; self.layout.len()];
        for ti in 0..self.times.len() {
            self.record_time(ti, &uh, &vh, &mut out);
        }
        out
    }

    fn record_time(&self, ti: usize, uh: &[Complex64], vh: &[Complex64], out: &mut [f64]) {
        let lattice = *self.transform.lattice();
        let n = lattice.n();
        let half = n / 2;
        let plan = &self.plans[ti];
        let kd = lattice.derivative_wavenumbers();
        let np = self.planes.len();
        let zero = Complex64::new(0.0, 0.0);
        // Phases e^{-ik₃z} per probed plane.
        let phases: Vec<Vec<Complex64>> = self
            .planes
            .iter()
            .map(|&iz| (0..n).map(|i3| Complex64::from_polar(1.0, -lattice.wavenumber(i3) * lattice.coord(iz))).collect())
            .collect();
        let mut gu = vec![vec![zero; n * n]; np];
        let mut gv = vec![vec![zero; n * n]; np];
        let mut g3 = vec![vec![zero; n * n]; np];
        let mut fsum = vec![0.0; self.psi.len()];
        let mut ut_row = vec![zero; n];
        let mut vt_row = vec![zero; n];
        for i1 in 0..n {
            for i2 in 0..=half {
                let w = if i2 == 0 || i2 == half { 1.0 } else { 2.0 };
                let base = lattice.index(i1, i2, 0);
                for i3 in 0..n {
                    let idx = base + i3;
                    let (c, s, ks) = plan.multipliers(idx);
                    let (a, b) = (uh[idx], vh[idx]);
                    ut_row[i3] = a * c + b * s;
                    vt_row[i3] = b * c - a * ks;
                }
                for (f, (p0, p1)) in self.psi.iter().enumerate() {
                    let mut acc = 0.0;
                    for i3 in 0..n {
                        let idx = base + i3;
                        acc += (ut_row[i3] * p0[idx]).re + (vt_row[i3] * p1[idx]).re;
                    }
                    fsum[f] += w * acc;
                }
                for p in 0..np {
                    let e = &phases[p];
                    let (mut su, mut sv, mut s3) = (zero, zero, zero);
                    for i3 in 0..n {
                        let pu = ut_row[i3] * e[i3];
                        su += pu;
                        sv += vt_row[i3] * e[i3];
                        s3 += pu * kd[i3];
                    }
                    let o = i1 * n + i2;
                    gu[p][o] = su;
                    gv[p][o] = sv;
                    g3[p][o] = Complex64::new(s3.im, -s3.re);
                }
            }
        }
        let vol = lattice.volume();
        for (f, s) in fsum.iter().enumerate() {
            out[self.layout.functional(ti, f)] = s / vol;
        }
        let planes: Vec<PlaneFields> = (0..np)
            .map(|p| self.plane_fields(&mut gu[p], &mut gv[p], &mut g3[p]))
            .collect();
        let plane_of = |i3: usize| self.planes.binary_search(&i3).expect("probe plane");
        for (pi, probe) in self.probes.pairs.iter().enumerate() {
            // Canonical orientation so swapped pairs reuse bit-identical products.
            let (x, y, swapped) = if probe.x <= probe.y { (probe.x, probe.y, false) } else { (probe.y, probe.x, true) };
            let px = &planes[plane_of(lattice.wrap(x[2]))];
            let py = &planes[plane_of(lattice.wrap(y[2]))];
            let d = [y[0] - x[0], y[1] - x[1]];
            for i in 0..2 {
                for j in 0..2 {
                    let a = if i == 0 { &px.u } else { &px.v };
                    let b = if j == 0 { &py.u } else { &py.v };
                    let val = self.transverse_product(&lattice, a, b, [x[0], x[1]], d);
                    let (oi, oj) = if swapped { (j, i) } else { (i, j) };
                    out[self.layout.pair(ti, pi, oi, oj)] = val;
                }
            }
        }
        for (ci, &p) in self.probes.current_points.iter().enumerate() {
            let pf = &planes[plane_of(lattice.wrap(p[2]))];
            for axis in 0..3 {
                let val = self.transverse_product(&lattice, &pf.v, &pf.grad[axis], [p[0], p[1]], [0, 0]);
                out[self.layout.current(ti, ci, axis)] = -val;
            }
        }
        if !self.probes.energy_balls.is_empty() {
            self.record_energies(ti, uh, vh, out);
        }
    }

    /// Mean over transverse translates (or the single product at `origin`) of `a(p)·b(p + d)`.
    fn transverse_product(&self, lattice: &Lattice, a: &[f64], b: &[f64], origin: [i64; 2], d: [i64; 2]) -> f64 {
        let n = lattice.n();
        if self.probes.transverse_average {
            let mut s = 0.0;
            for p1 in 0..n {
                let q1 = lattice.wrap(p1 as i64 + d[0]);
                for p2 in 0..n {
                    let q2 = lattice.wrap(p2 as i64 + d[1]);
                    s += a[p1 * n + p2] * b[q1 * n + q2];
                }
            }
            s / (n * n) as f64
        } else {
            let (p1, p2) = (lattice.wrap(origin[0]), lattice.wrap(origin[1]));
            let (q1, q2) = (lattice.wrap(origin[0] + d[0]), lattice.wrap(origin[1] + d[1]));
            a[p1 * n + p2] * b[q1 * n + q2]
        }
    }

    /// Completes half-plane sums by Hermitian symmetry and transforms them to plane fields.
    fn plane_fields(&self, gu: &mut [Complex64], gv: &mut [Complex64], g3: &mut [Complex64]) -> PlaneFields {
        let lattice = *self.transform.lattice();
        let n = lattice.n();
        let half = n / 2;
        for g in [&mut *gu, &mut *gv, &mut *g3] {
            for i1 in 0..n {
                for i2 in half + 1..n {
                    g[i1 * n + i2] = g[((n - i1) % n) * n + (n - i2)].conj();
                }
            }
        }
        let kd = lattice.derivative_wavenumbers();
        let mut uv: Vec<Complex64> = gu.iter().zip(gv.iter()).map(|(a, b)| a + Complex64::i() * b).collect();
        let mut d12: Vec<Complex64> = (0..n * n)
            .map(|o| {
                let (i1, i2) = (o / n, o % n);
                let d1 = gu[o] * Complex64::new(0.0, -kd[i1]);
                let d2 = gu[o] * Complex64::new(0.0, -kd[i2]);
                d1 + Complex64::i() * d2
            })
            .collect();
        let mut d3 = g3.to_vec();
        self.transform.inverse_plane(&mut uv);
        self.transform.inverse_plane(&mut d12);
        self.transform.inverse_plane(&mut d3);
        PlaneFields {
            u: uv.iter().map(|z| z.re).collect(),
            v: uv.iter().map(|z| z.im).collect(),
            grad: [d12.iter().map(|z| z.re).collect(), d12.iter().map(|z| z.im).collect(), d3.iter().map(|z| z.re).collect()],
        }
    }

    fn record_energies(&self, ti: usize, uh: &[Complex64], vh: &[Complex64], out: &mut [f64]) {
        let lattice = *self.transform.lattice();
        let plan = &self.plans[ti];
        let mut ut = uh.to_vec();
        let mut vt = vh.to_vec();
        plan.apply(&mut ut, &mut vt);
        let kd = lattice.derivative_wavenumbers();
        let d = |axis: usize| -> Vec<Complex64> {
            ut.iter()
                .enumerate()
                .map(|(idx, z)| z * Complex64::new(0.0, -kd[lattice.unravel(idx)[axis]]))
                .collect()
        };
        let (u, v) = self.transform.inverse_pair(&ut, &vt);
        let (g1, g2) = self.transform.inverse_pair(&d(0), &d(1));
        let g3 = self.transform.inverse_real(&d(2));
        for (bi, sites) in self.ball_sites.iter().enumerate() {
            let mut s = 0.0;
            for &idx in sites {
                s += u[idx] * u[idx] + g1[idx] * g1[idx] + g2[idx] * g2[idx] + g3[idx] * g3[idx] + v[idx] * v[idx];
            }
            out[self.layout.ball(ti, bi)] = s * lattice.cell_volume();
        }
    }

    /// Runs `samples` realizations with stream ids `0..samples` on `workers` threads
    /// (0 = rayon default).
    pub fn run(&self, samples: u64, seed: u64, workers: usize) -> Result<EnsembleResult> {
        if samples < 2 {
            return Err(Error::InsufficientSamples(format!("M = {samples} < 2")));
        }
        let work = || {
            (0..samples)
                .into_par_iter()
                .fold(
                    || EnsembleStats::new(self.layout.trig_flags()),
                    |mut acc, id| {
                        acc.push(&self.realization(seed, id));
                        acc
                    },
                )
                .reduce(|| EnsembleStats::new(self.layout.trig_flags()), |a, b| a.merge(&b))
        };
        let stats = if workers == 0 {
            work()
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?
                .install(work)
        };
        Ok(EnsembleResult { stats, layout: self.layout, times: self.times.clone() })
    }
}

/// `Q̂_t^{ij}(x, y)` for pair `p` at time index `ti`.
pub fn estimate_correlation(res: &EnsembleResult, ti: usize, pair: usize, i: usize, j: usize) -> Result<Estimate> {
    if pair >= res.layout.pairs || ti >= res.layout.times || i > 1 || j > 1 {
        return Err(Error::UnknownProbe(format!("pair {pair} component {i}{j} at time index {ti}")));
    }
    res.stats.estimate(res.layout.pair(ti, pair, i, j))
}

/// `E exp(i⟨Y(t), Ψ⟩)` with error radius `1/√M`.
pub fn estimate_char_functional(res: &EnsembleResult, ti: usize, f: usize) -> Result<(Complex64, f64)> {
    if f >= res.layout.functionals || ti >= res.layout.times {
        return Err(Error::UnknownProbe(format!("functional {f} at time index {ti}")));
    }
    let c = res.stats.characteristic(res.layout.functional(ti, f))?;
    Ok((c, 1.0 / (res.stats.count as f64).sqrt()))
}

/// Standardized skewness and excess kurtosis with Gaussian reference errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianityMetrics {
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub skewness_ref_error: f64,
    pub kurtosis_ref_error: f64,
}

pub fn gaussianity_metrics(res: &EnsembleResult, ti: usize, f: usize) -> Result<GaussianityMetrics> {
    if f >= res.layout.functionals || ti >= res.layout.times {
        return Err(Error::UnknownProbe(format!("functional {f} at time index {ti}")));
    }
    let m = res.stats.count as f64;
    let [_, m2, m3, m4] = res.stats.central_moments(res.layout.functional(ti, f));
    let (skewness, excess_kurtosis) = if m2 > 0.0 { (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0) } else { (0.0, 0.0) };
    Ok(GaussianityMetrics {
        skewness,
        excess_kurtosis,
        skewness_ref_error: (6.0 / m).sqrt(),
        kurtosis_ref_error: (24.0 / m).sqrt(),
    })
}

/// Mean current `−v∇u` at a current probe, per component.
pub fn estimate_mean_current(res: &EnsembleResult, ti: usize, c: usize) -> Result<[Estimate; 3]> {
    if c >= res.layout.currents || ti >= res.layout.times {
        return Err(Error::UnknownProbe(format!("current point {c} at time index {ti}")));
    }
    Ok([
        res.stats.estimate(res.layout.current(ti, c, 0))?,
        res.stats.estimate(res.layout.current(ti, c, 1))?,
        res.stats.estimate(res.layout.current(ti, c, 2))?,
    ])
}

/// Time series of the mean local energy in one ball.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalEnergyReport {
    pub times: Vec<f64>,
    pub means: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub max: f64,
    pub min: f64,
    /// Least-squares slope of mean energy against time and its standard error.
    pub slope: f64,
    pub slope_stderr: f64,
    /// Slope exceeds three standard errors.
    pub growth: bool,
}

pub fn local_energy_bound_check(res: &EnsembleResult, ball: usize) -> Result<LocalEnergyReport> {
    if ball >= res.layout.balls {
        return Err(Error::UnknownProbe(format!("energy ball {ball}")));
    }
    if res.times.len() < 3 {
        return Err(Error::InsufficientSamples("need at least 3 scheduled times".into()));
    }
    let est: Vec<Estimate> =
        (0..res.times.len()).map(|ti| res.stats.estimate(res.layout.ball(ti, ball))).collect::<Result<_>>()?;
    let means: Vec<f64> = est.iter().map(|e| e.value).collect();
    let stderrs: Vec<f64> = est.iter().map(|e| e.stderr).collect();
    let t = &res.times;
    let k = t.len() as f64;
    let tm = t.iter().sum::<f64>() / k;
    let sxx: f64 = t.iter().map(|x| (x - tm) * (x - tm)).sum();
    let slope = if sxx > 0.0 { t.iter().zip(&means).map(|(x, y)| (x - tm) * y).sum::<f64>() / sxx } else { 0.0 };
    // Treat the per-time errors as independent; conservative for positively correlated times.
    let slope_stderr = if sxx > 0.0 {
        (t.iter().zip(&stderrs).map(|(x, s)| (x - tm) * (x - tm) * s * s).sum::<f64>()).sqrt() / sxx
    } else {
        0.0
    };
    let max = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = means.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(LocalEnergyReport {
        times: t.clone(),
        means,
        stderrs,
        max,
        min,
        slope,
        slope_stderr,
        growth: slope > 3.0 * slope_stderr && slope > 0.0,
    })
}

/// Tabulated nonincreasing envelopes `ν₀, ν₁, ν₂` of a correlation function and its first and
/// second derivatives, on radii `0, h, 2h, …`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayProfile {
    pub radii: Vec<f64>,
    pub nu0: Vec<f64>,
    pub nu1: Vec<f64>,
    pub nu2: Vec<f64>,
    pub r0: Option<f64>,
}

impl DecayProfile {
    /// Envelopes of `|q|`, `|∇q|` and `|Δq|` (spectral derivatives) for a real-space correlation.
    pub fn from_correlation(transform: &Transform, q: &[f64], tol: f64) -> Self {
        let lattice = *transform.lattice();
        let g = crate::propagate::spectral_gradient(transform, q);
        let lap = crate::limits::laplacian(transform, q);
        let h = lattice.h();
        let nb = (lattice.side() * 3f64.sqrt() / (2.0 * h)).ceil() as usize + 2;
        let mut m0 = vec![0.0f64; nb];
        let mut m1 = vec![0.0f64; nb];
        let mut m2 = vec![0.0f64; nb];
        for idx in 0..lattice.len() {
            let b = (lattice.radius_sq(idx).sqrt() / h).floor() as usize;
            m0[b] = m0[b].max(q[idx].abs());
            let gn = (g[0][idx].powi(2) + g[1][idx].powi(2) + g[2][idx].powi(2)).sqrt();
            m1[b] = m1[b].max(gn);
            m2[b] = m2[b].max(lap[idx].abs());
        }
        let envelope = |m: Vec<f64>| -> Vec<f64> {
            let mut e = m;
            for i in (0..e.len().saturating_sub(1)).rev() {
                e[i] = e[i].max(e[i + 1]);
            }
            e
        };
        let nu0 = envelope(m0);
        let scale = nu0[0];
        let r0 = nu0.iter().position(|&v| v <= tol * scale).map(|i| i as f64 * h);
        Self { radii: (0..nb).map(|i| i as f64 * h).collect(), nu0, nu1: envelope(m1), nu2: envelope(m2), r0 }
    }

    pub fn is_monotone(&self) -> bool {
        [&self.nu0, &self.nu1, &self.nu2].iter().all(|v| v.windows(2).all(|w| w[1] <= w[0]) && v.iter().all(|&x| x >= 0.0))
    }

    /// `∫ (1 + r)^{d−1} ν(r) dr` by the trapezoid rule over the table, with `d = 3`.
    pub fn weighted_integral(&self, nu: &[f64]) -> f64 {
        let f: Vec<f64> = self.radii.iter().zip(nu).map(|(r, v)| (1.0 + r).powi(2) * v).collect();
        let h = self.radii.get(1).copied().unwrap_or(0.0);
        f.windows(2).map(|w| 0.5 * h * (w[0] + w[1])).sum()
    }
}

/// Relative difference of the two sides of
/// `∫_{x′∈S_t(x), |x′−x″| ≥ r₀} h(|x′−x″|) dS = 2π ∫_{r₀}^{2t} r h(r) dr` with `x″ = x + t ẑ`;
/// the left side by the sphere rule, the right by adaptive Gauss–Kronrod.
pub fn spherical_identity_check(h: &dyn Fn(f64) -> f64, r0: f64, t: f64, quad: &SphereQuadrature) -> f64 {
    let lhs = t * t
        * quad.integrate(|om| {
            let d = (om[0] * om[0] + om[1] * om[1] + (om[2] - 1.0) * (om[2] - 1.0)).sqrt() * t;
            if d >= r0 {
                h(d)
            } else {
                0.0
            }
        });
    let rhs = 2.0 * PI * integrate_adaptive(&|r: f64| r * h(r), r0, 2.0 * t, 1e-14 * t * t);
    if rhs == 0.0 {
        lhs.abs()
    } else {
        ((lhs - rhs) / rhs).abs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_sum_is_order_independent() {
        let xs = [1e16, 1.0, -1e16, 3.5e-7, 2.0f64.powi(-60), -1.0, 7.25];
        let mut a = ExactSum::new();
        xs.iter().for_each(|&x| a.add(x));
        let mut b = ExactSum::new();
        xs.iter().rev().for_each(|&x| b.add(x));
        assert_eq!(a.value(), b.value());
        assert_eq!(a.value(), 7.25 + 3.5e-7 + 2.0f64.powi(-60));
        let mut c = ExactSum::new();
        c.add(1e16);
        c.add(1.0);
        let mut d = ExactSum::new();
        d.add(-1e16);
        d.add(0.5);
        c.merge(&d);
        assert_eq!(c.value(), 1.5);
    }

    #[test]
    fn moments_of_known_sample() {
        let mut s = EnsembleStats::new(vec![true]);
        for x in [1.0, 2.0, 3.0, 4.0] {
            s.push(&[x]);
        }
        let e = s.estimate(0).unwrap();
        assert_eq!(e.value, 2.5);
        assert!((e.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        let [_, m2, m3, m4] = s.central_moments(0);
        assert!((m2 - 1.25).abs() < 1e-15 && m3.abs() < 1e-15 && (m4 - 2.5625).abs() < 1e-14);
        let c = s.characteristic(0).unwrap();
        let expect: f64 = [1.0f64, 2.0, 3.0, 4.0].iter().map(|x| x.cos()).sum::<f64>() / 4.0;
        assert!((c.re - expect).abs() < 1e-15);
    }

    fn small_runner(transverse: bool) -> (EnsembleRunner, Lattice) {
        use crate::fields::{spectral_density_example, CutoffProfile};
        let l = Lattice::new(16, 1.0).unwrap();
        let tr = Transform::new(l);
        let dens = spectral_density_example(2.0, 1, l).unwrap();
        let mk = |a: f64, b: f64| MeasureSpec::new(dens.scaled(a).unwrap(), dens.scaled(b).unwrap()).unwrap();
        let spec = TwoTempSpec::new(mk(1.0, 0.5), mk(2.0, 1.5), 1.0, CutoffProfile::Smoothstep).unwrap();
        let psi = TestFunction::bump(l, [0.5, 0.0, -1.0], 1.5, 4, 1.0, -0.5).unwrap();
        let probes = ProbeSet {
            pairs: vec![PairProbe { x: [0, 0, 1], y: [1, -1, -1] }, PairProbe { x: [1, -1, -1], y: [0, 0, 1] }],
            functionals: vec![psi],
            current_points: vec![[1, 2, 0]],
            energy_balls: vec![EnergyBall { center: [0.0, 0.0, 0.0], radius: 2.0 }],
            transverse_average: transverse,
        };
        let r = EnsembleRunner::new(tr, InitialMeasure::gaussian(spec), vec![0.0, 1.5, 2.5], probes).unwrap();
        (r, l)
    }

    #[test]
    fn realization_matches_direct_evaluation() {
        use crate::fields::FieldState;
        use crate::propagate::{evolve_spectral, local_energy, pair_with_functional, spectral_gradient};
        let (r, l) = small_runner(false);
        let rec = r.realization(5, 3);
        let (u0, v0) = r.initial_fields(5, 3);
        let y0 = FieldState::new(l, u0, v0).unwrap();
        let lay = r.layout();
        for (ti, &t) in r.times().iter().enumerate() {
            let yt = evolve_spectral(r.transform(), &y0, t).unwrap();
            let g = spectral_gradient(r.transform(), &yt.u);
            let comp = |c: usize, p: [i64; 3]| if c == 0 { yt.u[l.point_index(p)] } else { yt.v[l.point_index(p)] };
            for (pi, p) in r.probes().pairs.iter().enumerate() {
                for i in 0..2 {
                    for j in 0..2 {
                        let want = comp(i, p.x) * comp(j, p.y);
                        assert!((rec[lay.pair(ti, pi, i, j)] - want).abs() < 1e-10);
                    }
                }
            }
            let site = l.point_index([1, 2, 0]);
            for a in 0..3 {
                let want = -yt.v[site] * g[a][site];
                assert!((rec[lay.current(ti, 0, a)] - want).abs() < 1e-10);
            }
            let f = pair_with_functional(&yt, &r.probes().functionals[0]).unwrap();
            assert!((rec[lay.functional(ti, 0)] - f).abs() < 1e-10);
            let e = local_energy(r.transform(), &yt, 2.0, [0.0; 3]).unwrap();
            assert!((rec[lay.ball(ti, 0)] - e).abs() < 1e-9 * e.max(1.0));
        }
    }

    #[test]
    fn swapped_pairs_are_bit_identical_and_workers_agree() {
        let (r, _) = small_runner(true);
        let a = r.run(12, 9, 1).unwrap();
        let b = r.run(12, 9, 3).unwrap();
        for i in 0..a.stats.len() {
            assert_eq!(a.stats.central_moments(i), b.stats.central_moments(i));
        }
        let lay = a.layout;
        for ti in 0..3 {
            let q01 = a.stats.estimate(lay.pair(ti, 0, 0, 1)).unwrap();
            let q10 = a.stats.estimate(lay.pair(ti, 1, 1, 0)).unwrap();
            assert_eq!(q01.value.to_bits(), q10.value.to_bits());
        }
    }

    #[test]
    fn wrap_safety_is_enforced() {
        let (r, l) = small_runner(true);
        let mut probes = r.probes().clone();
        probes.pairs.push(PairProbe { x: [0, 0, 6], y: [0, 0, 0] });
        let err = EnsembleRunner::new(Transform::new(l), r.measure().clone(), vec![2.5], probes);
        assert!(matches!(err, Err(Error::WrapSafety(_))));
    }

    #[test]
    fn spherical_identity_exact_case() {
        let q = SphereQuadrature::lebedev(29).unwrap();
        assert!(spherical_identity_check(&|_| 1.0, 0.0, 3.0, &q) < 1e-12);
        assert!(spherical_identity_check(&|r| r, 0.0, 3.0, &q) < 1e-3);
        assert!(spherical_identity_check(&|r| (-r).exp(), 1.5, 3.0, &q) < 1e-2);
    }
}
