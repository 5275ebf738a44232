//! Room–corridor decomposition of the Kirchhoff representation.
//!
//! The sphere `S_t(x)` is sliced by planes `x₃′ − x₃ = const` into slabs. Restricting the
//! spherical means to a slab `[z_lo, z_hi]` gives translation-invariant operators with Fourier
//! multipliers
//!
//! `Ê_Σ(k) = ½ ∫ e^{-ik₃z} J₀(qρ) dz`,
//! `D̂_Σ(k) = (1/2t) ∫ e^{-ik₃z} [(1 − ik₃z) J₀(qρ) − qρ J₁(qρ)] dz`,
//!
//! with `q = |k⊥|` and `ρ = √(t² − z²)`. `D̂_Σ` is the time derivative taken with the angular
//! sector held fixed. Over `[−t, t]` they reduce to `sin(|k|t)/|k|` and `cos(|k|t)`, and both are
//! additive over disjoint slabs, so slab variables
//! `I_t(Σ) = ⟨D_Σ u₀ + E_Σ v₀, Ψ⁰⟩ + ⟨ΔE_Σ u₀ + D_Σ v₀, Ψ¹⟩`
//! sum exactly to `⟨U(t)Y₀, Ψ⟩`. The `z` integrals use Gauss–Legendre in `φ` with `z = t cos φ`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::{sample_spectrum, FieldState, MeasureSpec, RngStream};
use crate::lattice::{Lattice, Transform};
use crate::propagate::PropagatorPlan;
use crate::quadrature::gauss_legendre_on;
use crate::stats::Estimate;
use crate::testfn::TestFunction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SlabKind {
    Room,
    Corridor,
}

/// One slab `[lo, hi]` of `x₃′ − x₃`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Slab {
    pub kind: SlabKind,
    pub index: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Slab {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// A sample of one slab variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlabVariable {
    pub kind: SlabKind,
    pub index: usize,
    pub value: f64,
}

/// Rooms of width `d` separated by corridors of width `ρ`, covering `[−t, t]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoomCorridorPartition {
    pub t: f64,
    pub delta: f64,
    pub n_rooms: usize,
    pub rho: f64,
    pub d: f64,
    /// `(a_k, b_k)` per room.
    pub rooms: Vec<(f64, f64)>,
    /// The room count was lowered from the requested one to keep `d > 0`.
    pub reduced: bool,
}

/// Default room count `round((ln(t+1))^{1/10})`.
pub fn default_room_count(t: f64) -> usize {
    ((t + 1.0).ln().powf(0.1)).round().max(1.0) as usize
}

/// Partition with the default room count and corridor width `t^{1−δ}`.
pub fn make_partition(t: f64, delta: f64) -> Result<RoomCorridorPartition> {
    make_partition_with(t, delta, default_room_count(t))
}

/// Partition with an explicit room count, lowered while the room width would be `≤ 0`.
pub fn make_partition_with(t: f64, delta: f64, n_rooms: usize) -> Result<RoomCorridorPartition> {
    if !(t >= 2.0) {
        return Err(Error::InvalidParameter(format!("partition needs t ≥ 2, got {t}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("δ = {delta} must lie in (0, 1)")));
    }
    if n_rooms == 0 {
        return Err(Error::InvalidParameter("room count must be ≥ 1".into()));
    }
    let rho = t.powf(1.0 - delta);
    let mut n = n_rooms;
    let width = |n: usize| (2.0 * t - (n as f64 - 1.0) * rho) / n as f64;
    while n > 1 && width(n) <= 0.0 {
        n -= 1;
    }
    let d = width(n);
    let mut rooms = Vec::with_capacity(n);
    let mut a = -t;
    for k in 0..n {
        let b = if k + 1 == n { t } else { a + d };
        rooms.push((a, b));
        a = b + rho;
    }
    Ok(RoomCorridorPartition { t, delta, n_rooms: n, rho, d, rooms, reduced: n != n_rooms })
}

impl RoomCorridorPartition {
    /// Rooms and corridors ordered by `z`.
    pub fn slabs(&self) -> Vec<Slab> {
        let mut out = Vec::with_capacity(2 * self.n_rooms - 1);
        for (k, &(a, b)) in self.rooms.iter().enumerate() {
            out.push(Slab { kind: SlabKind::Room, index: k, lo: a, hi: b });
            if let Some(&(next, _)) = self.rooms.get(k + 1) {
                out.push(Slab { kind: SlabKind::Corridor, index: k, lo: b, hi: next });
            }
        }
        out
    }

    pub fn total_width(&self) -> f64 {
        self.slabs().iter().map(|s| s.width()).sum()
    }

    /// Each slab split in `parts` equal pieces.
    pub fn refine(slabs: &[Slab], parts: usize) -> Vec<Slab> {
        slabs
            .iter()
            .flat_map(|s| {
                (0..parts).map(move |p| {
                    let lo = s.lo + s.width() * p as f64 / parts as f64;
                    let hi = if p + 1 == parts { s.hi } else { s.lo + s.width() * (p + 1) as f64 / parts as f64 };
                    Slab { lo, hi, ..*s }
                })
            })
            .collect()
    }
}

/// Modes grouped by `(|k⊥|, k₃)`: every multiplier here depends on the mode only through them.
struct ModeBins {
    q: Vec<f64>,
    bin_of_plane: Vec<usize>,
}

impl ModeBins {
    fn new(lattice: &Lattice) -> Self {
        let n = lattice.n();
        let mut keys: Vec<i64> = Vec::with_capacity(n * n);
        for i1 in 0..n {
            for i2 in 0..n {
                let (m1, m2) = (lattice.signed(i1), lattice.signed(i2));
                keys.push(m1 * m1 + m2 * m2);
            }
        }
        let mut distinct = keys.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let bin_of_plane = keys.iter().map(|k| distinct.binary_search(k).unwrap()).collect();
        let q = distinct.iter().map(|&m2| 2.0 * PI * (m2 as f64).sqrt() / lattice.side()).collect();
        Self { q, bin_of_plane }
    }
}

/// Tabulated sector multipliers `(Ê_Σ, D̂_Σ)` per `(|k⊥|, k₃)` bin.
#[derive(Debug, Clone)]
pub struct SectorKernel {
    pub slab: (f64, f64),
    e: Vec<Complex64>,
    d: Vec<Complex64>,
}

/// Gauss–Legendre node count for a sector of angular width `dphi`; `resolution` scales the
/// number of nodes per oscillation.
fn sector_nodes(lattice: &Lattice, t: f64, dphi: f64, resolution: f64) -> usize {
    let kmax = PI * 3f64.sqrt() / lattice.h();
    (resolution * kmax * t * dphi).ceil() as usize + 16
}

impl SectorKernel {
    fn new(lattice: &Lattice, bins: &ModeBins, t: f64, lo: f64, hi: f64, resolution: f64) -> Self {
        let n = lattice.n();
        let nq = bins.q.len();
        let mut e = vec![Complex64::new(0.0, 0.0); nq * n];
        let mut d = vec![Complex64::new(0.0, 0.0); nq * n];
        if hi <= lo {
            return Self { slab: (lo, hi), e, d };
        }
        let (phi_a, phi_b) = ((hi / t).clamp(-1.0, 1.0).acos(), (lo / t).clamp(-1.0, 1.0).acos());
        let m = sector_nodes(lattice, t, phi_b - phi_a, resolution);
        let (phis, ws) = gauss_legendre_on(m, phi_a, phi_b);
        let k3: Vec<f64> = (0..n).map(|i| lattice.wavenumber(i)).collect();
        for (&phi, &w) in phis.iter().zip(&ws) {
            let z = t * phi.cos();
            let rho = t * phi.sin();
            // dz = t sin φ dφ; the prefactors ½ and 1/(2t) are folded in here.
            let we = 0.5 * w * rho;
            let wd = 0.5 * w * phi.sin();
            let phase: Vec<Complex64> = k3.iter().map(|&k| Complex64::from_polar(1.0, -k * z)).collect();
            for (qi, &q) in bins.q.iter().enumerate() {
                let x = q * rho;
                let (j0, j1) = (libm::j0(x), libm::j1(x));
                let row = qi * n;
                for i3 in 0..n {
                    let p = phase[i3];
                    e[row + i3] += p * (we * j0);
                    d[row + i3] += p * Complex64::new(j0 - x * j1, -k3[i3] * z * j0) * wd;
                }
            }
        }
        Self { slab: (lo, hi), e, d }
    }
}

/// Slab variables of one test function for a list of `(t, slab)` pairs.
pub struct SlabEvaluator {
    lattice: Lattice,
    bins: ModeBins,
    cpsi0: Vec<Complex64>,
    cpsi1: Vec<Complex64>,
    kappa2: Vec<f64>,
    kernels: Vec<SectorKernel>,
    columns: Vec<(f64, Slab)>,
}

impl SlabEvaluator {
    /// `resolution` ≈ 0.6 resolves the sector integrals to near machine precision.
    pub fn new(transform: &Transform, psi: &TestFunction, columns: Vec<(f64, Slab)>, resolution: f64) -> Result<Self> {
        let lattice = *transform.lattice();
        lattice.same_as(&psi.lattice)?;
        for &(t, s) in &columns {
            if !(t > 0.0) {
                return Err(Error::InvalidParameter(format!("slab time {t} must be positive")));
            }
            if s.lo > s.hi || s.lo < -t - 1e-12 || s.hi > t + 1e-12 {
                return Err(Error::Support(format!("slab [{}, {}] outside light cone [−{t}, {t}]", s.lo, s.hi)));
            }
            if psi.extent() + t >= lattice.side() / 2.0 {
                return Err(Error::WrapSafety(format!(
                    "test function reach {} + t {t} ≥ L/2 = {}",
                    psi.extent(),
                    lattice.side() / 2.0
                )));
            }
        }
        let bins = ModeBins::new(&lattice);
        let kernels = columns
            .par_iter()
            .map(|&(t, s)| SectorKernel::new(&lattice, &bins, t, s.lo.max(-t), s.hi.min(t), resolution))
            .collect();
        let (a, b) = psi.spectra(transform);
        Ok(Self {
            lattice,
            bins,
            cpsi0: a.iter().map(|z| z.conj()).collect(),
            cpsi1: b.iter().map(|z| z.conj()).collect(),
            kappa2: lattice.kappa_table().iter().map(|k| k * k).collect(),
            kernels,
            columns,
        })
    }

    pub fn columns(&self) -> &[(f64, Slab)] {
        &self.columns
    }

    /// Slab variables for initial spectra `(û₀, v̂₀)`.
    pub fn values_from_spectra(&self, uh: &[Complex64], vh: &[Complex64]) -> Vec<f64> {
        let n = self.lattice.n();
        let nb = self.bins.q.len() * n;
        let zero = Complex64::new(0.0, 0.0);
        let mut xb = vec![zero; nb];
        let mut zb = vec![zero; nb];
        for p in 0..n * n {
            let row = self.bins.bin_of_plane[p] * n;
            for i3 in 0..n {
                let idx = p * n + i3;
                let (u, v, c0, c1) = (uh[idx], vh[idx], self.cpsi0[idx], self.cpsi1[idx]);
                xb[row + i3] += u * c0 + v * c1;
                zb[row + i3] += v * c0 - u * c1 * self.kappa2[idx];
            }
        }
        let vol = self.lattice.volume();
        self.kernels
            .iter()
            .map(|k| {
                let s: f64 = (0..nb).map(|b| (k.d[b] * xb[b] + k.e[b] * zb[b]).re).sum();
                s / vol
            })
            .collect()
    }

    pub fn values(&self, transform: &Transform, y0: &FieldState) -> Result<Vec<f64>> {
        self.lattice.same_as(&y0.lattice)?;
        let (uh, vh) = transform.forward_pair(&y0.u, &y0.v);
        Ok(self.values_from_spectra(&uh, &vh))
    }

    /// Hermitian parts of the dual spectra `(A, B)` of column `c`, so that
    /// `I = L⁻³ Σ_k (û₀ A + v̂₀ B)`.
    fn dual(&self, c: usize) -> (Vec<Complex64>, Vec<Complex64>) {
        let n = self.lattice.n();
        let k = &self.kernels[c];
        let len = self.lattice.len();
        let raw = |idx: usize| -> (Complex64, Complex64) {
            let b = self.bins.bin_of_plane[idx / n] * n + idx % n;
            let (e, d) = (k.e[b], k.d[b]);
            let (c0, c1) = (self.cpsi0[idx], self.cpsi1[idx]);
            (d * c0 - e * c1 * self.kappa2[idx], e * c0 + d * c1)
        };
        let mut a = Vec::with_capacity(len);
        let mut bb = Vec::with_capacity(len);
        for idx in 0..len {
            let (a1, b1) = raw(idx);
            let (a2, b2) = raw(self.lattice.partner(idx));
            a.push(0.5 * (a1 + a2.conj()));
            bb.push(0.5 * (b1 + b2.conj()));
        }
        (a, bb)
    }

    /// Exact covariance matrix of all columns under a homogeneous Gaussian measure.
    pub fn covariance(&self, spec: &MeasureSpec) -> Result<Vec<Vec<f64>>> {
        self.lattice.same_as(&spec.lattice())?;
        let duals: Vec<_> = (0..self.kernels.len()).map(|c| self.dual(c)).collect();
        let vol = self.lattice.volume();
        let m = duals.len();
        let mut out = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in i..m {
                let mut s = 0.0;
                for idx in 0..self.lattice.len() {
                    s += spec.s00.values[idx] * (duals[i].0[idx].conj() * duals[j].0[idx]).re
                        + spec.s11.values[idx] * (duals[i].1[idx].conj() * duals[j].1[idx]).re;
                }
                out[i][j] = s / vol;
                out[j][i] = s / vol;
            }
        }
        Ok(out)
    }
}

/// `⟨U(t)Y₀, Ψ⟩` from the spectral propagator.
pub fn spectral_pairing(transform: &Transform, y0: &FieldState, psi: &TestFunction, t: f64) -> Result<f64> {
    let lattice = *transform.lattice();
    lattice.same_as(&y0.lattice)?;
    lattice.same_as(&psi.lattice)?;
    let (uh, vh) = transform.forward_pair(&y0.u, &y0.v);
    let (p0, p1) = psi.spectra(transform);
    let plan = PropagatorPlan::new(lattice, t);
    let mut s = 0.0;
    for idx in 0..lattice.len() {
        let (c, sn, ks) = plan.multipliers(idx);
        let ut = uh[idx] * c + vh[idx] * sn;
        let vt = vh[idx] * c - uh[idx] * ks;
        s += (ut * p0[idx].conj() + vt * p1[idx].conj()).re;
    }
    Ok(s / lattice.volume())
}

/// One slab variable `I_t(Σ)` for `Σ = [z_lo, z_hi]`.
pub fn slab_variable(transform: &Transform, y0: &FieldState, psi: &TestFunction, t: f64, slab: (f64, f64)) -> Result<f64> {
    if slab.0 == slab.1 {
        return Ok(0.0);
    }
    let s = Slab { kind: SlabKind::Room, index: 0, lo: slab.0, hi: slab.1 };
    let ev = SlabEvaluator::new(transform, psi, vec![(t, s)], 0.6)?;
    Ok(ev.values(transform, y0)?[0])
}

/// Slab variables of every room and corridor of a partition.
pub fn partition_variables(
    transform: &Transform,
    y0: &FieldState,
    psi: &TestFunction,
    partition: &RoomCorridorPartition,
    resolution: f64,
) -> Result<Vec<SlabVariable>> {
    let slabs = partition.slabs();
    let ev = SlabEvaluator::new(transform, psi, slabs.iter().map(|&s| (partition.t, s)).collect(), resolution)?;
    let vals = ev.values(transform, y0)?;
    Ok(slabs.iter().zip(vals).map(|(s, value)| SlabVariable { kind: s.kind, index: s.index, value }).collect())
}

/// `|Σ rooms + Σ corridors − ⟨U(t)Y₀, Ψ⟩| / scale`, with `scale` the larger of the exact value
/// and the root sum of squares of the slab variables.
pub fn decomposition_check(
    transform: &Transform,
    y0: &FieldState,
    psi: &TestFunction,
    partition: &RoomCorridorPartition,
    resolution: f64,
) -> Result<f64> {
    let vars = partition_variables(transform, y0, psi, partition, resolution)?;
    let exact = spectral_pairing(transform, y0, psi, partition.t)?;
    let sum: f64 = vars.iter().map(|v| v.value).sum();
    let rss = vars.iter().map(|v| v.value * v.value).sum::<f64>().sqrt();
    let scale = exact.abs().max(rss);
    Ok(if scale > 0.0 { (sum - exact).abs() / scale } else { 0.0 })
}

/// Scheduled partitions and a test function for ensemble diagnostics of a homogeneous measure,
/// optionally hard-clamped at `truncation × std` per component.
pub struct DiagnosticsPlan {
    transform: Transform,
    measure: MeasureSpec,
    partitions: Vec<RoomCorridorPartition>,
    evaluator: SlabEvaluator,
    clamp: Option<(f64, f64)>,
}

/// All slab variables of all realizations, in stream order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlabSamples {
    pub count: usize,
    /// `(time index, slab)` per column.
    pub columns: Vec<(usize, Slab)>,
    pub times: Vec<f64>,
    /// Row-major `count × columns`.
    pub values: Vec<f64>,
    /// Clamp level `b` when the initial data were truncated.
    pub bound: Option<f64>,
}

impl DiagnosticsPlan {
    pub fn new(
        transform: Transform,
        measure: MeasureSpec,
        psi: &TestFunction,
        partitions: Vec<RoomCorridorPartition>,
        truncation: Option<f64>,
        resolution: f64,
    ) -> Result<Self> {
        transform.lattice().same_as(&measure.lattice())?;
        let columns = partitions.iter().flat_map(|p| p.slabs().into_iter().map(move |s| (p.t, s))).collect();
        let evaluator = SlabEvaluator::new(&transform, psi, columns, resolution)?;
        let clamp = match truncation {
            None => None,
            Some(c) if c > 0.0 => Some((c * measure.s00.variance().sqrt(), c * measure.s11.variance().sqrt())),
            Some(c) => return Err(Error::InvalidParameter(format!("truncation multiple {c} must be positive"))),
        };
        Ok(Self { transform, measure, partitions, evaluator, clamp })
    }

    pub fn evaluator(&self) -> &SlabEvaluator {
        &self.evaluator
    }

    pub fn partitions(&self) -> &[RoomCorridorPartition] {
        &self.partitions
    }

    /// Sup bound `b` of the truncated data.
    pub fn bound(&self) -> Option<f64> {
        self.clamp.map(|(a, b)| a.max(b))
    }

    pub fn realization(&self, seed: u64, stream_id: u64) -> Vec<f64> {
        let mut rng = RngStream::new(seed, stream_id).rng();
        let mut uh = sample_spectrum(&self.measure.s00, &mut rng);
        let mut vh = sample_spectrum(&self.measure.s11, &mut rng);
        if let Some((bu, bv)) = self.clamp {
            let (mut u, mut v) = self.transform.inverse_pair(&uh, &vh);
            u.iter_mut().for_each(|x| *x = x.clamp(-bu, bu));
            v.iter_mut().for_each(|x| *x = x.clamp(-bv, bv));
            (uh, vh) = self.transform.forward_pair(&u, &v);
        }
        self.evaluator.values_from_spectra(&uh, &vh)
    }

    pub fn run(&self, samples: usize, seed: u64, workers: usize) -> Result<SlabSamples> {
        if samples < 2 {
            return Err(Error::InsufficientSamples(format!("M = {samples} < 2")));
        }
        let work = || (0..samples as u64).into_par_iter().map(|id| self.realization(seed, id)).collect::<Vec<_>>();
        let rows = if workers == 0 {
            work()
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?
                .install(work)
        };
        let times: Vec<f64> = self.partitions.iter().map(|p| p.t).collect();
        let columns = self
            .partitions
            .iter()
            .enumerate()
            .flat_map(|(ti, p)| p.slabs().into_iter().map(move |s| (ti, s)))
            .collect();
        Ok(SlabSamples { count: samples, columns, times, values: rows.concat(), bound: self.bound() })
    }
}

impl SlabSamples {
    pub fn column(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        let k = self.columns.len();
        (0..self.count).map(move |m| self.values[m * k + c])
    }

    /// `(E X², stderr)` of column `c` (the slab variables have mean zero).
    pub fn second_moment(&self, c: usize) -> (f64, f64) {
        let m = self.count as f64;
        let (s2, s4) = self.column(c).fold((0.0, 0.0), |(a, b), x| (a + x * x, b + x.powi(4)));
        let mean = s2 / m;
        let var = ((s4 / m - mean * mean) * m / (m - 1.0)).max(0.0);
        (mean, (var / m).sqrt())
    }

    pub fn fourth_moment(&self, c: usize) -> (f64, f64) {
        let m = self.count as f64;
        let (s4, s8) = self.column(c).fold((0.0, 0.0), |(a, b), x| (a + x.powi(4), b + x.powi(8)));
        let mean = s4 / m;
        let var = ((s8 / m - mean * mean) * m / (m - 1.0)).max(0.0);
        (mean, (var / m).sqrt())
    }

    fn columns_of(&self, ti: usize, kind: SlabKind) -> Vec<usize> {
        self.columns.iter().enumerate().filter(|(_, (t, s))| *t == ti && s.kind == kind).map(|(c, _)| c).collect()
    }
}

/// Second moment of one slab variable against its width.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceRow {
    pub t: f64,
    pub kind: SlabKind,
    pub index: usize,
    pub width: f64,
    pub variance: f64,
    pub stderr: f64,
    pub width_over_t: f64,
    pub ratio: f64,
}

/// Per time, the mean corridor/room variance ratio against `ρ_t/d_t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorridorRoomRow {
    pub t: f64,
    pub empirical: f64,
    pub width_ratio: f64,
    pub quotient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceScaling {
    pub rows: Vec<VarianceRow>,
    /// Least-squares slope of `ln E|·|²` against `ln(width/t)`, if at least two distinct widths.
    pub room_slope: Option<f64>,
    pub corridor_slope: Option<f64>,
    pub max_room_ratio: f64,
    pub max_corridor_ratio: f64,
    pub corridor_room: Vec<CorridorRoomRow>,
    /// Largest growth factor of the max room ratio between consecutive times.
    pub max_growth: f64,
}

fn ls_slope(points: &[(f64, f64)]) -> Option<f64> {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if points.len() < 2 || sxx < 1e-12 {
        return None;
    }
    Some(points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

/// Variances of all slab variables against `width/t`, fitted exponents and ratios.
pub fn variance_scaling(samples: &SlabSamples) -> Result<VarianceScaling> {
    if samples.times.len() < 3 {
        return Err(Error::InsufficientSamples("variance scaling needs at least 3 times".into()));
    }
    if samples.count < 2 {
        return Err(Error::InsufficientSamples(format!("M = {}", samples.count)));
    }
    let rows: Vec<VarianceRow> = samples
        .columns
        .iter()
        .enumerate()
        .map(|(c, &(ti, s))| {
            let t = samples.times[ti];
            let (variance, stderr) = samples.second_moment(c);
            let wt = s.width() / t;
            VarianceRow { t, kind: s.kind, index: s.index, width: s.width(), variance, stderr, width_over_t: wt, ratio: variance / wt }
        })
        .collect();
    let fit = |kind: SlabKind| {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.kind == kind && r.variance > 0.0)
            .map(|r| (r.width_over_t.ln(), r.variance.ln()))
            .collect();
        ls_slope(&pts)
    };
    let max_ratio = |kind: SlabKind| rows.iter().filter(|r| r.kind == kind).map(|r| r.ratio).fold(0.0, f64::max);
    let mut corridor_room = Vec::new();
    let mut per_time_max = Vec::new();
    for (ti, &t) in samples.times.iter().enumerate() {
        let rooms = samples.columns_of(ti, SlabKind::Room);
        let corr = samples.columns_of(ti, SlabKind::Corridor);
        let mean_var = |cols: &[usize]| cols.iter().map(|&c| samples.second_moment(c).0).sum::<f64>() / cols.len() as f64;
        let mean_width = |cols: &[usize]| cols.iter().map(|&c| samples.columns[c].1.width()).sum::<f64>() / cols.len() as f64;
        per_time_max.push(rows.iter().filter(|r| r.t == t && r.kind == SlabKind::Room).map(|r| r.ratio).fold(0.0, f64::max));
        if !rooms.is_empty() && !corr.is_empty() {
            let empirical = mean_var(&corr) / mean_var(&rooms);
            let width_ratio = mean_width(&corr) / mean_width(&rooms);
            corridor_room.push(CorridorRoomRow { t, empirical, width_ratio, quotient: empirical / width_ratio });
        }
    }
    let max_growth = per_time_max.windows(2).map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 1.0 }).fold(0.0, f64::max);
    Ok(VarianceScaling {
        room_slope: fit(SlabKind::Room),
        corridor_slope: fit(SlabKind::Corridor),
        max_room_ratio: max_ratio(SlabKind::Room),
        max_corridor_ratio: max_ratio(SlabKind::Corridor),
        rows,
        corridor_room,
        max_growth,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FourthMomentReport {
    pub t: f64,
    pub moment4: f64,
    pub stderr: f64,
    /// `E|I|⁴ / ((b/t)⁴ |Σ|²)` with `|Σ| = 2πt · width` the area of the spherical zone.
    pub ratio: f64,
}

/// Normalized fourth moment of column `c`; requires truncated initial data.
pub fn fourth_moment_check(samples: &SlabSamples, c: usize) -> Result<FourthMomentReport> {
    let b = samples.bound.ok_or_else(|| Error::InvalidParameter("fourth-moment check requires truncation".into()))?;
    let (ti, slab) = *samples.columns.get(c).ok_or_else(|| Error::UnknownProbe(format!("slab column {c}")))?;
    let t = samples.times[ti];
    let (moment4, stderr) = samples.fourth_moment(c);
    let area = 2.0 * PI * t * slab.width();
    let denom = (b / t).powi(4) * area * area;
    Ok(FourthMomentReport { t, moment4, stderr, ratio: if denom > 0.0 { moment4 / denom } else { 0.0 } })
}

/// Fraction of the room variance carried by samples with `|r_k|² > ε Σ_j E|r_j|²` at time index
/// `ti`, with its standard error over realizations.
pub fn lindeberg_fraction(samples: &SlabSamples, ti: usize, eps: f64) -> Result<Estimate> {
    let rooms = samples.columns_of(ti, SlabKind::Room);
    if rooms.is_empty() {
        return Err(Error::UnknownProbe(format!("no rooms at time index {ti}")));
    }
    let total: f64 = rooms.iter().map(|&c| samples.second_moment(c).0).sum();
    if total == 0.0 {
        return Ok(Estimate { value: 0.0, stderr: 0.0 });
    }
    let k = samples.columns.len();
    let per_sample: Vec<f64> = (0..samples.count)
        .map(|m| {
            rooms
                .iter()
                .map(|&c| samples.values[m * k + c].powi(2))
                .filter(|&x2| x2 > eps * total)
                .sum::<f64>()
                / total
        })
        .collect();
    let n = per_sample.len() as f64;
    let mean = per_sample.iter().sum::<f64>() / n;
    let var = per_sample.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(Estimate { value: mean, stderr: (var / n).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{sample_homogeneous, spectral_density_example, SpectralDensity};

    fn setup() -> (Transform, MeasureSpec, TestFunction) {
        let l = Lattice::new(32, 1.0).unwrap();
        let tr = Transform::new(l);
        let dens = spectral_density_example(2.0 * 3f64.sqrt(), 2, l).unwrap();
        let spec = MeasureSpec::new(dens.clone(), dens.scaled(0.7).unwrap()).unwrap();
        let psi = TestFunction::bump(l, [0.5, -0.5, 1.0], 2.5, 4, 1.0, 0.6).unwrap();
        (tr, spec, psi)
    }

    #[test]
    fn partition_layout() {
        let p = make_partition(100.0, 0.5).unwrap();
        assert_eq!(p.n_rooms, 1);
        assert_eq!(p.slabs().len(), 1);
        assert!((p.rho - 10.0).abs() < 1e-12);
        assert_eq!(p.rooms[0], (-100.0, 100.0));
        let q = make_partition_with(16.0, 0.75, 8).unwrap();
        assert!((q.total_width() - 32.0).abs() < 1e-12);
        let s = q.slabs();
        assert!(s.windows(2).all(|w| w[0].hi == w[1].lo && w[0].lo < w[1].lo));
        let r = make_partition_with(4.0, 0.1, 50).unwrap();
        assert!(r.reduced && r.d > 0.0);
        assert!(make_partition(1.0, 0.5).is_err());
    }

    #[test]
    fn full_sphere_matches_propagator_and_slabs_add_up() {
        let (tr, spec, psi) = setup();
        let y0 = sample_homogeneous(&tr, &spec, RngStream::new(4, 0)).unwrap();
        let t = 6.0;
        let exact = spectral_pairing(&tr, &y0, &psi, t).unwrap();
        let full = slab_variable(&tr, &y0, &psi, t, (-t, t)).unwrap();
        assert!((full - exact).abs() < 1e-10 * exact.abs().max(1.0), "{full} vs {exact}");
        let p = make_partition_with(t, 0.5, 3).unwrap();
        assert!(decomposition_check(&tr, &y0, &psi, &p, 0.6).unwrap() < 1e-10);
        let coarse = p.slabs();
        let fine = RoomCorridorPartition::refine(&coarse, 3);
        let cols = |s: &[Slab]| s.iter().map(|&x| (t, x)).collect::<Vec<_>>();
        let a = SlabEvaluator::new(&tr, &psi, cols(&coarse), 0.6).unwrap().values(&tr, &y0).unwrap();
        let b = SlabEvaluator::new(&tr, &psi, cols(&fine), 0.6).unwrap().values(&tr, &y0).unwrap();
        for (i, v) in a.iter().enumerate() {
            let sum: f64 = b[3 * i..3 * i + 3].iter().sum();
            assert!((sum - v).abs() < 1e-10 * exact.abs().max(1.0));
        }
        assert_eq!(slab_variable(&tr, &y0, &psi, t, (1.0, 1.0)).unwrap(), 0.0);
        assert!(slab_variable(&tr, &y0, &psi, t, (-7.0, 0.0)).is_err());
    }

    #[test]
    fn residual_decreases_with_resolution() {
        let (tr, spec, psi) = setup();
        let y0 = sample_homogeneous(&tr, &spec, RngStream::new(5, 1)).unwrap();
        let p = make_partition_with(8.0, 0.5, 2).unwrap();
        let coarse = decomposition_check(&tr, &y0, &psi, &p, 0.05).unwrap();
        let fine = decomposition_check(&tr, &y0, &psi, &p, 0.6).unwrap();
        assert!(fine < coarse && fine < 1e-10, "{coarse} {fine}");
    }

    #[test]
    fn zero_field_and_distant_slabs() {
        let (tr, spec, psi) = setup();
        let l = *tr.lattice();
        assert_eq!(slab_variable(&tr, &FieldState::zeros(l), &psi, 5.0, (-5.0, 1.0)).unwrap(), 0.0);
        // Compactly supported correlations: slabs further apart than the correlation range plus
        // the test-function diameter are uncorrelated up to the band-limited kernel tails.
        let t = 10.0;
        let cols = vec![
            (t, Slab { kind: SlabKind::Room, index: 0, lo: -10.0, hi: -8.0 }),
            (t, Slab { kind: SlabKind::Room, index: 1, lo: 8.0, hi: 10.0 }),
            (t, Slab { kind: SlabKind::Room, index: 2, lo: -8.0, hi: -6.0 }),
        ];
        let ev = SlabEvaluator::new(&tr, &psi, cols, 0.6).unwrap();
        let c = ev.covariance(&spec).unwrap();
        assert!(c[0][1].abs() < 1e-6 * c[0][0]);
        assert!(c[0][2].abs() > 1e-3 * c[0][0]);
        let zero = MeasureSpec::new(SpectralDensity::zeros(l), SpectralDensity::zeros(l)).unwrap();
        assert_eq!(ev.covariance(&zero).unwrap()[0][0], 0.0);
    }

    #[test]
    fn ensemble_variances_match_exact_covariance() {
        let (tr, spec, psi) = setup();
        let parts = vec![make_partition_with(4.0, 0.5, 2).unwrap(), make_partition_with(8.0, 0.5, 2).unwrap()];
        let plan = DiagnosticsPlan::new(tr, spec.clone(), &psi, parts, None, 0.6).unwrap();
        let s = plan.run(600, 3, 0).unwrap();
        let exact = plan.evaluator().covariance(&spec).unwrap();
        for c in 0..s.columns.len() {
            let (v, se) = s.second_moment(c);
            assert!((v - exact[c][c]).abs() < 5.0 * se, "column {c}: {v} vs {} ± {se}", exact[c][c]);
        }
    }
}
