//! Periodic cubic lattice, dual frequencies and the discrete Fourier transform.
//!
//! Transform convention, used everywhere in the crate:
//!
//! * forward: `f̂(k) = h³ Σ_x f(x) e^{+i k·x}` (a Riemann sum of the continuum transform),
//! * inverse: `f(x) = L⁻³ Σ_k f̂(k) e^{-i k·x}`.
//!
//! With this choice convolutions `h³ Σ_y K(x-y) f(y)` become products `K̂ f̂`,
//! `⟨f, g⟩ = h³ Σ f g = L⁻³ Σ_k f̂ conj(ĝ)`, and the lattice delta is `1/h³` at the origin.
//! Arrays are stored in C order with index `(i1·n + i2)·n + i3`; position index `i` maps to the
//! minimum-image coordinate `m(i)·h` with `m(i) ∈ [-n/2, n/2)`, and frequency index `i` maps to
//! `k = 2π m(i)/L` in standard FFT order.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// A periodic `n³` lattice with spacing `h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    n: usize,
    h: f64,
}

impl Lattice {
    pub fn new(n: usize, h: f64) -> Result<Self> {
        if n < 8 || !n.is_multiple_of(2) {
            return Err(Error::BadLatticeSize(n));
        }
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::BadSpacing(h));
        }
        Ok(Self { n, h })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Side length `L = n·h`.
    pub fn side(&self) -> f64 {
        self.n as f64 * self.h
    }

    /// Number of sites `n³`.
    pub fn len(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_volume(&self) -> f64 {
        self.h * self.h * self.h
    }

    /// Cell volume `L³`.
    pub fn volume(&self) -> f64 {
        let l = self.side();
        l * l * l
    }

    pub fn nyquist(&self) -> usize {
        self.n / 2
    }

    /// Signed integer offset `m(i) ∈ [-n/2, n/2)` of an axis index.
    pub fn signed(&self, i: usize) -> i64 {
        let n = self.n as i64;
        let i = i as i64;
        if i < n / 2 {
            i
        } else {
            i - n
        }
    }

    /// Axis index of a signed integer offset, wrapped periodically.
    pub fn wrap(&self, m: i64) -> usize {
        m.rem_euclid(self.n as i64) as usize
    }

    /// Minimum-image coordinate of an axis index.
    pub fn coord(&self, i: usize) -> f64 {
        self.signed(i) as f64 * self.h
    }

    /// Angular wavenumber of an axis frequency index.
    pub fn wavenumber(&self, i: usize) -> f64 {
        2.0 * PI * self.signed(i) as f64 / self.side()
    }

    pub fn index(&self, i1: usize, i2: usize, i3: usize) -> usize {
        (i1 * self.n + i2) * self.n + i3
    }

    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        let n = self.n;
        [idx / (n * n), (idx / n) % n, idx % n]
    }

    /// Flat index of a lattice point given by signed integer offsets.
    pub fn point_index(&self, p: [i64; 3]) -> usize {
        self.index(self.wrap(p[0]), self.wrap(p[1]), self.wrap(p[2]))
    }

    /// Index of the mode `-k` for the mode at `idx`.
    pub fn partner(&self, idx: usize) -> usize {
        let [i1, i2, i3] = self.unravel(idx);
        let n = self.n;
        self.index((n - i1) % n, (n - i2) % n, (n - i3) % n)
    }

    /// Position of a site as minimum-image coordinates.
    pub fn position(&self, idx: usize) -> [f64; 3] {
        let [i1, i2, i3] = self.unravel(idx);
        [self.coord(i1), self.coord(i2), self.coord(i3)]
    }

    /// Wave vector of a mode.
    pub fn kvec(&self, idx: usize) -> [f64; 3] {
        let [i1, i2, i3] = self.unravel(idx);
        [self.wavenumber(i1), self.wavenumber(i2), self.wavenumber(i3)]
    }

    /// Continuum norm `|k|` of a mode.
    pub fn kappa(&self, idx: usize) -> f64 {
        let k = self.kvec(idx);
        (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt()
    }

    /// Per-axis wavenumbers in FFT order.
    pub fn axis_wavenumbers(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.wavenumber(i)).collect()
    }

    /// Per-axis wavenumbers used by odd (first-derivative) multipliers: the Nyquist entry is
    /// zero so that differentiated real fields stay real.
    pub fn derivative_wavenumbers(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| if i == self.nyquist() { 0.0 } else { self.wavenumber(i) })
            .collect()
    }

    /// Continuum `|k|` for every mode.
    pub fn kappa_table(&self) -> Vec<f64> {
        let k = self.axis_wavenumbers();
        let mut out = Vec::with_capacity(self.len());
        for &k1 in &k {
            for &k2 in &k {
                for &k3 in &k {
                    out.push((k1 * k1 + k2 * k2 + k3 * k3).sqrt());
                }
            }
        }
        out
    }

    /// Squared minimum-image distance of a site from the origin.
    pub fn radius_sq(&self, idx: usize) -> f64 {
        let p = self.position(idx);
        p[0] * p[0] + p[1] * p[1] + p[2] * p[2]
    }

    pub fn same_as(&self, other: &Lattice) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::LatticeMismatch(format!(
                "({}, {}) vs ({}, {})",
                self.n, self.h, other.n, other.h
            )))
        }
    }
}

/// Cached FFT plans for one axis length.
#[derive(Clone)]
struct Plans {
    n: usize,
    plus: Arc<dyn Fft<f64>>,
    minus: Arc<dyn Fft<f64>>,
}

impl Plans {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        // rustfft's inverse direction carries e^{+i…}, which is our forward transform.
        let plus = planner.plan_fft_inverse(n);
        let minus = planner.plan_fft_forward(n);
        Self { n, plus, minus }
    }

    fn plan(&self, sign_plus: bool) -> &Arc<dyn Fft<f64>> {
        if sign_plus {
            &self.plus
        } else {
            &self.minus
        }
    }
}

/// Unnormalized 3D transform along all axes of a C-ordered `n³` array.
fn transform3(plans: &Plans, data: &mut [Complex64], sign_plus: bool) {
    let n = plans.n;
    let fft = plans.plan(sign_plus);
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    // Axis 3 is contiguous.
    fft.process_with_scratch(data, &mut scratch);
    let mut tile = vec![Complex64::new(0.0, 0.0); n * n];
    // Axis 2: transpose each (i2, i3) slab.
    for slab in data.chunks_exact_mut(n * n) {
        transpose_into(slab, &mut tile, n, n, n);
        fft.process_with_scratch(&mut tile, &mut scratch);
        transpose_from(slab, &tile, n, n, n);
    }
    // Axis 1: for each i2 gather the (i1, i3) matrix with row stride n².
    for i2 in 0..n {
        for i1 in 0..n {
            let row = &data[(i1 * n + i2) * n..(i1 * n + i2) * n + n];
            for (i3, &z) in row.iter().enumerate() {
                tile[i3 * n + i1] = z;
            }
        }
        fft.process_with_scratch(&mut tile, &mut scratch);
        for i1 in 0..n {
            let row = &mut data[(i1 * n + i2) * n..(i1 * n + i2) * n + n];
            for (i3, z) in row.iter_mut().enumerate() {
                *z = tile[i3 * n + i1];
            }
        }
    }
}

/// Writes the transpose of the `rows × cols` matrix at `src` (row stride `stride`) into `dst`.
fn transpose_into(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize, stride: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * stride + c];
        }
    }
}

fn transpose_from(dst: &mut [Complex64], src: &[Complex64], rows: usize, cols: usize, stride: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[r * stride + c] = src[c * rows + r];
        }
    }
}

/// Unnormalized 2D transform of a C-ordered `n²` array.
fn transform2(plans: &Plans, data: &mut [Complex64], sign_plus: bool) {
    let n = plans.n;
    let fft = plans.plan(sign_plus);
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    fft.process_with_scratch(data, &mut scratch);
    let mut tile = vec![Complex64::new(0.0, 0.0); n * n];
    transpose_into(data, &mut tile, n, n, n);
    fft.process_with_scratch(&mut tile, &mut scratch);
    transpose_from(data, &tile, n, n, n);
}

/// Lattice Fourier transforms with the crate-wide normalization.
#[derive(Clone)]
pub struct Transform {
    lattice: Lattice,
    plans: Plans,
}

impl Transform {
    pub fn new(lattice: Lattice) -> Self {
        Self { lattice, plans: Plans::new(lattice.n()) }
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    /// In-place forward transform `h³ Σ f e^{+ik·x}`.
    pub fn forward(&self, data: &mut [Complex64]) {
        assert_eq!(data.len(), self.lattice.len());
        transform3(&self.plans, data, true);
        let s = self.lattice.cell_volume();
        data.iter_mut().for_each(|z| *z *= s);
    }

    /// In-place inverse transform `L⁻³ Σ f̂ e^{-ik·x}`.
    pub fn inverse(&self, data: &mut [Complex64]) {
        assert_eq!(data.len(), self.lattice.len());
        transform3(&self.plans, data, false);
        let s = 1.0 / self.lattice.volume();
        data.iter_mut().for_each(|z| *z *= s);
    }

    /// Spectrum of a real field.
    pub fn forward_real(&self, f: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = f.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    /// Real part of the inverse transform of a spectrum.
    pub fn inverse_real(&self, spectrum: &[Complex64]) -> Vec<f64> {
        let mut buf = spectrum.to_vec();
        self.inverse(&mut buf);
        buf.iter().map(|z| z.re).collect()
    }

    /// Spectra of two real fields computed with one complex transform.
    pub fn forward_pair(&self, a: &[f64], b: &[f64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let mut buf: Vec<Complex64> =
            a.iter().zip(b).map(|(&x, &y)| Complex64::new(x, y)).collect();
        self.forward(&mut buf);
        unpack_pair(&self.lattice, &buf)
    }

    /// Two real fields from Hermitian spectra with one complex transform.
    pub fn inverse_pair(&self, a: &[Complex64], b: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
        let mut buf: Vec<Complex64> =
            a.iter().zip(b).map(|(&x, &y)| x + Complex64::i() * y).collect();
        self.inverse(&mut buf);
        (buf.iter().map(|z| z.re).collect(), buf.iter().map(|z| z.im).collect())
    }

    /// In-place inverse 2D transform `L⁻³ Σ_{k1,k2} G e^{-i(k1 x1 + k2 x2)}` of a plane spectrum
    /// that already holds the sum over `k3`.
    pub fn inverse_plane(&self, data: &mut [Complex64]) {
        let n = self.lattice.n();
        assert_eq!(data.len(), n * n);
        transform2(&self.plans, data, false);
        let s = 1.0 / self.lattice.volume();
        data.iter_mut().for_each(|z| *z *= s);
    }
}

/// Splits the spectrum of `a + i b` (a, b real) into the spectra of `a` and `b`.
pub fn unpack_pair(lattice: &Lattice, c: &[Complex64]) -> (Vec<Complex64>, Vec<Complex64>) {
    let mut a = vec![Complex64::new(0.0, 0.0); c.len()];
    let mut b = vec![Complex64::new(0.0, 0.0); c.len()];
    for idx in 0..c.len() {
        let p = c[lattice.partner(idx)].conj();
        a[idx] = (c[idx] + p) * 0.5;
        b[idx] = (c[idx] - p) * Complex64::new(0.0, -0.5);
    }
    (a, b)
}
