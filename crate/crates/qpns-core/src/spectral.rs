//! Truncated Fourier representation of mean-zero scalar fields on the
//! 2-torus, the Biot-Savart velocity reconstruction, advection terms along
//! both a dealiased FFT path and a dense convolution reference path, and the
//! Sobolev norm family.
//!
//! Conventions (see FORMATS.md at the repo root):
//! - fields are real, mean-zero: `w(x) = sum_k c(k) exp(i k.x)` with
//!   `c(-k) = conj(c(k))` and the zero mode excluded;
//! - storage keeps one coefficient per half-plane mode `{k2 > 0} U {k2 = 0,
//!   k1 > 0}` with `0 < max(|k1|, |k2|) <= N`;
//! - the L2 inner product carries the torus area explicitly:
//!   `<u, v> = (2 pi)^2 sum_k u(k) conj(v(k))`, so `|cos x1| = sqrt(2 pi^2)`;
//! - the velocity with curl w is `u(k) = i k_perp c(k) / |k|^2`,
//!   `k_perp = (k2, -k1)`, which makes `curl(velocity(w)) = w` exactly.

use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};

use crate::{CoreError, Result};

/// Torus side length in each coordinate.
pub const TAU: f64 = 2.0 * PI;

/// Torus area `(2 pi)^2`, the explicit factor in the L2 inner product.
pub const AREA: f64 = TAU * TAU;

/// Truncation lattice: modes `k` with `0 < max(|k1|,|k2|) <= N`, stored on the
/// half-plane `{k2 > 0} U {k2 = 0, k1 > 0}`; the other half is implied by
/// conjugate symmetry.
#[derive(Debug)]
pub struct ModeLattice {
    n: i32,
    modes: Vec<[i32; 2]>,
    /// Dense table over the full square `[-N, N]^2`, row-major in
    /// `(k1 + N) + (2N + 1) (k2 + N)`; -1 marks modes outside the half-plane.
    table: Vec<i32>,
}

impl ModeLattice {
    pub fn new(n: u32) -> Arc<Self> {
        assert!(n >= 1, "truncation radius must be positive");
        let n = n as i32;
        let side = (2 * n + 1) as usize;
        let mut modes = Vec::with_capacity((2 * n * (n + 1)) as usize);
        // Canonical enumeration: the k2 = 0 ray first, then full rows k2 = 1..N.
        for k1 in 1..=n {
            modes.push([k1, 0]);
        }
        for k2 in 1..=n {
            for k1 in -n..=n {
                modes.push([k1, k2]);
            }
        }
        let mut table = vec![-1i32; side * side];
        for (i, &[k1, k2]) in modes.iter().enumerate() {
            table[((k1 + n) + (2 * n + 1) * (k2 + n)) as usize] = i as i32;
        }
        Arc::new(ModeLattice { n, modes, table })
    }

    /// Truncation radius N.
    pub fn radius(&self) -> u32 {
        self.n as u32
    }

    /// Number of stored (half-plane) modes: `2 N (N + 1)`.
    pub fn half_count(&self) -> usize {
        self.modes.len()
    }

    /// Real dimension of the truncated state space: two quadratures per
    /// stored mode.
    pub fn dim_real(&self) -> usize {
        2 * self.modes.len()
    }

    /// Stored modes in canonical order.
    pub fn half_modes(&self) -> &[[i32; 2]] {
        &self.modes
    }

    /// Locate an arbitrary nonzero mode of the full lattice. Returns the
    /// storage index and whether the stored coefficient must be conjugated
    /// (i.e. the mode lives on the implied half).
    pub fn lookup(&self, k: [i32; 2]) -> Option<(usize, bool)> {
        let n = self.n;
        if k == [0, 0] || k[0].abs() > n || k[1].abs() > n {
            return None;
        }
        let at = |k: [i32; 2]| self.table[((k[0] + n) + (2 * n + 1) * (k[1] + n)) as usize];
        let direct = at(k);
        if direct >= 0 {
            return Some((direct as usize, false));
        }
        let mirrored = at([-k[0], -k[1]]);
        debug_assert!(mirrored >= 0);
        Some((mirrored as usize, true))
    }

    fn same_as(&self, other: &ModeLattice) -> bool {
        self.n == other.n
    }
}

/// Require two fields to live on the same lattice.
fn check_lattice(a: &SpectralVorticity, b: &SpectralVorticity) -> Result<()> {
    if a.lattice.same_as(&b.lattice) {
        Ok(())
    } else {
        Err(CoreError::LatticeMismatch {
            left: a.lattice.radius(),
            right: b.lattice.radius(),
        })
    }
}

/// Mean-zero real scalar field stored as half-plane Fourier coefficients.
#[derive(Debug, Clone)]
pub struct SpectralVorticity {
    lattice: Arc<ModeLattice>,
    coeffs: Vec<Complex64>,
}

impl SpectralVorticity {
    pub fn zeros(lattice: &Arc<ModeLattice>) -> Self {
        SpectralVorticity {
            lattice: Arc::clone(lattice),
            coeffs: vec![Complex64::default(); lattice.half_count()],
        }
    }

    /// `amp * cos(k . x)`; `k` may point into either half.
    pub fn harmonic_cos(lattice: &Arc<ModeLattice>, k: [i32; 2], amp: f64) -> Self {
        let mut w = Self::zeros(lattice);
        w.add_mode(k, Complex64::new(amp / 2.0, 0.0));
        w
    }

    /// `amp * sin(k . x)`; `k` may point into either half.
    pub fn harmonic_sin(lattice: &Arc<ModeLattice>, k: [i32; 2], amp: f64) -> Self {
        let mut w = Self::zeros(lattice);
        w.add_mode(k, Complex64::new(0.0, -amp / 2.0));
        w
    }

    /// Gaussian field with independent complex coefficients of standard
    /// deviation `|k|^-decay` per stored mode.
    pub fn random_gaussian<R: Rng + ?Sized>(
        lattice: &Arc<ModeLattice>,
        rng: &mut R,
        decay: f64,
    ) -> Self {
        let mut w = Self::zeros(lattice);
        for (i, &[k1, k2]) in lattice.half_modes().iter().enumerate() {
            let scale = (((k1 * k1 + k2 * k2) as f64).sqrt()).powf(-decay);
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            w.coeffs[i] = Complex64::new(re * scale, im * scale);
        }
        w
    }

    pub fn lattice(&self) -> &Arc<ModeLattice> {
        &self.lattice
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    /// Coefficient of an arbitrary full-lattice mode (conjugate applied for
    /// the implied half; zero outside the truncation).
    pub fn coeff(&self, k: [i32; 2]) -> Complex64 {
        match self.lattice.lookup(k) {
            Some((i, false)) => self.coeffs[i],
            Some((i, true)) => self.coeffs[i].conj(),
            None => Complex64::default(),
        }
    }

    /// Add `value * exp(i k . x)` plus its conjugate-symmetric partner.
    pub fn add_mode(&mut self, k: [i32; 2], value: Complex64) {
        match self.lattice.lookup(k) {
            Some((i, false)) => self.coeffs[i] += value,
            Some((i, true)) => self.coeffs[i] += value.conj(),
            None => {}
        }
    }

    /// Squared H norm: `(2 pi)^2 sum_full |c(k)|^2`.
    pub fn norm_sq(&self) -> f64 {
        let half: f64 = self.coeffs.iter().map(|c| c.norm_sqr()).sum();
        AREA * 2.0 * half
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Squared Sobolev norm of order `s`: `(2 pi)^2 sum_full |k|^{2s} |c(k)|^2`.
    pub fn sobolev_norm_sq(&self, s: f64) -> f64 {
        let half: f64 = self
            .coeffs
            .iter()
            .zip(self.lattice.half_modes())
            .map(|(c, &[k1, k2])| {
                let k_sq = (k1 * k1 + k2 * k2) as f64;
                k_sq.powf(s) * c.norm_sqr()
            })
            .sum();
        AREA * 2.0 * half
    }

    pub fn sobolev_norm(&self, s: f64) -> f64 {
        self.sobolev_norm_sq(s).sqrt()
    }

    /// H inner product `(2 pi)^2 sum_full u(k) conj(v(k))` (real for real
    /// fields).
    pub fn inner(&self, other: &SpectralVorticity) -> f64 {
        debug_assert!(self.lattice.same_as(&other.lattice));
        let half: f64 = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| (a * b.conj()).re)
            .sum();
        AREA * 2.0 * half
    }

    pub fn scale(&mut self, factor: f64) {
        for c in &mut self.coeffs {
            *c *= factor;
        }
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &SpectralVorticity, factor: f64) {
        debug_assert!(self.lattice.same_as(&other.lattice));
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += factor * b;
        }
    }

    pub fn sub(&self, other: &SpectralVorticity) -> SpectralVorticity {
        let mut out = self.clone();
        out.add_scaled(other, -1.0);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs
            .iter()
            .all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// Largest coefficient magnitude; cheap blow-up and support probe.
    pub fn max_coeff(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// True if all energy sits on modes with `max(|k1|,|k2|) <= limit`.
    pub fn supported_within(&self, limit: i32) -> bool {
        self.coeffs
            .iter()
            .zip(self.lattice.half_modes())
            .all(|(c, &[k1, k2])| c.norm_sqr() == 0.0 || (k1.abs() <= limit && k2.abs() <= limit))
    }
}

/// Divergence-free velocity field on the same lattice, stored componentwise.
#[derive(Debug, Clone)]
pub struct VelocityField {
    lattice: Arc<ModeLattice>,
    pub u1: Vec<Complex64>,
    pub u2: Vec<Complex64>,
}

impl VelocityField {
    pub fn lattice(&self) -> &Arc<ModeLattice> {
        &self.lattice
    }

    /// Maximum divergence residual `|k1 u1(k) + k2 u2(k)|` relative to the
    /// mode's velocity magnitude.
    pub fn max_divergence(&self) -> f64 {
        self.lattice
            .half_modes()
            .iter()
            .enumerate()
            .map(|(i, &[k1, k2])| {
                let div = (k1 as f64) * self.u1[i] + (k2 as f64) * self.u2[i];
                let mag = (self.u1[i].norm_sqr() + self.u2[i].norm_sqr()).sqrt();
                if mag == 0.0 {
                    0.0
                } else {
                    div.norm() / mag
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Velocity with curl `w`: `u(k) = i k_perp c(k) / |k|^2`, `k_perp = (k2, -k1)`.
pub fn biot_savart(w: &SpectralVorticity) -> VelocityField {
    let lattice = Arc::clone(&w.lattice);
    let mut u1 = vec![Complex64::default(); lattice.half_count()];
    let mut u2 = vec![Complex64::default(); lattice.half_count()];
    for (i, &[k1, k2]) in lattice.half_modes().iter().enumerate() {
        let k_sq = (k1 * k1 + k2 * k2) as f64;
        let factor = Complex64::new(0.0, 1.0) * w.coeffs[i] / k_sq;
        u1[i] = factor * (k2 as f64);
        u2[i] = factor * (-k1 as f64);
    }
    VelocityField { lattice, u1, u2 }
}

/// Scalar curl `d1 u2 - d2 u1`; inverse of `biot_savart` on the truncation.
pub fn curl(u: &VelocityField) -> SpectralVorticity {
    let mut w = SpectralVorticity::zeros(&u.lattice);
    for (i, &[k1, k2]) in u.lattice.half_modes().iter().enumerate() {
        let ik1 = Complex64::new(0.0, k1 as f64);
        let ik2 = Complex64::new(0.0, k2 as f64);
        w.coeffs[i] = ik1 * u.u2[i] - ik2 * u.u1[i];
    }
    w
}

/// Advection of `advected` by the velocity of `stream`, i.e. the quadratic
/// term `(K stream) . grad advected`, computed by dense convolution over the
/// full lattice. Exact (no grid, no aliasing); the reference path for the FFT
/// route and the bracket construction.
pub fn dense_advection(
    stream: &SpectralVorticity,
    advected: &SpectralVorticity,
) -> Result<SpectralVorticity> {
    check_lattice(stream, advected)?;
    let lattice = &stream.lattice;
    let n = lattice.n;
    let side = (2 * n + 1) as usize;

    // Full-lattice mode lists (stored half plus conjugate half).
    let full = |w: &SpectralVorticity| -> Vec<(i32, i32, Complex64)> {
        let mut list = Vec::with_capacity(2 * w.coeffs.len());
        for (i, &[k1, k2]) in lattice.half_modes().iter().enumerate() {
            list.push((k1, k2, w.coeffs[i]));
            list.push((-k1, -k2, w.coeffs[i].conj()));
        }
        list
    };
    let ps = full(stream);
    let qs = full(advected);

    let mut dense = vec![Complex64::default(); side * side];
    for &(p1, p2, cp) in &ps {
        if cp.norm_sqr() == 0.0 {
            continue;
        }
        let p_sq = (p1 * p1 + p2 * p2) as f64;
        for &(q1, q2, cq) in &qs {
            let k1 = p1 + q1;
            let k2 = p2 + q2;
            if k1.abs() > n || k2.abs() > n || (k1 == 0 && k2 == 0) {
                continue;
            }
            // (i p_perp / |p|^2) . (i q) = -(p_perp . q) / |p|^2 with
            // p_perp = (p2, -p1).
            let weight = -((p2 * q1 - p1 * q2) as f64) / p_sq;
            dense[((k1 + n) + (2 * n + 1) * (k2 + n)) as usize] += weight * cp * cq;
        }
    }

    let mut out = SpectralVorticity::zeros(lattice);
    for (i, &[k1, k2]) in lattice.half_modes().iter().enumerate() {
        out.coeffs[i] = dense[((k1 + n) + (2 * n + 1) * (k2 + n)) as usize];
    }
    Ok(out)
}

/// Self-advection `(K w) . grad w` on the dense reference path.
pub fn dense_nonlinear_term(w: &SpectralVorticity) -> SpectralVorticity {
    dense_advection(w, w).expect("same field, same lattice")
}

/// Symmetrized bilinear advection bracket
/// `-(K u) . grad w - (K w) . grad u`, the generator of the spanning sets in
/// the `hormander` module. Dense path so small-lattice results are exact.
pub fn symmetrized_bracket(
    u: &SpectralVorticity,
    w: &SpectralVorticity,
) -> Result<SpectralVorticity> {
    let mut out = dense_advection(u, w)?;
    let second = dense_advection(w, u)?;
    out.add_scaled(&second, 1.0);
    out.scale(-1.0);
    Ok(out)
}

/// Smallest 5-smooth integer >= `min`, the FFT-friendly grid rounding.
fn smooth_size(min: usize) -> usize {
    let mut m = min.max(2);
    loop {
        let mut r = m;
        for p in [2usize, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

fn planner() -> &'static Mutex<FftPlanner<f64>> {
    static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();
    PLANNER.get_or_init(|| Mutex::new(FftPlanner::new()))
}

/// Square-grid FFT kernel: plans, scratch, and the spectral/physical maps for
/// one grid size. One instance per worker; not shared across threads.
pub struct GridKernel {
    m: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    transpose_buf: Vec<Complex64>,
}

impl GridKernel {
    /// Kernel on a grid sized for exact products of order `order` at
    /// truncation `n`: quadratic advection needs `order = 2` (grid > 3N),
    /// quartic norms need `order = 4` (grid > 4N... the rule `(order + 1) N`).
    pub fn for_products(n: u32, order: u32) -> Self {
        let m = smooth_size(((order + 1) * n + 1) as usize);
        Self::with_size(m)
    }

    pub fn with_size(m: usize) -> Self {
        let (fwd, inv) = {
            let mut planner = planner().lock().expect("fft planner poisoned");
            (planner.plan_fft_forward(m), planner.plan_fft_inverse(m))
        };
        let scratch_len = fwd
            .get_inplace_scratch_len()
            .max(inv.get_inplace_scratch_len());
        GridKernel {
            m,
            fwd,
            inv,
            scratch: vec![Complex64::default(); scratch_len],
            transpose_buf: vec![Complex64::default(); m * m],
        }
    }

    pub fn grid_size(&self) -> usize {
        self.m
    }

    fn fft2(&mut self, data: &mut [Complex64], forward: bool) {
        let m = self.m;
        let fft = if forward { &self.fwd } else { &self.inv };
        for row in data.chunks_exact_mut(m) {
            fft.process_with_scratch(row, &mut self.scratch);
        }
        for i in 0..m {
            for j in 0..m {
                self.transpose_buf[j * m + i] = data[i * m + j];
            }
        }
        for row in self.transpose_buf.chunks_exact_mut(m) {
            fft.process_with_scratch(row, &mut self.scratch);
        }
        for i in 0..m {
            for j in 0..m {
                data[j * m + i] = self.transpose_buf[i * m + j];
            }
        }
    }

    /// Scatter half-plane coefficients (optionally pre-multiplied per mode)
    /// onto the grid spectrum and inverse-transform to physical values.
    fn to_physical<F>(&mut self, w: &SpectralVorticity, out: &mut [Complex64], weight: F)
    where
        F: Fn([i32; 2], Complex64) -> Complex64,
    {
        let m = self.m as i32;
        out.fill(Complex64::default());
        for (i, &[k1, k2]) in w.lattice.half_modes().iter().enumerate() {
            let c = weight([k1, k2], w.coeffs[i]);
            let idx = |k1: i32, k2: i32| {
                (((k1 % m + m) % m) + m * ((k2 % m + m) % m)) as usize
            };
            out[idx(k1, k2)] += c;
            out[idx(-k1, -k2)] += c.conj();
        }
        self.fft2(out, false);
    }

    /// Forward-transform physical values and gather the half-plane modes.
    fn to_spectral(&mut self, grid: &mut [Complex64], lattice: &Arc<ModeLattice>) -> SpectralVorticity {
        self.fft2(grid, true);
        let m = self.m as i32;
        let scale = 1.0 / (self.m * self.m) as f64;
        let mut w = SpectralVorticity::zeros(lattice);
        for (i, &[k1, k2]) in lattice.half_modes().iter().enumerate() {
            let idx = (((k1 % m + m) % m) + m * ((k2 % m + m) % m)) as usize;
            w.coeffs[i] = grid[idx] * scale;
        }
        w
    }

    /// Physical samples of the field on the kernel grid (real parts; the
    /// imaginary residue is conjugate-symmetry roundoff).
    pub fn physical_values(&mut self, w: &SpectralVorticity) -> Vec<f64> {
        let mut buf = vec![Complex64::default(); self.m * self.m];
        self.to_physical(w, &mut buf, |_, c| c);
        buf.iter().map(|z| z.re).collect()
    }

    /// Largest imaginary residue of the reconstructed physical field,
    /// relative to the largest field value; a reality diagnostic.
    pub fn reality_defect(&mut self, w: &SpectralVorticity) -> f64 {
        let mut buf = vec![Complex64::default(); self.m * self.m];
        self.to_physical(w, &mut buf, |_, c| c);
        let max_im = buf.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
        let max_re = buf.iter().map(|z| z.re.abs()).fold(0.0, f64::max);
        if max_re == 0.0 {
            max_im
        } else {
            max_im / max_re
        }
    }

    /// `L^p` norm by grid quadrature, exact for `p * N < grid size`.
    pub fn lp_norm(&mut self, w: &SpectralVorticity, p: f64) -> f64 {
        let values = self.physical_values(w);
        let cell = (TAU / self.m as f64) * (TAU / self.m as f64);
        let integral: f64 = values.iter().map(|v| v.abs().powf(p)).sum::<f64>() * cell;
        integral.powf(1.0 / p)
    }
}

/// Reusable buffers for the dealiased FFT advection path.
pub struct AdvectionWorkspace {
    kernel: GridKernel,
    u1: Vec<Complex64>,
    u2: Vec<Complex64>,
    wx: Vec<Complex64>,
    wy: Vec<Complex64>,
}

impl AdvectionWorkspace {
    pub fn new(n: u32) -> Self {
        let kernel = GridKernel::for_products(n, 2);
        let len = kernel.grid_size() * kernel.grid_size();
        AdvectionWorkspace {
            kernel,
            u1: vec![Complex64::default(); len],
            u2: vec![Complex64::default(); len],
            wx: vec![Complex64::default(); len],
            wy: vec![Complex64::default(); len],
        }
    }
}

/// Self-advection `(K w) . grad w` on the dealiased FFT path: transform the
/// velocity and the vorticity gradient to a grid larger than 3N, multiply
/// pointwise, and transform back. The padding removes quadratic aliasing
/// entirely, so this equals `dense_nonlinear_term` to roundoff.
pub fn nonlinear_term_with(w: &SpectralVorticity, ws: &mut AdvectionWorkspace) -> SpectralVorticity {
    let AdvectionWorkspace {
        kernel,
        u1,
        u2,
        wx,
        wy,
    } = ws;
    // Velocity components and vorticity gradient directly from w's modes.
    kernel.to_physical(w, u1, |[k1, k2], c| {
        let k_sq = (k1 * k1 + k2 * k2) as f64;
        Complex64::new(0.0, k2 as f64 / k_sq) * c
    });
    kernel.to_physical(w, u2, |[k1, k2], c| {
        let k_sq = (k1 * k1 + k2 * k2) as f64;
        Complex64::new(0.0, -k1 as f64 / k_sq) * c
    });
    kernel.to_physical(w, wx, |[k1, _], c| Complex64::new(0.0, k1 as f64) * c);
    kernel.to_physical(w, wy, |[_, k2], c| Complex64::new(0.0, k2 as f64) * c);

    for i in 0..wx.len() {
        let prod = u1[i].re * wx[i].re + u2[i].re * wy[i].re;
        wx[i] = Complex64::new(prod, 0.0);
    }
    kernel.to_spectral(wx, w.lattice())
}

/// Allocating convenience wrapper around [`nonlinear_term_with`].
pub fn nonlinear_term(w: &SpectralVorticity) -> SpectralVorticity {
    let mut ws = AdvectionWorkspace::new(w.lattice.radius());
    nonlinear_term_with(w, &mut ws)
}

/// Empirical lower bound for the interpolation constant in
/// `|w|_{L4}^2 <= c0 |w|_1 |w|`: the max of the ratio over random Gaussian
/// fields. Monotone nondecreasing in `samples` for a fixed seed because each
/// sample's field depends only on its own index.
pub fn estimate_ladyzhenskaya(lattice: &Arc<ModeLattice>, samples: u32, seed: u64) -> f64 {
    assert!(samples >= 1);
    let mut kernel = GridKernel::for_products(lattice.radius(), 4);
    let mut best = 0.0f64;
    for sample in 0..samples {
        let mut rng = crate::rng::stream_rng(seed, crate::rng::tags::LADYZHENSKAYA, sample as u64, 0);
        let w = SpectralVorticity::random_gaussian(lattice, &mut rng, 0.0);
        let l4 = kernel.lp_norm(&w, 4.0);
        let ratio = l4 * l4 / (w.sobolev_norm(1.0) * w.norm());
        best = best.max(ratio);
    }
    best
}
