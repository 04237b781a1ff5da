//! Plane-wave representation of `L²_per(Γ)` and the matching position grid.
//!
//! A field is `φ(y) = Σ_G c_G e^{iG·y} / √|Γ|` with `G = Σ n_j b_j`,
//! `n ∈ [-M, M]^d`. Samples live on `N = 2M + 1` points per axis at lattice
//! coordinates `t = s/N`, `s ∈ [-M, M]`. Both arrays are stored in FFT order:
//! axis index `s` stands for `s` when `s ≤ M` and for `s - N` otherwise.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{domain, Result};
use crate::lattice::LatticeSpec;

pub type C64 = Complex64;

/// Truncated plane-wave basis on one lattice, with cached FFT plans.
pub struct PlaneWaveBasis {
    lattice: LatticeSpec,
    m: usize,
    n: usize,
    len: usize,
    /// Integer index `n` of each coefficient slot, row-major `len × d`.
    index: Vec<i64>,
    /// Cartesian wave vector `G` of each slot, row-major `len × d`.
    wavevectors: Vec<f64>,
    /// Cartesian grid point of each sample slot, row-major `len × d`.
    points: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for PlaneWaveBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlaneWaveBasis")
            .field("dim", &self.dim())
            .field("m", &self.m)
            .finish()
    }
}

impl PlaneWaveBasis {
    pub fn new(lattice: &LatticeSpec, m: usize) -> Result<Arc<Self>> {
        if m == 0 {
            return domain("plane-wave truncation M must be at least 1");
        }
        let d = lattice.dim();
        let n = 2 * m + 1;
        let len = match n.checked_pow(d as u32) {
            Some(l) if l <= 1 << 26 => l,
            _ => return domain(format!("basis with M={m} in d={d} is too large")),
        };
        let mut index = Vec::with_capacity(len * d);
        let mut wavevectors = Vec::with_capacity(len * d);
        let mut points = Vec::with_capacity(len * d);
        let mut multi = vec![0i64; d];
        for flat in 0..len {
            let mut rem = flat;
            for j in (0..d).rev() {
                let s = rem % n;
                rem /= n;
                multi[j] = wrap(s, m);
            }
            index.extend_from_slice(&multi);
            wavevectors.extend(lattice.reciprocal_vector(&multi));
            let t: Vec<f64> = multi.iter().map(|&v| v as f64 / n as f64).collect();
            points.extend(lattice.from_lattice_coords(&t));
        }
        let mut planner = FftPlanner::new();
        Ok(Arc::new(Self {
            lattice: lattice.clone(),
            m,
            n,
            len,
            index,
            wavevectors,
            points,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }))
    }

    pub fn lattice(&self) -> &LatticeSpec {
        &self.lattice
    }

    pub fn dim(&self) -> usize {
        self.lattice.dim()
    }

    /// Truncation order `M`.
    pub fn order(&self) -> usize {
        self.m
    }

    /// Points per axis, `2M + 1`.
    pub fn points_per_axis(&self) -> usize {
        self.n
    }

    /// Number of coefficients (equal to the number of grid points).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn index(&self, slot: usize) -> &[i64] {
        let d = self.dim();
        &self.index[slot * d..(slot + 1) * d]
    }

    pub fn wavevector(&self, slot: usize) -> &[f64] {
        let d = self.dim();
        &self.wavevectors[slot * d..(slot + 1) * d]
    }

    pub fn point(&self, slot: usize) -> &[f64] {
        let d = self.dim();
        &self.points[slot * d..(slot + 1) * d]
    }

    /// Slot holding integer index `n`, if inside the truncation.
    pub fn slot_of(&self, n: &[i64]) -> Option<usize> {
        let m = self.m as i64;
        let mut flat = 0usize;
        for &v in n {
            if v.abs() > m {
                return None;
            }
            let s = if v >= 0 { v } else { v + self.n as i64 };
            flat = flat * self.n + s as usize;
        }
        Some(flat)
    }

    /// Trapezoid weight of one grid point, `|Γ| / N^d`.
    pub fn quadrature_weight(&self) -> f64 {
        self.lattice.cell_volume() / self.len as f64
    }

    /// In-place multidimensional DFT (unnormalised).
    pub(crate) fn fft(&self, data: &mut [C64], inverse: bool) {
        let plan = if inverse { &self.inv } else { &self.fwd };
        let n = self.n;
        let d = self.dim();
        let mut scratch = vec![C64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
        if d == 1 {
            plan.process_with_scratch(data, &mut scratch);
            return;
        }
        let mut line = vec![C64::new(0.0, 0.0); n];
        for axis in 0..d {
            let stride = n.pow((d - 1 - axis) as u32);
            let block = stride * n;
            for outer in (0..self.len).step_by(block) {
                for inner in 0..stride {
                    let base = outer + inner;
                    for (s, v) in line.iter_mut().enumerate() {
                        *v = data[base + s * stride];
                    }
                    plan.process_with_scratch(&mut line, &mut scratch);
                    for (s, v) in line.iter().enumerate() {
                        data[base + s * stride] = *v;
                    }
                }
            }
        }
    }

    /// Grid samples of a function, in slot order.
    pub fn sample<F: Fn(&[f64]) -> C64>(&self, f: F) -> Vec<C64> {
        (0..self.len).map(|s| f(self.point(s))).collect()
    }

    /// Real grid samples of a function, in slot order.
    pub fn sample_real<F: Fn(&[f64]) -> f64>(&self, f: F) -> Vec<f64> {
        (0..self.len).map(|s| f(self.point(s))).collect()
    }
}

fn wrap(s: usize, m: usize) -> i64 {
    if s <= m {
        s as i64
    } else {
        s as i64 - (2 * m + 1) as i64
    }
}

/// Element of `L²_per(Γ)` stored by its plane-wave coefficients.
#[derive(Clone)]
pub struct PeriodicField {
    basis: Arc<PlaneWaveBasis>,
    coeffs: Vec<C64>,
}

impl fmt::Debug for PeriodicField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PeriodicField")
            .field("m", &self.basis.m)
            .field("norm", &self.norm())
            .finish()
    }
}

impl PeriodicField {
    pub fn zeros(basis: &Arc<PlaneWaveBasis>) -> Self {
        Self {
            basis: basis.clone(),
            coeffs: vec![C64::new(0.0, 0.0); basis.len()],
        }
    }

    pub fn from_coeffs(basis: &Arc<PlaneWaveBasis>, coeffs: Vec<C64>) -> Result<Self> {
        if coeffs.len() != basis.len() {
            return domain(format!(
                "expected {} coefficients, got {}",
                basis.len(),
                coeffs.len()
            ));
        }
        Ok(Self {
            basis: basis.clone(),
            coeffs,
        })
    }

    /// The normalised plane wave `e_G`, `G = Σ n_j b_j`.
    pub fn plane_wave(basis: &Arc<PlaneWaveBasis>, n: &[i64]) -> Result<Self> {
        let slot = match basis.slot_of(n) {
            Some(s) => s,
            None => return domain(format!("plane wave {n:?} lies outside the truncation")),
        };
        let mut f = Self::zeros(basis);
        f.coeffs[slot] = C64::new(1.0, 0.0);
        Ok(f)
    }

    /// Coefficients from grid samples (exact for band-limited fields).
    pub fn from_grid(basis: &Arc<PlaneWaveBasis>, mut samples: Vec<C64>) -> Result<Self> {
        if samples.len() != basis.len() {
            return domain(format!(
                "expected {} samples, got {}",
                basis.len(),
                samples.len()
            ));
        }
        basis.fft(&mut samples, false);
        let scale = basis.lattice().cell_volume().sqrt() / basis.len() as f64;
        samples.iter_mut().for_each(|c| *c *= scale);
        Ok(Self {
            basis: basis.clone(),
            coeffs: samples,
        })
    }

    /// Values on the position grid.
    pub fn to_grid(&self) -> Vec<C64> {
        let mut v = self.coeffs.clone();
        self.basis.fft(&mut v, true);
        let scale = 1.0 / self.basis.lattice().cell_volume().sqrt();
        v.iter_mut().for_each(|c| *c *= scale);
        v
    }

    pub fn basis(&self) -> &Arc<PlaneWaveBasis> {
        &self.basis
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [C64] {
        &mut self.coeffs
    }

    pub fn coeff(&self, n: &[i64]) -> Option<C64> {
        self.basis.slot_of(n).map(|s| self.coeffs[s])
    }

    /// Pointwise evaluation by direct summation.
    pub fn eval(&self, y: &[f64]) -> C64 {
        let norm = 1.0 / self.basis.lattice().cell_volume().sqrt();
        let mut acc = C64::new(0.0, 0.0);
        for (slot, c) in self.coeffs.iter().enumerate() {
            let phase: f64 = self
                .basis
                .wavevector(slot)
                .iter()
                .zip(y)
                .map(|(g, x)| g * x)
                .sum();
            acc += c * C64::from_polar(1.0, phase);
        }
        acc * norm
    }

    /// `⟨self | other⟩`, antilinear in `self`.
    pub fn inner(&self, other: &PeriodicField) -> C64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .fold(C64::new(0.0, 0.0), |acc, (a, b)| acc + a.conj() * b)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |acc, c| acc + c.norm_sqr())
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn scale(&mut self, s: C64) {
        self.coeffs.iter_mut().for_each(|c| *c *= s);
    }

    pub fn scaled(&self, s: C64) -> Self {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, s: C64, other: &PeriodicField) {
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += s * b;
        }
    }

    /// Largest coefficient difference.
    pub fn max_abs_diff(&self, other: &PeriodicField) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).norm()))
    }

    /// Multiply by a real function given by its grid samples. Exact when the
    /// product stays inside the truncation.
    pub fn multiply_grid(&self, values: &[f64]) -> Self {
        let mut g = self.to_grid();
        for (v, w) in g.iter_mut().zip(values) {
            *v *= w;
        }
        Self::from_grid(&self.basis, g).expect("grid length matches basis")
    }

    /// Apply a diagonal symbol `σ(slot)` in the plane-wave basis.
    pub fn apply_symbol<F: Fn(usize) -> C64>(&self, sigma: F) -> Self {
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(s, c)| c * sigma(s))
            .collect();
        Self {
            basis: self.basis.clone(),
            coeffs,
        }
    }

    /// `⟨ψ | -iħ∇ ψ⟩`, per Cartesian component.
    pub fn momentum_mean(&self, hbar: f64) -> Vec<f64> {
        let d = self.basis.dim();
        let mut out = vec![0.0; d];
        for (slot, c) in self.coeffs.iter().enumerate() {
            let w = c.norm_sqr();
            for (o, g) in out.iter_mut().zip(self.basis.wavevector(slot)) {
                *o += w * hbar * g;
            }
        }
        out
    }

    /// `‖-iħ∇ ψ‖²`.
    pub fn momentum_sqr(&self, hbar: f64) -> f64 {
        self.coeffs.iter().enumerate().fold(0.0, |acc, (slot, c)| {
            let g2: f64 = self.basis.wavevector(slot).iter().map(|g| g * g).sum();
            acc + c.norm_sqr() * hbar * hbar * g2
        })
    }

    /// Fraction of `‖ψ‖²` carried by the outermost shell `max_j |n_j| = M`.
    pub fn edge_weight(&self) -> f64 {
        let m = self.basis.m as i64;
        let total = self.norm_sqr();
        if total == 0.0 {
            return 0.0;
        }
        let edge = self.coeffs.iter().enumerate().fold(0.0, |acc, (slot, c)| {
            if self.basis.index(slot).iter().any(|v| v.abs() == m) {
                acc + c.norm_sqr()
            } else {
                acc
            }
        });
        edge / total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_field(basis: &Arc<PlaneWaveBasis>, seed: u64, band: i64) -> PeriodicField {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut f = PeriodicField::zeros(basis);
        for slot in 0..basis.len() {
            if basis.index(slot).iter().all(|v| v.abs() <= band) {
                f.coeffs_mut()[slot] = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            }
        }
        f
    }

    #[test]
    fn grid_round_trip_1d_and_2d() {
        for lat in [
            LatticeSpec::cubic(1),
            LatticeSpec::new(&[vec![1.0, 0.3], vec![0.0, 0.8]]).unwrap(),
        ] {
            let basis = PlaneWaveBasis::new(&lat, 6).unwrap();
            let f = random_field(&basis, 3, 6);
            let back = PeriodicField::from_grid(&basis, f.to_grid()).unwrap();
            assert!(f.max_abs_diff(&back) < 1e-12);
        }
    }

    #[test]
    fn grid_values_match_direct_sum() {
        let lat = LatticeSpec::new(&[vec![1.0, 0.3], vec![0.0, 0.8]]).unwrap();
        let basis = PlaneWaveBasis::new(&lat, 4).unwrap();
        let f = random_field(&basis, 11, 4);
        let g = f.to_grid();
        for slot in [0, 7, 40, basis.len() - 1] {
            let direct = f.eval(basis.point(slot));
            assert!((direct - g[slot]).norm() < 1e-12);
        }
    }

    #[test]
    fn plane_wave_has_expected_samples() {
        let lat = LatticeSpec::scaled_cubic(1, 2.0);
        let basis = PlaneWaveBasis::new(&lat, 5).unwrap();
        let e = PeriodicField::plane_wave(&basis, &[2]).unwrap();
        let g = e.to_grid();
        for slot in 0..basis.len() {
            let y = basis.point(slot)[0];
            let want = C64::from_polar(1.0, 2.0 * std::f64::consts::PI * 2.0 * y / 2.0) / 2f64.sqrt();
            assert!((g[slot] - want).norm() < 1e-13);
        }
        assert!(PeriodicField::plane_wave(&basis, &[6]).is_err());
    }

    #[test]
    fn parseval_on_grid() {
        let lat = LatticeSpec::cubic(2);
        let basis = PlaneWaveBasis::new(&lat, 5).unwrap();
        let f = random_field(&basis, 5, 5);
        let grid_norm: f64 = f.to_grid().iter().map(|v| v.norm_sqr()).sum::<f64>() * basis.quadrature_weight();
        assert!((grid_norm - f.norm_sqr()).abs() < 1e-12 * f.norm_sqr());
    }

    proptest! {
        #[test]
        fn norm_matches_coefficient_sum(seed in 0u64..1000) {
            let basis = PlaneWaveBasis::new(&LatticeSpec::scaled_cubic(1, 1.7), 8).unwrap();
            let f = random_field(&basis, seed, 8);
            let quad: f64 = f.to_grid().iter().map(|v| v.norm_sqr()).sum::<f64>() * basis.quadrature_weight();
            prop_assert!((quad - f.norm_sqr()).abs() <= 1e-12 * f.norm_sqr());
        }

        #[test]
        fn multiply_by_band_limited_is_exact(seed in 0u64..200) {
            let basis = PlaneWaveBasis::new(&LatticeSpec::cubic(1), 12).unwrap();
            let f = random_field(&basis, seed, 5);
            let w = basis.sample_real(|y| (2.0 * std::f64::consts::PI * y[0]).cos());
            let prod = f.multiply_grid(&w);
            // cos(2πy) e_n = (e_{n+1} + e_{n-1}) / 2
            for n in -6i64..=6 {
                let want = 0.5 * (f.coeff(&[n - 1]).unwrap_or_default() + f.coeff(&[n + 1]).unwrap_or_default());
                prop_assert!((prod.coeff(&[n]).unwrap() - want).norm() < 1e-12);
            }
        }
    }
}
