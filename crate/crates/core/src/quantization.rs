//! Periodic trace, lattice-periodic Töplitz quantization and Husimi transform.
//!
//! Fibered operators are kept as low-rank sums `R_k = Σ_m λ_m |v_m⟩⟨v_m|`
//! and never assembled densely outside of small test oracles.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::basis::{PeriodicField, PlaneWaveBasis, C64};
use crate::bloch::{fiber_average, FiberedState, KGrid};
use crate::error::{domain, Result};
use crate::lattice::LatticeSpec;
use crate::par;
use crate::region::{PhaseSet, Region};
use crate::states::{fiber_coherent, CoherentParams};

/// Mass tolerance for a phase-space density to count as normalised.
pub const NORMALISATION_TOL: f64 = 1e-8;

/// Weighted phase-space nodes `(q_j, p_j, w_j, f_j)`, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpaceDensity {
    dim: usize,
    q: Vec<f64>,
    p: Vec<f64>,
    w: Vec<f64>,
    f: Vec<f64>,
    /// Nodes per axis when the nodes form a tensor grid (q axes then p axes).
    pub shape: Vec<usize>,
    /// Largest |p| component among the nodes.
    pub p_max: f64,
}

impl PhaseSpaceDensity {
    pub fn new(dim: usize, q: Vec<f64>, p: Vec<f64>, w: Vec<f64>, f: Vec<f64>) -> Result<Self> {
        let n = w.len();
        if q.len() != n * dim || p.len() != n * dim || f.len() != n {
            return domain("phase-space node arrays have inconsistent lengths");
        }
        if w.iter().chain(&f).chain(&q).chain(&p).any(|v| !v.is_finite()) {
            return domain("phase-space nodes must be finite");
        }
        if w.iter().any(|&v| v < 0.0) {
            return domain("quadrature weights must be nonnegative");
        }
        if f.iter().any(|&v| v < 0.0) {
            return domain("density values must be nonnegative");
        }
        let p_max = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(Self {
            dim,
            q,
            p,
            w,
            f,
            shape: vec![n],
            p_max,
        })
    }

    /// Unit point mass at `(q, p)`.
    pub fn point_mass(q: &[f64], p: &[f64]) -> Result<Self> {
        Self::new(q.len(), q.to_vec(), p.to_vec(), vec![1.0], vec![1.0])
    }

    /// Gaussian bump centred at `(q0, p0)`, sampled on a tensor grid over
    /// `±4σ` per axis with `n` nodes per axis, renormalised on the grid.
    /// Nodes whose mass is below `1e-16` of the total are dropped.
    pub fn gaussian_bump(q0: &[f64], p0: &[f64], sigma_q: f64, sigma_p: f64, n: usize) -> Result<Self> {
        let d = q0.len();
        if p0.len() != d {
            return domain("bump centre has mismatched dimensions");
        }
        if !(sigma_q > 0.0 && sigma_p > 0.0) {
            return domain("bump widths must be positive");
        }
        if n < 2 {
            return domain("bump needs at least 2 nodes per axis");
        }
        let axes = 2 * d;
        let total = n.pow(axes as u32);
        let hq = 8.0 * sigma_q / (n - 1) as f64;
        let hp = 8.0 * sigma_p / (n - 1) as f64;
        let mut q = Vec::with_capacity(total * d);
        let mut p = Vec::with_capacity(total * d);
        let mut w = Vec::with_capacity(total);
        let mut f = Vec::with_capacity(total);
        let mut idx = vec![0usize; axes];
        for flat in 0..total {
            let mut rem = flat;
            for a in (0..axes).rev() {
                idx[a] = rem % n;
                rem /= n;
            }
            let mut weight = 1.0;
            let mut expo = 0.0;
            for j in 0..d {
                let sq = -4.0 + 8.0 * idx[j] as f64 / (n - 1) as f64;
                let sp = -4.0 + 8.0 * idx[d + j] as f64 / (n - 1) as f64;
                q.push(q0[j] + sq * sigma_q);
                p.push(p0[j] + sp * sigma_p);
                expo += 0.5 * (sq * sq + sp * sp);
                let eq = if idx[j] == 0 || idx[j] == n - 1 { 0.5 } else { 1.0 };
                let ep = if idx[d + j] == 0 || idx[d + j] == n - 1 { 0.5 } else { 1.0 };
                weight *= eq * hq * ep * hp;
            }
            w.push(weight);
            f.push((-expo).exp());
        }
        let mass: f64 = par::ordered_sum(&w.iter().zip(&f).map(|(a, b)| a * b).collect::<Vec<_>>());
        f.iter_mut().for_each(|v| *v /= mass);
        let mut out = Self::new(d, q, p, w, f)?;
        out.shape = vec![n; axes];
        out.prune(1e-16);
        let m = out.mass();
        out.f.iter_mut().for_each(|v| *v /= m);
        Ok(out)
    }

    fn prune(&mut self, rel: f64) {
        let d = self.dim;
        let masses: Vec<f64> = self.w.iter().zip(&self.f).map(|(a, b)| a * b).collect();
        let cut = rel * par::ordered_sum(&masses);
        let keep: Vec<usize> = (0..self.len()).filter(|&i| masses[i] > cut).collect();
        if keep.len() == self.len() {
            return;
        }
        self.q = keep.iter().flat_map(|&i| self.q[i * d..(i + 1) * d].to_vec()).collect();
        self.p = keep.iter().flat_map(|&i| self.p[i * d..(i + 1) * d].to_vec()).collect();
        self.w = keep.iter().map(|&i| self.w[i]).collect();
        self.f = keep.iter().map(|&i| self.f[i]).collect();
        self.shape = vec![keep.len()];
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn q(&self, j: usize) -> &[f64] {
        &self.q[j * self.dim..(j + 1) * self.dim]
    }

    pub fn p(&self, j: usize) -> &[f64] {
        &self.p[j * self.dim..(j + 1) * self.dim]
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.w[j]
    }

    pub fn value(&self, j: usize) -> f64 {
        self.f[j]
    }

    pub fn values(&self) -> &[f64] {
        &self.f
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    /// `Σ_j w_j f_j` in index order.
    pub fn mass(&self) -> f64 {
        let m: Vec<f64> = self.w.iter().zip(&self.f).map(|(a, b)| a * b).collect();
        par::ordered_sum(&m)
    }

    /// Mass of the nodes lying in `K`.
    pub fn mass_on(&self, k: &PhaseSet, lat: &LatticeSpec) -> f64 {
        let m: Vec<f64> = (0..self.len())
            .map(|j| {
                if k.contains(self.q(j), self.p(j), lat) {
                    self.w[j] * self.f[j]
                } else {
                    0.0
                }
            })
            .collect();
        par::ordered_sum(&m)
    }

    pub fn check_normalised(&self) -> Result<()> {
        let m = self.mass();
        if (m - 1.0).abs() > NORMALISATION_TOL {
            return domain(format!("phase-space density has mass {m}, expected 1"));
        }
        Ok(())
    }

    /// Same weights and values with nodes moved to new positions.
    pub fn with_positions(&self, q: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        if q.len() != self.q.len() || p.len() != self.p.len() {
            return domain("position arrays do not match the node count");
        }
        let mut out = self.clone();
        out.q = q;
        out.p = p;
        out.p_max = out.p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(out)
    }
}

/// `Σ_m λ_m |v_m⟩⟨v_m|` on one fiber.
#[derive(Debug, Clone)]
pub struct LowRank {
    pub weights: Vec<f64>,
    pub vectors: Vec<PeriodicField>,
}

impl LowRank {
    pub fn trace(&self) -> f64 {
        let t: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.vectors)
            .map(|(l, v)| l * v.norm_sqr())
            .collect();
        par::ordered_sum(&t)
    }

    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    /// `R v`.
    pub fn apply(&self, v: &PeriodicField) -> PeriodicField {
        let mut out = PeriodicField::zeros(v.basis());
        for (l, u) in self.weights.iter().zip(&self.vectors) {
            out.add_scaled(u.inner(v) * *l, u);
        }
        out
    }

    /// Dense coefficient matrix; only for small test bases.
    pub fn dense(&self, len: usize) -> DMatrix<C64> {
        let mut m = DMatrix::<C64>::zeros(len, len);
        for (l, u) in self.weights.iter().zip(&self.vectors) {
            let c = u.coeffs();
            for i in 0..len {
                for j in 0..len {
                    m[(i, j)] += c[i] * c[j].conj() * *l;
                }
            }
        }
        m
    }
}

/// Fibered density operator over a k-grid.
#[derive(Debug, Clone)]
pub struct FiberedDensity {
    pub grid: KGrid,
    pub basis: Arc<PlaneWaveBasis>,
    pub hbar: f64,
    pub fibers: Vec<LowRank>,
}

impl FiberedDensity {
    pub fn new(grid: KGrid, basis: Arc<PlaneWaveBasis>, hbar: f64, fibers: Vec<LowRank>) -> Result<Self> {
        if fibers.len() != grid.len() {
            return domain("one low-rank factor set per k-point is required");
        }
        if !(hbar > 0.0) {
            return domain("hbar must be positive");
        }
        for fib in &fibers {
            if fib.weights.len() != fib.vectors.len() {
                return domain("eigenvalue and vector counts differ");
            }
            if fib.weights.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
                return domain("fiber eigenvalues must be nonnegative");
            }
            if fib.vectors.iter().any(|v| v.basis().len() != basis.len()) {
                return domain("fiber vector lives on a different basis");
            }
        }
        Ok(Self {
            grid,
            basis,
            hbar,
            fibers,
        })
    }

    /// Rank-one fibers `|u_k⟩⟨u_k|`.
    pub fn pure(state: &FiberedState, hbar: f64) -> Result<Self> {
        let basis = match state.fibers.first() {
            Some(f) => f.basis().clone(),
            None => return domain("empty fibered state"),
        };
        let fibers = state
            .fibers
            .iter()
            .map(|u| LowRank {
                weights: vec![1.0],
                vectors: vec![u.clone()],
            })
            .collect();
        Self::new(state.grid.clone(), basis, hbar, fibers)
    }

    /// Rank-one fibers `|percoh(q, p - ħk)⟩⟨…|`.
    pub fn coherent_family(params: &CoherentParams, grid: &KGrid, basis: &Arc<PlaneWaveBasis>) -> Result<Self> {
        let fibers: Result<Vec<PeriodicField>> = (0..grid.len())
            .map(|i| fiber_coherent(params, basis, grid.point(i)))
            .collect();
        Self::pure(&FiberedState::new(grid.clone(), fibers?)?, params.hbar)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c >= 0.0) {
            return domain("density scaling must be nonnegative");
        }
        let mut out = self.clone();
        out.fibers.iter_mut().for_each(|f| f.weights.iter_mut().for_each(|l| *l *= c));
        Ok(out)
    }

    /// Single vector per fiber, or a domain error.
    pub fn rank_one_vectors(&self) -> Result<Vec<&PeriodicField>> {
        self.fibers
            .iter()
            .map(|f| {
                if f.rank() != 1 {
                    return domain(format!("expected rank-1 fibers, found rank {}", f.rank()));
                }
                Ok(&f.vectors[0])
            })
            .collect()
    }

    /// Rank-one fibers with the weight absorbed: `λ^{1/2} v`.
    pub fn rank_one_fields(&self) -> Result<Vec<PeriodicField>> {
        self.fibers
            .iter()
            .map(|f| {
                if f.rank() != 1 {
                    return domain(format!("expected rank-1 fibers, found rank {}", f.rank()));
                }
                Ok(f.vectors[0].scaled(C64::new(f.weights[0].sqrt(), 0.0)))
            })
            .collect()
    }

    /// `1_Ω R 1_Ω`, fiber by fiber, with `1_Ω` acting on the grid.
    pub fn restrict(&self, region: &Region) -> Self {
        let mask = region_mask(&self.basis, region);
        let mut out = self.clone();
        for fib in out.fibers.iter_mut() {
            for v in fib.vectors.iter_mut() {
                *v = v.multiply_grid(&mask);
            }
        }
        out
    }
}

/// `⨍ Tr R_k dk`.
pub fn periodic_trace(r: &FiberedDensity) -> f64 {
    let t: Vec<f64> = r.fibers.iter().map(|f| f.trace()).collect();
    fiber_average(&t).unwrap_or(0.0)
}

/// Fiber `k` of `T[f]` is `Σ_j w_j f_j |percoh(q_j, p_j - ħk)⟩⟨…|`.
pub fn toeplitz_quantize(
    f: &PhaseSpaceDensity,
    grid: &KGrid,
    basis: &Arc<PlaneWaveBasis>,
    hbar: f64,
) -> Result<FiberedDensity> {
    f.check_normalised()?;
    if f.dim() != basis.dim() {
        return domain("density and basis have different dimensions");
    }
    let nodes: Vec<usize> = (0..f.len()).filter(|&j| f.weight(j) * f.value(j) > 0.0).collect();
    let params: Result<Vec<CoherentParams>> = nodes
        .iter()
        .map(|&j| CoherentParams::new(f.q(j), f.p(j), hbar))
        .collect();
    let params = params?;
    let fibers: Result<Vec<LowRank>> = par::map_range(grid.len(), |ik| {
        let k = grid.point(ik);
        let vectors: Result<Vec<PeriodicField>> =
            params.iter().map(|c| fiber_coherent(c, basis, k)).collect();
        Ok(LowRank {
            weights: nodes.iter().map(|&j| f.weight(j) * f.value(j)).collect(),
            vectors: vectors?,
        })
    })
    .into_iter()
    .collect();
    FiberedDensity::new(grid.clone(), basis.clone(), hbar, fibers?)
}

/// Grid samples of `1_Ω`.
pub fn region_mask(basis: &PlaneWaveBasis, region: &Region) -> Vec<f64> {
    basis.sample_real(|y| if region.contains(y) { 1.0 } else { 0.0 })
}

/// `⨍_k Tr(1_Ω R_k 1_Ω) dk` by grid quadrature of the fiber densities.
pub fn observe(r: &FiberedDensity, region: &Region) -> f64 {
    if region.is_empty() {
        return 0.0;
    }
    let mask = region_mask(&r.basis, region);
    observe_with_mask(r, &mask)
}

/// [`observe`] with a precomputed grid mask.
pub fn observe_with_mask(r: &FiberedDensity, mask: &[f64]) -> f64 {
    let wq = r.basis.quadrature_weight();
    let per_fiber: Vec<f64> = par::map_slice(&r.fibers, |fib| {
        let terms: Vec<f64> = fib
            .weights
            .iter()
            .zip(&fib.vectors)
            .map(|(l, v)| {
                let g = v.to_grid();
                l * g.iter().zip(mask).fold(0.0, |a, (c, m)| a + m * c.norm_sqr())
            })
            .collect();
        par::ordered_sum(&terms) * wq
    });
    fiber_average(&per_fiber).unwrap_or(0.0)
}

/// Tensor quadrature grid on `Γ × [p_lo, p_hi]`.
///
/// Position nodes sit at lattice coordinates `(s - ⌊N_q/2⌋)/N_q` with equal
/// weights `|Γ|/N_q^d`; momentum nodes are uniform with trapezoid weights.
#[derive(Debug, Clone)]
pub struct PhaseGrid {
    dim: usize,
    nq: usize,
    q: Vec<f64>,
    q_weight: f64,
    /// Lattice-coordinate integer offsets `s - ⌊N_q/2⌋` per q node.
    q_index: Vec<i64>,
    p_axes: Vec<Vec<f64>>,
    p_axis_weights: Vec<Vec<f64>>,
}

impl PhaseGrid {
    pub fn new(lat: &LatticeSpec, nq: usize, p_lo: &[f64], p_hi: &[f64], np: usize) -> Result<Self> {
        let d = lat.dim();
        if nq < 2 || np < 2 {
            return domain("phase grid needs at least 2 nodes per axis");
        }
        if p_lo.len() != d || p_hi.len() != d || p_lo.iter().zip(p_hi).any(|(a, b)| !(a < b)) {
            return domain("phase grid momentum range is empty or malformed");
        }
        let total = nq.pow(d as u32);
        let half = (nq / 2) as i64;
        let mut q = Vec::with_capacity(total * d);
        let mut q_index = Vec::with_capacity(total * d);
        for flat in 0..total {
            let mut rem = flat;
            let mut n = vec![0i64; d];
            for j in (0..d).rev() {
                n[j] = (rem % nq) as i64 - half;
                rem /= nq;
            }
            let t: Vec<f64> = n.iter().map(|&v| v as f64 / nq as f64).collect();
            q.extend(lat.from_lattice_coords(&t));
            q_index.extend(n);
        }
        let mut p_axes = Vec::with_capacity(d);
        let mut p_axis_weights = Vec::with_capacity(d);
        for j in 0..d {
            let h = (p_hi[j] - p_lo[j]) / (np - 1) as f64;
            p_axes.push((0..np).map(|i| p_lo[j] + i as f64 * h).collect());
            p_axis_weights.push(
                (0..np)
                    .map(|i| if i == 0 || i == np - 1 { 0.5 * h } else { h })
                    .collect(),
            );
        }
        Ok(Self {
            dim: d,
            nq,
            q,
            q_weight: lat.cell_volume() / total as f64,
            q_index,
            p_axes,
            p_axis_weights,
        })
    }

    /// Symmetric momentum window `[-p_max, p_max]^d`.
    pub fn symmetric(lat: &LatticeSpec, nq: usize, p_max: f64, np: usize) -> Result<Self> {
        let d = lat.dim();
        Self::new(lat, nq, &vec![-p_max; d], &vec![p_max; d], np)
    }

    pub fn q_len(&self) -> usize {
        self.q.len() / self.dim
    }

    pub fn p_len(&self) -> usize {
        self.p_axes.iter().map(|a| a.len()).product()
    }

    pub fn q_point(&self, i: usize) -> &[f64] {
        &self.q[i * self.dim..(i + 1) * self.dim]
    }

    pub fn q_weight(&self) -> f64 {
        self.q_weight
    }

    /// Momentum node and trapezoid weight at flat index `i`.
    pub fn p_point(&self, i: usize) -> (Vec<f64>, f64) {
        let mut rem = i;
        let mut p = vec![0.0; self.dim];
        let mut w = 1.0;
        for j in (0..self.dim).rev() {
            let n = self.p_axes[j].len();
            let s = rem % n;
            rem /= n;
            p[j] = self.p_axes[j][s];
            w *= self.p_axis_weights[j][s];
        }
        (p, w)
    }

    fn fft_slots(&self, basis: &PlaneWaveBasis) -> Option<Vec<usize>> {
        if self.nq != basis.points_per_axis() {
            return None;
        }
        (0..self.q_len())
            .map(|i| basis.slot_of(&self.q_index[i * self.dim..(i + 1) * self.dim]))
            .collect()
    }
}

/// `|⟨percoh(q_i, p') | v⟩|²` for every q node of the grid.
fn overlaps_sqr(v: &PeriodicField, p_prime: &[f64], hbar: f64, grid: &PhaseGrid, slots: &Option<Vec<usize>>) -> Vec<f64> {
    let basis = v.basis();
    let lat = basis.lattice();
    let d = lat.dim() as f64;
    let amp = lat.cell_volume().powf(-0.5) * (PI * hbar).powf(-d / 4.0) * (2.0 * PI * hbar).powf(d / 2.0);
    // ⟨percoh(q,p')|v⟩ = amp e^{-ip'·q/ħ} Σ_G e^{-|p'-ħG|²/2ħ} v_G e^{iG·q}
    let a = v.apply_symbol(|s| {
        let r2: f64 = basis
            .wavevector(s)
            .iter()
            .zip(p_prime)
            .map(|(g, p)| (p - hbar * g).powi(2))
            .sum();
        C64::new((-r2 / (2.0 * hbar)).exp(), 0.0)
    });
    // eval/to_grid include a factor |Γ|^{-1/2}.
    let scale = amp * amp * lat.cell_volume();
    match slots {
        Some(sl) => {
            let g = a.to_grid();
            sl.iter().map(|&s| scale * g[s].norm_sqr()).collect()
        }
        None => (0..grid.q_len())
            .map(|i| scale * a.eval(grid.q_point(i)).norm_sqr())
            .collect(),
    }
}

/// `f_k(q, p) = (2πħ)^{-d} ⟨percoh(q, p - ħk)| R_k |percoh(q, p - ħk)⟩` on the grid.
pub fn husimi_fiber(r: &FiberedDensity, ik: usize, grid: &PhaseGrid) -> Vec<f64> {
    let hbar = r.hbar;
    let d = r.basis.dim();
    let norm = (2.0 * PI * hbar).powi(-(d as i32));
    let k = r.grid.point(ik);
    let slots = grid.fft_slots(&r.basis);
    let nq = grid.q_len();
    let rows = par::map_range(grid.p_len(), |ip| {
        let (p, _) = grid.p_point(ip);
        let pp: Vec<f64> = p.iter().zip(k).map(|(a, b)| a - hbar * b).collect();
        let mut acc = vec![0.0; nq];
        let fib = &r.fibers[ik];
        for (l, v) in fib.weights.iter().zip(&fib.vectors) {
            for (a, o) in acc.iter_mut().zip(overlaps_sqr(v, &pp, hbar, grid, &slots)) {
                *a += l * o;
            }
        }
        acc.iter_mut().for_each(|a| *a *= norm);
        acc
    });
    // Layout: q-major, p-minor.
    let np = grid.p_len();
    let mut out = vec![0.0; nq * np];
    for (ip, row) in rows.into_iter().enumerate() {
        for (iq, v) in row.into_iter().enumerate() {
            out[iq * np + ip] = v;
        }
    }
    out
}

/// `W̃[R](q,p) = ⨍ f_k(q,p) dk` on the phase grid, as weighted nodes.
pub fn husimi(r: &FiberedDensity, grid: &PhaseGrid) -> Result<PhaseSpaceDensity> {
    let d = r.basis.dim();
    let nq = grid.q_len();
    let np = grid.p_len();
    let mut total = vec![0.0; nq * np];
    for ik in 0..r.grid.len() {
        let fk = husimi_fiber(r, ik, grid);
        for (t, v) in total.iter_mut().zip(fk) {
            *t += v;
        }
    }
    let wk = r.grid.weight();
    let mut q = Vec::with_capacity(nq * np * d);
    let mut p = Vec::with_capacity(nq * np * d);
    let mut w = Vec::with_capacity(nq * np);
    let pts: Vec<(Vec<f64>, f64)> = (0..np).map(|ip| grid.p_point(ip)).collect();
    for iq in 0..nq {
        for (pp, wp) in &pts {
            q.extend_from_slice(grid.q_point(iq));
            p.extend_from_slice(pp);
            w.push(grid.q_weight() * wp);
        }
    }
    let f: Vec<f64> = total.into_iter().map(|v| (v * wk).max(0.0)).collect();
    let mut out = PhaseSpaceDensity::new(d, q, p, w, f)?;
    out.shape = vec![nq, np];
    Ok(out)
}
