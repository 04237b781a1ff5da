//! Cost operators `ĉ_λ(x, ξ) = λ²Θ(|P(x−y)|²) + (ξ + iħ∇_y)²`, the energies of
//! explicit couplings, and the Grönwall stability envelope.

use std::sync::Arc;

use crate::basis::{PeriodicField, PlaneWaveBasis, C64};
use crate::bloch::{fiber_average, KGrid};
use crate::classical::{flow, PhasePoint, TrigPotential};
use crate::error::{domain, Result};
use crate::lattice::{dot, project_to_cell, theta_unchecked, CellGeometry};
use crate::par;
use crate::quantization::{husimi_fiber, FiberedDensity, PhaseGrid, PhaseSpaceDensity};
use crate::quantum::{FiberHamiltonian, Propagator};
use crate::states::{fiber_coherent, CoherentParams};

#[derive(Debug, Clone, PartialEq)]
pub struct CostParams {
    pub lambda: f64,
    pub hbar: f64,
    pub geom: CellGeometry,
}

impl CostParams {
    pub fn new(lambda: f64, hbar: f64, geom: &CellGeometry) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return domain(format!("lambda must be positive, got {lambda}"));
        }
        if !(hbar > 0.0) || !hbar.is_finite() {
            return domain(format!("hbar must be positive, got {hbar}"));
        }
        Ok(Self {
            lambda,
            hbar,
            geom: geom.clone(),
        })
    }

    /// `η = (2γ₊/γ₋)(λ + L²/λ)`.
    pub fn eta(&self, lip: f64) -> f64 {
        2.0 * self.geom.aspect() * (self.lambda + lip * lip / self.lambda)
    }

    /// The smaller rate `(γ₊/γ₋)(λ + L²/λ)`, reported for comparison.
    pub fn eta_half(&self, lip: f64) -> f64 {
        0.5 * self.eta(lip)
    }
}

/// `Θ(|P(x − y)|²)` on the position grid of `basis`.
pub fn theta_grid(basis: &PlaneWaveBasis, x: &[f64], geom: &CellGeometry) -> Vec<f64> {
    let lat = basis.lattice();
    basis.sample_real(|y| {
        let rel: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        let (p, _) = project_to_cell(&rel, lat).expect("finite grid point");
        theta_unchecked(dot(&p, &p), geom.gamma_minus)
    })
}

fn momentum_symbol(basis: &PlaneWaveBasis, xi: &[f64], hbar: f64, slot: usize) -> f64 {
    basis
        .wavevector(slot)
        .iter()
        .zip(xi)
        .map(|(g, x)| (x - hbar * g).powi(2))
        .sum()
}

/// `ĉ_λ(x, ξ) u`.
pub fn apply_cost(cost: &CostParams, x: &[f64], xi: &[f64], u: &PeriodicField) -> PeriodicField {
    let basis = u.basis().clone();
    let w = theta_grid(&basis, x, &cost.geom);
    let mut out = u.multiply_grid(&w).scaled(C64::new(cost.lambda * cost.lambda, 0.0));
    out.add_scaled(
        C64::new(1.0, 0.0),
        &u.apply_symbol(|s| C64::new(momentum_symbol(&basis, xi, cost.hbar, s), 0.0)),
    );
    out
}

/// `⟨u|ĉ_λ(x, ξ)|u⟩` split into its position and momentum parts.
pub fn cost_expectation(cost: &CostParams, x: &[f64], xi: &[f64], u: &PeriodicField) -> (f64, f64) {
    let basis = u.basis();
    let lat = basis.lattice();
    let g = u.to_grid();
    let wq = basis.quadrature_weight();
    let mut pos = 0.0;
    let mut rel = vec![0.0; x.len()];
    for (s, c) in g.iter().enumerate() {
        for ((r, a), b) in rel.iter_mut().zip(x).zip(basis.point(s)) {
            *r = a - b;
        }
        let (p, _) = project_to_cell(&rel, lat).expect("finite grid point");
        pos += c.norm_sqr() * theta_unchecked(dot(&p, &p), cost.geom.gamma_minus);
    }
    let mom = u
        .coeffs()
        .iter()
        .enumerate()
        .fold(0.0, |a, (s, c)| a + c.norm_sqr() * momentum_symbol(basis, xi, cost.hbar, s));
    (cost.lambda * cost.lambda * pos * wq, mom)
}

/// Energy of one explicit coupling, broken down per fiber.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingEnergy {
    pub total: f64,
    pub per_fiber: Vec<f64>,
    /// Position part `E_{k,1}` per fiber.
    pub position: Vec<f64>,
    /// Momentum part `E_{k,2}` per fiber.
    pub momentum: Vec<f64>,
    /// Closed-form upper bound, where one is available.
    pub bound: Option<f64>,
}

impl CouplingEnergy {
    fn from_parts(position: Vec<f64>, momentum: Vec<f64>, bound: Option<f64>) -> Result<Self> {
        let per_fiber: Vec<f64> = position.iter().zip(&momentum).map(|(a, b)| a + b).collect();
        Ok(Self {
            total: fiber_average(&per_fiber)?,
            per_fiber,
            position,
            momentum,
            bound,
        })
    }
}

fn active_nodes(f: &PhaseSpaceDensity) -> Vec<usize> {
    (0..f.len()).filter(|&j| f.weight(j) * f.value(j) > 0.0).collect()
}

/// `Σ_j w_j f_j ⟨φ|ĉ|φ⟩` per fiber, from per-pair `(position, momentum)` values.
fn reduce_pairs(f: &PhaseSpaceDensity, nodes: &[usize], nk: usize, vals: &[(f64, f64)]) -> (Vec<f64>, Vec<f64>) {
    let mut pos = vec![0.0; nk];
    let mut mom = vec![0.0; nk];
    for (i, &j) in nodes.iter().enumerate() {
        let m = f.weight(j) * f.value(j);
        for ik in 0..nk {
            let (a, b) = vals[i * nk + ik];
            pos[ik] += m * a;
            mom[ik] += m * b;
        }
    }
    (pos, mom)
}

/// Energy of the diagonal coupling `Q_k(x,ξ) = f(x,ξ)|percoh(x,ξ−ħk)⟩⟨…|`
/// between `f` and its Töplitz quantization.
pub fn coupling_energy_toeplitz(
    f: &PhaseSpaceDensity,
    cost: &CostParams,
    grid: &KGrid,
    basis: &Arc<PlaneWaveBasis>,
) -> Result<CouplingEnergy> {
    f.check_normalised()?;
    let nodes = active_nodes(f);
    let nk = grid.len();
    let hbar = cost.hbar;
    let vals: Result<Vec<(f64, f64)>> = par::map_range(nodes.len() * nk, |idx| {
        let j = nodes[idx / nk];
        let k = grid.point(idx % nk);
        let params = CoherentParams::new(f.q(j), f.p(j), hbar)?;
        let phi = fiber_coherent(&params, basis, k)?;
        let xi: Vec<f64> = f.p(j).iter().zip(k).map(|(a, b)| a - hbar * b).collect();
        Ok(cost_expectation(cost, f.q(j), &xi, &phi))
    })
    .into_iter()
    .collect();
    let (pos, mom) = reduce_pairs(f, &nodes, nk, &vals?);
    let d = basis.dim() as f64;
    let bound = (1.0 + cost.lambda * cost.lambda) * d * hbar / 2.0;
    CouplingEnergy::from_parts(pos, mom, Some(bound))
}

/// Trace and operator marginals of the diagonal Töplitz coupling: the
/// `dk`-averaged trace at each node, and the node-integrated fibers.
pub fn toeplitz_coupling_marginals(
    f: &PhaseSpaceDensity,
    grid: &KGrid,
    basis: &Arc<PlaneWaveBasis>,
    hbar: f64,
) -> Result<(Vec<f64>, FiberedDensity)> {
    let r = crate::quantization::toeplitz_quantize(f, grid, basis, hbar)?;
    let nodes = active_nodes(f);
    let mut trace = vec![0.0; f.len()];
    for (i, &j) in nodes.iter().enumerate() {
        let norms: Vec<f64> = r.fibers.iter().map(|fib| fib.vectors[i].norm_sqr()).collect();
        trace[j] = f.value(j) * fiber_average(&norms)?;
    }
    Ok((trace, r))
}

/// `Σ_y w K(P(y − q)) ρ(y)` at every grid point `q`, by FFT correlation.
pub(crate) fn cell_correlation(basis: &PlaneWaveBasis, kernel: impl Fn(&[f64]) -> f64, rho: &[f64]) -> Vec<f64> {
    let lat = basis.lattice();
    let mut kh: Vec<C64> = basis
        .sample_real(|z| {
            let (p, _) = project_to_cell(z, lat).expect("finite grid point");
            kernel(&p)
        })
        .into_iter()
        .map(|v| C64::new(v, 0.0))
        .collect();
    let mut rh: Vec<C64> = rho.iter().map(|&v| C64::new(v, 0.0)).collect();
    basis.fft(&mut kh, false);
    basis.fft(&mut rh, false);
    for (r, k) in rh.iter_mut().zip(&kh) {
        *r *= k.conj();
    }
    basis.fft(&mut rh, true);
    let scale = basis.quadrature_weight() / basis.len() as f64;
    rh.into_iter().map(|c| c.re * scale).collect()
}

/// `‖ψ‖²‖Pψ‖² − |⟨ψ|Pψ⟩|²` with `P = −iħ∇`.
pub fn momentum_variance(psi: &PeriodicField, hbar: f64) -> f64 {
    let mean = psi.momentum_mean(hbar);
    psi.norm_sqr() * psi.momentum_sqr(hbar) - dot(&mean, &mean)
}

/// `(dħ/2)‖ψ‖⁴ + 2‖ψ‖²‖Pψ‖² − 2|⟨ψ|Pψ⟩|²`.
pub fn husimi_momentum_identity(psi: &PeriodicField, hbar: f64) -> f64 {
    let d = psi.basis().dim() as f64;
    let n2 = psi.norm_sqr();
    0.5 * d * hbar * n2 * n2 + 2.0 * momentum_variance(psi, hbar)
}

/// `½∬|P(y−q)|²|ψ(y)|²|ψ(q)|² + ‖ψ‖²‖Pψ‖² − |⟨ψ|Pψ⟩|²` for one fiber.
pub fn fiber_spread(psi: &PeriodicField, hbar: f64) -> f64 {
    let basis = psi.basis();
    let rho: Vec<f64> = psi.to_grid().iter().map(|c| c.norm_sqr()).collect();
    let conv = cell_correlation(basis, |p| dot(p, p), &rho);
    let wq = basis.quadrature_weight();
    let pos = 0.5 * wq * rho.iter().zip(&conv).map(|(a, b)| a * b).sum::<f64>();
    pos + momentum_variance(psi, hbar)
}

/// Energy of the coupling `Q_k(q,p) = f_k(q,p) |ψ_k⟩⟨ψ_k|` between the
/// Husimi function of a rank-one fibered density and the density itself,
/// with cost `ĉ_1`. The bound is `dħ ⨍‖ψ_k‖⁴ + 2Δ²`.
pub fn coupling_energy_husimi(r: &FiberedDensity, geom: &CellGeometry, pgrid: &PhaseGrid) -> Result<CouplingEnergy> {
    let psis = r.rank_one_fields()?;
    let basis = r.basis.clone();
    let hbar = r.hbar;
    let d = basis.dim();
    let nq = pgrid.q_len();
    let np = pgrid.p_len();
    let pts: Vec<(Vec<f64>, f64)> = (0..np).map(|ip| pgrid.p_point(ip)).collect();
    let lat = basis.lattice();
    let parts = par::map_range(r.grid.len(), |ik| {
        let psi = &psis[ik];
        let k = r.grid.point(ik);
        let fk = husimi_fiber(r, ik, pgrid);
        let rho: Vec<f64> = psi.to_grid().iter().map(|c| c.norm_sqr()).collect();
        let wq = basis.quadrature_weight();
        // (W * ρ)(q) = ∫ Θ(|P(y−q)|²) ρ(y) dy at each q node.
        let conv: Vec<f64> = (0..nq)
            .map(|iq| {
                let q = pgrid.q_point(iq);
                let mut acc = 0.0;
                let mut rel = vec![0.0; d];
                for (s, rv) in rho.iter().enumerate() {
                    for ((o, a), b) in rel.iter_mut().zip(basis.point(s)).zip(q) {
                        *o = a - b;
                    }
                    let (p, _) = project_to_cell(&rel, lat).expect("finite grid point");
                    acc += rv * theta_unchecked(dot(&p, &p), geom.gamma_minus);
                }
                acc * wq
            })
            .collect();
        let n2 = psi.norm_sqr();
        let mean = psi.momentum_mean(hbar);
        let p2 = psi.momentum_sqr(hbar);
        let mut e1 = 0.0;
        let mut e2 = 0.0;
        for iq in 0..nq {
            let mut marg = 0.0;
            for (ip, (p, wp)) in pts.iter().enumerate() {
                let f = fk[iq * np + ip];
                marg += wp * f;
                let xi: Vec<f64> = p.iter().zip(k).map(|(a, b)| a - hbar * b).collect();
                e2 += wp * f * (dot(&xi, &xi) * n2 - 2.0 * dot(&xi, &mean) + p2);
            }
            e1 += marg * conv[iq];
        }
        let wqg = pgrid.q_weight();
        let bound = d as f64 * hbar * n2 * n2 + 2.0 * fiber_spread(psi, hbar);
        (e1 * wqg, e2 * wqg, bound)
    });
    let pos: Vec<f64> = parts.iter().map(|p| p.0).collect();
    let mom: Vec<f64> = parts.iter().map(|p| p.1).collect();
    let bounds: Vec<f64> = parts.iter().map(|p| p.2).collect();
    CouplingEnergy::from_parts(pos, mom, Some(fiber_average(&bounds)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityRow {
    pub t: f64,
    pub energy: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilitySeries {
    pub rows: Vec<StabilityRow>,
    pub eta: f64,
    pub eta_half: f64,
    pub lip: f64,
}

impl StabilitySeries {
    /// Largest `𝓔(t)/(𝓔(0)e^{2ηt})`.
    pub fn worst_ratio(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| if r.bound > 0.0 { r.energy / r.bound } else { 0.0 })
            .fold(0.0, f64::max)
    }
}

/// Inputs of [`stability_envelope`] besides the density and cost.
#[derive(Debug, Clone)]
pub struct StabilityRun<'a> {
    pub potential: &'a TrigPotential,
    pub grid: &'a KGrid,
    pub basis: &'a Arc<PlaneWaveBasis>,
    pub horizon: f64,
    pub samples: usize,
    pub dt: f64,
    /// `Lip(∇V)`; computed from the potential when `None`.
    pub lip: Option<f64>,
}

/// `𝓔(t) = Σ_j w_j f_j ⨍_k ⟨U_k(t)φ_{jk}| ĉ_λ(X_t, Ξ_t − ħk) |U_k(t)φ_{jk}⟩`
/// with `φ_{jk} = percoh(q_j, p_j − ħk)` and `(X_t, Ξ_t) = Φ_t(q_j, p_j)`,
/// sampled at `samples + 1` uniform times on `[0, T]`.
pub fn stability_envelope(f: &PhaseSpaceDensity, cost: &CostParams, run: &StabilityRun<'_>) -> Result<StabilitySeries> {
    f.check_normalised()?;
    if !(run.horizon >= 0.0) || !run.horizon.is_finite() {
        return domain("stability horizon must be nonnegative");
    }
    if run.samples == 0 {
        return domain("stability series needs at least one sample interval");
    }
    if !(run.dt > 0.0) {
        return domain("time step must be positive");
    }
    let hbar = cost.hbar;
    let nodes = active_nodes(f);
    let nk = run.grid.len();
    let ns = run.samples;
    let interval = run.horizon / ns as f64;
    let sub = ((interval / run.dt).ceil() as usize).max(1);
    let h = interval / sub as f64;
    let hams: Result<Vec<Propagator>> = (0..nk)
        .map(|ik| Propagator::new(&FiberHamiltonian::new(run.basis, run.grid.point(ik), hbar, run.potential)?, h))
        .collect();
    let props = hams?;
    let traj: Result<Vec<Vec<(f64, f64)>>> = par::map_range(nodes.len() * nk, |idx| {
        let j = nodes[idx / nk];
        let ik = idx % nk;
        let k = run.grid.point(ik);
        let params = CoherentParams::new(f.q(j), f.p(j), hbar)?;
        let mut phi = fiber_coherent(&params, run.basis, k)?;
        let mut z = PhasePoint::new(f.q(j), f.p(j));
        let mut out = Vec::with_capacity(ns + 1);
        for i in 0..=ns {
            if i > 0 {
                props[ik].advance(&mut phi, sub);
                z = flow(&z, interval, run.potential, h)?;
            }
            let xi: Vec<f64> = z.xi.iter().zip(k).map(|(a, b)| a - hbar * b).collect();
            out.push(cost_expectation(cost, &z.x, &xi, &phi));
        }
        Ok(out)
    })
    .into_iter()
    .collect();
    let traj = traj?;
    let lip = match run.lip {
        Some(l) => l,
        None => run.potential.lip_grad(),
    };
    let eta = cost.eta(lip);
    let mut energies = vec![0.0; ns + 1];
    for (i, e) in energies.iter_mut().enumerate() {
        let vals: Vec<(f64, f64)> = traj.iter().map(|tr| tr[i]).collect();
        let (pos, mom) = reduce_pairs(f, &nodes, nk, &vals);
        *e = CouplingEnergy::from_parts(pos, mom, None)?.total;
    }
    let e0 = energies[0];
    let rows = energies
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let t = i as f64 * interval;
            StabilityRow {
                t,
                energy: e,
                bound: e0 * (2.0 * eta * t).exp(),
            }
        })
        .collect();
    Ok(StabilitySeries {
        rows,
        eta,
        eta_half: cost.eta_half(lip),
        lip,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{gamma_bounds, LatticeSpec};
    use crate::quantization::toeplitz_quantize;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(m: usize) -> (LatticeSpec, Arc<PlaneWaveBasis>, CellGeometry) {
        let lat = LatticeSpec::cubic(1);
        let basis = PlaneWaveBasis::new(&lat, m).unwrap();
        let geom = gamma_bounds(&lat).unwrap();
        (lat, basis, geom)
    }

    fn random_field(basis: &Arc<PlaneWaveBasis>, seed: u64) -> PeriodicField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = (0..basis.len())
            .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        PeriodicField::from_coeffs(basis, c).unwrap()
    }

    fn bump() -> PhaseSpaceDensity {
        PhaseSpaceDensity::gaussian_bump(&[0.1], &[0.8], 0.1, 0.2, 9).unwrap()
    }

    #[test]
    fn momentum_part_on_plane_waves() {
        let (_, basis, geom) = setup(8);
        let cost = CostParams::new(1e-200, 0.1, &geom).unwrap();
        let u = PeriodicField::plane_wave(&basis, &[2]).unwrap();
        let out = apply_cost(&cost, &[0.2], &[0.7], &u);
        let want = (0.7 - 0.1 * 4.0 * std::f64::consts::PI).powi(2);
        let mut diff = out;
        diff.add_scaled(C64::new(-want, 0.0), &u);
        assert!(diff.norm() < 1e-13);
    }

    proptest! {
        #[test]
        fn cost_is_hermitian(seed in 0u64..1000, x in -1.0f64..1.0, xi in -2.0f64..2.0) {
            let (_, basis, geom) = setup(12);
            let cost = CostParams::new(1.3, 0.05, &geom).unwrap();
            let u = random_field(&basis, seed);
            let v = random_field(&basis, seed + 104729);
            let a = u.inner(&apply_cost(&cost, &[x], &[xi], &v));
            let b = v.inner(&apply_cost(&cost, &[x], &[xi], &u)).conj();
            prop_assert!((a - b).norm() < 1e-12 * (1.0 + a.norm()));
        }

        #[test]
        fn expectation_matches_operator(seed in 0u64..1000, x in -1.0f64..1.0, xi in -2.0f64..2.0) {
            let (_, basis, geom) = setup(12);
            let cost = CostParams::new(0.7, 0.05, &geom).unwrap();
            let u = random_field(&basis, seed);
            let (a, b) = cost_expectation(&cost, &[x], &[xi], &u);
            let c = u.inner(&apply_cost(&cost, &[x], &[xi], &u));
            prop_assert!((a + b - c.re).abs() < 1e-10 * c.re.abs().max(1.0));
            prop_assert!(c.im.abs() < 1e-10 * c.re.abs().max(1.0));
        }
    }

    #[test]
    fn coherent_state_expectation_bound() {
        for &(hbar, lambda) in &[(0.01, 1.0), (0.02, 2.0), (0.05, 0.5)] {
            let (_, basis, geom) = setup(64);
            let cost = CostParams::new(lambda, hbar, &geom).unwrap();
            let params = CoherentParams::new(&[0.3], &[0.6], hbar).unwrap();
            let phi = fiber_coherent(&params, &basis, &[0.0]).unwrap();
            let (a, b) = cost_expectation(&cost, &[0.3], &[0.6], &phi);
            let bound = (1.0 + lambda * lambda) * hbar / 2.0;
            assert!(a + b <= bound * (1.0 + 1e-6), "{} > {bound}", a + b);
        }
    }

    #[test]
    fn cost_equivalence_on_the_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in [1usize, 2] {
            let lat = LatticeSpec::cubic(d);
            let basis = PlaneWaveBasis::new(&lat, 10).unwrap();
            let geom = gamma_bounds(&lat).unwrap();
            let lo = geom.gamma_minus / (2.0 * geom.gamma_plus);
            for _ in 0..100 {
                let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let th = theta_grid(&basis, &x, &geom);
                for (s, t) in th.iter().enumerate() {
                    let rel: Vec<f64> = x.iter().zip(basis.point(s)).map(|(a, b)| a - b).collect();
                    let (p, _) = project_to_cell(&rel, &lat).unwrap();
                    let r = dot(&p, &p);
                    assert!(lo * r <= *t + 1e-15 && *t <= r + 1e-15);
                }
            }
        }
    }

    #[test]
    fn toeplitz_coupling_bound() {
        let hbar = 0.01;
        let (lat, basis, geom) = setup(64);
        let grid = KGrid::uniform(&lat, 4).unwrap();
        let cost = CostParams::new(1.0, hbar, &geom).unwrap();
        let e = coupling_energy_toeplitz(&bump(), &cost, &grid, &basis).unwrap();
        assert!(e.total <= 0.01 * (1.0 + 1e-6), "{}", e.total);
        assert!(e.per_fiber.iter().all(|&v| v >= -1e-10));
        let avg = e.per_fiber.iter().sum::<f64>() / e.per_fiber.len() as f64;
        assert!((avg - e.total).abs() < 1e-10);
    }

    #[test]
    fn toeplitz_coupling_is_linear_in_hbar() {
        let ratios: Vec<f64> = [0.04, 0.02, 0.01]
            .iter()
            .map(|&hbar| {
                let (lat, basis, geom) = setup(64);
                let grid = KGrid::uniform(&lat, 4).unwrap();
                let cost = CostParams::new(1.0, hbar, &geom).unwrap();
                coupling_energy_toeplitz(&bump(), &cost, &grid, &basis).unwrap().total / hbar
            })
            .collect();
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().cloned().fold(0.0, f64::max);
        assert!(hi / lo < 1.1, "{ratios:?}");
    }

    #[test]
    fn toeplitz_coupling_grows_with_lambda() {
        let hbar = 0.02;
        let (lat, basis, geom) = setup(48);
        let grid = KGrid::uniform(&lat, 3).unwrap();
        let vals: Vec<f64> = [0.5, 1.0, 2.0]
            .iter()
            .map(|&l| {
                let cost = CostParams::new(l, hbar, &geom).unwrap();
                coupling_energy_toeplitz(&bump(), &cost, &grid, &basis).unwrap().total
            })
            .collect();
        assert!(vals[0] <= vals[1] && vals[1] <= vals[2], "{vals:?}");
    }

    #[test]
    fn toeplitz_coupling_marginals_match() {
        let hbar = 0.02;
        let (lat, basis, _) = setup(48);
        let grid = KGrid::uniform(&lat, 4).unwrap();
        let f = bump();
        let (trace, op) = toeplitz_coupling_marginals(&f, &grid, &basis, hbar).unwrap();
        for j in 0..f.len() {
            assert!((trace[j] - f.value(j)).abs() < 1e-8 * f.value(j).max(1.0));
        }
        let t = toeplitz_quantize(&f, &grid, &basis, hbar).unwrap();
        for (a, b) in op.fibers.iter().zip(&t.fibers) {
            assert_eq!(a.weights, b.weights);
            for (u, v) in a.vectors.iter().zip(&b.vectors) {
                assert!(u.max_abs_diff(v) < 1e-9);
            }
        }
    }

    fn husimi_setup(hbar: f64) -> (FiberedDensity, CellGeometry, PhaseGrid) {
        let (lat, basis, geom) = setup(48);
        let grid = KGrid::uniform(&lat, 4).unwrap();
        let params = CoherentParams::new(&[0.0], &[0.0], hbar).unwrap();
        let r = FiberedDensity::coherent_family(&params, &grid, &basis).unwrap();
        let pgrid = PhaseGrid::symmetric(&lat, basis.points_per_axis(), 2.0, 401).unwrap();
        (r, geom, pgrid)
    }

    #[test]
    fn husimi_coupling_examples() {
        let hbar = 0.02;
        let (r0, geom, pgrid) = husimi_setup(hbar);
        for scale in [1.0, 0.7] {
            let r = r0.scaled(scale).unwrap();
            let e = coupling_energy_husimi(&r, &geom, &pgrid).unwrap();
            let bound = e.bound.unwrap();
            assert!(e.total <= bound * (1.0 + 1e-3), "{} vs {bound}", e.total);
            let s2 = scale * scale;
            assert!(e.total < 5.0 * hbar * s2 && e.total > 0.1 * hbar * s2);
            for (ik, psi) in r.rank_one_fields().unwrap().iter().enumerate() {
                let want = husimi_momentum_identity(psi, hbar);
                assert!((e.momentum[ik] - want).abs() < 1e-8, "{} vs {want}", e.momentum[ik]);
            }
        }
    }

    #[test]
    fn constant_fiber_has_no_momentum_spread() {
        let (_, basis, _) = setup(8);
        let mut u = PeriodicField::zeros(&basis);
        u.coeffs_mut()[basis.slot_of(&[0]).unwrap()] = C64::new(1.0, 0.0);
        assert_eq!(momentum_variance(&u, 0.05), 0.0);
        // Position part for the constant: ½∬|P(y−q)|² = 1/24 on the unit cell.
        assert!((fiber_spread(&u, 0.05) - 1.0 / 24.0).abs() < 1e-3);
    }

    #[test]
    fn husimi_coupling_rejects_higher_rank() {
        let hbar = 0.05;
        let (lat, basis, geom) = setup(32);
        let grid = KGrid::uniform(&lat, 2).unwrap();
        let r = toeplitz_quantize(&bump(), &grid, &basis, hbar).unwrap();
        let pgrid = PhaseGrid::symmetric(&lat, 16, 2.0, 11).unwrap();
        assert!(coupling_energy_husimi(&r, &geom, &pgrid).is_err());
    }

    fn stability(v: &TrigPotential, lambda: f64, hbar: f64) -> (StabilitySeries, f64) {
        let (lat, basis, geom) = setup(64);
        let grid = KGrid::uniform(&lat, 4).unwrap();
        let cost = CostParams::new(lambda, hbar, &geom).unwrap();
        let f = bump();
        let run = StabilityRun {
            potential: v,
            grid: &grid,
            basis: &basis,
            horizon: 1.0,
            samples: 20,
            dt: 1e-3,
            lip: None,
        };
        let s = stability_envelope(&f, &cost, &run).unwrap();
        let e0 = coupling_energy_toeplitz(&f, &cost, &grid, &basis).unwrap().total;
        (s, e0)
    }

    #[test]
    fn free_stability_envelope() {
        let lat = LatticeSpec::cubic(1);
        let (s, e0) = stability(&TrigPotential::zero(&lat), 1.0, 0.05);
        assert_eq!(s.rows[0].energy, e0);
        assert_eq!(s.lip, 0.0);
        assert!((s.eta - 2.0).abs() < 1e-12);
        assert!(s.worst_ratio() <= 1.0 + 1e-3, "{}", s.worst_ratio());
    }

    #[test]
    fn periodic_potential_stability_envelope() {
        let lat = LatticeSpec::cubic(1);
        let v = TrigPotential::new(&lat, &[(vec![1], 0.1, 0.0)]).unwrap();
        let lip = v.lip_grad();
        let (s, e0) = stability(&v, lip, 0.05);
        assert_eq!(s.rows[0].energy, e0);
        assert_eq!(s.rows.len(), 21);
        assert!(s.worst_ratio() <= 1.0 + 1e-3, "{}", s.worst_ratio());
    }
}
