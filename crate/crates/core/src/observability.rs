//! Observability constants and the end-to-end check of the Töplitz and
//! pure-state observability inequalities.

use std::sync::Arc;

use crate::basis::PlaneWaveBasis;
use crate::bloch::{fiber_average, KGrid};
use crate::classical::{gc_constant, GcEstimate, GcOptions, TrigPotential};
use crate::error::{domain, Result};
use crate::lattice::{gamma_bounds, CellGeometry, LatticeSpec};
use crate::par;
use crate::quantization::{husimi, region_mask, toeplitz_quantize, FiberedDensity, PhaseGrid, PhaseSpaceDensity};
use crate::quantum::{FiberHamiltonian, Propagator};
use crate::region::{PhaseSet, Region};
use crate::transport::fiber_spread;

const LOG_LAMBDA_RANGE: f64 = 8.0;
const LOG_LAMBDA_TOL: f64 = 1e-8;

fn check_horizon(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return domain(format!("horizon T must be positive, got {t}"));
    }
    Ok(())
}

fn check_lip(l: f64) -> Result<()> {
    if !(l >= 0.0) || !l.is_finite() {
        return domain(format!("Lipschitz bound must be nonnegative, got {l}"));
    }
    Ok(())
}

/// `expm1((2γ₊/γ₋)(λ + L²/λ)T)/(λ² + L²) · √((1+λ²)/2)`.
pub fn toeplitz_objective(geom: &CellGeometry, horizon: f64, lip: f64, lambda: f64) -> f64 {
    let a = 2.0 * geom.aspect();
    (a * (lambda + lip * lip / lambda) * horizon).exp_m1() / (lambda * lambda + lip * lip)
        * ((1.0 + lambda * lambda) / 2.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToeplitzConstant {
    pub value: f64,
    /// Minimising `λ`.
    pub lambda: f64,
}

/// `C_T = √(γ₋/2γ₊) · inf_λ toeplitz_objective(λ)`, by a coarse scan on
/// `log λ ∈ [−8, 8]` followed by golden-section refinement.
pub fn constant_toeplitz(geom: &CellGeometry, horizon: f64, lip: f64) -> Result<ToeplitzConstant> {
    check_horizon(horizon)?;
    check_lip(lip)?;
    let g = |s: f64| toeplitz_objective(geom, horizon, lip, s.exp());
    let n: usize = 320;
    let step = 2.0 * LOG_LAMBDA_RANGE / n as f64;
    let (ibest, _) = (0..=n)
        .map(|i| (i, g(-LOG_LAMBDA_RANGE + i as f64 * step)))
        .fold((0, f64::INFINITY), |(bi, bv), (i, v)| if v < bv { (i, v) } else { (bi, bv) });
    let mut lo = -LOG_LAMBDA_RANGE + ibest.saturating_sub(1) as f64 * step;
    let mut hi = -LOG_LAMBDA_RANGE + (ibest + 1).min(n) as f64 * step;
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    let (mut gc, mut gd) = (g(c), g(d));
    while hi - lo > LOG_LAMBDA_TOL {
        if gc <= gd {
            hi = d;
            d = c;
            gd = gc;
            c = hi - r * (hi - lo);
            gc = g(c);
        } else {
            lo = c;
            c = d;
            gc = gd;
            d = lo + r * (hi - lo);
            gd = g(d);
        }
    }
    let s = 0.5 * (lo + hi);
    Ok(ToeplitzConstant {
        value: (1.0 / (2.0 * geom.aspect())).sqrt() * g(s),
        lambda: s.exp(),
    })
}

/// `C_pure = √(γ₋/2γ₊) · expm1((2γ₊/γ₋)(1+L²)T)/(1+L²)`.
pub fn constant_pure(geom: &CellGeometry, horizon: f64, lip: f64) -> Result<f64> {
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return domain(format!("horizon T must be nonnegative, got {horizon}"));
    }
    check_lip(lip)?;
    let a = 2.0 * geom.aspect();
    let s = 1.0 + lip * lip;
    Ok((1.0 / a).sqrt() * (a * s * horizon).exp_m1() / s)
}

/// `Δ²_{Γ,ħ} = ⨍ [½∬|P(y−q)|²|u_k(y)|²|u_k(q)|² + ‖u_k‖²‖Pu_k‖² − |⟨u_k|Pu_k⟩|²] dk`.
pub fn std_dev_sqr(r: &FiberedDensity) -> Result<f64> {
    let psis = r.rank_one_fields()?;
    let per = par::map_slice(&psis, |u| fiber_spread(u, r.hbar));
    fiber_average(&per)
}

/// `Δ_{Γ,ħ}`.
pub fn std_dev(r: &FiberedDensity) -> Result<f64> {
    Ok(std_dev_sqr(r)?.max(0.0).sqrt())
}

/// `𝐜 = ⨍ ‖u_k‖⁴ dk`.
pub fn c_bold(r: &FiberedDensity) -> Result<f64> {
    let psis = r.rank_one_fields()?;
    let per: Vec<f64> = psis.iter().map(|u| u.norm_sqr().powi(2)).collect();
    fiber_average(&per)
}

/// `(δ²/d) · C_GC² / C_T²`; zero when `C_GC = 0`.
pub fn hbar_threshold(delta: f64, dim: usize, c_gc: f64, c_t: f64) -> Result<f64> {
    if !(delta > 0.0) || dim == 0 || !(c_gc >= 0.0) || !(c_t > 0.0) {
        return domain("threshold needs δ > 0, d ≥ 1, C_GC ≥ 0 and C_T > 0");
    }
    Ok(delta * delta / dim as f64 * (c_gc * c_gc) / (c_t * c_t))
}

/// Everything needed to evaluate both sides of an observability inequality.
#[derive(Debug, Clone)]
pub struct ObservabilityScenario {
    pub lattice: LatticeSpec,
    pub potential: TrigPotential,
    pub hbar: f64,
    pub horizon: f64,
    pub k_set: PhaseSet,
    pub omega: Region,
    pub delta: f64,
    /// Plane-wave truncation `M`.
    pub m: usize,
    /// Monkhorst-Pack counts per reciprocal axis.
    pub k_counts: Vec<usize>,
    /// Trapezoid intervals for the time integral.
    pub time_steps: usize,
    /// Upper bound on the splitting step.
    pub dt: f64,
    pub gc: GcOptions,
    /// `ε = budget_scale · |classical term|`.
    pub budget_scale: f64,
    /// `Lip(∇V)`; computed from the potential when `None`.
    pub lip: Option<f64>,
}

impl ObservabilityScenario {
    pub fn validate(&self) -> Result<()> {
        check_horizon(self.horizon)?;
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return domain(format!("δ must be positive, got {}", self.delta));
        }
        if !(self.hbar > 0.0) {
            return domain("hbar must be positive");
        }
        if self.k_set.boxes.is_empty() {
            return domain("K must contain at least one box");
        }
        if self.time_steps == 0 {
            return domain("time grid needs at least one step");
        }
        if !(self.budget_scale >= 0.0) {
            return domain("error budget scale must be nonnegative");
        }
        let d = self.lattice.dim();
        if self.potential.dim() != d || self.k_counts.len() != d || self.k_set.boxes.iter().any(|b| b.dim() != d) {
            return domain("scenario components have mismatched dimensions");
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<CellGeometry> {
        gamma_bounds(&self.lattice)
    }

    pub fn basis(&self) -> Result<Arc<PlaneWaveBasis>> {
        PlaneWaveBasis::new(&self.lattice, self.m)
    }

    pub fn k_grid(&self) -> Result<KGrid> {
        KGrid::monkhorst_pack(&self.lattice, &self.k_counts)
    }

    pub fn lip(&self) -> f64 {
        self.lip.unwrap_or_else(|| self.potential.lip_grad())
    }

    /// `Ω` dilated by `δ`, periodised.
    pub fn observed_region(&self) -> Result<Region> {
        if self.omega.is_full() {
            return Ok(self.omega.clone());
        }
        self.omega.dilated(self.delta)
    }
}

/// `∫₀^T observe(R(t), Ω_δ) dt` with its sampled integrand.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedIntegral {
    pub times: Vec<f64>,
    pub observed: Vec<f64>,
    pub value: f64,
    /// `|I_h − I_{2h}|/3`, or zero when the step count is odd.
    pub error: f64,
}

fn trapezoid(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    h * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1]))
}

/// Evolve `r` incrementally and integrate its mass on the observed region.
pub fn observed_integral(r: &FiberedDensity, sc: &ObservabilityScenario) -> Result<ObservedIntegral> {
    sc.validate()?;
    let region = sc.observed_region()?;
    let mask = region_mask(&r.basis, &region);
    let n = sc.time_steps;
    let interval = sc.horizon / n as f64;
    let sub = ((interval / sc.dt).ceil() as usize).max(1);
    let h = interval / sub as f64;
    let nk = r.grid.len();
    let props: Result<Vec<Propagator>> = (0..nk)
        .map(|ik| Propagator::new(&FiberHamiltonian::new(&r.basis, r.grid.point(ik), r.hbar, &sc.potential)?, h))
        .collect();
    let props = props?;
    let pairs: Vec<(usize, usize)> = r
        .fibers
        .iter()
        .enumerate()
        .flat_map(|(ik, f)| (0..f.rank()).map(move |m| (ik, m)))
        .collect();
    let wq = r.basis.quadrature_weight();
    let series = par::map_slice(&pairs, |&(ik, m)| {
        let mut v = r.fibers[ik].vectors[m].clone();
        let mut out = Vec::with_capacity(n + 1);
        for i in 0..=n {
            if i > 0 {
                props[ik].advance(&mut v, sub);
            }
            let g = v.to_grid();
            out.push(wq * g.iter().zip(&mask).fold(0.0, |a, (c, w)| a + w * c.norm_sqr()));
        }
        out
    });
    let mut observed = vec![0.0; n + 1];
    for (i, o) in observed.iter_mut().enumerate() {
        let mut per_fiber = vec![0.0; nk];
        for (p, &(ik, m)) in pairs.iter().enumerate() {
            per_fiber[ik] += r.fibers[ik].weights[m] * series[p][i];
        }
        *o = fiber_average(&per_fiber)?;
    }
    let value = trapezoid(&observed, interval);
    let error = if n.is_multiple_of(2) && n >= 2 {
        let coarse: Vec<f64> = observed.iter().step_by(2).cloned().collect();
        (value - trapezoid(&coarse, 2.0 * interval)).abs() / 3.0
    } else {
        0.0
    };
    Ok(ObservedIntegral {
        times: (0..=n).map(|i| i as f64 * interval).collect(),
        observed,
        value,
        error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TheoremCase {
    Toeplitz,
    Pure,
}

/// Both sides of an observability inequality and every constant involved.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoremReport {
    pub case: TheoremCase,
    pub lhs: f64,
    pub lhs_error: f64,
    pub c_gc: f64,
    pub gc_violated: bool,
    pub mass_k: f64,
    pub classical_term: f64,
    /// `C · √(…)/δ` with the printed constant.
    pub penalty: f64,
    /// `√(2γ₊/γ₋)·(1/(δλ))·((e^{ηT}−1)/η)·√(E-bound)`, assembled step by step.
    pub penalty_assembled: f64,
    pub rhs: f64,
    pub margin: f64,
    pub epsilon: f64,
    /// `C_T` or `C_pure`.
    pub constant: f64,
    pub lambda: f64,
    pub eta: f64,
    pub eta_half: f64,
    pub lip: f64,
    /// Squared coupling-energy bound under the square root.
    pub energy_bound: f64,
    pub std_dev: Option<f64>,
    pub c_bold: Option<f64>,
    pub hbar_threshold: f64,
    pub warnings: Vec<String>,
}

impl TheoremReport {
    pub fn passed(&self) -> bool {
        self.margin >= -self.epsilon
    }

    /// `(name, value)` pairs in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![
            ("lhs", self.lhs),
            ("lhs_error", self.lhs_error),
            ("c_gc", self.c_gc),
            ("mass_k", self.mass_k),
            ("classical_term", self.classical_term),
            ("penalty", self.penalty),
            ("penalty_assembled", self.penalty_assembled),
            ("rhs", self.rhs),
            ("margin", self.margin),
            ("epsilon", self.epsilon),
            ("constant", self.constant),
            ("lambda", self.lambda),
            ("eta", self.eta),
            ("eta_half", self.eta_half),
            ("lip", self.lip),
            ("energy_bound", self.energy_bound),
            ("hbar_threshold", self.hbar_threshold),
        ];
        if let Some(s) = self.std_dev {
            v.push(("std_dev", s));
        }
        if let Some(c) = self.c_bold {
            v.push(("c_bold", c));
        }
        v
    }
}

struct Shared {
    lhs: ObservedIntegral,
    gc: GcEstimate,
    geom: CellGeometry,
    lip: f64,
}

fn shared(r: &FiberedDensity, sc: &ObservabilityScenario) -> Result<Shared> {
    let lhs = observed_integral(r, sc)?;
    let gc = gc_constant(sc.horizon, &sc.k_set, &sc.omega, &sc.potential, &sc.gc)?;
    Ok(Shared {
        lhs,
        gc,
        geom: sc.geometry()?,
        lip: sc.lip(),
    })
}

struct Penalty {
    constant: f64,
    lambda: f64,
    /// The square root multiplying the printed constant.
    root: f64,
    /// Squared coupling-energy bound used in the step-by-step assembly.
    energy_bound: f64,
}

fn assemble(case: TheoremCase, sc: &ObservabilityScenario, s: Shared, mass_k: f64, pen: Penalty) -> Result<TheoremReport> {
    let a = 2.0 * s.geom.aspect();
    let lambda = pen.lambda;
    let eta = a * (lambda + s.lip * s.lip / lambda);
    let penalty = pen.constant * pen.root / sc.delta;
    let penalty_assembled =
        a.sqrt() / (sc.delta * lambda) * ((eta * sc.horizon).exp_m1() / eta) * pen.energy_bound.max(0.0).sqrt();
    let classical_term = s.gc.value * mass_k;
    let rhs = classical_term - penalty;
    let margin = s.lhs.value - rhs;
    let d = sc.lattice.dim();
    let threshold = if pen.constant > 0.0 {
        hbar_threshold(sc.delta, d, s.gc.value, pen.constant)?
    } else {
        0.0
    };
    let mut warnings = Vec::new();
    if sc.hbar > threshold {
        warnings.push(format!(
            "hbar={} exceeds the threshold {threshold:.3e}; the right-hand side is not positive",
            sc.hbar
        ));
    }
    if s.gc.violated {
        warnings.push("geometric control fails at the sampled resolution (C_GC = 0)".to_string());
    }
    Ok(TheoremReport {
        case,
        lhs: s.lhs.value,
        lhs_error: s.lhs.error,
        c_gc: s.gc.value,
        gc_violated: s.gc.violated,
        mass_k,
        classical_term,
        penalty,
        penalty_assembled,
        rhs,
        margin,
        epsilon: sc.budget_scale * classical_term.abs(),
        constant: pen.constant,
        lambda,
        eta,
        eta_half: 0.5 * eta,
        lip: s.lip,
        energy_bound: pen.energy_bound,
        std_dev: None,
        c_bold: None,
        hbar_threshold: threshold,
        warnings,
    })
}

/// Töplitz case: `R^in = T[f]`.
pub fn verify_toeplitz_theorem(f: &PhaseSpaceDensity, sc: &ObservabilityScenario) -> Result<TheoremReport> {
    sc.validate()?;
    let basis = sc.basis()?;
    let grid = sc.k_grid()?;
    let r = toeplitz_quantize(f, &grid, &basis, sc.hbar)?;
    let s = shared(&r, sc)?;
    let ct = constant_toeplitz(&s.geom, sc.horizon, s.lip)?;
    let d = sc.lattice.dim() as f64;
    let mass_k = f.mass_on(&sc.k_set, &sc.lattice);
    let lam = ct.lambda;
    let pen = Penalty {
        constant: ct.value,
        lambda: lam,
        root: (d * sc.hbar).sqrt(),
        energy_bound: (1.0 + lam * lam) * d * sc.hbar / 2.0,
    };
    assemble(TheoremCase::Toeplitz, sc, s, mass_k, pen)
}

/// Phase grid over the momentum bounding box of `K` with spacing `≤ √ħ/8`.
fn husimi_grid(sc: &ObservabilityScenario, basis: &PlaneWaveBasis) -> Result<PhaseGrid> {
    let d = sc.lattice.dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for b in &sc.k_set.boxes {
        for j in 0..d {
            lo[j] = lo[j].min(b.p_lo[j]);
            hi[j] = hi[j].max(b.p_hi[j]);
        }
    }
    let spacing = sc.hbar.sqrt() / 8.0;
    let mut np = 2;
    for j in 0..d {
        if hi[j] <= lo[j] {
            hi[j] = lo[j] + spacing;
        }
        np = np.max(((hi[j] - lo[j]) / spacing).ceil() as usize + 1);
    }
    PhaseGrid::new(&sc.lattice, basis.points_per_axis(), &lo, &hi, np)
}

/// Pure-state case: rank-one fibers `u_k`.
pub fn verify_pure_theorem(r: &FiberedDensity, sc: &ObservabilityScenario) -> Result<TheoremReport> {
    sc.validate()?;
    r.rank_one_vectors()?;
    let s = shared(r, sc)?;
    let cp = constant_pure(&s.geom, sc.horizon, s.lip)?;
    let delta2 = std_dev_sqr(r)?;
    let cb = c_bold(r)?;
    let d = sc.lattice.dim() as f64;
    let pgrid = husimi_grid(sc, &r.basis)?;
    let mass_k = husimi(r, &pgrid)?.mass_on(&sc.k_set, &sc.lattice);
    let bound = d * sc.hbar * cb + 2.0 * delta2;
    let pen = Penalty {
        constant: cp,
        lambda: 1.0,
        root: bound.max(0.0).sqrt(),
        energy_bound: bound,
    };
    let mut rep = assemble(TheoremCase::Pure, sc, s, mass_k, pen)?;
    rep.std_dev = Some(delta2.max(0.0).sqrt());
    rep.c_bold = Some(cb);
    Ok(rep)
}
