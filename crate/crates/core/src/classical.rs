//! Hamiltonian flows for `H(x, ξ) = |ξ|²/2 + V(x)` with a lattice-periodic
//! trigonometric potential, Liouville transport and the geometric-control
//! constant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{domain, Result};
use crate::lattice::{dot, project_to_cell, LatticeSpec};
use crate::par;
use crate::quantization::PhaseSpaceDensity;
use crate::region::{PhaseSet, Region};

/// One cosine mode `c cos(G·x + φ)` with `G = Σ n_j b_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrigTerm {
    pub n: Vec<i64>,
    pub g: Vec<f64>,
    pub amplitude: f64,
    pub phase: f64,
}

/// `V(x) = Σ c_G cos(G·x + φ_G)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrigPotential {
    lattice: LatticeSpec,
    terms: Vec<TrigTerm>,
}

impl TrigPotential {
    /// Terms given as `(n, amplitude, phase)`.
    pub fn new(lattice: &LatticeSpec, terms: &[(Vec<i64>, f64, f64)]) -> Result<Self> {
        let d = lattice.dim();
        let mut out = Vec::with_capacity(terms.len());
        for (n, c, phi) in terms {
            if n.len() != d {
                return domain(format!("potential mode {n:?} has wrong dimension"));
            }
            if !c.is_finite() || !phi.is_finite() {
                return domain("potential amplitude and phase must be finite");
            }
            out.push(TrigTerm {
                n: n.clone(),
                g: lattice.reciprocal_vector(n),
                amplitude: *c,
                phase: *phi,
            });
        }
        Ok(Self {
            lattice: lattice.clone(),
            terms: out,
        })
    }

    pub fn zero(lattice: &LatticeSpec) -> Self {
        Self {
            lattice: lattice.clone(),
            terms: Vec::new(),
        }
    }

    pub fn lattice(&self) -> &LatticeSpec {
        &self.lattice
    }

    pub fn terms(&self) -> &[TrigTerm] {
        &self.terms
    }

    pub fn dim(&self) -> usize {
        self.lattice.dim()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.amplitude == 0.0)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| t.amplitude * (dot(&t.g, x) + t.phase).cos())
            .sum()
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        self.grad_into(x, &mut g);
        g
    }

    fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for t in &self.terms {
            let s = -t.amplitude * (dot(&t.g, x) + t.phase).sin();
            for (o, gj) in out.iter_mut().zip(&t.g) {
                *o += s * gj;
            }
        }
    }

    /// Row-major Hessian.
    pub fn hessian(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut h = vec![0.0; d * d];
        for t in &self.terms {
            let c = -t.amplitude * (dot(&t.g, x) + t.phase).cos();
            for i in 0..d {
                for j in 0..d {
                    h[i * d + j] += c * t.g[i] * t.g[j];
                }
            }
        }
        h
    }

    /// `Σ |c_G| |G|²`.
    pub fn lip_grad_analytic(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| t.amplitude.abs() * dot(&t.g, &t.g))
            .sum()
    }

    /// Largest Hessian spectral norm over a grid of `n` points per axis in
    /// the cell, inflated by `1e-3` to cover the gaps between nodes.
    pub fn lip_grad_sampled(&self, n: usize) -> f64 {
        let d = self.dim();
        let total = n.pow(d as u32);
        let norms = par::map_range(total, |flat| {
            let mut rem = flat;
            let mut t = vec![0.0; d];
            for j in (0..d).rev() {
                t[j] = (rem % n) as f64 / n as f64 - 0.5;
                rem /= n;
            }
            let x = self.lattice.from_lattice_coords(&t);
            let h = nalgebra::DMatrix::from_row_slice(d, d, &self.hessian(&x));
            let e = nalgebra::SymmetricEigen::new(h);
            e.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()))
        });
        norms.iter().fold(0.0f64, |m, &v| m.max(v)) * (1.0 + 1e-3)
    }

    /// `Lip(∇V)` as the smaller of the analytic and sampled bounds.
    pub fn lip_grad(&self) -> f64 {
        let n = if self.dim() == 1 { 1024 } else { 64 };
        self.lip_grad_analytic().min(self.lip_grad_sampled(n))
    }

    /// Largest `|n_j|` over all modes.
    pub fn bandwidth(&self) -> i64 {
        self.terms
            .iter()
            .flat_map(|t| t.n.iter().map(|v| v.abs()))
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
}

impl PhasePoint {
    pub fn new(x: &[f64], xi: &[f64]) -> Self {
        Self {
            x: x.to_vec(),
            xi: xi.to_vec(),
        }
    }
}

/// `|ξ|²/2 + V(x)`.
pub fn energy(z: &PhasePoint, v: &TrigPotential) -> f64 {
    0.5 * dot(&z.xi, &z.xi) + v.value(&z.x)
}

fn steps_for(t: f64, dt: f64) -> Result<(usize, f64)> {
    if !(dt > 0.0) || !dt.is_finite() {
        return domain(format!("time step must be positive, got {dt}"));
    }
    if !t.is_finite() {
        return domain("integration time must be finite");
    }
    if t == 0.0 {
        return Ok((0, 0.0));
    }
    let n = (t.abs() / dt).ceil() as usize;
    Ok((n, t / n as f64))
}

/// Velocity Verlet for `Ẋ = Ξ + shift`, `Ξ̇ = -∇V(X)`.
fn verlet(z: &PhasePoint, v: &TrigPotential, shift: &[f64], n: usize, h: f64) -> PhasePoint {
    let mut x = z.x.clone();
    let mut xi = z.xi.clone();
    if v.is_zero() {
        for j in 0..x.len() {
            x[j] += n as f64 * h * (xi[j] + shift[j]);
        }
        return PhasePoint { x, xi };
    }
    let mut g = v.grad(&x);
    for _ in 0..n {
        for j in 0..x.len() {
            xi[j] -= 0.5 * h * g[j];
            x[j] += h * (xi[j] + shift[j]);
        }
        v.grad_into(&x, &mut g);
        for j in 0..x.len() {
            xi[j] -= 0.5 * h * g[j];
        }
    }
    PhasePoint { x, xi }
}

/// Störmer-Verlet approximation of `Φ_t(z)`; negative `t` runs backwards.
pub fn flow(z: &PhasePoint, t: f64, v: &TrigPotential, dt: f64) -> Result<PhasePoint> {
    let (n, h) = steps_for(t, dt)?;
    Ok(verlet(z, v, &vec![0.0; z.x.len()], n, h))
}

/// `Φ_{k,t}(x, ξ) = Φ_t(x, ξ + ħk) - (0, ħk)`.
pub fn k_flow(z: &PhasePoint, k: &[f64], hbar: f64, t: f64, v: &TrigPotential, dt: f64) -> Result<PhasePoint> {
    let shifted = PhasePoint {
        x: z.x.clone(),
        xi: z.xi.iter().zip(k).map(|(a, b)| a + hbar * b).collect(),
    };
    let mut out = flow(&shifted, t, v, dt)?;
    out.xi.iter_mut().zip(k).for_each(|(a, b)| *a -= hbar * b);
    Ok(out)
}

/// The k-flow integrated directly from `Ẋ = Ξ + ħk`, `Ξ̇ = -∇V(X)`.
pub fn k_flow_direct(z: &PhasePoint, k: &[f64], hbar: f64, t: f64, v: &TrigPotential, dt: f64) -> Result<PhasePoint> {
    let (n, h) = steps_for(t, dt)?;
    let shift: Vec<f64> = k.iter().map(|b| hbar * b).collect();
    Ok(verlet(z, v, &shift, n, h))
}

/// Push every node forward by `Φ_t`; weights and values are untouched.
pub fn transport_density(f: &PhaseSpaceDensity, t: f64, v: &TrigPotential, dt: f64) -> Result<PhaseSpaceDensity> {
    steps_for(t, dt)?;
    let d = f.dim();
    let moved: Result<Vec<PhasePoint>> =
        par::map_range(f.len(), |j| flow(&PhasePoint::new(f.q(j), f.p(j)), t, v, dt))
            .into_iter()
            .collect();
    let moved = moved?;
    let mut q = Vec::with_capacity(f.len() * d);
    let mut p = Vec::with_capacity(f.len() * d);
    for z in moved {
        q.extend(z.x);
        p.extend(z.xi);
    }
    f.with_positions(q, p)
}

/// Sampling controls for [`gc_constant`].
#[derive(Debug, Clone, PartialEq)]
pub struct GcOptions {
    /// Tensor-grid nodes per phase-space axis of each box of `K`.
    pub grid_per_axis: usize,
    /// Additional quasi-random points per box.
    pub quasi_random: usize,
    /// Uniform time steps over `[0, T]` for the trapezoid rule.
    pub time_steps: usize,
    /// Integrator step (substeps are used when `T/time_steps` exceeds it).
    pub dt: f64,
    /// Seed for the Cranley-Patterson shift of the Halton points.
    pub seed: u64,
}

impl Default for GcOptions {
    fn default() -> Self {
        Self {
            grid_per_axis: 32,
            quasi_random: 1000,
            time_steps: 2000,
            dt: 1e-3,
            seed: 0,
        }
    }
}

/// Estimate of `C_GC[T, K, Ω]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcEstimate {
    pub value: f64,
    /// No sampled trajectory met the region at any time node.
    pub violated: bool,
    pub samples: usize,
    pub time_steps: usize,
    /// Sample attaining the minimum.
    pub argmin: PhasePoint,
}

const PRIMES: [u32; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

fn radical_inverse(mut i: u64, base: u32) -> f64 {
    let b = base as f64;
    let mut inv = 1.0 / b;
    let mut out = 0.0;
    while i > 0 {
        out += (i % base as u64) as f64 * inv;
        i /= base as u64;
        inv /= b;
    }
    out
}

/// Time spent in `Ω + 𝓛` by the trajectory from `z`, trapezoid rule.
pub fn time_in_region(z: &PhasePoint, horizon: f64, omega: &Region, v: &TrigPotential, opts: &GcOptions) -> f64 {
    let n = opts.time_steps;
    let h = horizon / n as f64;
    let sub = ((h / opts.dt).ceil() as usize).max(1);
    let hs = h / sub as f64;
    let zero = vec![0.0; z.x.len()];
    let mut cur = z.clone();
    let mut acc = 0.0;
    for i in 0..=n {
        if i > 0 {
            cur = verlet(&cur, v, &zero, sub, hs);
        }
        if omega.contains(&cur.x) {
            acc += if i == 0 || i == n { 0.5 } else { 1.0 };
        }
    }
    acc * h
}

/// Minimum over samples of `K` of the time spent in `Ω` on `[0, T]`.
pub fn gc_constant(horizon: f64, k: &PhaseSet, omega: &Region, v: &TrigPotential, opts: &GcOptions) -> Result<GcEstimate> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return domain(format!("horizon T must be positive, got {horizon}"));
    }
    if opts.time_steps == 0 {
        return domain("GC time grid needs at least one step");
    }
    let lat = v.lattice();
    let d = lat.dim();
    let mut samples: Vec<PhasePoint> = Vec::new();
    let axes = 2 * d;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for bx in &k.boxes {
        let n = opts.grid_per_axis;
        if n > 0 {
            let total = n.pow(axes as u32);
            for flat in 0..total {
                let mut rem = flat;
                let mut u = vec![0.0; axes];
                for a in (0..axes).rev() {
                    u[a] = if n == 1 { 0.5 } else { (rem % n) as f64 / (n - 1) as f64 };
                    rem /= n;
                }
                let (q, p) = bx.point_at(&u, lat);
                samples.push(PhasePoint { x: q, xi: p });
            }
        }
        let shift: Vec<f64> = (0..axes).map(|_| rng.gen::<f64>()).collect();
        for i in 0..opts.quasi_random {
            let u: Vec<f64> = (0..axes)
                .map(|a| (radical_inverse(i as u64 + 1, PRIMES[a % PRIMES.len()]) + shift[a]).fract())
                .collect();
            let (q, p) = bx.point_at(&u, lat);
            samples.push(PhasePoint { x: q, xi: p });
        }
    }
    if samples.is_empty() {
        return domain("geometric control estimate needs a nonempty sample of K");
    }
    let times = par::map_slice(&samples, |z| time_in_region(z, horizon, omega, v, opts));
    let (imin, vmin) = times
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &t)| if t < bv { (i, t) } else { (bi, bv) });
    Ok(GcEstimate {
        value: vmin,
        violated: vmin <= 0.0,
        samples: samples.len(),
        time_steps: opts.time_steps,
        argmin: samples[imin].clone(),
    })
}

/// `P_Γ`-reduced copy of a phase point.
pub fn reduce(z: &PhasePoint, lat: &LatticeSpec) -> Result<PhasePoint> {
    let (x, _) = project_to_cell(&z.x, lat)?;
    Ok(PhasePoint { x, xi: z.xi.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::{CellBox, PhaseBox};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn standard_v() -> TrigPotential {
        TrigPotential::new(&LatticeSpec::cubic(1), &[(vec![1], 0.1, 0.0)]).unwrap()
    }

    /// Dormand-Prince 5(4) with absolute+relative error control.
    fn rk45(z: &PhasePoint, t_end: f64, v: &TrigPotential, tol: f64) -> PhasePoint {
        let d = z.x.len();
        let rhs = |y: &[f64]| -> Vec<f64> {
            let g = v.grad(&y[..d]);
            let mut out = y[d..].to_vec();
            out.extend(g.iter().map(|a| -a));
            out
        };
        const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
        const A: [[f64; 6]; 7] = [
            [0.0; 6],
            [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
            [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
            [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
            [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
            [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
            [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
        ];
        const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
        const B4: [f64; 7] = [
            5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0,
        ];
        let _ = C;
        let mut y: Vec<f64> = z.x.iter().chain(&z.xi).cloned().collect();
        let mut t = 0.0;
        let mut h = 1e-3;
        while t < t_end {
            if t + h > t_end {
                h = t_end - t;
            }
            let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
            for s in 0..7 {
                let ys: Vec<f64> = (0..y.len())
                    .map(|i| y[i] + h * (0..s).map(|j| A[s][j] * k[j][i]).sum::<f64>())
                    .collect();
                k.push(rhs(&ys));
            }
            let y5: Vec<f64> = (0..y.len()).map(|i| y[i] + h * (0..7).map(|j| B5[j] * k[j][i]).sum::<f64>()).collect();
            let y4: Vec<f64> = (0..y.len()).map(|i| y[i] + h * (0..7).map(|j| B4[j] * k[j][i]).sum::<f64>()).collect();
            let err = (0..y.len())
                .map(|i| (y5[i] - y4[i]).abs() / (tol + tol * y[i].abs()))
                .fold(0.0f64, f64::max);
            if err <= 1.0 {
                t += h;
                y = y5;
            }
            h *= (0.9 * err.max(1e-10).powf(-0.2)).clamp(0.2, 5.0);
        }
        PhasePoint::new(&y[..d], &y[d..])
    }

    #[test]
    fn free_flow_is_exact() {
        let v = TrigPotential::zero(&LatticeSpec::cubic(2));
        let z = PhasePoint::new(&[0.1, -0.2], &[0.7, 1.3]);
        let out = flow(&z, 2.5, &v, 1e-3).unwrap();
        assert!((out.x[0] - (0.1 + 2.5 * 0.7)).abs() < 1e-13);
        assert!((out.x[1] - (-0.2 + 2.5 * 1.3)).abs() < 1e-13);
        assert_eq!(out.xi, z.xi);
    }

    #[test]
    fn verlet_matches_adaptive_oracle() {
        let v = standard_v();
        let z = PhasePoint::new(&[0.0], &[0.7]);
        let a = flow(&z, 1.0, &v, 1e-3).unwrap();
        let b = rk45(&z, 1.0, &v, 1e-12);
        assert!((a.x[0] - b.x[0]).abs() < 1e-6 && (a.xi[0] - b.xi[0]).abs() < 1e-6);
    }

    #[test]
    fn reversibility() {
        let v = standard_v();
        let z = PhasePoint::new(&[0.3], &[-0.4]);
        let fwd = flow(&z, 1.0, &v, 1e-3).unwrap();
        let back = flow(&fwd, -1.0, &v, 1e-3).unwrap();
        assert!((back.x[0] - z.x[0]).abs() < 1e-9 && (back.xi[0] - z.xi[0]).abs() < 1e-9);
    }

    #[test]
    fn energy_drift_scales_with_dt_squared() {
        // Golden constant: max |ΔH| / dt² over t ≤ 10 stays below 0.5.
        let v = standard_v();
        let z = PhasePoint::new(&[0.1], &[0.5]);
        let e0 = energy(&z, &v);
        for dt in [1e-2, 5e-3] {
            let mut cur = z.clone();
            let mut worst = 0.0f64;
            for _ in 0..100 {
                cur = flow(&cur, 0.1, &v, dt).unwrap();
                worst = worst.max((energy(&cur, &v) - e0).abs());
            }
            assert!(worst / (dt * dt) < 0.5, "dt={dt}: {}", worst / (dt * dt));
        }
    }

    #[test]
    fn k_flow_examples() {
        let v = standard_v();
        let z = PhasePoint::new(&[0.2], &[0.4]);
        let a = k_flow(&z, &[0.0], 0.1, 0.8, &v, 1e-3).unwrap();
        let b = flow(&z, 0.8, &v, 1e-3).unwrap();
        assert_eq!(a, b);
        let free = TrigPotential::zero(&LatticeSpec::cubic(1));
        let c = k_flow(&z, &[2.0], 0.1, 0.8, &free, 1e-3).unwrap();
        assert!((c.x[0] - (0.2 + 0.8 * (0.4 + 0.2))).abs() < 1e-14);
        assert!((c.xi[0] - 0.4).abs() < 1e-14);
        for k in [-3.0, 1.7] {
            let s = k_flow(&z, &[k], 0.1, 1.0, &v, 1e-3).unwrap();
            let dd = k_flow_direct(&z, &[k], 0.1, 1.0, &v, 1e-3).unwrap();
            assert!((s.x[0] - dd.x[0]).abs() < 1e-9 && (s.xi[0] - dd.xi[0]).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn pseudo_periodicity(x in -1.0f64..1.0, xi in -2.0f64..2.0, l in -3i64..3) {
            let v = standard_v();
            let a = flow(&PhasePoint::new(&[x], &[xi]), 0.7, &v, 1e-3).unwrap();
            let b = flow(&PhasePoint::new(&[x + l as f64], &[xi]), 0.7, &v, 1e-3).unwrap();
            prop_assert!((b.x[0] - a.x[0] - l as f64).abs() < 1e-10);
            prop_assert!((b.xi[0] - a.xi[0]).abs() < 1e-10);
        }

        #[test]
        fn observation_integrand_is_shift_invariant(x in -0.5f64..0.5, xi in 0.5f64..2.0, l in -3i64..3) {
            let lat = LatticeSpec::cubic(1);
            let v = standard_v();
            let omega = Region::new(&lat, vec![CellBox::new(&[-0.1], &[0.1]).unwrap()]).unwrap();
            let opts = GcOptions { time_steps: 200, ..GcOptions::default() };
            let a = time_in_region(&PhasePoint::new(&[x], &[xi]), 1.0, &omega, &v, &opts);
            let b = time_in_region(&PhasePoint::new(&[x + l as f64], &[xi]), 1.0, &omega, &v, &opts);
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transport_examples() {
        let v = standard_v();
        let f = PhaseSpaceDensity::gaussian_bump(&[0.0], &[0.5], 0.1, 0.2, 9).unwrap();
        let same = transport_density(&f, 0.0, &v, 1e-3).unwrap();
        assert_eq!(same, f);
        let moved = transport_density(&f, 1.0, &v, 1e-3).unwrap();
        assert!((moved.mass() - f.mass()).abs() < 1e-10);
    }

    #[test]
    fn change_of_variable_for_periodic_integrands() {
        // ∬_{Γ×R} g(x,ξ) dx dξ = ∬ g(Φ_t(x,ξ)) dx dξ for g periodic in x.
        let v = standard_v();
        let n = 200;
        let pm = 3.0;
        let integrands: Vec<Box<dyn Fn(f64, f64) -> f64>> = vec![
            Box::new(|_x, p| (-p * p).exp()),
            Box::new(|x, p| (1.0 + 0.5 * (2.0 * PI * x).cos()) * (-p * p).exp()),
            Box::new(|x, p| (2.0 * PI * x).sin().powi(2) * (-(p - 0.3).powi(2) * 2.0).exp()),
            Box::new(|x, p| (1.0 + (4.0 * PI * x + 0.2).cos()) * p * p * (-p * p).exp()),
            Box::new(|x, p| ((2.0 * PI * x).cos() + 1.2).ln() * (-(p * p) / 0.5).exp()),
        ];
        for g in &integrands {
            let mut base = 0.0;
            let mut pushed = 0.0;
            for i in 0..n {
                let x = -0.5 + (i as f64 + 0.5) / n as f64;
                for j in 0..4 * n {
                    let p = -pm + (j as f64 + 0.5) * 2.0 * pm / (4 * n) as f64;
                    let w = (1.0 / n as f64) * (2.0 * pm / (4 * n) as f64);
                    base += w * g(x, p);
                    let z = flow(&PhasePoint::new(&[x], &[p]), 0.5, &v, 1e-2).unwrap();
                    pushed += w * g(z.x[0], z.xi[0]);
                }
            }
            assert!((base - pushed).abs() < 1e-4, "{base} vs {pushed}");
        }
    }

    #[test]
    fn lipschitz_bounds() {
        let v = standard_v();
        let analytic = 0.1 * (2.0 * PI).powi(2);
        assert!((v.lip_grad_analytic() - analytic).abs() < 1e-12);
        assert!(v.lip_grad() <= analytic + 1e-12);
        assert!(v.lip_grad() >= analytic * (1.0 - 1e-4));
        let v2 = TrigPotential::new(&LatticeSpec::cubic(2), &[(vec![1, 0], 0.1, 0.0), (vec![0, 1], 0.1, 0.3)]).unwrap();
        assert!(v2.lip_grad() <= v2.lip_grad_analytic() + 1e-12);
    }

    #[test]
    fn gc_constant_examples() {
        let lat = LatticeSpec::cubic(1);
        let free = TrigPotential::zero(&lat);
        let omega = Region::new(&lat, vec![CellBox::new(&[-0.1], &[0.1]).unwrap()]).unwrap();
        let k = PhaseSet {
            boxes: vec![PhaseBox::new(None, &[1.0], &[2.0]).unwrap()],
        };
        let opts = GcOptions::default();
        let est = gc_constant(1.0, &k, &omega, &free, &opts).unwrap();
        // Slowest-case traversal: speed 1.8 crossing exactly one window, 0.2/1.8.
        assert!(est.value >= 0.1 - 2e-3 && est.value <= 1.0 / 9.0 + 2e-3, "{}", est.value);
        assert!(!est.violated);
        let full = gc_constant(1.0, &k, &Region::full(&lat), &free, &opts).unwrap();
        assert!((full.value - 1.0).abs() < 1e-12);
        let still = PhaseSet {
            boxes: vec![PhaseBox::new(Some((vec![0.3], vec![0.3])), &[0.0], &[0.0]).unwrap()],
        };
        let stuck = gc_constant(1.0, &still, &omega, &free, &opts).unwrap();
        assert_eq!(stuck.value, 0.0);
        assert!(stuck.violated);
        assert!(gc_constant(1.0, &PhaseSet { boxes: vec![] }, &omega, &free, &opts).is_err());
    }
}
