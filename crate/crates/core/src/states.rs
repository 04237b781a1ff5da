//! Coherent states and their lattice periodisations.
//!
//! `|q,p⟩(y) = (πħ)^{-d/4} e^{-|y-q|²/2ħ} e^{ip·y/ħ}` and
//! `percoh(q,p)(y) = Σ_ℓ |q,p⟩(y + ℓ)`. By Poisson summation the plane-wave
//! coefficients of the periodisation are
//!
//! `⟨e_G | percoh(q,p)⟩ = |Γ|^{-1/2} (πħ)^{-d/4} (2πħ)^{d/2}
//!     e^{-|p - ħG|²/2ħ} e^{i(p/ħ - G)·q}`.
//!
//! Shifting `q` by a lattice vector multiplies the periodised state by the
//! unimodular factor `e^{ip·ℓ/ħ}`, so its projector is exactly periodic in `q`.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::basis::{PeriodicField, PlaneWaveBasis, C64};
use crate::error::{accuracy, domain, Result};
use crate::lattice::LatticeSpec;

/// Largest admissible fraction of `‖percoh‖²` on the truncation edge.
pub const TRUNCATION_TAIL_TOL: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq)]
pub struct CoherentParams {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub hbar: f64,
}

impl CoherentParams {
    pub fn new(q: &[f64], p: &[f64], hbar: f64) -> Result<Self> {
        if !(hbar > 0.0) || !hbar.is_finite() {
            return domain(format!("hbar must be positive, got {hbar}"));
        }
        if q.len() != p.len() {
            return domain("q and p have different dimensions");
        }
        if q.iter().chain(p).any(|v| !v.is_finite()) {
            return domain("coherent state centre must be finite");
        }
        Ok(Self {
            q: q.to_vec(),
            p: p.to_vec(),
            hbar,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    /// The same state with momentum `p - ħk`.
    pub fn fiber(&self, k: &[f64]) -> Self {
        Self {
            q: self.q.clone(),
            p: self.p.iter().zip(k).map(|(p, k)| p - self.hbar * k).collect(),
            hbar: self.hbar,
        }
    }
}

/// Amplitude of `|q,p⟩` at `y`.
pub fn coherent_state(params: &CoherentParams, y: &[f64]) -> C64 {
    let h = params.hbar;
    let d = params.dim() as f64;
    let r2: f64 = y.iter().zip(&params.q).map(|(a, b)| (a - b) * (a - b)).sum();
    let phase: f64 = y.iter().zip(&params.p).map(|(a, b)| a * b).sum::<f64>() / h;
    C64::from_polar((PI * h).powf(-d / 4.0) * (-r2 / (2.0 * h)).exp(), phase)
}

fn prefactor(lat: &LatticeSpec, hbar: f64) -> f64 {
    let d = lat.dim() as f64;
    lat.cell_volume().powf(-0.5) * (PI * hbar).powf(-d / 4.0) * (2.0 * PI * hbar).powf(d / 2.0)
}

/// `⟨e_G | percoh(q, p - ħk)⟩` in closed form.
pub fn coherent_planewave_coeff(params: &CoherentParams, lat: &LatticeSpec, k: &[f64], g: &[f64]) -> C64 {
    let h = params.hbar;
    let mut r2 = 0.0;
    let mut phase = 0.0;
    for j in 0..params.dim() {
        let pj = params.p[j] - h * k[j];
        r2 += (pj - h * g[j]).powi(2);
        phase += (pj / h - g[j]) * params.q[j];
    }
    C64::from_polar(prefactor(lat, h) * (-r2 / (2.0 * h)).exp(), phase)
}

/// `percoh(q, p - ħk)` on the basis, from the closed-form coefficients.
///
/// Fails with an accuracy error when the Gaussian in momentum is cut by the
/// truncation.
pub fn fiber_coherent(params: &CoherentParams, basis: &Arc<PlaneWaveBasis>, k: &[f64]) -> Result<PeriodicField> {
    let field = fiber_coherent_unchecked(params, basis, k);
    let tail = field.edge_weight();
    if tail > TRUNCATION_TAIL_TOL {
        return accuracy(format!(
            "plane-wave truncation M={} cuts the coherent state at p={:?}: edge weight {tail:.2e}",
            basis.order(),
            params.fiber(k).p
        ));
    }
    Ok(field)
}

pub(crate) fn fiber_coherent_unchecked(params: &CoherentParams, basis: &Arc<PlaneWaveBasis>, k: &[f64]) -> PeriodicField {
    let lat = basis.lattice();
    let coeffs = (0..basis.len())
        .map(|s| coherent_planewave_coeff(params, lat, k, basis.wavevector(s)))
        .collect();
    PeriodicField::from_coeffs(basis, coeffs).expect("length matches basis")
}

/// `percoh(q, p)` on the basis.
pub fn periodized_coherent(params: &CoherentParams, basis: &Arc<PlaneWaveBasis>) -> Result<PeriodicField> {
    let zero = vec![0.0; params.dim()];
    fiber_coherent(params, basis, &zero)
}

/// Reference evaluation of the lattice sum over translates `{-L..L}^d`,
/// sampled on the grid and transformed.
pub fn periodized_coherent_lattice_sum(
    params: &CoherentParams,
    basis: &Arc<PlaneWaveBasis>,
    window: usize,
) -> Result<PeriodicField> {
    let lat = basis.lattice();
    let d = lat.dim();
    if params.dim() != d {
        return domain("coherent state and lattice have different dimensions");
    }
    let geom = crate::lattice::gamma_bounds(lat)?;
    // Points outside the window are at least this far from every grid point,
    // once q is measured from the cell.
    let (qc, _) = crate::lattice::project_to_cell(&params.q, lat)?;
    let qn = crate::lattice::norm(&qc);
    let gap = (2 * window + 1) as f64 * geom.gamma_minus - geom.gamma_plus - qn;
    let tail = if gap > 0.0 { (-gap * gap / (2.0 * params.hbar)).exp() } else { 1.0 };
    if tail > 1e-14 {
        return accuracy(format!(
            "translate window L={window} leaves a lattice-sum tail of {tail:.2e}"
        ));
    }
    let w = 2 * window + 1;
    let total = w.pow(d as u32);
    let shifts: Vec<Vec<f64>> = (0..total)
        .map(|flat| {
            let mut rem = flat;
            let mut ell = vec![0i64; d];
            for j in (0..d).rev() {
                ell[j] = (rem % w) as i64 - window as i64;
                rem /= w;
            }
            lat.lattice_vector(&ell)
        })
        .collect();
    let samples: Vec<C64> = (0..basis.len())
        .map(|s| {
            let y = basis.point(s);
            let mut acc = C64::new(0.0, 0.0);
            for sh in &shifts {
                let x: Vec<f64> = y.iter().zip(sh).map(|(a, b)| a + b).collect();
                acc += coherent_state(params, &x);
            }
            acc
        })
        .collect();
    PeriodicField::from_grid(basis, samples)
}
