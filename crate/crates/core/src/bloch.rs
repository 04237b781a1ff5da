//! Discrete Bloch transform.
//!
//! `(Bu)(k)(x) = Σ_ℓ u(x + ℓ) e^{-ik·(x+ℓ)}` is evaluated on a finite window
//! of lattice translates `ℓ ∈ {-L..L}^d` and a Monkhorst-Pack quasimomentum
//! grid. The fiber average `⨍_{Γ*}` is the uniform mean over that grid. When
//! `2L + 1 ≤ N_k` in every direction the discrete transform is an exact
//! isometry and the inverse reproduces the window exactly.

use std::sync::Arc;

use crate::basis::{PeriodicField, PlaneWaveBasis, C64};
use crate::error::{accuracy, domain, Result};
use crate::lattice::{dot, LatticeSpec};
use crate::par;

/// Outer-shell mass fraction above which a translate window is too small.
pub const WINDOW_TAIL_TOL: f64 = 1e-12;

/// Uniform quasimomentum grid in the reciprocal cell.
#[derive(Debug, Clone, PartialEq)]
pub struct KGrid {
    dim: usize,
    counts: Vec<usize>,
    /// Reciprocal-lattice coordinates `κ`, row-major.
    coords: Vec<f64>,
    /// Cartesian points `k = Σ κ_j b_j`, row-major.
    points: Vec<f64>,
}

impl KGrid {
    /// `counts[j]` points along `b_j` at `κ = (i + 1/2)/N - 1/2`.
    pub fn monkhorst_pack(lat: &LatticeSpec, counts: &[usize]) -> Result<Self> {
        let d = lat.dim();
        if counts.len() != d {
            return domain(format!("k-grid needs {d} counts, got {}", counts.len()));
        }
        if counts.contains(&0) {
            return domain("k-grid counts must be positive");
        }
        let total: usize = counts.iter().product();
        let mut coords = Vec::with_capacity(total * d);
        let mut points = Vec::with_capacity(total * d);
        let mut kappa = vec![0.0; d];
        for flat in 0..total {
            let mut rem = flat;
            for j in (0..d).rev() {
                let i = rem % counts[j];
                rem /= counts[j];
                kappa[j] = (i as f64 + 0.5) / counts[j] as f64 - 0.5;
            }
            coords.extend_from_slice(&kappa);
            points.extend(lat.from_reciprocal_coords(&kappa));
        }
        Ok(Self {
            dim: d,
            counts: counts.to_vec(),
            coords,
            points,
        })
    }

    /// Same number of points along every reciprocal direction.
    pub fn uniform(lat: &LatticeSpec, n: usize) -> Result<Self> {
        Self::monkhorst_pack(lat, &vec![n; lat.dim()])
    }

    /// The single point `k = 0`.
    pub fn gamma_only(lat: &LatticeSpec) -> Self {
        Self::uniform(lat, 1).expect("one-point grid is valid")
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn reciprocal_coords(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.len() as f64
    }

    pub fn weights(&self) -> Vec<f64> {
        vec![self.weight(); self.len()]
    }
}

/// Uniform average over the fibers, summed in index order.
pub fn fiber_average(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return domain("fiber average over an empty grid");
    }
    Ok(par::ordered_sum(values) / values.len() as f64)
}

/// One periodic field per k-grid point.
#[derive(Debug, Clone)]
pub struct FiberedState {
    pub grid: KGrid,
    pub fibers: Vec<PeriodicField>,
}

impl FiberedState {
    pub fn new(grid: KGrid, fibers: Vec<PeriodicField>) -> Result<Self> {
        if fibers.len() != grid.len() {
            return domain(format!(
                "{} fibers for a grid of {} points",
                fibers.len(),
                grid.len()
            ));
        }
        Ok(Self { grid, fibers })
    }

    /// `⨍ ‖u_k‖² dk`.
    pub fn mean_norm_sqr(&self) -> f64 {
        let v: Vec<f64> = self.fibers.iter().map(|f| f.norm_sqr()).collect();
        fiber_average(&v).unwrap_or(0.0)
    }

    /// Flat dump rows `(k-index, G-index..., re, im)`.
    pub fn dump_rows(&self) -> Vec<(usize, Vec<i64>, f64, f64)> {
        let mut rows = Vec::new();
        for (ik, f) in self.fibers.iter().enumerate() {
            let basis = f.basis();
            for (slot, c) in f.coeffs().iter().enumerate() {
                rows.push((ik, basis.index(slot).to_vec(), c.re, c.im));
            }
        }
        rows
    }
}

/// Samples of a function on `Γ + ℓ` for every translate `ℓ ∈ {-L..L}^d`.
#[derive(Debug, Clone)]
pub struct WindowedFunction {
    basis: Arc<PlaneWaveBasis>,
    window: usize,
    translates: Vec<Vec<i64>>,
    /// `values[t][s] = u(y_s + ℓ_t)`.
    values: Vec<Vec<C64>>,
}

fn translate_window(dim: usize, window: usize) -> Vec<Vec<i64>> {
    let w = 2 * window + 1;
    let total = w.pow(dim as u32);
    (0..total)
        .map(|flat| {
            let mut rem = flat;
            let mut ell = vec![0i64; dim];
            for j in (0..dim).rev() {
                ell[j] = (rem % w) as i64 - window as i64;
                rem /= w;
            }
            ell
        })
        .collect()
}

impl WindowedFunction {
    pub fn from_fn<F>(basis: &Arc<PlaneWaveBasis>, window: usize, f: F) -> Self
    where
        F: Fn(&[f64]) -> C64 + Sync + Send,
    {
        let translates = translate_window(basis.dim(), window);
        let lat = basis.lattice();
        let values = par::map_slice(&translates, |ell| {
            let shift = lat.lattice_vector(ell);
            (0..basis.len())
                .map(|s| {
                    let y: Vec<f64> = basis.point(s).iter().zip(&shift).map(|(a, b)| a + b).collect();
                    f(&y)
                })
                .collect()
        });
        Self {
            basis: basis.clone(),
            window,
            translates,
            values,
        }
    }

    pub fn basis(&self) -> &Arc<PlaneWaveBasis> {
        &self.basis
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn translates(&self) -> &[Vec<i64>] {
        &self.translates
    }

    pub fn values(&self, translate: usize) -> &[C64] {
        &self.values[translate]
    }

    /// `‖u‖²_{L²}` over the window by grid quadrature.
    pub fn norm_sqr(&self) -> f64 {
        let per: Vec<f64> = self
            .values
            .iter()
            .map(|v| v.iter().fold(0.0, |a, c| a + c.norm_sqr()))
            .collect();
        par::ordered_sum(&per) * self.basis.quadrature_weight()
    }

    /// Mass fraction carried by translates on the outer shell of the window.
    pub fn outer_shell_fraction(&self) -> f64 {
        let total = self.norm_sqr();
        if total == 0.0 {
            return 0.0;
        }
        let l = self.window as i64;
        let mut shell = 0.0;
        for (ell, v) in self.translates.iter().zip(&self.values) {
            if ell.iter().any(|x| x.abs() == l) {
                shell += v.iter().fold(0.0, |a, c| a + c.norm_sqr());
            }
        }
        shell * self.basis.quadrature_weight() / total
    }

    pub fn max_abs_diff(&self, other: &WindowedFunction) -> f64 {
        self.values
            .iter()
            .flatten()
            .zip(other.values.iter().flatten())
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).norm()))
    }
}

/// Bloch fiber at a single quasimomentum `k`.
pub fn bloch_fiber(u: &WindowedFunction, k: &[f64]) -> PeriodicField {
    let basis = &u.basis;
    let lat = basis.lattice();
    let mut g = vec![C64::new(0.0, 0.0); basis.len()];
    for (ell, vals) in u.translates.iter().zip(&u.values) {
        let shift = lat.lattice_vector(ell);
        for (s, (acc, v)) in g.iter_mut().zip(vals).enumerate() {
            let x: Vec<f64> = basis.point(s).iter().zip(&shift).map(|(a, b)| a + b).collect();
            *acc += v * C64::from_polar(1.0, -dot(k, &x));
        }
    }
    PeriodicField::from_grid(basis, g).expect("grid length matches basis")
}

/// `(Bu)(k)` for every grid point.
///
/// Fails with an accuracy error when the outer translate shell carries more
/// than [`WINDOW_TAIL_TOL`] of the mass, since the lattice sum is then
/// visibly truncated.
pub fn bloch_transform(u: &WindowedFunction, grid: &KGrid) -> Result<FiberedState> {
    if grid.dim() != u.basis.dim() {
        return domain("k-grid and function have different dimensions");
    }
    let tail = u.outer_shell_fraction();
    if u.window > 0 && tail > WINDOW_TAIL_TOL {
        return accuracy(format!(
            "translate window L={} too small: outer shell carries {tail:.3e} of the mass",
            u.window
        ));
    }
    let fibers = par::map_range(grid.len(), |i| bloch_fiber(u, grid.point(i)));
    FiberedState::new(grid.clone(), fibers)
}

/// `u(x) = ⨍ (Bu)(k)(x) e^{ik·x} dk` on the translates `{-L..L}^d`.
pub fn inverse_bloch(state: &FiberedState, window: usize) -> Result<WindowedFunction> {
    let basis = match state.fibers.first() {
        Some(f) => f.basis().clone(),
        None => return domain("inverse Bloch transform of an empty fibered state"),
    };
    if state.fibers.iter().any(|f| !Arc::ptr_eq(f.basis(), &basis) && f.basis().len() != basis.len()) {
        return domain("fibers use different plane-wave bases");
    }
    let lat = basis.lattice();
    let grids: Vec<Vec<C64>> = par::map_slice(&state.fibers, |f| f.to_grid());
    let translates = translate_window(basis.dim(), window);
    let w = state.grid.weight();
    let values = par::map_slice(&translates, |ell| {
        let shift = lat.lattice_vector(ell);
        (0..basis.len())
            .map(|s| {
                let x: Vec<f64> = basis.point(s).iter().zip(&shift).map(|(a, b)| a + b).collect();
                let mut acc = C64::new(0.0, 0.0);
                for (ik, g) in grids.iter().enumerate() {
                    acc += g[s] * C64::from_polar(1.0, dot(state.grid.point(ik), &x));
                }
                acc * w
            })
            .collect()
    });
    Ok(WindowedFunction {
        basis,
        window,
        translates,
        values,
    })
}

/// Translate window `L` such that a Gaussian of variance `~ħ` centred in the
/// cell has lattice-sum tail below `1e-14`.
pub fn auto_window(hbar: f64, gamma_minus: f64) -> usize {
    let reach = (2.0 * hbar * 1e14f64.ln()).sqrt();
    (reach / (2.0 * gamma_minus) + 1.0).ceil() as usize
}
