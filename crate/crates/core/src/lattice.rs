//! Bravais-lattice geometry.
//!
//! The unit cell is the half-open parallelepiped
//! `{ Σ t_j a_j : t_j ∈ [-1/2, 1/2) }`, so reducing a point to the cell is a
//! rounding operation in lattice coordinates. A coordinate exactly at `+1/2`
//! maps to `-1/2`.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{domain, Result};

const DUALITY_TOL: f64 = 1e-12;

/// Full-rank Bravais lattice in `R^d` together with its reciprocal lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeSpec {
    dim: usize,
    /// Row-major: row `j` is the basis vector `a_j`.
    basis: Vec<f64>,
    /// Row-major: row `j` is the reciprocal vector `b_j`, `b_i · a_j = 2π δ_ij`.
    reciprocal: Vec<f64>,
    volume: f64,
}

impl LatticeSpec {
    /// Build a lattice from basis vectors given as the rows of a `d × d` matrix.
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if dim == 0 {
            return domain("lattice dimension must be positive");
        }
        if rows.iter().any(|r| r.len() != dim) {
            return domain(format!("lattice basis must be a {dim}x{dim} matrix"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return domain("lattice basis has non-finite entries");
        }
        let basis: Vec<f64> = rows.iter().flatten().copied().collect();
        let a = DMatrix::from_row_slice(dim, dim, &basis);
        let det = a.determinant();
        let scale = rows
            .iter()
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .product::<f64>();
        if det.abs() <= 1e-12 * scale {
            return domain("lattice basis is degenerate (zero determinant)");
        }
        // B A^T = 2π I  =>  B = 2π (A^T)^{-1}.
        let inv_t = match a.transpose().try_inverse() {
            Some(m) => m,
            None => return domain("lattice basis is not invertible"),
        };
        let b = inv_t * (2.0 * PI);
        let mut reciprocal = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                reciprocal[i * dim + j] = b[(i, j)];
            }
        }
        let lat = Self {
            dim,
            basis,
            reciprocal,
            volume: det.abs(),
        };
        for i in 0..dim {
            for j in 0..dim {
                let dot: f64 = (0..dim).map(|c| lat.b(i)[c] * lat.a(j)[c]).sum();
                let want = if i == j { 2.0 * PI } else { 0.0 };
                if (dot - want).abs() > DUALITY_TOL * 2.0 * PI {
                    return domain("reciprocal basis fails b_i . a_j = 2 pi delta_ij");
                }
            }
        }
        Ok(lat)
    }

    /// The integer lattice `Z^d`.
    pub fn cubic(dim: usize) -> Self {
        Self::scaled_cubic(dim, 1.0)
    }

    /// The lattice `a Z^d`.
    pub fn scaled_cubic(dim: usize, a: f64) -> Self {
        let rows: Vec<Vec<f64>> = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { a } else { 0.0 }).collect())
            .collect();
        Self::new(&rows).expect("scaled cubic lattice is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Basis vector `a_j`.
    pub fn a(&self, j: usize) -> &[f64] {
        &self.basis[j * self.dim..(j + 1) * self.dim]
    }

    /// Reciprocal vector `b_j`.
    pub fn b(&self, j: usize) -> &[f64] {
        &self.reciprocal[j * self.dim..(j + 1) * self.dim]
    }

    /// Cell volume `|Γ| = |det A|`.
    pub fn cell_volume(&self) -> f64 {
        self.volume
    }

    /// Reciprocal cell volume `|Γ*| = (2π)^d / |Γ|`.
    pub fn reciprocal_volume(&self) -> f64 {
        (2.0 * PI).powi(self.dim as i32) / self.volume
    }

    /// Lattice coordinates `t` with `z = Σ t_j a_j`.
    pub fn to_lattice_coords(&self, z: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|j| dot(self.b(j), z) / (2.0 * PI))
            .collect()
    }

    /// Cartesian point `Σ t_j a_j`.
    pub fn from_lattice_coords(&self, t: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.dim];
        for (j, tj) in t.iter().enumerate() {
            for (zc, ac) in z.iter_mut().zip(self.a(j)) {
                *zc += tj * ac;
            }
        }
        z
    }

    /// Lattice vector `Σ n_j a_j`.
    pub fn lattice_vector(&self, n: &[i64]) -> Vec<f64> {
        let t: Vec<f64> = n.iter().map(|&v| v as f64).collect();
        self.from_lattice_coords(&t)
    }

    /// Reciprocal lattice vector `Σ n_j b_j`.
    pub fn reciprocal_vector(&self, n: &[i64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        for (j, &nj) in n.iter().enumerate() {
            for (gc, bc) in g.iter_mut().zip(self.b(j)) {
                *gc += nj as f64 * bc;
            }
        }
        g
    }

    /// Cartesian point with reciprocal coordinates `κ` (`k = Σ κ_j b_j`).
    pub fn from_reciprocal_coords(&self, kappa: &[f64]) -> Vec<f64> {
        let mut k = vec![0.0; self.dim];
        for (j, kj) in kappa.iter().enumerate() {
            for (kc, bc) in k.iter_mut().zip(self.b(j)) {
                *kc += kj * bc;
            }
        }
        k
    }

    /// Distance from the origin to the faces `|n_j| = 1/2` of the reciprocal
    /// unit parallelepiped, per direction. A truncation `|n_j| ≤ M` resolves
    /// every wave vector of norm below `2 M · min_j` of these values.
    pub fn reciprocal_slab_halfwidths(&self) -> Vec<f64> {
        // n_j = a_j · G / 2π, so the slab |n_j| ≤ 1/2 has half-width π / |a_j|.
        (0..self.dim).map(|j| PI / norm(self.a(j))).collect()
    }

    fn is_orthogonal(&self) -> bool {
        for i in 0..self.dim {
            for j in (i + 1)..self.dim {
                let c = dot(self.a(i), self.a(j));
                if c.abs() > 1e-14 * norm(self.a(i)) * norm(self.a(j)) {
                    return false;
                }
            }
        }
        true
    }
}

pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Reduce `z` to the unit cell: returns `(P_Γ z, n)` with `z - P_Γ z = Σ n_j a_j`.
pub fn project_to_cell(z: &[f64], lat: &LatticeSpec) -> Result<(Vec<f64>, Vec<i64>)> {
    if z.len() != lat.dim() {
        return domain(format!(
            "point has dimension {}, lattice has {}",
            z.len(),
            lat.dim()
        ));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return domain("cannot project a non-finite point");
    }
    let t = lat.to_lattice_coords(z);
    let n: Vec<i64> = t.iter().map(|&tj| (tj + 0.5).floor() as i64).collect();
    let ell = lat.lattice_vector(&n);
    let p = z.iter().zip(&ell).map(|(a, b)| a - b).collect();
    Ok((p, n))
}

/// `|P_Γ z|²` without allocating the lattice translate. Assumes finite input.
pub fn cell_norm2(z: &[f64], lat: &LatticeSpec) -> f64 {
    match lat.dim() {
        1 => {
            let a = lat.a(0)[0];
            let t = z[0] / a;
            let r = (t - (t + 0.5).floor()) * a;
            r * r
        }
        _ => {
            let t = lat.to_lattice_coords(z);
            let frac: Vec<f64> = t.iter().map(|&tj| tj - (tj + 0.5).floor()).collect();
            let p = lat.from_lattice_coords(&frac);
            dot(&p, &p)
        }
    }
}

/// Inner and outer radii of the unit cell, `γ₋ = inf_{∂Γ}|z|`, `γ₊ = sup_{∂Γ}|z|`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGeometry {
    pub gamma_minus: f64,
    pub gamma_plus: f64,
    pub lattice: LatticeSpec,
}

impl CellGeometry {
    /// `γ₊ / γ₋`.
    pub fn aspect(&self) -> f64 {
        self.gamma_plus / self.gamma_minus
    }
}

/// Boundary samples per face used for `γ₋` on skew cells.
const FACE_SAMPLES: usize = 10_000;

/// Compute `γ₋` and `γ₊` for the parallelepiped cell.
///
/// `γ₊` is attained at a vertex and is exact. For orthogonal bases `γ₋` is
/// exact; otherwise it is the minimum over a dense sampling of every face,
/// together with the face-plane foot point when it lies inside the face.
pub fn gamma_bounds(lat: &LatticeSpec) -> Result<CellGeometry> {
    let d = lat.dim();
    if !(lat.cell_volume() > 0.0) {
        return domain("degenerate lattice");
    }
    let mut gamma_plus: f64 = 0.0;
    for mask in 0..(1usize << d) {
        let t: Vec<f64> = (0..d)
            .map(|j| if mask >> j & 1 == 1 { 0.5 } else { -0.5 })
            .collect();
        gamma_plus = gamma_plus.max(norm(&lat.from_lattice_coords(&t)));
    }

    let gamma_minus = if lat.is_orthogonal() {
        (0..d)
            .map(|j| 0.5 * norm(lat.a(j)))
            .fold(f64::INFINITY, f64::min)
    } else {
        sampled_gamma_minus(lat)
    };
    Ok(CellGeometry {
        gamma_minus,
        gamma_plus,
        lattice: lat.clone(),
    })
}

fn sampled_gamma_minus(lat: &LatticeSpec) -> f64 {
    let d = lat.dim();
    let per_axis = if d <= 1 {
        1
    } else {
        ((FACE_SAMPLES as f64).powf(1.0 / (d - 1) as f64).ceil() as usize).max(2)
    };
    let mut best = f64::INFINITY;
    for face in 0..d {
        for sign in [-0.5, 0.5] {
            // Exact foot of the perpendicular from the origin onto the face plane.
            let bj = lat.b(face);
            let bb = dot(bj, bj);
            let foot: Vec<f64> = bj.iter().map(|c| sign * 2.0 * PI * c / bb).collect();
            let tf = lat.to_lattice_coords(&foot);
            if tf
                .iter()
                .enumerate()
                .all(|(i, &ti)| i == face || ti.abs() <= 0.5 + 1e-15)
            {
                best = best.min(norm(&foot));
            }
            let free: Vec<usize> = (0..d).filter(|&i| i != face).collect();
            let total = per_axis.pow(free.len() as u32);
            let mut t = vec![0.0; d];
            t[face] = sign;
            for idx in 0..total {
                let mut rem = idx;
                for &axis in &free {
                    let s = rem % per_axis;
                    rem /= per_axis;
                    t[axis] = -0.5 + s as f64 / (per_axis - 1) as f64;
                }
                best = best.min(norm(&lat.from_lattice_coords(&t)));
            }
        }
    }
    best
}

/// The cost regulariser `Θ(r) = ∫₀^r (1 - s/γ₋)₊ ds`.
pub fn theta(r: f64, geom: &CellGeometry) -> Result<f64> {
    if !(r >= 0.0) {
        return domain(format!("theta needs r >= 0, got {r}"));
    }
    Ok(theta_unchecked(r, geom.gamma_minus))
}

#[inline]
pub(crate) fn theta_unchecked(r: f64, gamma_minus: f64) -> f64 {
    if r <= gamma_minus {
        r - r * r / (2.0 * gamma_minus)
    } else {
        0.5 * gamma_minus
    }
}

/// `Θ'(r) = (1 - r/γ₋)₊`.
pub fn theta_prime(r: f64, geom: &CellGeometry) -> f64 {
    (1.0 - r / geom.gamma_minus).max(0.0)
}
