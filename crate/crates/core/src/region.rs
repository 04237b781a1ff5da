//! Observation regions in the cell and compact sets in phase space.

use crate::error::{domain, Result};
use crate::lattice::{project_to_cell, LatticeSpec};

/// Open Cartesian box `lo < y < hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl CellBox {
    pub fn new(lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() {
            return domain("box corners have different dimensions");
        }
        if lo.iter().chain(hi).any(|v| !v.is_finite()) {
            return domain("box corners must be finite");
        }
        if lo.iter().zip(hi).any(|(a, b)| a > b) {
            return domain("box has lo > hi");
        }
        Ok(Self {
            lo: lo.to_vec(),
            hi: hi.to_vec(),
        })
    }

    fn contains_open(&self, y: &[f64]) -> bool {
        y.iter().zip(&self.lo).zip(&self.hi).all(|((v, a), b)| a < v && v < b)
    }

    fn dist(&self, y: &[f64]) -> f64 {
        y.iter()
            .zip(&self.lo)
            .zip(&self.hi)
            .map(|((v, a), b)| {
                let e = (a - v).max(v - b).max(0.0);
                e * e
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }
}

/// Union of boxes, periodised over the lattice, optionally dilated by `δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    lattice: LatticeSpec,
    boxes: Vec<CellBox>,
    full: bool,
    dilation: f64,
    /// Neighbouring translates checked around the cell representative.
    neighbours: Vec<Vec<f64>>,
}

impl Region {
    pub fn new(lattice: &LatticeSpec, boxes: Vec<CellBox>) -> Result<Self> {
        if boxes.iter().any(|b| b.lo.len() != lattice.dim()) {
            return domain("region box dimension differs from the lattice");
        }
        let d = lattice.dim();
        let neighbours = (0..3usize.pow(d as u32))
            .map(|flat| {
                let mut rem = flat;
                let mut n = vec![0i64; d];
                for j in (0..d).rev() {
                    n[j] = (rem % 3) as i64 - 1;
                    rem /= 3;
                }
                lattice.lattice_vector(&n)
            })
            .collect();
        Ok(Self {
            lattice: lattice.clone(),
            boxes,
            full: false,
            dilation: 0.0,
            neighbours,
        })
    }

    /// The whole cell.
    pub fn full(lattice: &LatticeSpec) -> Self {
        let mut r = Self::new(lattice, Vec::new()).expect("empty box list is valid");
        r.full = true;
        r
    }

    pub fn empty(lattice: &LatticeSpec) -> Self {
        Self::new(lattice, Vec::new()).expect("empty box list is valid")
    }

    pub fn is_full(&self) -> bool {
        self.full
    }

    pub fn is_empty(&self) -> bool {
        !self.full && self.boxes.is_empty()
    }

    pub fn boxes(&self) -> &[CellBox] {
        &self.boxes
    }

    pub fn dilation(&self) -> f64 {
        self.dilation
    }

    /// `{ y : dist(y, Ω + 𝓛) < δ }`.
    pub fn dilated(&self, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return domain(format!("dilation must be positive, got {delta}"));
        }
        let mut r = self.clone();
        r.dilation = delta;
        Ok(r)
    }

    /// The undilated region.
    pub fn base(&self) -> Self {
        let mut r = self.clone();
        r.dilation = 0.0;
        r
    }

    /// `dist(y, Ω + 𝓛)` over the neighbouring translates of the cell.
    pub fn distance(&self, y: &[f64]) -> f64 {
        if self.full {
            return 0.0;
        }
        let p = match project_to_cell(y, &self.lattice) {
            Ok((p, _)) => p,
            Err(_) => return f64::INFINITY,
        };
        let mut best = f64::INFINITY;
        let mut shifted = vec![0.0; p.len()];
        for sh in &self.neighbours {
            for ((s, a), b) in shifted.iter_mut().zip(&p).zip(sh) {
                *s = a + b;
            }
            for bx in &self.boxes {
                best = best.min(bx.dist(&shifted));
            }
        }
        best
    }

    /// Indicator of the (possibly dilated) periodised region.
    pub fn contains(&self, y: &[f64]) -> bool {
        if self.full {
            return true;
        }
        if self.dilation > 0.0 {
            return self.distance(y) < self.dilation;
        }
        let p = match project_to_cell(y, &self.lattice) {
            Ok((p, _)) => p,
            Err(_) => return false,
        };
        let mut shifted = vec![0.0; p.len()];
        for sh in &self.neighbours {
            for ((s, a), b) in shifted.iter_mut().zip(&p).zip(sh) {
                *s = a + b;
            }
            if self.boxes.iter().any(|bx| bx.contains_open(&shifted)) {
                return true;
            }
        }
        false
    }

    /// Lipschitz cutoff `χ(y) = (1 - dist(y, Ω + 𝓛)/δ)₊`.
    pub fn cutoff(&self, y: &[f64], delta: f64) -> f64 {
        (1.0 - self.distance(y) / delta).max(0.0)
    }
}

/// A compact phase-space box `K = X × [p_lo, p_hi]`; `x = None` is the whole cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseBox {
    pub x: Option<(Vec<f64>, Vec<f64>)>,
    pub p_lo: Vec<f64>,
    pub p_hi: Vec<f64>,
}

impl PhaseBox {
    pub fn new(x: Option<(Vec<f64>, Vec<f64>)>, p_lo: &[f64], p_hi: &[f64]) -> Result<Self> {
        if p_lo.len() != p_hi.len() || p_lo.iter().zip(p_hi).any(|(a, b)| !(a <= b)) {
            return domain("phase box momentum range is empty or malformed");
        }
        if let Some((lo, hi)) = &x {
            if lo.len() != p_lo.len() || hi.len() != p_lo.len() || lo.iter().zip(hi).any(|(a, b)| !(a <= b)) {
                return domain("phase box position range is empty or malformed");
            }
        }
        Ok(Self {
            x,
            p_lo: p_lo.to_vec(),
            p_hi: p_hi.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.p_lo.len()
    }

    /// Closed-box membership, `q` taken modulo the lattice.
    pub fn contains(&self, q: &[f64], p: &[f64], lat: &LatticeSpec) -> bool {
        let p_in = p
            .iter()
            .zip(&self.p_lo)
            .zip(&self.p_hi)
            .all(|((v, a), b)| *a <= *v && *v <= *b);
        if !p_in {
            return false;
        }
        match &self.x {
            None => true,
            Some((lo, hi)) => {
                let qc = match project_to_cell(q, lat) {
                    Ok((c, _)) => c,
                    Err(_) => return false,
                };
                qc.iter().zip(lo).zip(hi).all(|((v, a), b)| *a <= *v && *v <= *b)
            }
        }
    }

    /// Point of `K` at unit-cube coordinates `u ∈ [0,1]^{2d}`.
    pub fn point_at(&self, u: &[f64], lat: &LatticeSpec) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let q = match &self.x {
            None => {
                let t: Vec<f64> = u[..d].iter().map(|s| s - 0.5).collect();
                lat.from_lattice_coords(&t)
            }
            Some((lo, hi)) => (0..d).map(|j| lo[j] + u[j] * (hi[j] - lo[j])).collect(),
        };
        let p = (0..d)
            .map(|j| self.p_lo[j] + u[d + j] * (self.p_hi[j] - self.p_lo[j]))
            .collect();
        (q, p)
    }
}

/// Union of phase-space boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSet {
    pub boxes: Vec<PhaseBox>,
}

impl PhaseSet {
    pub fn contains(&self, q: &[f64], p: &[f64], lat: &LatticeSpec) -> bool {
        self.boxes.iter().any(|b| b.contains(q, p, lat))
    }
}
