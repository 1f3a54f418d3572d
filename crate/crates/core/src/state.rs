//! Multi-species containers: cell densities and face momenta.

use crate::error::{Error, Result};
use crate::grid::Grid;

/// `n` scalar fields on the cells of one grid, stored species-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesField {
    grid: Grid,
    n: usize,
    data: Vec<f64>,
}

impl SpeciesField {
    pub fn new(grid: Grid, n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * grid.num_cells() {
            return Err(Error::Shape(format!(
                "{} values for {n} species on {} cells",
                data.len(),
                grid.num_cells()
            )));
        }
        Ok(Self { grid, n, data })
    }

    pub fn zeros(grid: Grid, n: usize) -> Self {
        Self {
            grid,
            n,
            data: vec![0.0; n * grid.num_cells()],
        }
    }

    /// Builds the field from per-species closures of the cell centre.
    pub fn from_fns(grid: Grid, fns: &[&dyn Fn([f64; 2]) -> f64]) -> Self {
        let nc = grid.num_cells();
        let mut data = Vec::with_capacity(fns.len() * nc);
        for f in fns {
            data.extend((0..nc).map(|c| f(grid.cell_center(c))));
        }
        Self {
            grid,
            n: fns.len(),
            data,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn species_count(&self) -> usize {
        self.n
    }

    pub fn num_cells(&self) -> usize {
        self.grid.num_cells()
    }

    pub fn species(&self, alpha: usize) -> &[f64] {
        let nc = self.num_cells();
        &self.data[alpha * nc..(alpha + 1) * nc]
    }

    pub fn species_mut(&mut self, alpha: usize) -> &mut [f64] {
        let nc = self.num_cells();
        &mut self.data[alpha * nc..(alpha + 1) * nc]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Species values at one cell.
    pub fn at(&self, cell: usize) -> smallvec::SmallVec<[f64; 4]> {
        let nc = self.num_cells();
        (0..self.n).map(|a| self.data[a * nc + cell]).collect()
    }

    /// Per-species sum of cell values (mass up to the factor `h^d`).
    pub fn totals(&self) -> Vec<f64> {
        (0..self.n).map(|a| self.species(a).iter().sum()).collect()
    }

    /// Per-species mass `sum_i mu_i h^d`.
    pub fn masses(&self) -> Vec<f64> {
        let v = self.grid.cell_volume();
        self.totals().into_iter().map(|t| t * v).collect()
    }

    pub fn check_compatible(&self, other: &SpeciesField) -> Result<()> {
        if self.grid != other.grid || self.n != other.n {
            return Err(Error::GeometryMismatch);
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &SpeciesField) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// `n` face fields (one per species) stored species-major, each of length
/// `grid.num_faces()`. Boundary faces are kept at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumField {
    grid: Grid,
    n: usize,
    data: Vec<f64>,
}

impl MomentumField {
    pub fn zeros(grid: Grid, n: usize) -> Self {
        Self {
            grid,
            n,
            data: vec![0.0; n * grid.num_faces()],
        }
    }

    /// Wraps `data` and zeroes its boundary faces.
    pub fn clamped(grid: Grid, n: usize, mut data: Vec<f64>) -> Result<Self> {
        let nf = grid.num_faces();
        if data.len() != n * nf {
            return Err(Error::Shape(format!(
                "{} values for {n} species on {nf} faces",
                data.len()
            )));
        }
        for a in 0..n {
            grid.clamp_boundary(&mut data[a * nf..(a + 1) * nf]);
        }
        Ok(Self { grid, n, data })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn species_count(&self) -> usize {
        self.n
    }

    pub fn species(&self, alpha: usize) -> &[f64] {
        let nf = self.grid.num_faces();
        &self.data[alpha * nf..(alpha + 1) * nf]
    }

    pub fn species_mut(&mut self, alpha: usize) -> &mut [f64] {
        let nf = self.grid.num_faces();
        &mut self.data[alpha * nf..(alpha + 1) * nf]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Largest magnitude over boundary faces (zero for a valid field).
    pub fn boundary_leak(&self) -> f64 {
        let nf = self.grid.num_faces();
        let mut m: f64 = 0.0;
        for a in 0..self.n {
            for f in 0..nf {
                if self.grid.is_boundary_face(f) {
                    m = m.max(self.data[a * nf + f].abs());
                }
            }
        }
        m
    }
}
