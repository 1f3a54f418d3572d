//! Uniform staggered grids in one and two dimensions.
//!
//! Scalars live at cell centres, fluxes on cell faces. Face storage is
//! direction-major: all faces normal to axis 0 first, then those normal to
//! axis 1. Along its own axis a direction owns `cells + 1` faces, the first and
//! last of which lie on the domain boundary.
//!
//! Cells are indexed `i + nx * j`. Faces normal to axis 0 are indexed
//! `fi + (nx + 1) * j` and separate cells `(fi - 1, j)` and `(fi, j)`; faces
//! normal to axis 1 are indexed `i + nx * fj` and separate `(i, fj - 1)` and
//! `(i, fj)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of a uniform box partition of a rectangle (or interval).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    cells: [usize; 2],
    h: f64,
    origin: [f64; 2],
}

impl Grid {
    /// Builds a grid with `dim` axes. Unused trailing entries of `cells` and
    /// `origin` are ignored for `dim == 1`.
    pub fn new(dim: usize, cells: [usize; 2], h: f64, origin: [f64; 2]) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidGrid(format!("dimension {dim} is not 1 or 2")));
        }
        if cells[0] == 0 || (dim == 2 && cells[1] == 0) {
            return Err(Error::InvalidGrid("cell counts must be positive".into()));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidGrid(format!("spacing {h} must be positive")));
        }
        let (cells, origin) = if dim == 1 {
            ([cells[0], 1], [origin[0], 0.0])
        } else {
            (cells, origin)
        };
        Ok(Self {
            dim,
            cells,
            h,
            origin,
        })
    }

    pub fn line(cells: usize, h: f64, origin: f64) -> Result<Self> {
        Self::new(1, [cells, 1], h, [origin, 0.0])
    }

    pub fn square(cells: [usize; 2], h: f64, origin: [f64; 2]) -> Result<Self> {
        Self::new(2, cells, h, origin)
    }

    /// Partition of `[lo, hi]^dim` into `cells` boxes per axis.
    pub fn over_box(dim: usize, lo: f64, hi: f64, cells: usize) -> Result<Self> {
        if !(hi > lo) {
            return Err(Error::InvalidGrid(format!("empty domain [{lo}, {hi}]")));
        }
        let h = (hi - lo) / cells as f64;
        Self::new(dim, [cells, cells], h, [lo, lo])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Cell counts per axis (`[nx, 1]` in 1D).
    pub fn cells(&self) -> [usize; 2] {
        self.cells
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    /// Cell volume `h^d`.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    pub fn num_cells(&self) -> usize {
        self.cells[0] * self.cells[1]
    }

    /// Number of faces normal to `axis`, boundary faces included.
    pub fn faces_along(&self, axis: usize) -> usize {
        let [nx, ny] = self.cells;
        match axis {
            0 => (nx + 1) * ny,
            1 if self.dim == 2 => nx * (ny + 1),
            _ => 0,
        }
    }

    pub fn face_offset(&self, axis: usize) -> usize {
        if axis == 0 {
            0
        } else {
            self.faces_along(0)
        }
    }

    pub fn num_faces(&self) -> usize {
        (0..self.dim).map(|q| self.faces_along(q)).sum()
    }

    /// Number of faces not lying on the boundary.
    pub fn num_interior_faces(&self) -> usize {
        let [nx, ny] = self.cells;
        if self.dim == 1 {
            nx - 1
        } else {
            (nx - 1) * ny + nx * (ny - 1)
        }
    }

    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        i + self.cells[0] * j
    }

    pub fn cell_center(&self, cell: usize) -> [f64; 2] {
        let nx = self.cells[0];
        let (i, j) = (cell % nx, cell / nx);
        let x = self.origin[0] + (i as f64 + 0.5) * self.h;
        if self.dim == 1 {
            [x, 0.0]
        } else {
            [x, self.origin[1] + (j as f64 + 0.5) * self.h]
        }
    }

    /// Cells on either side of face `f` (global face index). `None` marks a
    /// boundary face.
    pub fn face_neighbors(&self, f: usize) -> Option<(usize, usize)> {
        let [nx, ny] = self.cells;
        let off = self.faces_along(0);
        if f < off {
            let (fi, j) = (f % (nx + 1), f / (nx + 1));
            if fi == 0 || fi == nx {
                None
            } else {
                Some((fi - 1 + nx * j, fi + nx * j))
            }
        } else {
            let g = f - off;
            let (i, fj) = (g % nx, g / nx);
            if fj == 0 || fj == ny {
                None
            } else {
                Some((i + nx * (fj - 1), i + nx * fj))
            }
        }
    }

    pub fn face_axis(&self, f: usize) -> usize {
        if f < self.faces_along(0) {
            0
        } else {
            1
        }
    }

    pub fn is_boundary_face(&self, f: usize) -> bool {
        self.face_neighbors(f).is_none()
    }

    /// The two faces bounding `cell` along `axis`: (lower, upper).
    pub fn cell_faces(&self, cell: usize, axis: usize) -> (usize, usize) {
        let nx = self.cells[0];
        let (i, j) = (cell % nx, cell / nx);
        if axis == 0 {
            let lo = i + (nx + 1) * j;
            (lo, lo + 1)
        } else {
            let off = self.faces_along(0);
            (off + i + nx * j, off + i + nx * (j + 1))
        }
    }

    /// Zeroes every boundary face of a full-length face array.
    pub fn clamp_boundary(&self, flux: &mut [f64]) {
        let [nx, ny] = self.cells;
        for j in 0..ny {
            flux[(nx + 1) * j] = 0.0;
            flux[nx + (nx + 1) * j] = 0.0;
        }
        if self.dim == 2 {
            let off = self.faces_along(0);
            for i in 0..nx {
                flux[off + i] = 0.0;
                flux[off + i + nx * ny] = 0.0;
            }
        }
    }

    // --- slice kernels -----------------------------------------------------

    /// `(A s)_i = (1/h) sum_q (s_{i+1/2 e_q} - s_{i-1/2 e_q})`.
    pub fn divergence_into(&self, flux: &[f64], out: &mut [f64]) {
        let inv_h = 1.0 / self.h;
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for q in 0..self.dim {
                let (lo, hi) = self.cell_faces(c, q);
                acc += flux[hi] - flux[lo];
            }
            *o = acc * inv_h;
        }
    }

    /// Transpose of the divergence restricted to boundary-clamped fluxes:
    /// `(phi_left - phi_right) / h` on interior faces, zero on the boundary.
    pub fn divergence_adjoint_into(&self, phi: &[f64], out: &mut [f64]) {
        let inv_h = 1.0 / self.h;
        for (f, o) in out.iter_mut().enumerate() {
            *o = match self.face_neighbors(f) {
                Some((l, r)) => (phi[l] - phi[r]) * inv_h,
                None => 0.0,
            };
        }
    }

    /// Face-to-centre averages. `out` holds `d` values per cell, cell-major.
    pub fn interpolate_into(&self, flux: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for c in 0..self.num_cells() {
            for q in 0..d {
                let (lo, hi) = self.cell_faces(c, q);
                out[c * d + q] = 0.5 * (flux[lo] + flux[hi]);
            }
        }
    }

    /// Transpose of the interpolation restricted to boundary-clamped fluxes.
    pub fn interpolate_adjoint_into(&self, w: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (f, o) in out.iter_mut().enumerate() {
            *o = match self.face_neighbors(f) {
                Some((l, r)) => {
                    let q = self.face_axis(f);
                    0.5 * (w[l * d + q] + w[r * d + q])
                }
                None => 0.0,
            };
        }
    }

    /// Centred differences on interior faces of every axis, zero on the
    /// boundary (homogeneous Neumann).
    pub fn gradient_into(&self, mu: &[f64], out: &mut [f64]) {
        let inv_h = 1.0 / self.h;
        for (f, o) in out.iter_mut().enumerate() {
            *o = match self.face_neighbors(f) {
                Some((l, r)) => (mu[r] - mu[l]) * inv_h,
                None => 0.0,
            };
        }
    }

    /// Neumann Laplacian `A (clamped gradient)`, i.e. the 3-point (5-point)
    /// stencil with mirrored boundary cells.
    pub fn laplacian_into(&self, mu: &[f64], out: &mut [f64]) {
        let [nx, ny] = self.cells;
        let inv_h2 = 1.0 / (self.h * self.h);
        for j in 0..ny {
            for i in 0..nx {
                let c = i + nx * j;
                let u = mu[c];
                let mut acc = 0.0;
                if i > 0 {
                    acc += mu[c - 1] - u;
                }
                if i + 1 < nx {
                    acc += mu[c + 1] - u;
                }
                if self.dim == 2 {
                    if j > 0 {
                        acc += mu[c - nx] - u;
                    }
                    if j + 1 < ny {
                        acc += mu[c + nx] - u;
                    }
                }
                out[c] = acc * inv_h2;
            }
        }
    }

    // --- typed operators ---------------------------------------------------

    fn check(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GeometryMismatch)
        }
    }

    pub fn divergence(&self, sigma: &FluxField) -> Result<ScalarField> {
        self.check(&sigma.grid)?;
        let mut out = vec![0.0; self.num_cells()];
        self.divergence_into(&sigma.values, &mut out);
        Ok(ScalarField {
            grid: *self,
            values: out,
        })
    }

    pub fn divergence_adjoint(&self, phi: &ScalarField) -> Result<FluxField> {
        self.check(&phi.grid)?;
        let mut out = vec![0.0; self.num_faces()];
        self.divergence_adjoint_into(&phi.values, &mut out);
        Ok(FluxField {
            grid: *self,
            values: out,
            clamped: true,
        })
    }

    pub fn interpolate(&self, sigma: &FluxField) -> Result<CellVectorField> {
        self.check(&sigma.grid)?;
        let mut out = vec![0.0; self.num_cells() * self.dim];
        self.interpolate_into(&sigma.values, &mut out);
        Ok(CellVectorField {
            grid: *self,
            values: out,
        })
    }

    pub fn interpolate_adjoint(&self, w: &CellVectorField) -> Result<FluxField> {
        self.check(&w.grid)?;
        let mut out = vec![0.0; self.num_faces()];
        self.interpolate_adjoint_into(&w.values, &mut out);
        Ok(FluxField {
            grid: *self,
            values: out,
            clamped: true,
        })
    }

    /// Discrete partial derivative along `axis`, returned on the faces
    /// normal to that axis (boundary faces hold 0).
    pub fn partial_derivative(&self, mu: &ScalarField, axis: usize) -> Result<Vec<f64>> {
        self.check(&mu.grid)?;
        if axis >= self.dim {
            return Err(Error::InvalidAxis {
                axis,
                dim: self.dim,
            });
        }
        let mut all = vec![0.0; self.num_faces()];
        self.gradient_into(&mu.values, &mut all);
        let off = self.face_offset(axis);
        Ok(all[off..off + self.faces_along(axis)].to_vec())
    }

    pub fn neumann_laplacian(&self, mu: &ScalarField) -> Result<ScalarField> {
        self.check(&mu.grid)?;
        let mut out = vec![0.0; self.num_cells()];
        self.laplacian_into(&mu.values, &mut out);
        Ok(ScalarField {
            grid: *self,
            values: out,
        })
    }
}

/// One value per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.num_cells() {
            return Err(Error::Shape(format!(
                "scalar field has {} values for {} cells",
                values.len(),
                grid.num_cells()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.num_cells()],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn([f64; 2]) -> f64) -> Self {
        let values = (0..grid.num_cells()).map(|c| f(grid.cell_center(c))).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn dot(&self, other: &ScalarField) -> f64 {
        dot(&self.values, &other.values)
    }
}

/// One value per face, direction-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxField {
    grid: Grid,
    values: Vec<f64>,
    clamped: bool,
}

impl FluxField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.num_faces() {
            return Err(Error::Shape(format!(
                "flux field has {} values for {} faces",
                values.len(),
                grid.num_faces()
            )));
        }
        Ok(Self {
            grid,
            values,
            clamped: false,
        })
    }

    /// Flux with every boundary face forced to zero (the space with vanishing
    /// normal boundary flux).
    pub fn clamped(grid: Grid, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.num_faces() {
            return Err(Error::Shape(format!(
                "flux field has {} values for {} faces",
                values.len(),
                grid.num_faces()
            )));
        }
        grid.clamp_boundary(&mut values);
        Ok(Self {
            grid,
            values,
            clamped: true,
        })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.num_faces()],
            clamped: true,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_boundary_clamped(&self) -> bool {
        self.clamped
    }

    /// Faces normal to `axis`.
    pub fn along(&self, axis: usize) -> &[f64] {
        let off = self.grid.face_offset(axis);
        &self.values[off..off + self.grid.faces_along(axis)]
    }

    pub fn dot(&self, other: &FluxField) -> f64 {
        dot(&self.values, &other.values)
    }
}

/// `d` values per cell (interpolated fluxes), cell-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CellVectorField {
    grid: Grid,
    values: Vec<f64>,
}

impl CellVectorField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.num_cells() * grid.dim() {
            return Err(Error::Shape(format!(
                "cell vector field has {} values, expected {}",
                values.len(),
                grid.num_cells() * grid.dim()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The `d` components attached to `cell`.
    pub fn at(&self, cell: usize) -> &[f64] {
        let d = self.grid.dim();
        &self.values[cell * d..(cell + 1) * d]
    }

    pub fn dot(&self, other: &CellVectorField) -> f64 {
        dot(&self.values, &other.values)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn line(n: usize, h: f64) -> Grid {
        Grid::line(n, h, 0.0).unwrap()
    }

    #[test]
    fn divergence_telescopes_in_1d() {
        let g = line(3, 1.0);
        let c = 2.5;
        let s = FluxField::new(g, vec![0.0, c, c, 0.0]).unwrap();
        assert_eq!(g.divergence(&s).unwrap().values(), &[c, 0.0, -c]);
    }

    #[test]
    fn divergence_of_zero_is_zero() {
        let g = Grid::square([3, 4], 0.3, [0.0, 0.0]).unwrap();
        let s = FluxField::zeros(g);
        assert!(g.divergence(&s).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn divergence_half_spacing() {
        let g = line(4, 0.5);
        let s = FluxField::new(g, vec![0.0, 1.0, 3.0, 2.0, 0.0]).unwrap();
        assert_eq!(g.divergence(&s).unwrap().values(), &[2.0, 4.0, -2.0, -4.0]);
    }

    #[test]
    fn divergence_adjoint_of_constant_vanishes() {
        let g = Grid::square([4, 3], 0.5, [0.0, 0.0]).unwrap();
        let phi = ScalarField::from_fn(g, |_| 3.7);
        assert!(g
            .divergence_adjoint(&phi)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn divergence_adjoint_two_cells() {
        let g = line(2, 1.0);
        let (a, b) = (1.25, -0.5);
        let phi = ScalarField::new(g, vec![a, b]).unwrap();
        let adj = g.divergence_adjoint(&phi).unwrap();
        assert_eq!(adj.values(), &[0.0, a - b, 0.0]);
        // <A e, phi> with e the unit interior face
        let e = FluxField::clamped(g, vec![0.0, 1.0, 0.0]).unwrap();
        assert_relative_eq!(g.divergence(&e).unwrap().dot(&phi), adj.dot(&e));
    }

    #[test]
    fn interpolation_examples() {
        let g = line(2, 1.0);
        let s = FluxField::new(g, vec![0.0, 2.0, 4.0]).unwrap();
        assert_eq!(g.interpolate(&s).unwrap().values(), &[1.0, 3.0]);

        let g2 = Grid::square([3, 2], 1.0, [0.0, 0.0]).unwrap();
        let c = -1.5;
        let s = FluxField::new(g2, vec![c; g2.num_faces()]).unwrap();
        assert!(g2.interpolate(&s).unwrap().values().iter().all(|&v| v == c));
        let z = g2.interpolate(&FluxField::zeros(g2)).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interpolation_adjoint_two_cells() {
        let g = line(2, 1.0);
        let (a, b) = (0.75, 2.0);
        let w = CellVectorField::new(g, vec![a, b]).unwrap();
        assert_eq!(
            g.interpolate_adjoint(&w).unwrap().values(),
            &[0.0, 0.5 * (a + b), 0.0]
        );
        let zero = CellVectorField::new(g, vec![0.0, 0.0]).unwrap();
        assert!(g
            .interpolate_adjoint(&zero)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn partial_derivative_examples() {
        let g = line(3, 1.0);
        let mu = ScalarField::new(g, vec![0.0, 1.0, 4.0]).unwrap();
        assert_eq!(g.partial_derivative(&mu, 0).unwrap(), vec![0.0, 1.0, 3.0, 0.0]);
        let c = ScalarField::from_fn(g, |_| 2.0);
        assert!(g.partial_derivative(&c, 0).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(
            g.partial_derivative(&mu, 1),
            Err(Error::InvalidAxis { axis: 1, dim: 1 })
        ));

        let g2 = Grid::square([4, 3], 0.25, [-0.5, 0.0]).unwrap();
        let lin = ScalarField::from_fn(g2, |x| x[0]);
        let dx = g2.partial_derivative(&lin, 0).unwrap();
        for (f, v) in dx.iter().enumerate() {
            if g2.is_boundary_face(f) {
                assert_eq!(*v, 0.0);
            } else {
                assert_relative_eq!(*v, 1.0, epsilon = 1e-14);
            }
        }
        let dy = g2.partial_derivative(&lin, 1).unwrap();
        assert!(dy.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn laplacian_examples() {
        let g = line(3, 1.0);
        let mu = ScalarField::new(g, vec![1.0, 0.0, 1.0]).unwrap();
        assert_eq!(g.neumann_laplacian(&mu).unwrap().values(), &[-1.0, 2.0, -1.0]);
        let g2 = Grid::square([5, 4], 0.1, [0.0, 0.0]).unwrap();
        let c = ScalarField::from_fn(g2, |_| 4.2);
        assert!(g2
            .neumann_laplacian(&c)
            .unwrap()
            .values()
            .iter()
            .all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn laplacian_equals_divergence_of_clamped_gradient() {
        let g = Grid::square([5, 3], 0.2, [0.0, 0.0]).unwrap();
        let mu: Vec<f64> = (0..g.num_cells()).map(|c| ((c * 7919) % 13) as f64 * 0.1).collect();
        let mut grad = vec![0.0; g.num_faces()];
        g.gradient_into(&mu, &mut grad);
        let mut a = vec![0.0; g.num_cells()];
        g.divergence_into(&grad, &mut a);
        let mut b = vec![0.0; g.num_cells()];
        g.laplacian_into(&mu, &mut b);
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let g = line(3, 1.0);
        let other = line(4, 1.0);
        let s = FluxField::zeros(other);
        assert_eq!(g.divergence(&s), Err(Error::GeometryMismatch));
    }

    #[test]
    fn invalid_grids() {
        assert!(Grid::new(3, [2, 2], 1.0, [0.0, 0.0]).is_err());
        assert!(Grid::line(0, 1.0, 0.0).is_err());
        assert!(Grid::line(3, -1.0, 0.0).is_err());
    }

    #[test]
    fn cell_centres_follow_origin() {
        let g = Grid::square([4, 2], 0.5, [-1.0, 2.0]).unwrap();
        let c = g.cell_center(g.cell_index(1, 1));
        assert_relative_eq!(c[0], -1.0 + 1.5 * 0.5);
        assert_relative_eq!(c[1], 2.0 + 1.5 * 0.5);
        assert_eq!(g.num_faces(), 5 * 2 + 4 * 3);
        assert_eq!(g.num_interior_faces(), 3 * 2 + 4);
    }
}
