//! Uniform Yee-grid discretization with per-cell complex relative permittivity.
//!
//! Cells are indexed `cell = i + nx * (j + ny * k)`. Each cell owns three
//! staggered electric samples placed on its lower edges:
//!
//! * `Ex(i, j, k)` at `((i + 1/2) dx, j dy, k dz)`
//! * `Ey(i, j, k)` at `(i dx, (j + 1/2) dy, k dz)`
//! * `Ez(i, j, k)` at `(i dx, j dy, (k + 1/2) dz)`
//!
//! relative to the grid origin (the outer corner of the PML). Unknown vectors
//! are cell-major: `index = 3 * cell + component`, so rows `3k, 3k+1, 3k+2`
//! form the field group of cell `k`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{CsiError, Result};

pub const C0: f64 = 299_792_458.0;
pub const EPS0: f64 = 8.854_187_812_8e-12;
pub const MU0: f64 = 1.256_637_062_12e-6;

/// Cartesian field component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    X = 0,
    Y = 1,
    Z = 2,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::X, Component::Y, Component::Z];

    pub fn axis(self) -> usize {
        self as usize
    }

    pub fn from_axis(axis: usize) -> Component {
        Component::ALL[axis]
    }
}

/// Isotropic material given as relative permittivity and conductivity (S/m).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub eps_r: f64,
    #[serde(default)]
    pub sigma: f64,
}

impl Material {
    pub const VACUUM: Material = Material {
        eps_r: 1.0,
        sigma: 0.0,
    };

    pub fn new(eps_r: f64, sigma: f64) -> Self {
        Material { eps_r, sigma }
    }

    /// Complex relative permittivity `eps_r - i sigma / (omega eps0)`.
    pub fn complex_eps(&self, omega: f64) -> Complex64 {
        Complex64::new(self.eps_r, -self.sigma / (omega * EPS0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Shape {
    Box { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

impl Shape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Shape::Box { min, max } => (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]),
            Shape::Sphere { center, radius } => {
                let d2: f64 = (0..3).map(|a| (p[a] - center[a]).powi(2)).sum();
                d2 <= radius * radius
            }
        }
    }

    pub fn is_degenerate(&self) -> bool {
        match *self {
            Shape::Box { min, max } => (0..3).any(|a| max[a] <= min[a]),
            Shape::Sphere { radius, .. } => radius <= 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        match *self {
            Shape::Box { min, max } => min.iter().chain(max.iter()).all(|v| !v.is_nan()),
            Shape::Sphere { center, radius } => {
                center.iter().all(|v| v.is_finite()) && radius.is_finite()
            }
        }
    }

    /// Axis-aligned bounding box.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match *self {
            Shape::Box { min, max } => (min, max),
            Shape::Sphere { center, radius } => (
                [center[0] - radius, center[1] - radius, center[2] - radius],
                [center[0] + radius, center[1] + radius, center[2] + radius],
            ),
        }
    }

    /// Returns the shape translated by `offset`.
    pub fn translated(&self, offset: [f64; 3]) -> Shape {
        match *self {
            Shape::Box { min, max } => Shape::Box {
                min: [min[0] + offset[0], min[1] + offset[1], min[2] + offset[2]],
                max: [max[0] + offset[0], max[1] + offset[1], max[2] + offset[2]],
            },
            Shape::Sphere { center, radius } => Shape::Sphere {
                center: [
                    center[0] + offset[0],
                    center[1] + offset[1],
                    center[2] + offset[2],
                ],
                radius,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(flatten)]
    pub shape: Shape,
    #[serde(flatten)]
    pub material: Material,
}

/// Requested discretization of an interior box. PML layers are added outside
/// the extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub extent_min: [f64; 3],
    pub extent_max: [f64; 3],
    /// Requested maximum cell size in meters.
    pub spacing: f64,
    pub pml_cells: usize,
    /// Frequency in Hz.
    pub frequency: f64,
}

impl GridSpec {
    pub fn omega(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.frequency
    }

    pub fn wavelength(&self) -> f64 {
        C0 / self.frequency
    }
}

/// Largest admissible cell size `lambda0 / (15 sqrt(max eps_r))`.
pub fn max_spacing(wavelength: f64, max_eps_r: f64) -> f64 {
    wavelength / (15.0 * max_eps_r.max(1.0).sqrt())
}

/// Minimal interior cell counts meeting the spacing bound for an extent.
pub fn min_cells(extent: [f64; 3], max_spacing: f64) -> [usize; 3] {
    extent.map(|e| ((e / max_spacing) - 1e-9).ceil().max(1.0) as usize)
}

/// Outcome of rasterizing one shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RasterOutcome {
    pub cells_set: usize,
    /// Set when the shape had zero volume and nothing was written.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct YeeGrid {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    pml_cells: usize,
    omega: f64,
    eps: Vec<Complex64>,
}

impl YeeGrid {
    /// Builds a grid over `spec`, rasterizing `regions` in order (later
    /// regions override earlier ones) on top of a vacuum background.
    pub fn build(spec: &GridSpec, regions: &[Region]) -> Result<YeeGrid> {
        let omega = spec.omega();
        if !(spec.frequency > 0.0) || !spec.frequency.is_finite() {
            return Err(CsiError::InvalidGrid("frequency must be positive".into()));
        }
        if !(spec.spacing > 0.0) {
            return Err(CsiError::InvalidGrid("spacing must be positive".into()));
        }
        let mut extent = [0.0; 3];
        for a in 0..3 {
            extent[a] = spec.extent_max[a] - spec.extent_min[a];
            if !(extent[a] > 0.0) {
                return Err(CsiError::InvalidGrid(format!("empty extent along axis {a}")));
            }
        }
        let max_eps = regions
            .iter()
            .map(|r| r.material.eps_r)
            .fold(1.0_f64, f64::max);
        let dmax = max_spacing(spec.wavelength(), max_eps);
        if spec.spacing > dmax {
            return Err(CsiError::MeshTooCoarse {
                spacing: spec.spacing,
                max_spacing: dmax,
                min_cells: min_cells(extent, dmax),
            });
        }
        let interior = min_cells(extent, spec.spacing);
        let spacing = [0, 1, 2].map(|a| extent[a] / interior[a] as f64);
        let p = spec.pml_cells;
        let dims = interior.map(|n| n + 2 * p);
        let origin = [0, 1, 2].map(|a| spec.extent_min[a] - p as f64 * spacing[a]);
        let n = dims[0] * dims[1] * dims[2];
        let mut grid = YeeGrid {
            dims,
            spacing,
            origin,
            pml_cells: p,
            omega,
            eps: vec![Complex64::new(1.0, 0.0); n],
        };
        for (index, region) in regions.iter().enumerate() {
            let (lo, hi) = region.shape.bounds();
            let (emin, emax) = grid.interior_bounds();
            let intersects = (0..3).all(|a| hi[a] >= emin[a] && lo[a] <= emax[a]);
            if !intersects || !region.shape.is_finite() {
                return Err(CsiError::RegionOutsideExtent { index });
            }
            grid.rasterize_shape(&region.shape, region.material.complex_eps(omega))?;
        }
        Ok(grid)
    }

    /// Grid from explicit parts, mostly for tests and deserialization.
    pub fn from_parts(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        pml_cells: usize,
        omega: f64,
        eps: Vec<Complex64>,
    ) -> Result<YeeGrid> {
        if dims.iter().any(|&d| d < 1 + 2 * pml_cells) {
            return Err(CsiError::InvalidGrid(format!(
                "dims {dims:?} too small for {pml_cells} PML cells"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(CsiError::InvalidGrid("spacing must be positive".into()));
        }
        if eps.len() != dims[0] * dims[1] * dims[2] {
            return Err(CsiError::DimensionMismatch(format!(
                "{} permittivity entries for {} cells",
                eps.len(),
                dims[0] * dims[1] * dims[2]
            )));
        }
        if let Some(bad) = eps.iter().find(|e| !valid_eps(**e)) {
            return Err(CsiError::InvalidMaterial(format!("permittivity {bad}")));
        }
        Ok(YeeGrid {
            dims,
            spacing,
            origin,
            pml_cells,
            omega,
            eps,
        })
    }

    /// Uniform vacuum grid with cubic cells, convenient for small tests.
    pub fn uniform(dims: [usize; 3], spacing: f64, pml_cells: usize, omega: f64) -> Result<YeeGrid> {
        let n = dims[0] * dims[1] * dims[2];
        YeeGrid::from_parts(
            dims,
            [spacing; 3],
            [0.0; 3],
            pml_cells,
            omega,
            vec![Complex64::new(1.0, 0.0); n],
        )
    }

    /// Sets every cell whose center lies inside `shape` to `eps`. PML cells
    /// are tested at their center projected onto the interior box, so
    /// layered backgrounds continue into the absorbing layers.
    pub fn rasterize_shape(&mut self, shape: &Shape, eps: Complex64) -> Result<RasterOutcome> {
        if !shape.is_finite() {
            return Err(CsiError::InvalidArgument("non-finite shape".into()));
        }
        if !valid_eps(eps) {
            return Err(CsiError::InvalidMaterial(format!("permittivity {eps}")));
        }
        if shape.is_degenerate() {
            log::warn!("degenerate shape {shape:?} ignored");
            return Ok(RasterOutcome {
                cells_set: 0,
                degenerate: true,
            });
        }
        let (emin, emax) = self.interior_bounds();
        let mut cells_set = 0;
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    let c = self.cell_center([i, j, k]);
                    let p = [0, 1, 2].map(|a| c[a].clamp(emin[a], emax[a]));
                    if shape.contains(p) {
                        let idx = self.cell_index(i, j, k);
                        self.eps[idx] = eps;
                        cells_set += 1;
                    }
                }
            }
        }
        Ok(RasterOutcome {
            cells_set,
            degenerate: false,
        })
    }

    /// Returns a copy whose permittivity is mapped cell by cell.
    pub fn map_eps(&self, f: impl Fn(Complex64) -> Complex64) -> Result<YeeGrid> {
        let eps: Vec<Complex64> = self.eps.iter().map(|&e| f(e)).collect();
        YeeGrid::from_parts(
            self.dims,
            self.spacing,
            self.origin,
            self.pml_cells,
            self.omega,
            eps,
        )
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn pml_cells(&self) -> usize {
        self.pml_cells
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// Free-space wavenumber `omega / c0`.
    pub fn k0(&self) -> f64 {
        self.omega / C0
    }

    pub fn num_cells(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Number of field unknowns, `3 N`.
    pub fn num_unknowns(&self) -> usize {
        3 * self.num_cells()
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    pub fn eps(&self) -> &[Complex64] {
        &self.eps
    }

    pub fn eps_at(&self, cell: usize) -> Complex64 {
        self.eps[cell]
    }

    /// Per-unknown permittivity (each component takes its cell's value).
    pub fn component_eps(&self) -> Vec<Complex64> {
        self.eps.iter().flat_map(|&e| [e, e, e]).collect()
    }

    pub fn cell_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn cell_coords(&self, cell: usize) -> [usize; 3] {
        let i = cell % self.dims[0];
        let j = (cell / self.dims[0]) % self.dims[1];
        let k = cell / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    pub fn unknown_index(&self, c: Component, i: usize, j: usize, k: usize) -> usize {
        3 * self.cell_index(i, j, k) + c as usize
    }

    pub fn cell_center(&self, [i, j, k]: [usize; 3]) -> [f64; 3] {
        [
            self.origin[0] + (i as f64 + 0.5) * self.spacing[0],
            self.origin[1] + (j as f64 + 0.5) * self.spacing[1],
            self.origin[2] + (k as f64 + 0.5) * self.spacing[2],
        ]
    }

    /// Physical location of a staggered sample.
    pub fn sample_position(&self, c: Component, [i, j, k]: [usize; 3]) -> [f64; 3] {
        let idx = [i, j, k];
        let mut p = [0.0; 3];
        for a in 0..3 {
            let half = if a == c.axis() { 0.5 } else { 0.0 };
            p[a] = self.origin[a] + (idx[a] as f64 + half) * self.spacing[a];
        }
        p
    }

    /// Non-PML interior box in meters.
    pub fn interior_bounds(&self) -> ([f64; 3], [f64; 3]) {
        let p = self.pml_cells as f64;
        let lo = [0, 1, 2].map(|a| self.origin[a] + p * self.spacing[a]);
        let hi = [0, 1, 2].map(|a| self.origin[a] + (self.dims[a] as f64 - p) * self.spacing[a]);
        (lo, hi)
    }

    pub fn is_interior_cell(&self, [i, j, k]: [usize; 3]) -> bool {
        let p = self.pml_cells;
        let idx = [i, j, k];
        (0..3).all(|a| idx[a] >= p && idx[a] < self.dims[a] - p)
    }

    /// Nearest staggered sample of component `c` to `position`; errors when
    /// that sample is not in the non-PML interior.
    pub fn nearest_sample(&self, c: Component, position: [f64; 3]) -> Result<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let half = if a == c.axis() { 0.5 } else { 0.0 };
            let u = (position[a] - self.origin[a]) / self.spacing[a] - half;
            let r = u.round();
            if !r.is_finite() || r < self.pml_cells as f64 || r >= (self.dims[a] - self.pml_cells) as f64 {
                return Err(CsiError::OutsideInterior { position });
            }
            idx[a] = r as usize;
        }
        Ok(idx)
    }

    /// Trilinear weights of the component-`c` lattice at `position`, as
    /// `(unknown, weight)` pairs with zero weights dropped. Every sample used
    /// must lie in the non-PML interior.
    pub fn interpolation_weights(&self, c: Component, position: [f64; 3]) -> Result<Vec<(usize, f64)>> {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let half = if a == c.axis() { 0.5 } else { 0.0 };
            let u = (position[a] - self.origin[a]) / self.spacing[a] - half;
            let mut i0 = u.floor();
            let mut t = u - i0;
            if t > 1.0 - 1e-9 {
                i0 += 1.0;
                t = 0.0;
            } else if t < 1e-9 {
                t = 0.0;
            }
            let lo = self.pml_cells as f64;
            let hi = (self.dims[a] - self.pml_cells) as f64;
            let top = if t > 0.0 { i0 + 1.0 } else { i0 };
            if !u.is_finite() || i0 < lo || top >= hi {
                return Err(CsiError::OutsideInterior { position });
            }
            base[a] = i0 as usize;
            frac[a] = t;
        }
        let mut out = Vec::with_capacity(8);
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = base;
            for a in 0..3 {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    idx[a] += 1;
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w > 0.0 {
                out.push((self.unknown_index(c, idx[0], idx[1], idx[2]), w));
            }
        }
        Ok(out)
    }

    /// Cell containing `position` if it lies in the non-PML interior.
    pub fn cell_at(&self, position: [f64; 3]) -> Result<usize> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let u = ((position[a] - self.origin[a]) / self.spacing[a]).floor();
            if !u.is_finite() || u < self.pml_cells as f64 || u >= (self.dims[a] - self.pml_cells) as f64 {
                return Err(CsiError::OutsideInterior { position });
            }
            idx[a] = u as usize;
        }
        Ok(self.cell_index(idx[0], idx[1], idx[2]))
    }

    /// Cells of the non-PML interior whose centers lie inside `shape`.
    pub fn cells_in(&self, shape: &Shape) -> Vec<usize> {
        (0..self.num_cells())
            .filter(|&c| {
                let ijk = self.cell_coords(c);
                self.is_interior_cell(ijk) && shape.contains(self.cell_center(ijk))
            })
            .collect()
    }

    /// Stable content hash of the discretization (hex SHA-256).
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for d in self.dims {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.spacing.iter().chain(self.origin.iter()) {
            h.update(v.to_le_bytes());
        }
        h.update((self.pml_cells as u64).to_le_bytes());
        h.update(self.omega.to_le_bytes());
        for e in &self.eps {
            h.update(e.re.to_le_bytes());
            h.update(e.im.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn valid_eps(e: Complex64) -> bool {
    e.re.is_finite() && e.im.is_finite() && e.re >= 1.0 && e.im <= 0.0
}
