//! Measurement selection and the dense scattering matrix.
//!
//! Row `m` of the scattering matrix is `k0^2 (A^{-T} M_m^T)^T`, obtained
//! from one transpose solve per measurement. Columns run over the unknowns
//! of an [`InversionDomain`] (three per domain cell, cell-major).

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CsiError, Result};
use crate::fdfd::{SolverOptions, StiffnessMatrix};
use crate::grid::{Component, Shape, YeeGrid};

/// Subset of grid cells carrying contrast (and contrast sources).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InversionDomain {
    cells: Vec<usize>,
    num_grid_cells: usize,
}

impl InversionDomain {
    pub fn new(mut cells: Vec<usize>, num_grid_cells: usize) -> Result<Self> {
        cells.sort_unstable();
        cells.dedup();
        if cells.is_empty() {
            return Err(CsiError::InvalidArgument("inversion domain is empty".into()));
        }
        if cells.last().copied().unwrap_or(0) >= num_grid_cells {
            return Err(CsiError::DimensionMismatch("domain cell out of range".into()));
        }
        Ok(InversionDomain {
            cells,
            num_grid_cells,
        })
    }

    /// Interior cells whose centers lie inside `shape`.
    pub fn from_shape(grid: &YeeGrid, shape: &Shape) -> Result<Self> {
        InversionDomain::new(grid.cells_in(shape), grid.num_cells())
    }

    /// Every cell of the grid, PML included.
    pub fn whole_grid(grid: &YeeGrid) -> Self {
        InversionDomain {
            cells: (0..grid.num_cells()).collect(),
            num_grid_cells: grid.num_cells(),
        }
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_unknowns(&self) -> usize {
        3 * self.cells.len()
    }

    pub fn num_grid_cells(&self) -> usize {
        self.num_grid_cells
    }

    /// Global unknown index of local unknown `u`.
    pub fn global_unknown(&self, u: usize) -> usize {
        3 * self.cells[u / 3] + u % 3
    }

    /// Scatters a domain vector into a zero grid vector.
    pub fn embed(&self, local: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); 3 * self.num_grid_cells];
        for (u, v) in local.iter().enumerate() {
            out[self.global_unknown(u)] = *v;
        }
        out
    }

    /// Gathers the domain unknowns of a grid vector.
    pub fn restrict(&self, global: &[Complex64]) -> Vec<Complex64> {
        (0..self.num_unknowns()).map(|u| global[self.global_unknown(u)]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Receiver {
    pub position: [f64; 3],
    pub components: Vec<Component>,
}

impl Receiver {
    /// Receiver sampling the x and y field components.
    pub fn xy(position: [f64; 3]) -> Self {
        Receiver {
            position,
            components: vec![Component::X, Component::Y],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MeasurementRow {
    pub receiver: usize,
    pub component: Component,
    /// Selected unknown of the grid vector.
    pub unknown: usize,
}

/// Pure selection operator `M` (one unit entry per row).
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementOperator {
    receivers: Vec<Receiver>,
    rows: Vec<MeasurementRow>,
    num_unknowns: usize,
}

impl MeasurementOperator {
    /// Maps each receiver component to its nearest staggered sample.
    pub fn build(grid: &YeeGrid, receivers: &[Receiver]) -> Result<Self> {
        let mut rows = Vec::new();
        for (r, rec) in receivers.iter().enumerate() {
            for &c in &rec.components {
                let [i, j, k] = grid.nearest_sample(c, rec.position)?;
                rows.push(MeasurementRow {
                    receiver: r,
                    component: c,
                    unknown: grid.unknown_index(c, i, j, k),
                });
            }
        }
        Ok(MeasurementOperator {
            receivers: receivers.to_vec(),
            rows,
            num_unknowns: grid.num_unknowns(),
        })
    }

    pub fn receivers(&self) -> &[Receiver] {
        &self.receivers
    }

    pub fn rows(&self) -> &[MeasurementRow] {
        &self.rows
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_unknowns(&self) -> usize {
        self.num_unknowns
    }

    pub fn apply(&self, field: &[Complex64]) -> Vec<Complex64> {
        self.rows.iter().map(|row| field[row.unknown]).collect()
    }

    /// Row indices belonging to the given receivers.
    pub fn rows_of(&self, receivers: &[usize]) -> Vec<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, row)| receivers.contains(&row.receiver))
            .map(|(m, _)| m)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatteringMatrix {
    /// Dense `M x 3N_D` matrix, row-major.
    pub phi: Array2<Complex64>,
    pub omega: f64,
    pub tol: f64,
    /// Content hash of the operator inputs (grid, domain, receivers, tol).
    pub key: String,
}

impl ScatteringMatrix {
    pub fn rows(&self) -> usize {
        self.phi.nrows()
    }

    pub fn cols(&self) -> usize {
        self.phi.ncols()
    }

    pub fn apply(&self, j: &[Complex64]) -> Vec<Complex64> {
        let v = ndarray::ArrayView1::from(j);
        self.phi.dot(&v).to_vec()
    }
}

/// Hash identifying a scattering-matrix build.
pub fn scattering_key(grid: &YeeGrid, meas: &MeasurementOperator, domain: &InversionDomain, tol: f64) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(grid.content_hash().as_bytes());
    for row in meas.rows() {
        h.update((row.unknown as u64).to_le_bytes());
    }
    for &c in domain.cells() {
        h.update((c as u64).to_le_bytes());
    }
    h.update(tol.to_le_bytes());
    hex::encode(h.finalize())
}

/// Builds the scattering matrix by one transpose solve per measurement row.
/// Rows are independent and solved in parallel.
pub fn build_scattering_matrix(
    a: &StiffnessMatrix,
    meas: &MeasurementOperator,
    domain: &InversionDomain,
    opts: &SolverOptions,
) -> Result<ScatteringMatrix> {
    if meas.num_unknowns() != a.dim() {
        return Err(CsiError::DimensionMismatch(format!(
            "measurement operator over {} unknowns, stiffness matrix {}",
            meas.num_unknowns(),
            a.dim()
        )));
    }
    if 3 * domain.num_grid_cells() != a.dim() {
        return Err(CsiError::DimensionMismatch("domain built for another grid".into()));
    }
    let k2 = a.source_scale();
    let ncols = domain.num_unknowns();
    let rows: Vec<Vec<Complex64>> = meas
        .rows()
        .par_iter()
        .enumerate()
        .map(|(m, row)| {
            let mut rhs = vec![Complex64::new(0.0, 0.0); a.dim()];
            rhs[row.unknown] = Complex64::new(1.0, 0.0);
            let (phi, _) = a.solve_adjoint(&rhs, opts).map_err(|e| CsiError::RowBuild {
                row: m,
                source: Box::new(e),
            })?;
            Ok(domain.restrict(&phi).into_iter().map(|v| v * k2).collect())
        })
        .collect::<Result<_>>()?;
    let mut phi = Array2::zeros((rows.len(), ncols));
    for (m, row) in rows.into_iter().enumerate() {
        phi.row_mut(m).assign(&ndarray::Array1::from(row));
    }
    Ok(ScatteringMatrix {
        phi,
        omega: a.grid().omega(),
        tol: opts.tol,
        key: scattering_key(a.grid(), meas, domain, opts.tol),
    })
}

/// Receiver samples of the field radiated by a domain contrast source,
/// `M A^{-1} k0^2 j`, computed with one forward solve.
pub fn direct_measurement(
    a: &StiffnessMatrix,
    meas: &MeasurementOperator,
    domain: &InversionDomain,
    j: &[Complex64],
    opts: &SolverOptions,
) -> Result<Vec<Complex64>> {
    let field = crate::fdfd::scattered_from_contrast_source(a, &domain.embed(j), opts)?;
    Ok(meas.apply(&field.data))
}

/// Row partition of the scattering matrix and the data into reconstruction
/// and cross-validation blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct CvSplit {
    pub phi_r: Array2<Complex64>,
    pub phi_cv: Array2<Complex64>,
    /// `M_r x P` data block.
    pub f_r: Array2<Complex64>,
    pub f_cv: Array2<Complex64>,
    pub rows_r: Vec<usize>,
    pub rows_cv: Vec<usize>,
}

/// Splits rows by receiver: rows of `cv_receivers` form the CV block.
pub fn split_cv(
    phi: &ScatteringMatrix,
    meas: &MeasurementOperator,
    data: &Array2<Complex64>,
    cv_receivers: &[usize],
) -> Result<CvSplit> {
    if data.nrows() != phi.rows() || meas.num_rows() != phi.rows() {
        return Err(CsiError::DimensionMismatch(format!(
            "data has {} rows, scattering matrix {}",
            data.nrows(),
            phi.rows()
        )));
    }
    if let Some(&bad) = cv_receivers.iter().find(|&&r| r >= meas.receivers().len()) {
        return Err(CsiError::InvalidArgument(format!("CV receiver {bad} does not exist")));
    }
    let rows_cv = meas.rows_of(cv_receivers);
    let rows_r: Vec<usize> = (0..phi.rows()).filter(|m| !rows_cv.contains(m)).collect();
    if rows_cv.is_empty() {
        return Err(CsiError::EmptyPartition("cross-validation block".into()));
    }
    if rows_r.is_empty() {
        return Err(CsiError::EmptyPartition("reconstruction block".into()));
    }
    Ok(CvSplit {
        phi_r: phi.phi.select(ndarray::Axis(0), &rows_r),
        phi_cv: phi.phi.select(ndarray::Axis(0), &rows_cv),
        f_r: data.select(ndarray::Axis(0), &rows_r),
        f_cv: data.select(ndarray::Axis(0), &rows_cv),
        rows_r,
        rows_cv,
    })
}

/// Spatially spread CV subset: every `stride`-th receiver in a diagonal
/// pattern, about `fraction` of the receivers (at least one).
pub fn default_cv_receivers(num_receivers: usize, fraction: f64) -> Vec<usize> {
    let count = ((num_receivers as f64 * fraction).round() as usize).clamp(1, num_receivers.saturating_sub(1).max(1));
    let stride = num_receivers as f64 / count as f64;
    (0..count)
        .map(|i| (((i as f64 + 0.5) * stride).floor() as usize).min(num_receivers - 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdfd::StiffnessMatrix;
    use crate::grid::C0;
    use crate::krylov::norm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_setup() -> (StiffnessMatrix, MeasurementOperator, InversionDomain) {
        let lam = 0.3;
        let omega = 2.0 * std::f64::consts::PI * C0 / lam;
        let g = YeeGrid::uniform([14, 14, 14], lam / 15.0, 4, omega).unwrap();
        let a = StiffnessMatrix::assemble_default(&g).unwrap();
        let receivers: Vec<Receiver> = [0.11, 0.17]
            .iter()
            .flat_map(|&x| [0.11, 0.17].map(|y| Receiver::xy([x, y, 0.17])))
            .collect();
        let meas = MeasurementOperator::build(&g, &receivers).unwrap();
        let domain = InversionDomain::from_shape(
            &g,
            &Shape::Box {
                min: [0.1, 0.1, 0.09],
                max: [0.18, 0.18, 0.14],
            },
        )
        .unwrap();
        (a, meas, domain)
    }

    #[test]
    fn selection_semantics() {
        let (a, meas, _) = small_setup();
        assert_eq!(meas.num_rows(), 8);
        let field: Vec<Complex64> = (0..a.dim()).map(|u| Complex64::new(u as f64, -(u as f64))).collect();
        let out = meas.apply(&field);
        for (m, row) in meas.rows().iter().enumerate() {
            assert_eq!(out[m], field[row.unknown]);
        }
    }

    #[test]
    fn receiver_on_sample_selects_it() {
        let g = YeeGrid::uniform([10, 10, 10], 0.1, 2, 1e9).unwrap();
        let p = g.sample_position(Component::Y, [4, 5, 6]);
        let meas = MeasurementOperator::build(
            &g,
            &[Receiver {
                position: p,
                components: vec![Component::Y],
            }],
        )
        .unwrap();
        assert_eq!(meas.rows()[0].unknown, g.unknown_index(Component::Y, 4, 5, 6));
    }

    #[test]
    fn receiver_in_pml_rejected() {
        let g = YeeGrid::uniform([10, 10, 10], 0.1, 2, 1e9).unwrap();
        assert!(MeasurementOperator::build(&g, &[Receiver::xy([0.05, 0.5, 0.5])]).is_err());
    }

    #[test]
    fn two_path_consistency() {
        let (a, meas, domain) = small_setup();
        let opts = SolverOptions::new(1e-8);
        let phi = build_scattering_matrix(&a, &meas, &domain, &opts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..3 {
            let j: Vec<Complex64> = (0..domain.num_unknowns())
                .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
                .collect();
            let fast = phi.apply(&j);
            let slow = direct_measurement(&a, &meas, &domain, &j, &opts).unwrap();
            let diff: Vec<Complex64> = fast.iter().zip(&slow).map(|(p, q)| p - q).collect();
            assert!(norm(&diff) / norm(&slow) <= 10.0 * opts.tol);
        }
    }

    #[test]
    fn empty_measurement_gives_empty_matrix() {
        let (a, _, domain) = small_setup();
        let meas = MeasurementOperator::build(a.grid(), &[]).unwrap();
        let phi = build_scattering_matrix(&a, &meas, &domain, &SolverOptions::default()).unwrap();
        assert_eq!(phi.rows(), 0);
        assert_eq!(phi.cols(), domain.num_unknowns());
    }

    #[test]
    fn cv_split_partitions_rows() {
        let (a, meas, domain) = small_setup();
        let phi = ScatteringMatrix {
            phi: Array2::from_shape_fn((meas.num_rows(), domain.num_unknowns()), |(m, u)| {
                Complex64::new(m as f64, u as f64)
            }),
            omega: a.grid().omega(),
            tol: 1e-8,
            key: String::new(),
        };
        let data = Array2::from_shape_fn((meas.num_rows(), 2), |(m, p)| Complex64::new(m as f64, p as f64));
        let split = split_cv(&phi, &meas, &data, &[2]).unwrap();
        assert_eq!(split.rows_cv.len(), 2);
        assert_eq!(split.rows_r.len(), meas.num_rows() - 2);
        let mut all: Vec<usize> = split.rows_r.iter().chain(&split.rows_cv).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..meas.num_rows()).collect::<Vec<_>>());
        for (i, &m) in split.rows_cv.iter().enumerate() {
            assert_eq!(split.phi_cv.row(i), phi.phi.row(m));
            assert_eq!(split.f_cv.row(i), data.row(m));
        }
        assert!(matches!(
            split_cv(&phi, &meas, &data, &[]),
            Err(CsiError::EmptyPartition(_))
        ));
        assert!(matches!(
            split_cv(&phi, &meas, &data, &[0, 1, 2, 3]),
            Err(CsiError::EmptyPartition(_))
        ));
    }

    #[test]
    fn cv_split_of_81_receivers() {
        let g = YeeGrid::uniform([14, 14, 6], 0.1, 2, 1e9).unwrap();
        let receivers: Vec<Receiver> = (0..81)
            .map(|r| Receiver::xy([0.25 + 0.1 * (r % 9) as f64, 0.25 + 0.1 * (r / 9) as f64, 0.3]))
            .collect();
        let meas = MeasurementOperator::build(&g, &receivers).unwrap();
        assert_eq!(meas.num_rows(), 162);
        let phi = ScatteringMatrix {
            phi: Array2::zeros((162, 3)),
            omega: 1e9,
            tol: 1e-8,
            key: String::new(),
        };
        let data = Array2::zeros((162, 1));
        let cv: Vec<usize> = (0..12).map(|i| i * 7).collect();
        let split = split_cv(&phi, &meas, &data, &cv).unwrap();
        assert_eq!(split.rows_r.len(), 138);
        assert_eq!(split.rows_cv.len(), 24);
    }

    #[test]
    fn default_cv_subset_is_spread() {
        let cv = default_cv_receivers(81, 0.15);
        assert_eq!(cv.len(), 12);
        let mut sorted = cv.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 12);
        assert!(cv.iter().all(|&r| r < 81));
        assert_eq!(default_cv_receivers(4, 0.15), vec![2]);
    }
}
