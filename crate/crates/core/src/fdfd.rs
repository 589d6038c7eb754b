//! Frequency-domain curl-curl operator on the Yee grid and forward solves.
//!
//! The discrete equation is scaled by `mu0`, so the stiffness matrix is
//! `A = C_h C_e - k0^2 diag(eps_r)` with `k0 = omega / c0`, and the scattered
//! field of a relative contrast source `j = chi e_tot` solves
//! `A e_sct = k0^2 j`. Outside the grid the electric field is zero (a PEC
//! shell behind the PML).

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CsiError, Result};
use crate::grid::{Component, YeeGrid, MU0};
use crate::krylov::{self, SolveStats};
use crate::pml::PmlStretch;
use crate::sparse::CsrMatrix;

/// Relative tolerance used when generating synthetic data.
pub const DATA_TOL: f64 = 1e-8;
/// Relative tolerance used inside inversion loops.
pub const INVERSION_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl SolverOptions {
    pub fn new(tol: f64) -> Self {
        SolverOptions {
            tol,
            max_iter: 20_000,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(CsiError::InvalidArgument(format!(
                "solver tolerance {} outside (0, 1)",
                self.tol
            )));
        }
        Ok(())
    }
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions::new(DATA_TOL)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Incident,
    Scattered,
    Total,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldVector {
    pub data: Vec<Complex64>,
    pub kind: FieldKind,
    pub source: Option<usize>,
}

impl FieldVector {
    pub fn new(data: Vec<Complex64>, kind: FieldKind, source: Option<usize>) -> Self {
        FieldVector { data, kind, source }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `e_tot = e_inc + e_sct`
    pub fn total(incident: &FieldVector, scattered: &FieldVector) -> FieldVector {
        let data = incident
            .data
            .iter()
            .zip(&scattered.data)
            .map(|(a, b)| a + b)
            .collect();
        FieldVector::new(data, FieldKind::Total, incident.source)
    }
}

/// Point electric dipole pair at one location: x- and y-directed current
/// moments in A·m.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DipoleSource {
    pub position: [f64; 3],
    pub moment_x: [f64; 2],
    pub moment_y: [f64; 2],
}

impl DipoleSource {
    /// x dipole plus a y dipole shifted by pi/2 (circular polarization).
    pub fn circular(position: [f64; 3]) -> Self {
        DipoleSource {
            position,
            moment_x: [1.0, 0.0],
            moment_y: [0.0, 1.0],
        }
    }

    pub fn x_dipole(position: [f64; 3]) -> Self {
        DipoleSource {
            position,
            moment_x: [1.0, 0.0],
            moment_y: [0.0, 0.0],
        }
    }

    pub fn y_dipole(position: [f64; 3]) -> Self {
        DipoleSource {
            position,
            moment_x: [0.0, 0.0],
            moment_y: [1.0, 0.0],
        }
    }

    pub fn scaled(&self, amplitude: Complex64) -> Self {
        let mx = Complex64::new(self.moment_x[0], self.moment_x[1]) * amplitude;
        let my = Complex64::new(self.moment_y[0], self.moment_y[1]) * amplitude;
        DipoleSource {
            position: self.position,
            moment_x: [mx.re, mx.im],
            moment_y: [my.re, my.im],
        }
    }

    /// Right-hand side `-i omega mu0 J` with the current spread over one
    /// edge sample per dipole (`J = moment / cell volume`).
    pub fn rhs(&self, grid: &YeeGrid) -> Result<Vec<Complex64>> {
        let mut b = vec![Complex64::new(0.0, 0.0); grid.num_unknowns()];
        let scale = Complex64::new(0.0, -grid.omega() * MU0 / grid.cell_volume());
        for (c, m) in [(Component::X, self.moment_x), (Component::Y, self.moment_y)] {
            let moment = Complex64::new(m[0], m[1]);
            if moment == Complex64::new(0.0, 0.0) {
                continue;
            }
            let [i, j, k] = grid.nearest_sample(c, self.position)?;
            b[grid.unknown_index(c, i, j, k)] += scale * moment;
        }
        Ok(b)
    }

    /// Like [`rhs`](Self::rhs) but with each dipole placed at an explicit
    /// point and spread over the surrounding samples with trilinear weights.
    pub fn rhs_at(&self, grid: &YeeGrid, x_at: [f64; 3], y_at: [f64; 3]) -> Result<Vec<Complex64>> {
        let mut b = vec![Complex64::new(0.0, 0.0); grid.num_unknowns()];
        let scale = Complex64::new(0.0, -grid.omega() * MU0 / grid.cell_volume());
        for (c, m, at) in [(Component::X, self.moment_x, x_at), (Component::Y, self.moment_y, y_at)] {
            let moment = Complex64::new(m[0], m[1]);
            if moment == Complex64::new(0.0, 0.0) {
                continue;
            }
            for (u, w) in grid.interpolation_weights(c, at)? {
                b[u] += scale * moment * w;
            }
        }
        Ok(b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSet {
    pub sources: Vec<DipoleSource>,
}

impl SourceSet {
    pub fn new(sources: Vec<DipoleSource>) -> Result<Self> {
        if sources.is_empty() {
            return Err(CsiError::InvalidArgument("source set is empty".into()));
        }
        Ok(SourceSet { sources })
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

/// Sparse `3N x 3N` curl-curl operator together with its transpose.
#[derive(Clone, Debug)]
pub struct StiffnessMatrix {
    grid: YeeGrid,
    a: CsrMatrix,
    at: CsrMatrix,
}

impl StiffnessMatrix {
    pub fn assemble(grid: &YeeGrid, pml: &PmlStretch) -> Result<StiffnessMatrix> {
        let dims = grid.dims();
        if pml.dims() != dims {
            return Err(CsiError::DimensionMismatch(format!(
                "PML built for {:?}, grid is {:?}",
                pml.dims(),
                dims
            )));
        }
        let n3 = grid.num_unknowns();
        let h = grid.spacing();
        let k0sq = grid.k0() * grid.k0();
        let [nx, ny, nz] = dims;
        let mut triplets: Vec<(usize, usize, Complex64)> = Vec::with_capacity(16 * n3 + n3);

        // Each magnetic sample couples four electric samples through the
        // forward curl C_e (stretched at the H position) and back through
        // C_h (stretched at the E position): (E index, C_e coeff, C_h coeff).
        let mut couplings: Vec<(usize, Complex64, Complex64)> = Vec::with_capacity(4);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let base = [i, j, k];
                    for hc in Component::ALL {
                        couplings.clear();
                        let a1 = (hc.axis() + 1) % 3;
                        let a2 = (hc.axis() + 2) % 3;
                        // H_c = d(E_a2)/d(a1) - d(E_a1)/d(a2)
                        for (ecomp, axis, sign) in [(a2, a1, 1.0), (a1, a2, -1.0)] {
                            let half = pml.at_half(axis, base[axis]);
                            for (offset, s) in [(1usize, sign), (0usize, -sign)] {
                                let mut idx = base;
                                idx[axis] += offset;
                                if idx[axis] >= dims[axis] {
                                    continue;
                                }
                                let e = grid.unknown_index(Component::from_axis(ecomp), idx[0], idx[1], idx[2]);
                                let at_int = pml.at_integer(axis, idx[axis]);
                                let ce = Complex64::new(s / h[axis], 0.0) / half;
                                let ch = Complex64::new(s / h[axis], 0.0) / at_int;
                                couplings.push((e, ce, ch));
                            }
                        }
                        for &(e_out, _, ch) in &couplings {
                            for &(e_in, ce, _) in &couplings {
                                triplets.push((e_out, e_in, ch * ce));
                            }
                        }
                    }
                }
            }
        }
        for (u, e) in grid.component_eps().iter().enumerate() {
            triplets.push((u, u, -k0sq * e));
        }
        let a = CsrMatrix::from_triplets(n3, n3, triplets);
        let at = a.transpose();
        Ok(StiffnessMatrix {
            grid: grid.clone(),
            a,
            at,
        })
    }

    /// Assembles with the default PML grading.
    pub fn assemble_default(grid: &YeeGrid) -> Result<StiffnessMatrix> {
        StiffnessMatrix::assemble(grid, &PmlStretch::with_defaults(grid)?)
    }

    pub fn grid(&self) -> &YeeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.a
    }

    pub fn transpose_matrix(&self) -> &CsrMatrix {
        &self.at
    }

    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        self.a.mul_vec(x)
    }

    pub fn apply_transpose(&self, x: &[Complex64]) -> Vec<Complex64> {
        self.at.mul_vec(x)
    }

    /// Source scaling `k0^2` of the contrast-source equation.
    pub fn source_scale(&self) -> f64 {
        self.grid.k0() * self.grid.k0()
    }

    fn check_len(&self, v: &[Complex64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(CsiError::DimensionMismatch(format!(
                "vector of length {} for operator of size {}",
                v.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Solves `A x = rhs` to `||A x - rhs|| <= tol ||rhs||`.
    pub fn solve(&self, rhs: &[Complex64], opts: &SolverOptions) -> Result<(Vec<Complex64>, SolveStats)> {
        opts.validate()?;
        self.check_len(rhs)?;
        krylov::bicgstab(&self.a, rhs, opts.tol, opts.max_iter)
    }

    /// Solves `A^T x = rhs` (plain transpose, not conjugated).
    pub fn solve_adjoint(
        &self,
        rhs: &[Complex64],
        opts: &SolverOptions,
    ) -> Result<(Vec<Complex64>, SolveStats)> {
        opts.validate()?;
        self.check_len(rhs)?;
        krylov::bicgstab(&self.at, rhs, opts.tol, opts.max_iter)
    }

    /// Independent solves of `A x = b`, one per right-hand side, in
    /// parallel.
    pub fn solve_many(&self, rhs: &[&[Complex64]], opts: &SolverOptions) -> Result<Vec<SolveResult>> {
        opts.validate()?;
        Ok(rhs.par_iter().map(|b| self.solve(b, opts)).collect())
    }
}

pub type SolveResult = Result<(Vec<Complex64>, SolveStats)>;

/// Background fields of every source.
pub fn incident_fields(
    a_bg: &StiffnessMatrix,
    sources: &SourceSet,
    opts: &SolverOptions,
) -> Result<Vec<FieldVector>> {
    let rhs = sources
        .sources
        .iter()
        .map(|src| src.rhs(a_bg.grid()))
        .collect::<Result<Vec<_>>>()?;
    fields_from_rhs(a_bg, &rhs, opts)
}

/// Source fields for explicitly assembled right-hand sides.
pub fn fields_from_rhs(a: &StiffnessMatrix, rhs: &[Vec<Complex64>], opts: &SolverOptions) -> Result<Vec<FieldVector>> {
    let refs: Vec<&[Complex64]> = rhs.iter().map(|b| b.as_slice()).collect();
    a.solve_many(&refs, opts)?
        .into_iter()
        .enumerate()
        .map(|(p, res)| {
            res.map(|(x, _)| FieldVector::new(x, FieldKind::Incident, Some(p)))
                .map_err(|e| CsiError::SourceSolve {
                    index: p,
                    source: Box::new(e),
                })
        })
        .collect()
}

/// Scattered field `A^{-1} k0^2 j` radiated by a contrast source.
pub fn scattered_from_contrast_source(
    a_bg: &StiffnessMatrix,
    j: &[Complex64],
    opts: &SolverOptions,
) -> Result<FieldVector> {
    a_bg.check_len(j)?;
    let k = a_bg.source_scale();
    let rhs: Vec<Complex64> = j.iter().map(|v| v * k).collect();
    let (x, _) = a_bg.solve(&rhs, opts)?;
    Ok(FieldVector::new(x, FieldKind::Scattered, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::krylov::{dotu, norm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
        (0..n)
            .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect()
    }

    fn omega_for(wavelength: f64) -> f64 {
        2.0 * std::f64::consts::PI * crate::grid::C0 / wavelength
    }

    #[test]
    fn vacuum_2x2x2_is_complex_symmetric() {
        let g = YeeGrid::uniform([2, 2, 2], 0.1, 0, omega_for(1.5)).unwrap();
        let a = StiffnessMatrix::assemble_default(&g).unwrap();
        let m = a.matrix();
        for r in 0..m.nrows() {
            for (c, v) in m.row(r) {
                assert_eq!(v, m.get(c, r));
            }
        }
    }

    #[test]
    fn at_most_13_nonzeros_per_row() {
        let g = YeeGrid::uniform([6, 5, 7], 0.05, 1, omega_for(1.0)).unwrap();
        let a = StiffnessMatrix::assemble_default(&g).unwrap();
        let m = a.matrix();
        let max = (0..m.nrows()).map(|r| m.row_nnz(r)).max().unwrap();
        assert_eq!(max, 13);
    }

    #[test]
    fn omega_term_scales_quadratically() {
        let g1 = YeeGrid::uniform([4, 4, 4], 0.05, 0, omega_for(1.0)).unwrap();
        let g2 = YeeGrid::uniform([4, 4, 4], 0.05, 0, 2.0 * omega_for(1.0)).unwrap();
        let a1 = StiffnessMatrix::assemble_default(&g1).unwrap();
        let a2 = StiffnessMatrix::assemble_default(&g2).unwrap();
        // curl part unchanged, -k0^2 eps part grows by 4
        for u in [0, 7, 50] {
            let d1 = a1.matrix().get(u, u);
            let d2 = a2.matrix().get(u, u);
            assert!(((d2 - d1).re + 3.0 * g1.k0().powi(2)).abs() < 1e-9 * d1.norm());
        }
        assert_eq!(a1.matrix().get(0, 4), a2.matrix().get(0, 4));
    }

    #[test]
    fn transpose_pairing_with_pml() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = YeeGrid::uniform([8, 8, 8], 0.05, 2, omega_for(1.0)).unwrap();
        g.rasterize_shape(
            &crate::grid::Shape::Sphere { center: [0.2, 0.2, 0.2], radius: 0.1 },
            Complex64::new(2.0, -0.3),
        )
        .unwrap();
        let a = StiffnessMatrix::assemble_default(&g).unwrap();
        for _ in 0..5 {
            let x = rand_vec(a.dim(), &mut rng);
            let y = rand_vec(a.dim(), &mut rng);
            let lhs = dotu(&a.apply(&x), &y);
            let rhs = dotu(&x, &a.apply_transpose(&y));
            assert!((lhs - rhs).norm() / (norm(&x) * norm(&y)) < 1e-12);
        }
    }

    #[test]
    fn discrete_dispersion_on_periodic_mode() {
        // A transverse plane wave Ex(z) = exp(-i kz z) is an eigenvector of the
        // interior curl-curl stencil with eigenvalue (2 sin(kz h / 2) / h)^2.
        let h = 0.05;
        let n = 12;
        let g = YeeGrid::uniform([n, n, n], h, 0, omega_for(1.0)).unwrap();
        let a = StiffnessMatrix::assemble_default(&g).unwrap();
        let kz = 2.0 * std::f64::consts::PI / (6.0 * h);
        let mut x = vec![Complex64::new(0.0, 0.0); a.dim()];
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    x[g.unknown_index(Component::X, i, j, k)] =
                        Complex64::from_polar(1.0, -kz * k as f64 * h);
                }
            }
        }
        let y = a.apply(&x);
        let symbol = (2.0 * (kz * h / 2.0).sin() / h).powi(2) - g.k0().powi(2);
        let probe = g.unknown_index(Component::X, 5, 5, 5);
        let ratio = y[probe] / x[probe];
        assert!((ratio - Complex64::new(symbol, 0.0)).norm() < 1e-9 * symbol.abs());
    }

    #[test]
    fn solve_recovers_constructed_solution() {
        // smooth field so the constructed right-hand side resembles a physical one
        let mut g = YeeGrid::uniform([10, 10, 10], 0.05, 3, omega_for(1.0)).unwrap();
        g.rasterize_shape(
            &crate::grid::Shape::Box { min: [0.0; 3], max: [0.5, 0.5, 0.25] },
            Complex64::new(3.0, -0.05),
        )
        .unwrap();
        let a = StiffnessMatrix::assemble_default(&g).unwrap();
        let x_true: Vec<Complex64> = (0..a.dim())
            .map(|u| {
                let [i, j, k] = g.cell_coords(u / 3);
                Complex64::from_polar(1.0 + (u % 3) as f64, 0.3 * (i + 2 * j + 3 * k) as f64)
            })
            .collect();
        let opts = SolverOptions::new(1e-10);
        let b = a.apply(&x_true);
        let (x, stats) = a.solve(&b, &opts).unwrap();
        let res = norm(&a.apply(&x).iter().zip(&b).map(|(p, q)| p - q).collect::<Vec<_>>()) / norm(&b);
        assert!(res <= 1e-10 && stats.residual <= 1e-10, "{res}");
        let bt = a.apply_transpose(&x_true);
        let (xt, _) = a.solve_adjoint(&bt, &opts).unwrap();
        let res_t = norm(&a.apply_transpose(&xt).iter().zip(&bt).map(|(p, q)| p - q).collect::<Vec<_>>())
            / norm(&bt);
        assert!(res_t <= 1e-10, "{res_t}");
    }

    #[test]
    fn adjoint_equals_forward_for_symmetric_operator() {
        let g = YeeGrid::uniform([6, 6, 6], 0.05, 0, omega_for(1.0)).unwrap();
        let a = StiffnessMatrix::assemble_default(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = rand_vec(a.dim(), &mut rng);
        let opts = SolverOptions::new(1e-9);
        let (x1, _) = a.solve(&b, &opts).unwrap();
        let (x2, _) = a.solve_adjoint(&b, &opts).unwrap();
        assert_eq!(x1, x2);
    }

    #[test]
    fn zero_rhs_gives_zero_field() {
        let g = YeeGrid::uniform([5, 5, 5], 0.05, 1, omega_for(1.0)).unwrap();
        let a = StiffnessMatrix::assemble_default(&g).unwrap();
        let zero = vec![Complex64::new(0.0, 0.0); a.dim()];
        let (x, stats) = a.solve(&zero, &SolverOptions::default()).unwrap();
        assert_eq!(stats.iterations, 0);
        assert!(x.iter().all(|v| v.norm() == 0.0));
        let e = scattered_from_contrast_source(&a, &zero, &SolverOptions::default()).unwrap();
        assert!(e.data.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn bad_inputs_rejected() {
        let g = YeeGrid::uniform([5, 5, 5], 0.05, 1, omega_for(1.0)).unwrap();
        let a = StiffnessMatrix::assemble_default(&g).unwrap();
        let short = vec![Complex64::new(1.0, 0.0); 3];
        assert!(a.solve(&short, &SolverOptions::default()).is_err());
        let ok = vec![Complex64::new(1.0, 0.0); a.dim()];
        assert!(a.solve(&ok, &SolverOptions::new(1.5)).is_err());
        let other = YeeGrid::uniform([6, 5, 5], 0.05, 1, omega_for(1.0)).unwrap();
        let pml = PmlStretch::with_defaults(&other).unwrap();
        assert!(StiffnessMatrix::assemble(&g, &pml).is_err());
    }
}
