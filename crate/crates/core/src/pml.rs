//! Stretched-coordinate PML with polynomial grading.

use num_complex::Complex64;

use crate::error::{CsiError, Result};
use crate::grid::YeeGrid;

pub const DEFAULT_ORDER: u32 = 3;
pub const DEFAULT_REFLECTION: f64 = 1e-4;

/// Complex stretch factors `s = 1 - i sigma'` per axis at integer and
/// half-integer sample positions.
#[derive(Clone, Debug, PartialEq)]
pub struct PmlStretch {
    order: u32,
    target_reflection: f64,
    /// `integer[a][u]` for `u = 0..=dims[a]`.
    integer: [Vec<Complex64>; 3],
    /// `half[a][u]` is the factor at `u + 1/2`, `u = 0..dims[a]`.
    half: [Vec<Complex64>; 3],
}

impl PmlStretch {
    pub fn build(grid: &YeeGrid, order: u32, target_reflection: f64) -> Result<PmlStretch> {
        if order < 1 {
            return Err(CsiError::InvalidArgument("PML order must be >= 1".into()));
        }
        if !(target_reflection > 0.0 && target_reflection < 1.0) {
            return Err(CsiError::InvalidArgument(
                "PML target reflection must lie in (0, 1)".into(),
            ));
        }
        let dims = grid.dims();
        let npml = grid.pml_cells();
        let k0 = grid.k0();
        let mut integer: [Vec<Complex64>; 3] = Default::default();
        let mut half: [Vec<Complex64>; 3] = Default::default();
        for a in 0..3 {
            let n = dims[a];
            let thickness = npml as f64 * grid.spacing()[a];
            let sigma_max = if npml == 0 {
                0.0
            } else {
                (order as f64 + 1.0) * (-target_reflection.ln()) / (2.0 * k0 * thickness)
            };
            let factor = |u: f64| -> Complex64 {
                if npml == 0 {
                    return Complex64::new(1.0, 0.0);
                }
                let p = npml as f64;
                let depth = (p - u).max(u - (n as f64 - p)).max(0.0) / p;
                if depth == 0.0 {
                    Complex64::new(1.0, 0.0)
                } else {
                    Complex64::new(1.0, -sigma_max * depth.powi(order as i32))
                }
            };
            integer[a] = (0..=n).map(|u| factor(u as f64)).collect();
            half[a] = (0..n).map(|u| factor(u as f64 + 0.5)).collect();
        }
        Ok(PmlStretch {
            order,
            target_reflection,
            integer,
            half,
        })
    }

    pub fn with_defaults(grid: &YeeGrid) -> Result<PmlStretch> {
        PmlStretch::build(grid, DEFAULT_ORDER, DEFAULT_REFLECTION)
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn target_reflection(&self) -> f64 {
        self.target_reflection
    }

    pub fn at_integer(&self, axis: usize, u: usize) -> Complex64 {
        self.integer[axis][u]
    }

    pub fn at_half(&self, axis: usize, u: usize) -> Complex64 {
        self.half[axis][u]
    }

    pub fn integer_profile(&self, axis: usize) -> &[Complex64] {
        &self.integer[axis]
    }

    pub fn half_profile(&self, axis: usize) -> &[Complex64] {
        &self.half[axis]
    }

    pub fn dims(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.half[a].len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one() -> Complex64 {
        Complex64::new(1.0, 0.0)
    }

    #[test]
    fn no_pml_is_identity() {
        let g = YeeGrid::uniform([5, 6, 7], 0.1, 0, 1e9).unwrap();
        let s = PmlStretch::with_defaults(&g).unwrap();
        for a in 0..3 {
            assert!(s.integer_profile(a).iter().all(|&v| v == one()));
            assert!(s.half_profile(a).iter().all(|&v| v == one()));
        }
    }

    #[test]
    fn graded_profile_monotone_toward_boundary() {
        let g = YeeGrid::uniform([24, 24, 24], 0.02, 8, 2.0 * std::f64::consts::PI * 1e9).unwrap();
        let s = PmlStretch::build(&g, 3, 1e-4).unwrap();
        // merge integer and half samples into one ordered profile
        let mut profile = Vec::new();
        for u in 0..24 {
            profile.push(s.at_integer(0, u));
            profile.push(s.at_half(0, u));
        }
        profile.push(s.at_integer(0, 24));
        let mid = profile.len() / 2;
        for w in profile[..=mid].windows(2) {
            assert!(w[0].im.abs() >= w[1].im.abs());
        }
        for w in profile[mid..].windows(2) {
            assert!(w[0].im.abs() <= w[1].im.abs());
        }
        assert!(profile.iter().all(|v| v.im <= 0.0 && v.re == 1.0));
        // expected peak: (m+1) ln(1/R) / (2 k0 L)
        let k0 = g.k0();
        let peak = 4.0 * (1e4f64).ln() / (2.0 * k0 * 0.16);
        assert!((profile[0].im + peak).abs() < 1e-12 * peak);
    }

    #[test]
    fn interior_is_identity_and_profile_symmetric() {
        let g = YeeGrid::uniform([14, 10, 12], 0.05, 3, 1e9).unwrap();
        let s = PmlStretch::with_defaults(&g).unwrap();
        for a in 0..3 {
            let n = g.dims()[a];
            for u in 3..=(n - 3) {
                assert_eq!(s.at_integer(a, u), one());
            }
            for u in 3..(n - 3) {
                assert_eq!(s.at_half(a, u), one());
            }
            for u in 0..=n {
                assert!((s.at_integer(a, u) - s.at_integer(a, n - u)).norm() < 1e-12);
            }
            for u in 0..n {
                assert!((s.at_half(a, u) - s.at_half(a, n - 1 - u)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn bad_parameters_rejected() {
        let g = YeeGrid::uniform([5, 5, 5], 0.1, 1, 1e9).unwrap();
        assert!(PmlStretch::build(&g, 0, 1e-4).is_err());
        assert!(PmlStretch::build(&g, 3, 1.0).is_err());
    }
}
