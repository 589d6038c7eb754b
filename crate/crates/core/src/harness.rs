//! Reproducible scenarios: synthetic data on a finer truth grid, the
//! noise model, the full inversion pipeline and its diagnostics.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrast::{self, ContrastOptions, ContrastProblem, ContrastVector, InversionHistory};
use crate::error::{CsiError, Result};
use crate::fdfd::{self, DipoleSource, FieldVector, SolverOptions, SourceSet, StiffnessMatrix};
use crate::grid::{Component, GridSpec, Region, Shape, YeeGrid, EPS0};
use crate::io;
use crate::mmv::{self, ContrastSourceMatrix, MmvOptions, MmvProblem, MmvTrace};
use crate::scattering::{self, InversionDomain, MeasurementOperator, Receiver, ScatteringMatrix};

type C64 = Complex64;

/// Positions on a rectangular array repeated over one or more horizontal
/// planes, or explicit points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Layout {
    Array {
        count: [usize; 2],
        min: [f64; 2],
        max: [f64; 2],
        z: Heights,
    },
    Points {
        positions: Vec<[f64; 3]>,
    },
}

impl Layout {
    pub fn positions(&self) -> Vec<[f64; 3]> {
        match self {
            Layout::Points { positions } => positions.clone(),
            Layout::Array { count, min, max, z } => {
                let coord = |a: usize, i: usize| {
                    if count[a] <= 1 {
                        0.5 * (min[a] + max[a])
                    } else {
                        min[a] + (max[a] - min[a]) * i as f64 / (count[a] - 1) as f64
                    }
                };
                let mut out = Vec::with_capacity(count[0] * count[1] * z.values().len());
                for &h in z.values() {
                    for j in 0..count[1] {
                        for i in 0..count[0] {
                            out.push([coord(0, i), coord(1, j), h]);
                        }
                    }
                }
                out
            }
        }
    }
}

/// A single plane height or a list of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Heights {
    One(f64),
    Many(Vec<f64>),
}

impl Heights {
    pub fn values(&self) -> &[f64] {
        match self {
            Heights::One(z) => std::slice::from_ref(z),
            Heights::Many(v) => v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// Independent draws for every sample.
    #[default]
    PerElement,
    /// One draw per source vector.
    PerVector,
}

impl std::fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseMode::PerElement => "per-element",
            NoiseMode::PerVector => "per-vector",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReceiverSpec {
    pub layout: Layout,
    #[serde(default = "default_components")]
    pub components: Vec<Component>,
    /// Receivers held out for cross-validation; defaults to a spread
    /// subset of `cv_fraction` of the receivers.
    #[serde(default)]
    pub cv: Option<Vec<usize>>,
    #[serde(default = "default_cv_fraction")]
    pub cv_fraction: f64,
}

fn default_components() -> Vec<Component> {
    vec![Component::X, Component::Y]
}

fn default_cv_fraction() -> f64 {
    0.15
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub layout: Layout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_data_tol")]
    pub data_tol: f64,
    #[serde(default = "default_inversion_tol")]
    pub inversion_tol: f64,
}

fn default_data_tol() -> f64 {
    fdfd::DATA_TOL
}

fn default_inversion_tol() -> f64 {
    fdfd::INVERSION_TOL
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            data_tol: default_data_tol(),
            inversion_tol: default_inversion_tol(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmvSpec {
    #[serde(default = "default_mmv_iter")]
    pub max_iter: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn default_mmv_iter() -> usize {
    MmvOptions::default().max_iter
}

fn default_patience() -> usize {
    MmvOptions::default().patience
}

impl Default for MmvSpec {
    fn default() -> Self {
        MmvSpec {
            max_iter: default_mmv_iter(),
            patience: default_patience(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastSpec {
    #[serde(default = "default_contrast_iter")]
    pub iterations: usize,
}

fn default_contrast_iter() -> usize {
    ContrastOptions::default().iterations
}

impl Default for ContrastSpec {
    fn default() -> Self {
        ContrastSpec {
            iterations: default_contrast_iter(),
        }
    }
}

/// Inversion with a wrong background model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MismatchSpec {
    /// Factor applied to the relative permittivity of every background
    /// region.
    #[serde(default)]
    pub background_factor: Option<f64>,
    /// Replacement background regions (for example a slab of another
    /// thickness).
    #[serde(default)]
    pub background: Option<Vec<Region>>,
}

/// A complete scene and run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    /// Noise fraction of the per-source peak amplitude.
    pub noise: f64,
    #[serde(default)]
    pub noise_mode: NoiseMode,
    /// Inversion grid.
    pub grid: GridSpec,
    /// Truth-grid spacing is the inversion spacing divided by this.
    #[serde(default = "default_refinement")]
    pub refinement: f64,
    #[serde(default)]
    pub background: Vec<Region>,
    pub targets: Vec<Region>,
    pub inversion_domain: Shape,
    pub sources: SourceSpec,
    pub receivers: ReceiverSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub mmv: MmvSpec,
    #[serde(default)]
    pub contrast: ContrastSpec,
    #[serde(default)]
    pub mismatch: MismatchSpec,
}

fn default_refinement() -> f64 {
    1.5
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario> {
        let s: Scenario = toml::from_str(text).map_err(|e| CsiError::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CsiError::Config(format!("cannot read {}: {e}", path.display())))?;
        Scenario::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CsiError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise >= 0.0) {
            return Err(CsiError::Config("noise must be nonnegative".into()));
        }
        if !(self.refinement >= 1.0) {
            return Err(CsiError::Config("refinement must be at least 1".into()));
        }
        if self.sources.layout.positions().is_empty() {
            return Err(CsiError::Config("no sources".into()));
        }
        let nrec = self.receivers.layout.positions().len();
        if nrec < 2 {
            return Err(CsiError::Config("need at least two receivers".into()));
        }
        if let Some(cv) = &self.receivers.cv {
            if cv.is_empty() || cv.len() >= nrec || cv.iter().any(|&r| r >= nrec) {
                return Err(CsiError::Config("CV receivers must be a nonempty proper subset".into()));
            }
        }
        if self.receivers.components.is_empty() {
            return Err(CsiError::Config("receivers sample no components".into()));
        }
        Ok(())
    }

    pub fn source_set(&self) -> Result<SourceSet> {
        SourceSet::new(self.sources.layout.positions().into_iter().map(DipoleSource::circular).collect())
    }

    pub fn receiver_list(&self) -> Vec<Receiver> {
        self.receivers
            .layout
            .positions()
            .into_iter()
            .map(|position| Receiver {
                position,
                components: self.receivers.components.clone(),
            })
            .collect()
    }

    pub fn cv_receivers(&self) -> Vec<usize> {
        match &self.receivers.cv {
            Some(cv) => cv.clone(),
            None => scattering::default_cv_receivers(self.receivers.layout.positions().len(), self.receivers.cv_fraction),
        }
    }

    pub fn truth_spec(&self) -> GridSpec {
        GridSpec {
            spacing: self.grid.spacing / self.refinement,
            ..self.grid.clone()
        }
    }

    /// Background regions assumed by the inversion.
    pub fn inversion_background(&self) -> Vec<Region> {
        let mut regions = self.mismatch.background.clone().unwrap_or_else(|| self.background.clone());
        if let Some(f) = self.mismatch.background_factor {
            for r in &mut regions {
                r.material.eps_r *= f;
            }
        }
        regions
    }

    pub fn has_mismatch(&self) -> bool {
        self.mismatch.background.is_some() || self.mismatch.background_factor.is_some_and(|f| f != 1.0)
    }
}

/// Clean scattered-field data, one column per source.
/// Scattered-field data on the refined truth grid. Dipoles and receivers
/// sit at the physical points the inversion grid excites and samples, with
/// trilinear spreading and interpolation on the truth lattice.
pub fn synthesize_data(scenario: &Scenario) -> Result<Array2<C64>> {
    let coarse = YeeGrid::build(&scenario.grid, &scenario.background)?;
    let spec = scenario.truth_spec();
    let bg = YeeGrid::build(&spec, &scenario.background)?;
    let mut regions = scenario.background.clone();
    regions.extend(scenario.targets.iter().copied());
    let truth = YeeGrid::build(&spec, &regions)?;

    let snapped = |c: Component, pos: [f64; 3]| -> Result<[f64; 3]> {
        Ok(coarse.sample_position(c, coarse.nearest_sample(c, pos)?))
    };
    let sources = scenario.source_set()?;
    let rhs = sources
        .sources
        .iter()
        .map(|s| {
            let x_at = snapped(Component::X, s.position)?;
            let y_at = snapped(Component::Y, s.position)?;
            s.rhs_at(&truth, x_at, y_at)
        })
        .collect::<Result<Vec<_>>>()?;
    let meas = MeasurementOperator::build(&coarse, &scenario.receiver_list())?;
    let probes = meas
        .rows()
        .iter()
        .map(|r| {
            let at = coarse.sample_position(r.component, coarse.cell_coords(r.unknown / 3));
            truth.interpolation_weights(r.component, at)
        })
        .collect::<Result<Vec<_>>>()?;

    let opts = SolverOptions::new(scenario.solver.data_tol);
    let a_bg = StiffnessMatrix::assemble_default(&bg)?;
    let incident = fdfd::fields_from_rhs(&a_bg, &rhs, &opts)?;
    drop(a_bg);
    let a_truth = StiffnessMatrix::assemble_default(&truth)?;
    let total = fdfd::fields_from_rhs(&a_truth, &rhs, &opts)?;
    let mut data = Array2::zeros((probes.len(), sources.len()));
    for p in 0..sources.len() {
        for (m, w) in probes.iter().enumerate() {
            data[[m, p]] = w.iter().map(|&(u, w)| (total[p].data[u] - incident[p].data[u]) * w).sum();
        }
    }
    Ok(data)
}

/// Adds `zeta max_m |f_pm| (n1 + i n2)` with `n1, n2` uniform on
/// `[-1, 1]`, drawn per sample or once per source vector.
pub fn add_noise(f: &Array2<C64>, zeta: f64, seed: u64, mode: NoiseMode) -> Array2<C64> {
    let mut out = f.clone();
    if zeta == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for mut col in out.columns_mut() {
        let peak = col.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let scale = zeta * peak;
        let draw = |rng: &mut ChaCha8Rng| C64::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
        match mode {
            NoiseMode::PerElement => col.iter_mut().for_each(|v| *v += draw(&mut rng) * scale),
            NoiseMode::PerVector => {
                let n = draw(&mut rng) * scale;
                col.iter_mut().for_each(|v| *v += n);
            }
        }
    }
    out
}

/// `|mean of the three components|` per cell.
pub fn shape_indicator_contrast(chi: &ContrastVector) -> Vec<f64> {
    chi.isotropic().iter().map(|v| v.norm()).collect()
}

/// `sum_p sqrt(sum_c |j_pc|^2)` per cell.
pub fn shape_indicator_sources(j: &ContrastSourceMatrix) -> Vec<f64> {
    let d = &j.data;
    (0..d.nrows() / 3)
        .map(|k| {
            (0..d.ncols())
                .map(|p| (0..3).map(|c| d[[3 * k + c, p]].norm_sqr()).sum::<f64>().sqrt())
                .sum()
        })
        .collect()
}

/// Cells whose indicator reaches `fraction` of the maximum.
pub fn support(indicator: &[f64], fraction: f64) -> Vec<usize> {
    let peak = indicator.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Vec::new();
    }
    (0..indicator.len()).filter(|&k| indicator[k] >= fraction * peak).collect()
}

/// Indicator-weighted centroid of the support, in grid index units.
pub fn centroid(grid: &YeeGrid, domain: &InversionDomain, indicator: &[f64], fraction: f64) -> Option<[f64; 3]> {
    let cells = support(indicator, fraction);
    let total: f64 = cells.iter().map(|&k| indicator[k]).sum();
    if total <= 0.0 {
        return None;
    }
    let mut c = [0.0; 3];
    for &k in &cells {
        let ijk = grid.cell_coords(domain.cells()[k]);
        for a in 0..3 {
            c[a] += indicator[k] * ijk[a] as f64;
        }
    }
    Some(c.map(|v| v / total))
}

/// Dice coefficient `2 |A and B| / (|A| + |B|)` of two supports.
pub fn dice(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.iter().filter(|k| b.contains(k)).count();
    2.0 * inter as f64 / (a.len() + b.len()) as f64
}

/// Support threshold for the localization metrics.
pub const SUPPORT_FRACTION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// Distance between reconstructed and true centroids, in cells.
    pub centroid_error: f64,
    pub support_overlap: f64,
    /// Every cell of the recovered support has positive `Re chi`.
    pub positive_support: bool,
    pub constraints_hold: bool,
    pub support_cells: usize,
}

/// Solver stages of a run, for timing and error reporting.
pub const STAGES: [&str; 6] = ["synthesize", "noise", "build-phi", "invert-sources", "total-fields", "invert-contrast"];

/// Inversion-grid quantities shared by every run with the same background.
#[derive(Clone, Debug)]
pub struct InversionSetup {
    pub grid: YeeGrid,
    pub a_bg: StiffnessMatrix,
    pub domain: InversionDomain,
    pub meas: MeasurementOperator,
    pub incident: Vec<FieldVector>,
    pub phi: ScatteringMatrix,
    /// Background permittivity per domain unknown.
    pub eps_b: Vec<C64>,
    /// True contrast on the inversion grid (isotropic, per domain cell).
    pub true_contrast: Vec<C64>,
    pub timings: Vec<(&'static str, f64)>,
}

/// Options that are not part of the scene.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory holding scattering matrices keyed by content hash.
    pub phi_cache: Option<PathBuf>,
}

fn timed<T>(timings: &mut Vec<(&'static str, f64)>, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.at_stage(stage))?;
    let secs = start.elapsed().as_secs_f64();
    log::info!("{stage}: {secs:.2} s");
    timings.push((stage, secs));
    Ok(out)
}

/// Loads a cached scattering matrix, or builds and stores it.
pub fn cached_scattering_matrix(
    a: &StiffnessMatrix,
    meas: &MeasurementOperator,
    domain: &InversionDomain,
    opts: &SolverOptions,
    cache: Option<&Path>,
) -> Result<(ScatteringMatrix, bool)> {
    let key = scattering::scattering_key(a.grid(), meas, domain, opts.tol);
    if let Some(dir) = cache {
        let path = dir.join(format!("phi-{key}.bin"));
        if path.exists() {
            let (header, phi) = io::read_matrix(&path)?;
            if header.key == key && phi.dim() == (meas.num_rows(), domain.num_unknowns()) {
                return Ok((
                    ScatteringMatrix {
                        phi,
                        omega: header.omega,
                        tol: header.tol,
                        key,
                    },
                    true,
                ));
            }
        }
    }
    let phi = scattering::build_scattering_matrix(a, meas, domain, opts)?;
    if let Some(dir) = cache {
        std::fs::create_dir_all(dir)?;
        let header = io::MatrixHeader {
            omega: phi.omega,
            tol: phi.tol,
            key: phi.key.clone(),
        };
        io::write_matrix(&dir.join(format!("phi-{key}.bin")), &header, &phi.phi)?;
    }
    Ok((phi, false))
}

/// Inversion grid, domain, measurement rows and stiffness matrix for the
/// assumed background.
fn inversion_operators(scenario: &Scenario) -> Result<(YeeGrid, InversionDomain, MeasurementOperator, StiffnessMatrix)> {
    let build = || {
        let grid = YeeGrid::build(&scenario.grid, &scenario.inversion_background())?;
        let domain = InversionDomain::from_shape(&grid, &scenario.inversion_domain)?;
        let meas = MeasurementOperator::build(&grid, &scenario.receiver_list())?;
        let a_bg = StiffnessMatrix::assemble_default(&grid)?;
        Ok((grid, domain, meas, a_bg))
    };
    build().map_err(|e: CsiError| e.at_stage("build-phi"))
}

/// The scattering matrix for the assumed background, from the cache when
/// present. The flag tells whether it was loaded.
pub fn build_phi(scenario: &Scenario, cache: Option<&Path>) -> Result<(ScatteringMatrix, bool)> {
    let (_, domain, meas, a_bg) = inversion_operators(scenario)?;
    let solver = SolverOptions::new(scenario.solver.inversion_tol);
    cached_scattering_matrix(&a_bg, &meas, &domain, &solver, cache).map_err(|e| e.at_stage("build-phi"))
}

/// Builds the inversion grid with the assumed background, the incident
/// fields and the scattering matrix.
pub fn prepare_inversion(scenario: &Scenario, opts: &RunOptions) -> Result<InversionSetup> {
    let mut timings = Vec::new();
    let (grid, domain, meas, a_bg) = inversion_operators(scenario)?;
    let solver = SolverOptions::new(scenario.solver.inversion_tol);
    let sources = scenario.source_set()?;
    let incident = timed(&mut timings, "incident", || fdfd::incident_fields(&a_bg, &sources, &solver))?;
    let (phi, _) = timed(&mut timings, "build-phi", || {
        cached_scattering_matrix(&a_bg, &meas, &domain, &solver, opts.phi_cache.as_deref())
    })?;
    let eps_b = domain.restrict(&grid.component_eps());

    // Targets against the true background, rasterized on the inversion
    // grid, for the metrics. Independent of any assumed mismatch.
    let mut regions = scenario.background.clone();
    regions.extend(scenario.targets.iter().copied());
    let truth_here = YeeGrid::build(&scenario.grid, &regions)?;
    let true_bg = YeeGrid::build(&scenario.grid, &scenario.background)?;
    let true_contrast = domain
        .cells()
        .iter()
        .map(|&k| truth_here.eps_at(k) - true_bg.eps_at(k))
        .collect();
    Ok(InversionSetup {
        grid,
        a_bg,
        domain,
        meas,
        incident,
        phi,
        eps_b,
        true_contrast,
        timings,
    })
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub scenario: Scenario,
    pub noisy_data: Array2<C64>,
    /// Absent when the sources were loaded from an earlier stage.
    pub mmv_trace: Option<MmvTrace>,
    pub j_hat: ContrastSourceMatrix,
    pub chi: ContrastVector,
    pub contrast_history: InversionHistory,
    pub source_indicator: Vec<f64>,
    pub contrast_indicator: Vec<f64>,
    pub metrics: Metrics,
    pub timings: Vec<(&'static str, f64)>,
    pub grid: YeeGrid,
    pub domain: InversionDomain,
    pub true_contrast: Vec<C64>,
}

/// Source stage: CV split of the data and the cross-validated MMV solve.
pub fn estimate_sources(
    scenario: &Scenario,
    setup: &InversionSetup,
    data: &Array2<C64>,
    timings: &mut Vec<(&'static str, f64)>,
) -> Result<(ContrastSourceMatrix, MmvTrace)> {
    let split = scattering::split_cv(&setup.phi, &setup.meas, data, &scenario.cv_receivers())
        .map_err(|e| e.at_stage("invert-sources"))?;
    let mmv_opts = MmvOptions {
        max_iter: scenario.mmv.max_iter,
        patience: scenario.mmv.patience,
        ..MmvOptions::default()
    };
    timed(timings, "invert-sources", || {
        mmv::solve_mmv_cv(&MmvProblem::from_split(&split)?, &mmv_opts)
    })
}

/// Contrast stage: total fields from the estimated sources, then the
/// constrained nonlinear CG.
pub fn reconstruct_contrast(
    scenario: &Scenario,
    setup: &InversionSetup,
    data: &Array2<C64>,
    j_hat: &ContrastSourceMatrix,
    timings: &mut Vec<(&'static str, f64)>,
) -> Result<(ContrastVector, InversionHistory)> {
    let solver = SolverOptions::new(scenario.solver.inversion_tol);
    let totals = timed(timings, "total-fields", || {
        contrast::compute_total_fields(&setup.a_bg, &setup.domain, j_hat, &setup.incident, &solver)
    })?;
    timed(timings, "invert-contrast", || {
        let problem = ContrastProblem::new(
            setup.phi.phi.clone(),
            data.clone(),
            j_hat.clone(),
            totals,
            setup.eps_b.clone(),
        )?;
        contrast::invert_contrast(
            &problem,
            &ContrastOptions {
                iterations: scenario.contrast.iterations,
                ..ContrastOptions::default()
            },
        )
    })
}

/// Inverts noisy data against a prepared setup.
pub fn invert(scenario: &Scenario, setup: &InversionSetup, data: &Array2<C64>) -> Result<RunReport> {
    let mut timings = setup.timings.clone();
    let (j_hat, mmv_trace) = estimate_sources(scenario, setup, data, &mut timings)?;
    let (chi, contrast_history) = reconstruct_contrast(scenario, setup, data, &j_hat, &mut timings)?;
    Ok(RunReport::assemble(scenario, setup, data, j_hat, Some(mmv_trace), chi, contrast_history, timings))
}

fn compute_metrics(setup: &InversionSetup, chi: &ContrastVector, indicator: &[f64]) -> Metrics {
    let true_ind: Vec<f64> = setup.true_contrast.iter().map(|v| v.norm()).collect();
    let rec_support = support(indicator, SUPPORT_FRACTION);
    let true_support = support(&true_ind, SUPPORT_FRACTION);
    let c_rec = centroid(&setup.grid, &setup.domain, indicator, SUPPORT_FRACTION);
    let c_true = centroid(&setup.grid, &setup.domain, &true_ind, SUPPORT_FRACTION);
    let centroid_error = match (c_rec, c_true) {
        (Some(a), Some(b)) => (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt(),
        _ => f64::INFINITY,
    };
    let iso = chi.isotropic();
    Metrics {
        centroid_error,
        support_overlap: dice(&rec_support, &true_support),
        positive_support: !rec_support.is_empty() && rec_support.iter().all(|&k| iso[k].re > 0.0),
        constraints_hold: contrast::in_range(&chi.values, &setup.eps_b),
        support_cells: rec_support.len(),
    }
}

/// Synthesize, add noise, prepare and invert.
pub fn run_scenario(scenario: &Scenario, opts: &RunOptions) -> Result<RunReport> {
    scenario.validate()?;
    let mut timings = Vec::new();
    let clean = timed(&mut timings, "synthesize", || synthesize_data(scenario))?;
    let noisy = timed(&mut timings, "noise", || {
        Ok(add_noise(&clean, scenario.noise, scenario.seed, scenario.noise_mode))
    })?;
    let setup = prepare_inversion(scenario, opts)?;
    let mut report = invert(scenario, &setup, &noisy)?;
    timings.extend(report.timings);
    report.timings = timings;
    Ok(report)
}

/// Picks `base`, or `base-2`, `base-3`, ... if it exists.
pub fn fresh_directory(base: &Path) -> PathBuf {
    if !base.exists() {
        return base.to_path_buf();
    }
    let name = base.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    (2..)
        .map(|i| base.with_file_name(format!("{name}-{i}")))
        .find(|p| !p.exists())
        .expect("unbounded suffix search")
}

impl RunReport {
    /// Collects stage outputs and computes the indicators and metrics.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        scenario: &Scenario,
        setup: &InversionSetup,
        data: &Array2<C64>,
        j_hat: ContrastSourceMatrix,
        mmv_trace: Option<MmvTrace>,
        chi: ContrastVector,
        contrast_history: InversionHistory,
        timings: Vec<(&'static str, f64)>,
    ) -> RunReport {
        let contrast_indicator = shape_indicator_contrast(&chi);
        let source_indicator = shape_indicator_sources(&j_hat);
        let metrics = compute_metrics(setup, &chi, &contrast_indicator);
        RunReport {
            scenario: scenario.clone(),
            noisy_data: data.clone(),
            mmv_trace,
            j_hat,
            chi,
            contrast_history,
            source_indicator,
            contrast_indicator,
            metrics,
            timings,
            grid: setup.grid.clone(),
            domain: setup.domain.clone(),
            true_contrast: setup.true_contrast.clone(),
        }
    }

    /// Writes the report into a new directory. Refuses to touch an
    /// existing one.
    pub fn write(&self, dir: &Path) -> Result<()> {
        if dir.exists() {
            return Err(CsiError::InvalidArgument(format!("{} already exists", dir.display())));
        }
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("scenario.toml"), self.scenario.to_toml()?)?;
        let m = &self.metrics;
        let mut rows = vec![
            vec!["scenario".into(), self.scenario.name.clone()],
            vec!["seed".into(), self.scenario.seed.to_string()],
            vec!["noise".into(), self.scenario.noise.to_string()],
            vec!["noise_mode".into(), self.scenario.noise_mode.to_string()],
            vec!["centroid_error_cells".into(), format!("{:e}", m.centroid_error)],
            vec!["support_overlap".into(), format!("{:e}", m.support_overlap)],
            vec!["support_cells".into(), m.support_cells.to_string()],
            vec!["positive_support".into(), m.positive_support.to_string()],
            vec!["constraints_hold".into(), m.constraints_hold.to_string()],
        ];
        if let Some(t) = &self.mmv_trace {
            rows.push(vec!["mmv_best_iter".into(), t.best().iter.to_string()]);
            rows.push(vec!["mmv_stop".into(), format!("{:?}", t.stop)]);
        }
        for (stage, secs) in &self.timings {
            rows.push(vec![format!("time_{stage}_s"), format!("{secs:.3}")]);
        }
        io::write_csv(&dir.join("report.csv"), &["key", "value"], &rows)?;
        if let Some(t) = &self.mmv_trace {
            t.write_csv(&dir.join("mmv_trace.csv"))?;
        }
        self.contrast_history.write_csv(&dir.join("contrast_errors.csv"))?;
        let header = io::MatrixHeader {
            omega: self.grid.omega(),
            tol: self.scenario.solver.inversion_tol,
            key: String::new(),
        };
        io::write_matrix(&dir.join("data.bin"), &header, &self.noisy_data)?;
        io::write_matrix(&dir.join("sources.bin"), &header, &self.j_hat.data)?;
        io::write_matrix(&dir.join("chi.bin"), &header, &self.chi.as_column())?;
        self.write_volumes(dir)?;
        Ok(())
    }

    fn write_volumes(&self, dir: &Path) -> Result<()> {
        let n = self.grid.num_cells();
        let omega = self.grid.omega();
        let iso = self.chi.isotropic();
        let mut fields: Vec<(&str, Vec<f64>)> = ["re_chi", "im_chi", "delta_eps_r", "delta_sigma", "indicator", "source_indicator", "true_re_chi"]
            .into_iter()
            .map(|name| (name, vec![0.0; n]))
            .collect();
        for (k, &cell) in self.domain.cells().iter().enumerate() {
            let v = iso[k];
            let values = [
                v.re,
                v.im,
                v.re,
                -omega * EPS0 * v.im,
                self.contrast_indicator[k],
                self.source_indicator[k],
                self.true_contrast[k].re,
            ];
            for (f, val) in fields.iter_mut().zip(values) {
                f.1[cell] = val;
            }
        }
        let refs: Vec<(&str, &[f64])> = fields.iter().map(|(n, v)| (*n, v.as_slice())).collect();
        io::write_vtk_cells(&dir.join("contrast.vtk"), &self.grid, &refs)?;

        // Horizontal and vertical cross-sections through the true centroid.
        let true_ind: Vec<f64> = self.true_contrast.iter().map(|v| v.norm()).collect();
        let center = centroid(&self.grid, &self.domain, &true_ind, SUPPORT_FRACTION)
            .unwrap_or_else(|| self.grid.dims().map(|d| d as f64 / 2.0));
        let [_, cy, cz] = center.map(|v| v.round() as usize);
        let mut xy = Vec::new();
        let mut xz = Vec::new();
        for (k, &cell) in self.domain.cells().iter().enumerate() {
            let [i, j, kk] = self.grid.cell_coords(cell);
            let p = self.grid.cell_center([i, j, kk]);
            let row = vec![
                format!("{:e}", p[0]),
                format!("{:e}", p[1]),
                format!("{:e}", p[2]),
                format!("{:e}", iso[k].re),
                format!("{:e}", iso[k].im),
                format!("{:e}", self.contrast_indicator[k]),
            ];
            if kk == cz {
                xy.push(row.clone());
            }
            if j == cy {
                xz.push(row);
            }
        }
        let header = ["x", "y", "z", "re_chi", "im_chi", "indicator"];
        io::write_csv(&dir.join("slice_xy.csv"), &header, &xy)?;
        io::write_csv(&dir.join("slice_xz.csv"), &header, &xz)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_examples() {
        let f = Array2::from_shape_fn((6, 2), |(m, p)| C64::new(m as f64 + 1.0, p as f64));
        assert_eq!(add_noise(&f, 0.0, 1, NoiseMode::PerElement), f);
        for mode in [NoiseMode::PerElement, NoiseMode::PerVector] {
            let a = add_noise(&f, 0.05, 7, mode);
            assert_eq!(a, add_noise(&f, 0.05, 7, mode));
            for p in 0..2 {
                let peak = f.column(p).iter().map(|v| v.norm()).fold(0.0, f64::max);
                for m in 0..6 {
                    assert!((a[[m, p]] - f[[m, p]]).norm() <= 0.05 * 2f64.sqrt() * peak);
                }
            }
        }
        let v = add_noise(&f, 0.05, 7, NoiseMode::PerVector);
        let d0 = v[[0, 0]] - f[[0, 0]];
        assert!((0..6).all(|m| (v[[m, 0]] - f[[m, 0]] - d0).norm() < 1e-12));
    }

    #[test]
    fn indicator_examples() {
        let zero = ContrastVector::zeros(6);
        assert_eq!(shape_indicator_contrast(&zero), vec![0.0, 0.0]);
        let ones = ContrastVector {
            values: vec![C64::new(1.0, 0.0); 3],
        };
        assert_eq!(shape_indicator_contrast(&ones), vec![1.0]);
        let mut j = ContrastSourceMatrix::zeros(6, 2, 3).unwrap();
        j.data[[3, 0]] = C64::new(3.0, 0.0);
        j.data[[5, 0]] = C64::new(0.0, 4.0);
        assert_eq!(shape_indicator_sources(&j), vec![0.0, 5.0]);
    }

    #[test]
    fn dice_examples() {
        assert_eq!(dice(&[1, 2], &[1, 2]), 1.0);
        assert_eq!(dice(&[1, 2], &[3]), 0.0);
        assert!((dice(&[1, 2, 3], &[3]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn array_layout() {
        let l = Layout::Array {
            count: [3, 2],
            min: [0.0, 0.0],
            max: [1.0, 2.0],
            z: Heights::One(0.5),
        };
        let p = l.positions();
        assert_eq!(p.len(), 6);
        assert_eq!(p[0], [0.0, 0.0, 0.5]);
        assert_eq!(p[5], [1.0, 2.0, 0.5]);

        let two: Layout = toml::from_str("kind = \"array\"\ncount = [2, 1]\nmin = [0.0, 0.0]\nmax = [1.0, 0.0]\nz = [0.1, 0.9]").unwrap();
        let p = two.positions();
        assert_eq!(p.len(), 4);
        assert_eq!(p[1], [1.0, 0.0, 0.1]);
        assert_eq!(p[2], [0.0, 0.0, 0.9]);
    }

    #[test]
    fn fresh_directory_suffixes() {
        let tmp = tempfile::tempdir().unwrap();
        let base = tmp.path().join("run");
        assert_eq!(fresh_directory(&base), base);
        std::fs::create_dir(&base).unwrap();
        assert_eq!(fresh_directory(&base), tmp.path().join("run-2"));
    }
}
