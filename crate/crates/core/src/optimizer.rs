//! Joint image and motion estimation by proximal alternating minimization.
//!
//! The image block takes a projected gradient step onto the structure-guided
//! TV ball; the motion block takes a damped Gauss-Newton step through the
//! smoothness prox in the metric of the per-line curvature blocks. Both are
//! nested inside a coarse-to-fine grid loop and a constraint-radius schedule.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_param, MocoError, Result};
use crate::fft::resample_spectral;
use crate::forward::{half_norm_sqr, ForwardModel, MotionPlan};
use crate::geometry::{MotionTrace, RigidParams};
use crate::motion_prior::{
    block_solve, prox_motion_smoothness_metric, weighted_smoothness_value, Block, KnotInterpolation,
};
use crate::nufft::NufftConfig;
use crate::pattern::{freq_range, KSpaceData, SamplingPattern};
use crate::regularization::{
    gradient, project_sgtv_ball, vnorm_sqr, DualState, GuideField, ProjectionInfo, ProjectionOptions,
};
use crate::volume::{ComplexVolume3D, C64};

/// Which regulariser constrains the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegMode {
    Guided,
    PlainTv,
}

impl fmt::Display for RegMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegMode::Guided => "guided",
            RegMode::PlainTv => "plain-tv",
        })
    }
}

impl FromStr for RegMode {
    type Err = MocoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "guided" => Ok(RegMode::Guided),
            "plain-tv" => Ok(RegMode::PlainTv),
            _ => Err(invalid_param(format!("unknown mode '{s}' (expected guided or plain-tv)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Grid divisors, coarse to fine.
    pub scales: Vec<usize>,
    /// The constraint radius of each stage is `epsilon_base / multiplier`.
    pub epsilon_multipliers: Vec<f64>,
    /// `epsilon_base` is this factor times the regulariser value of the
    /// zero-filled reconstruction at each scale.
    pub epsilon_factor: f64,
    pub iters_per_stage: usize,
    /// Fixed image step; `None` estimates `step_safety / L` by power iteration.
    pub step_u: Option<f64>,
    pub step_safety: f64,
    pub power_iterations: usize,
    /// Motion smoothness weight relative to the mean per-line curvature.
    pub mu: f64,
    /// Number of time knots per scale; 0 keeps one pose per line.
    pub knots: Option<Vec<usize>>,
    pub mode: RegMode,
    /// Guide softening as a fraction of the largest reference gradient.
    pub eta_relative: f64,
    pub projection: ProjectionOptions,
    pub nufft: NufftConfig,
    /// Per-iteration cap on translation updates, in voxels of the current grid.
    pub max_step_voxels: f64,
    /// Per-iteration cap on rotation updates, in degrees.
    pub max_step_deg: f64,
    /// Initial Levenberg-Marquardt damping of the motion step.
    pub damping: f64,
    pub max_backtracks: usize,
    /// Stop a stage early when the relative misfit decrease falls below this.
    pub stagnation_tol: Option<f64>,
    pub estimate_motion: bool,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            scales: vec![4, 2, 1],
            epsilon_multipliers: vec![4.0, 2.0, 1.0],
            epsilon_factor: 0.2,
            iters_per_stage: 30,
            step_u: None,
            step_safety: 0.9,
            power_iterations: 10,
            mu: 10.0,
            knots: None,
            mode: RegMode::Guided,
            eta_relative: 0.05,
            projection: ProjectionOptions::default(),
            nufft: NufftConfig::default(),
            max_step_voxels: 0.5,
            max_step_deg: 1.0,
            damping: 1e-3,
            max_backtracks: 8,
            stagnation_tol: None,
            estimate_motion: true,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|&s| s == 0) {
            return Err(invalid_param("scales must be a non-empty list of positive divisors"));
        }
        if self.scales.windows(2).any(|w| w[0] <= w[1]) {
            return Err(invalid_param("scales must be strictly decreasing"));
        }
        if self.epsilon_multipliers.is_empty() || self.epsilon_multipliers.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return Err(invalid_param("epsilon multipliers must be positive"));
        }
        if !(self.epsilon_factor.is_finite() && self.epsilon_factor > 0.0) {
            return Err(invalid_param("epsilon factor must be positive"));
        }
        if self.iters_per_stage == 0 {
            return Err(invalid_param("iters_per_stage must be at least 1"));
        }
        if let Some(a) = self.step_u {
            if !(a.is_finite() && a > 0.0) {
                return Err(invalid_param("image step must be positive"));
            }
        }
        if !(self.step_safety > 0.0 && self.step_safety.is_finite()) || self.power_iterations == 0 {
            return Err(invalid_param("step safety and power iterations must be positive"));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(invalid_param("mu must be non-negative"));
        }
        if let Some(k) = &self.knots {
            if k.len() != self.scales.len() {
                return Err(invalid_param("knots needs one entry per scale"));
            }
        }
        if !(self.eta_relative > 0.0 && self.eta_relative.is_finite()) {
            return Err(invalid_param("eta_relative must be positive"));
        }
        if !(self.max_step_voxels > 0.0 && self.max_step_deg > 0.0) {
            return Err(invalid_param("step caps must be positive"));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(invalid_param("damping must be non-negative"));
        }
        self.nufft.validate()
    }
}

/// A problem restricted to the central part of k-space.
#[derive(Debug, Clone)]
pub struct Downscaled {
    pub data: KSpaceData,
    pub trace: MotionTrace,
    /// Fine line index of every retained line, in acquisition order.
    pub kept: Vec<usize>,
}

fn coarse_dims(dims: [usize; 3], factor: usize) -> Result<[usize; 3]> {
    if factor == 0 || dims.iter().any(|&d| d % factor != 0 || d / factor < 2) {
        return Err(invalid_param(format!("factor {factor} does not divide dims {dims:?} into a usable grid")));
    }
    Ok(dims.map(|d| d / factor))
}

fn in_coarse_band(coord: &[i64; 2], pe_axes: [usize; 2], coarse: [usize; 3]) -> bool {
    (0..2).all(|j| {
        let (lo, hi) = freq_range(coarse[pe_axes[j]]);
        coord[j] >= lo && coord[j] < hi
    })
}

/// Keeps the lines and readout samples inside the central band of a grid
/// `factor` times coarser. Sample values are copied unchanged.
pub fn downscale_problem(data: &KSpaceData, trace: &MotionTrace, factor: usize) -> Result<Downscaled> {
    let pattern = data.pattern();
    trace.check_len(pattern.n_lines())?;
    let coarse = coarse_dims(pattern.dims(), factor)?;
    if factor == 1 {
        return Ok(Downscaled {
            data: data.clone(),
            trace: trace.clone(),
            kept: (0..pattern.n_lines()).collect(),
        });
    }
    let axes = pattern.pe_axes();
    let kept: Vec<usize> = (0..pattern.n_lines())
        .filter(|&t| in_coarse_band(&pattern.pe_coords()[t], axes, coarse))
        .collect();
    if kept.is_empty() {
        return Err(invalid_input(format!("no lines survive downscaling by {factor}")));
    }
    let ro = pattern.readout_axis();
    let (flo, _) = freq_range(pattern.dims()[ro]);
    let (clo, chi) = freq_range(coarse[ro]);
    let r0 = (clo - flo) as usize;
    let r1 = (chi - flo) as usize;
    let mut samples = Vec::with_capacity(kept.len() * coarse[ro]);
    for &t in &kept {
        samples.extend_from_slice(&data.line(t)[r0..r1]);
    }
    let vs = pattern.voxel_size().map(|v| v * factor as f64);
    let coords = kept.iter().map(|&t| pattern.pe_coords()[t]).collect();
    let coarse_pattern = SamplingPattern::new(coarse, vs, ro, coords, pattern.kind())?;
    Ok(Downscaled {
        data: KSpaceData::new(coarse_pattern, samples, data.noise_sigma)?,
        trace: MotionTrace::new(kept.iter().map(|&t| trace.params[t]).collect()),
        kept,
    })
}

/// Fine lines that also exist on the coarse grid `coarse`, in order.
fn surviving_lines(fine: &SamplingPattern, coarse: [usize; 3]) -> Vec<usize> {
    let axes = fine.pe_axes();
    (0..fine.n_lines())
        .filter(|&t| in_coarse_band(&fine.pe_coords()[t], axes, coarse))
        .collect()
}

/// Extends a trace on the retained lines to all `n_fine` lines: a missing
/// line takes the pose of the nearest retained line acquired before it, or
/// the first retained line when none precedes it.
pub fn expand_trace(trace: &MotionTrace, kept: &[usize], n_fine: usize) -> Result<MotionTrace> {
    trace.check_len(kept.len())?;
    if kept.is_empty() {
        return Err(invalid_input("cannot expand a trace without retained lines"));
    }
    if kept.windows(2).any(|w| w[0] >= w[1]) || kept[kept.len() - 1] >= n_fine {
        return Err(invalid_input("retained line indices must be increasing and in range"));
    }
    let mut out = Vec::with_capacity(n_fine);
    let mut j = 0;
    for t in 0..n_fine {
        while j + 1 < kept.len() && kept[j + 1] <= t {
            j += 1;
        }
        out.push(trace.params[j]);
    }
    Ok(MotionTrace::new(out))
}

/// Zero-pads the spectrum of `u` onto `fine_pattern`'s grid and expands the
/// trace onto its lines.
pub fn upscale_solution(
    u: &ComplexVolume3D,
    trace: &MotionTrace,
    fine_pattern: &SamplingPattern,
) -> Result<(ComplexVolume3D, MotionTrace)> {
    let fine = fine_pattern.dims();
    let coarse = u.dims();
    if (0..3).any(|a| coarse[a] > fine[a] || fine[a] % coarse[a] != 0) {
        return Err(invalid_param(format!("coarse dims {coarse:?} do not divide fine dims {fine:?}")));
    }
    let kept = surviving_lines(fine_pattern, coarse);
    if kept.len() != trace.len() {
        return Err(invalid_param(format!(
            "trace has {} poses but {} lines survive on the coarse grid",
            trace.len(),
            kept.len()
        )));
    }
    let up = resample_spectral(u, fine, false)?.with_voxel_size(fine_pattern.voxel_size());
    Ok((up, expand_trace(trace, &kept, fine_pattern.n_lines())?))
}

/// Everything that stays fixed while iterating one (scale, radius) stage.
#[derive(Debug, Clone)]
pub struct StageProblem {
    pub model: ForwardModel,
    pub data: KSpaceData,
    pub guide: GuideField,
    pub epsilon: f64,
    pub knots: Option<KnotInterpolation>,
}

impl StageProblem {
    pub fn new(data: KSpaceData, guide: GuideField, epsilon: f64, nufft: &NufftConfig) -> Result<Self> {
        if guide.dims() != data.pattern().dims() {
            return Err(invalid_input("guide grid does not match the data grid"));
        }
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(invalid_param("constraint radius must be non-negative"));
        }
        Ok(Self {
            model: ForwardModel::new(data.pattern(), nufft)?,
            data,
            guide,
            epsilon,
            knots: None,
        })
    }
}

/// Iterate of the alternating scheme at one scale.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub u: ComplexVolume3D,
    pub trace: MotionTrace,
    /// Knot values when the trace is parameterised by knots.
    pub knot_values: Option<MotionTrace>,
    pub scale_index: usize,
    pub stage_index: usize,
    pub iteration: usize,
    pub step_u: f64,
    /// Upper bound the image step recovers to after backtracking.
    pub step_u_max: f64,
    pub misfit_history: Vec<f64>,
    dual: DualState,
    cache: Option<(MotionPlan, Vec<C64>)>,
}

impl SolverState {
    pub fn new(u: ComplexVolume3D, trace: MotionTrace, step_u: f64) -> Self {
        Self {
            u,
            trace,
            knot_values: None,
            scale_index: 0,
            stage_index: 0,
            iteration: 0,
            step_u,
            step_u_max: step_u,
            misfit_history: Vec::new(),
            dual: DualState::default(),
            cache: None,
        }
    }

    /// Drops cached model samples after `u` or the trace were changed directly.
    pub fn invalidate(&mut self) {
        self.cache = None;
    }

    fn ensure_cache(&mut self, p: &StageProblem) -> Result<()> {
        if self.cache.is_none() {
            let plan = p.model.plan(&self.trace)?;
            let m = p.model.apply(&plan, &self.u)?;
            self.cache = Some((plan, m));
        }
        Ok(())
    }

    /// Misfit at the current iterate.
    pub fn misfit(&mut self, p: &StageProblem) -> Result<f64> {
        self.ensure_cache(p)?;
        let (_, m) = self.cache.as_ref().expect("cache filled");
        Ok(misfit_of(m, &p.data))
    }
}

fn misfit_of(model: &[C64], data: &KSpaceData) -> f64 {
    let r: Vec<C64> = model.iter().zip(data.samples()).map(|(m, d)| m - d).collect();
    half_norm_sqr(&r)
}

fn finite_or_diverge(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(MocoError::Divergence(format!("{what} became non-finite")))
    }
}

/// Diagnostics of one alternating iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationInfo {
    pub misfit: f64,
    /// Regulariser value over the radius after the image step.
    pub feasibility: f64,
    pub u_backtracks: usize,
    pub u_accepted: bool,
    pub theta_accepted: bool,
    pub theta_attempts: usize,
    pub projection: ProjectionInfo,
}

const FEAS_TOL: f64 = 1e-3;

/// One image step followed by one motion step.
pub fn palm_iteration(state: &mut SolverState, p: &StageProblem, cfg: &SolverConfig) -> Result<IterationInfo> {
    let f0 = finite_or_diverge(state.misfit(p)?, "misfit")?;
    let (u_backtracks, u_accepted, projection) = u_step(state, p, cfg, f0)?;
    let f1 = finite_or_diverge(state.misfit(p)?, "misfit")?;
    let (theta_accepted, theta_attempts) = if cfg.estimate_motion {
        theta_step(state, p, cfg, f1)?
    } else {
        (false, 0)
    };
    let f2 = finite_or_diverge(state.misfit(p)?, "misfit")?;
    let feasibility = if p.epsilon > 0.0 {
        p.guide.sgtv(&state.u)? / p.epsilon
    } else {
        0.0
    };
    state.iteration += 1;
    state.misfit_history.push(f2);
    Ok(IterationInfo {
        misfit: f2,
        feasibility,
        u_backtracks,
        u_accepted,
        theta_accepted,
        theta_attempts,
        projection,
    })
}

fn u_step(state: &mut SolverState, p: &StageProblem, cfg: &SolverConfig, f0: f64) -> Result<(usize, bool, ProjectionInfo)> {
    let feasible = p.guide.sgtv(&state.u)? <= p.epsilon * (1.0 + FEAS_TOL);
    let (plan, model) = state.cache.take().expect("cache filled by misfit");
    let r: Vec<C64> = model.iter().zip(p.data.samples()).map(|(m, d)| m - d).collect();
    let g = p.model.adjoint(&plan, &r)?;
    let mut backtracks = 0;
    // motion makes lines overlap in k-space, so the identity-pose operator norm
    // is only a guide: retry a larger step every iteration
    state.step_u = (2.0 * state.step_u).min(state.step_u_max);
    let mut z = state.u.clone();
    z.axpy(-state.step_u, &g);
    let mut resumes = 0;
    loop {
        finite_or_diverge(z.norm_sqr(), "image")?;
        let (w, info) = project_sgtv_ball(&z, &p.guide, p.epsilon, &cfg.projection, Some(&mut state.dual))?;
        let mw = p.model.apply(&plan, &w)?;
        let f = finite_or_diverge(misfit_of(&mw, &p.data), "misfit")?;
        // an unconverged projection is resumed from its dual before the step is blamed
        if feasible && f > f0 && !info.converged && resumes < cfg.max_backtracks {
            resumes += 1;
            continue;
        }
        if !feasible || f <= f0 {
            state.u = w;
            state.cache = Some((plan, mw));
            return Ok((backtracks, true, info));
        }
        if backtracks >= cfg.max_backtracks {
            state.cache = Some((plan, model));
            return Ok((backtracks, false, info));
        }
        state.step_u *= 0.5;
        backtracks += 1;
        resumes = 0;
        z = state.u.clone();
        z.axpy(-state.step_u, &g);
    }
}

fn add_scaled_identity(h: &Block, damping: f64, floor: &[f64; 6]) -> Block {
    let mut w = *h;
    for c in 0..6 {
        w[c][c] += damping * h[c][c] + floor[c];
    }
    w
}

fn theta_step(state: &mut SolverState, p: &StageProblem, cfg: &SolverConfig, f1: f64) -> Result<(bool, usize)> {
    state.ensure_cache(p)?;
    let (plan, model) = state.cache.as_ref().expect("cache filled");
    let tg = p.model.grad_theta_with(plan, &state.trace, &state.u, model, &p.data)?;
    let (grad, hess, current) = match (&p.knots, &state.knot_values) {
        (Some(k), Some(kv)) => (k.restrict(&tg.grad), k.restrict_blocks(&tg.hessian), kv.clone()),
        _ => (tg.grad, tg.hessian, state.trace.clone()),
    };
    let n = current.len();
    let mut mean_curv = [0.0; 6];
    for h in &hess {
        for c in 0..6 {
            mean_curv[c] += h[c][c] / n as f64;
        }
    }
    let top = mean_curv.iter().copied().fold(0.0, f64::max);
    if !(top > 0.0) || !top.is_finite() {
        return Ok((false, 0));
    }
    let floor: [f64; 6] = std::array::from_fn(|c| (1e-6 * mean_curv[c]).max(1e-12 * top));
    let mu: [f64; 6] = std::array::from_fn(|c| cfg.mu * mean_curv[c]);
    let big_f1 = f1 + weighted_smoothness_value(&current, mu);

    let vs = p.data.pattern().voxel_size();
    let max_tau = cfg.max_step_voxels * vs.iter().copied().fold(f64::INFINITY, f64::min);
    let max_phi = cfg.max_step_deg.to_radians();
    let cur_arr: Vec<[f64; 6]> = current.params.iter().map(|q| q.to_array()).collect();

    let mut damping = cfg.damping;
    for attempt in 1..=cfg.max_backtracks + 1 {
        let metric: Vec<Block> = hess.iter().map(|h| add_scaled_identity(h, damping, &floor)).collect();
        let mut z = Vec::with_capacity(n);
        for t in 0..n {
            let step = block_solve(&metric[t], &grad[t])
                .ok_or_else(|| MocoError::Divergence("motion metric lost positive definiteness".into()))?;
            z.push(RigidParams::from_array(std::array::from_fn(|c| cur_arr[t][c] - step[c])));
        }
        let prox = prox_motion_smoothness_metric(&MotionTrace::new(z), &metric, mu)?;
        let candidate = MotionTrace::new(
            prox.params
                .iter()
                .zip(&cur_arr)
                .map(|(q, c0)| {
                    let a = q.to_array();
                    RigidParams::from_array(std::array::from_fn(|c| {
                        let cap = if c < 3 { max_tau } else { max_phi };
                        c0[c] + (a[c] - c0[c]).clamp(-cap, cap)
                    }))
                })
                .collect(),
        );
        let full = match &p.knots {
            Some(k) if state.knot_values.is_some() => k.expand(&candidate)?,
            _ => candidate.clone(),
        };
        let cplan = p.model.plan(&full)?;
        let cm = p.model.apply(&cplan, &state.u)?;
        let f = misfit_of(&cm, &p.data);
        let big_f = f + weighted_smoothness_value(&candidate, mu);
        if f.is_finite() && f <= f1 && big_f <= big_f1 {
            if state.knot_values.is_some() {
                state.knot_values = Some(candidate);
            }
            state.trace = full;
            state.cache = Some((cplan, cm));
            return Ok((true, attempt));
        }
        damping = if damping > 0.0 { damping * 10.0 } else { 1e-3 };
    }
    Ok((false, cfg.max_backtracks + 1))
}

/// Diagnostics of one (scale, radius) stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub scale: usize,
    pub dims: [usize; 3],
    pub n_lines: usize,
    pub epsilon_multiplier: f64,
    pub epsilon: f64,
    pub step_u: f64,
    pub misfit_history: Vec<f64>,
    pub feasibility: Vec<f64>,
    pub projection_iterations: Vec<usize>,
    pub projection_fallbacks: usize,
    pub u_backtracks: usize,
    pub u_rejections: usize,
    pub theta_rejections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleReport {
    pub scale: usize,
    pub epsilon_base: f64,
    pub lipschitz: Option<f64>,
    pub eta: f64,
}

/// Deterministic account of a correction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub scales: Vec<ScaleReport>,
    pub stages: Vec<StageReport>,
    pub final_misfit: f64,
}

/// Wall-clock seconds, kept apart from the report so reports are reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct CorrectionResult {
    pub u: ComplexVolume3D,
    pub trace: MotionTrace,
    pub report: SolverReport,
    pub timings: Timings,
}

/// Failure of a correction run with the last iterate that was still finite.
#[derive(Debug)]
pub struct SolverFailure {
    pub error: MocoError,
    pub last_good: Option<(ComplexVolume3D, MotionTrace)>,
    pub report: SolverReport,
}

impl fmt::Display for SolverFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl std::error::Error for SolverFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<MocoError> for SolverFailure {
    fn from(error: MocoError) -> Self {
        Self {
            error,
            last_good: None,
            report: SolverReport {
                scales: Vec::new(),
                stages: Vec::new(),
                final_misfit: f64::NAN,
            },
        }
    }
}

/// Brings the reference onto the data grid; the fields of view must agree.
fn reference_on_grid(reference: &ComplexVolume3D, pattern: &SamplingPattern) -> Result<ComplexVolume3D> {
    let dims = pattern.dims();
    let vs = pattern.voxel_size();
    let rd = reference.dims();
    let rv = reference.voxel_size();
    for a in 0..3 {
        let fov = dims[a] as f64 * vs[a];
        let rfov = rd[a] as f64 * rv[a];
        if (fov - rfov).abs() > 1e-6 * fov {
            return Err(invalid_input(format!(
                "reference field of view {rfov:.3} mm differs from the data's {fov:.3} mm on axis {a}"
            )));
        }
    }
    reference.check_finite()?;
    if rd == dims {
        return Ok(reference.clone().with_voxel_size(vs));
    }
    Ok(resample_spectral(reference, dims, true)?.with_voxel_size(vs))
}

fn build_guide(reference: Option<&ComplexVolume3D>, pattern: &SamplingPattern, cfg: &SolverConfig) -> Result<GuideField> {
    let dims = pattern.dims();
    let vs = pattern.voxel_size();
    let Some(reference) = reference else {
        return Ok(GuideField::none(dims, vs));
    };
    let r = if reference.dims() == dims {
        reference.clone()
    } else {
        resample_spectral(reference, dims, false)?
    }
    .with_voxel_size(vs);
    let peak = gradient(&r).iter().map(vnorm_sqr).fold(0.0, f64::max).sqrt();
    if peak == 0.0 {
        return Ok(GuideField::none(dims, vs));
    }
    GuideField::from_reference(&r, Some(cfg.eta_relative * peak))
}

/// Full coarse-to-fine correction. `reference` is required in guided mode.
pub fn run_correction(
    data: &KSpaceData,
    reference: Option<&ComplexVolume3D>,
    cfg: &SolverConfig,
) -> std::result::Result<CorrectionResult, SolverFailure> {
    cfg.validate()?;
    let pattern = data.pattern();
    if data.samples().iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
        return Err(invalid_input("k-space data contain non-finite values").into());
    }
    let reference = match (cfg.mode, reference) {
        (RegMode::Guided, None) => return Err(invalid_input("guided mode needs a reference volume").into()),
        (RegMode::Guided, Some(r)) => Some(reference_on_grid(r, pattern)?),
        (RegMode::PlainTv, _) => None,
    };
    for &s in &cfg.scales {
        coarse_dims(pattern.dims(), s)?;
    }

    let start = Instant::now();
    let mut report = SolverReport {
        scales: Vec::new(),
        stages: Vec::new(),
        final_misfit: f64::NAN,
    };
    let mut timings = Timings::default();
    let identity = MotionTrace::identity(pattern.n_lines());
    let mut state: Option<SolverState> = None;

    for (si, &scale) in cfg.scales.iter().enumerate() {
        let ds = downscale_problem(data, &identity, scale)?;
        let spat = ds.data.pattern().clone();
        let (u0, trace0) = match state.take() {
            None => (
                ComplexVolume3D::zeros(spat.dims(), spat.voxel_size())?,
                MotionTrace::identity(spat.n_lines()),
            ),
            Some(prev) => upscale_solution(&prev.u, &prev.trace, &spat)?,
        };
        let guide = build_guide(reference.as_ref(), &spat, cfg)?;
        let eta = guide.eta();
        let fm = ForwardModel::new(&spat, &cfg.nufft)?;
        let zf = fm.adjoint(&fm.plan(&MotionTrace::identity(spat.n_lines()))?, ds.data.samples())?;
        let eps_base = cfg.epsilon_factor * guide.sgtv(&zf)?;
        let (step, lipschitz) = match cfg.step_u {
            Some(a) => (a, None),
            None => {
                let l = fm.lipschitz(&MotionTrace::identity(spat.n_lines()), cfg.power_iterations, cfg.seed)?;
                if !(l > 0.0 && l.is_finite()) {
                    return Err(MocoError::Divergence(format!("operator norm estimate {l} is unusable")).into());
                }
                (cfg.step_safety / l, Some(l))
            }
        };
        report.scales.push(ScaleReport {
            scale,
            epsilon_base: eps_base,
            lipschitz,
            eta,
        });

        let knots = match cfg.knots.as_ref().map(|k| k[si]) {
            Some(m) if m > 0 => Some(KnotInterpolation::new(m.min(spat.n_lines()), spat.n_lines())?),
            _ => None,
        };
        let mut st = SolverState::new(u0, trace0, step);
        st.scale_index = si;
        if let Some(k) = &knots {
            let kv = k.sample(&st.trace)?;
            st.trace = k.expand(&kv)?;
            st.knot_values = Some(kv);
        }
        let mut problem = StageProblem {
            model: fm,
            data: ds.data,
            guide,
            epsilon: eps_base,
            knots,
        };

        for (ki, &mult) in cfg.epsilon_multipliers.iter().enumerate() {
            let stage_start = Instant::now();
            problem.epsilon = eps_base / mult;
            st.stage_index = ki;
            st.step_u = st.step_u_max;
            st.misfit_history.clear();
            let mut sr = StageReport {
                scale,
                dims: spat.dims(),
                n_lines: spat.n_lines(),
                epsilon_multiplier: mult,
                epsilon: problem.epsilon,
                step_u: st.step_u,
                misfit_history: Vec::new(),
                feasibility: Vec::new(),
                projection_iterations: Vec::new(),
                projection_fallbacks: 0,
                u_backtracks: 0,
                u_rejections: 0,
                theta_rejections: 0,
            };
            for _ in 0..cfg.iters_per_stage {
                let last_good = (st.u.clone(), st.trace.clone());
                let info = match palm_iteration(&mut st, &problem, cfg) {
                    Ok(info) => info,
                    Err(error) => {
                        report.stages.push(sr);
                        let last_good = upscale_solution(&last_good.0, &last_good.1, pattern).ok();
                        return Err(SolverFailure {
                            error,
                            last_good,
                            report,
                        });
                    }
                };
                let prev = sr.misfit_history.last().copied();
                sr.misfit_history.push(info.misfit);
                sr.feasibility.push(info.feasibility);
                sr.projection_iterations.push(info.projection.iterations);
                sr.projection_fallbacks += usize::from(info.projection.fallback_used);
                sr.u_backtracks += info.u_backtracks;
                sr.u_rejections += usize::from(!info.u_accepted);
                sr.theta_rejections += usize::from(cfg.estimate_motion && !info.theta_accepted);
                if let (Some(tol), Some(prev)) = (cfg.stagnation_tol, prev) {
                    if prev - info.misfit <= tol * prev.abs() {
                        break;
                    }
                }
            }
            sr.step_u = st.step_u;
            report.stages.push(sr);
            timings.stages.push(stage_start.elapsed().as_secs_f64());
        }
        state = Some(st);
    }

    let st = state.expect("at least one scale");
    let (u, trace) = if st.u.dims() == pattern.dims() {
        (st.u, st.trace)
    } else {
        upscale_solution(&st.u, &st.trace, pattern)?
    };
    report.final_misfit = ForwardModel::new(pattern, &cfg.nufft)?.misfit(&u, &trace, data)?;
    timings.total = start.elapsed().as_secs_f64();
    Ok(CorrectionResult {
        u,
        trace,
        report,
        timings,
    })
}
