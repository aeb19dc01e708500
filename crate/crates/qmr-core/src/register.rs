//! Groupwise registration engine.
//!
//! Assembles the total loss (similarity + weighted bending energy + weighted
//! cyclic consistency), differentiates it analytically with respect to the
//! B-spline control coefficients, optimizes per sequence with adaptive
//! per-coefficient steps and backtracking, and runs the iterative
//! decompose -> register -> warp round loop. Registration is driven by the
//! low-rank component of each round's decomposition while the composed field
//! is always applied to the original input.

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::bspline::{
    bending_energy_grad, bilinear_sample_grad, compose_displacements, ffd_adjoint, ffd_upsample,
    warp_stack, ControlGrid, DisplacementField,
};
use crate::error::{QmrError, Result};
use crate::metrics;
use crate::rpca::{godec_decompose, RpcaConfig};
use crate::stack::{normalize_stack, ImageStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Nmi,
    Ncc,
}

/// Which intensities drive the similarity term during optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrivingStack {
    /// The low-rank component of the current round's decomposition.
    LowRank,
    /// The warped input itself (no decomposition benefit).
    Original,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistrationConfig {
    /// Weight of the bending-energy term.
    pub lambda_smooth: f64,
    /// Weight of the cyclic-consistency term.
    pub lambda_cyclic: f64,
    pub rounds: usize,
    pub steps_per_round: usize,
    /// Base step size in pixels; per-coefficient scaling adapts around it.
    pub step_size: f64,
    pub control_spacing: usize,
    pub bins: usize,
    pub ncc_window: usize,
    pub similarity: Similarity,
    pub drive_on: DrivingStack,
    /// Stop a round after this many steps without a marked improvement.
    pub early_stop_patience: usize,
    /// Total-loss drop that counts as a marked improvement.
    pub early_stop_min_improvement: f64,
    pub rpca: RpcaConfig,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            lambda_smooth: 0.001,
            lambda_cyclic: 0.01,
            rounds: 3,
            steps_per_round: 300,
            step_size: 0.5,
            control_spacing: 4,
            bins: metrics::DEFAULT_BINS,
            ncc_window: 9,
            similarity: Similarity::Nmi,
            drive_on: DrivingStack::LowRank,
            early_stop_patience: 25,
            early_stop_min_improvement: 1e-6,
            rpca: RpcaConfig::default(),
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    fn validate(&self) -> Result<()> {
        if self.lambda_smooth < 0.0 || self.lambda_cyclic < 0.0 {
            return Err(QmrError::Config("loss weights must be >= 0".into()));
        }
        if self.rounds == 0 {
            return Err(QmrError::Config("rounds must be >= 1".into()));
        }
        if self.step_size <= 0.0 {
            return Err(QmrError::Config("step size must be > 0".into()));
        }
        if self.control_spacing == 0 {
            return Err(QmrError::Config("control spacing must be >= 1".into()));
        }
        Ok(())
    }
}

/// One accepted optimizer step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossTraceEntry {
    pub similarity: f64,
    pub smooth: f64,
    pub cyclic: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundReport {
    pub d_pca_before: f64,
    pub d_pca_after: f64,
    pub rpca_iterations: usize,
    pub rpca_final_error: f64,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Total displacement, composed over all rounds.
    pub fields: DisplacementField,
    pub grids_per_round: Vec<ControlGrid>,
    /// The original input warped by `fields`.
    pub warped: ImageStack,
    pub loss_trace: Vec<LossTraceEntry>,
    pub round_reports: Vec<RoundReport>,
    /// Set when a round aborted on a non-finite loss; the result then holds
    /// the rounds completed so far.
    pub aborted: bool,
}

/// Pixelwise mean over frames, the groupwise registration target.
pub fn implicit_reference(warped: &ImageStack) -> Array2<f64> {
    warped.mean_frame()
}

fn warp_frames(stack: &ImageStack, field: &DisplacementField) -> Array3<f64> {
    let (n, h, w) = stack.frames().dim();
    let mut out = Array3::zeros((n, h, w));
    for f in 0..n {
        let frame = stack.frame(f);
        for y in 0..h {
            for x in 0..w {
                let py = y as f64 + field.u()[[f, y, x, 0]];
                let px = x as f64 + field.u()[[f, y, x, 1]];
                out[[f, y, x]] = crate::bspline::bilinear_sample(&frame, py, px);
            }
        }
    }
    out
}

fn similarity_loss(warped: &Array3<f64>, config: &RegistrationConfig) -> Result<f64> {
    let (n, h, w) = warped.dim();
    let mut reference = Array2::<f64>::zeros((h, w));
    for i in 0..n {
        reference += &warped.index_axis(ndarray::Axis(0), i);
    }
    reference /= n as f64;
    let stack = ImageStack::new(warped.clone(), None, [1.0, 1.0])?;
    match config.similarity {
        Similarity::Nmi => metrics::groupwise_nmi_loss(&stack, &reference.view(), config.bins),
        Similarity::Ncc => {
            metrics::groupwise_ncc_loss(&stack, &reference.view(), config.ncc_window)
        }
    }
}

/// Total loss and its components: `(total, similarity, smooth, cyclic)`.
pub fn total_loss(
    stack: &ImageStack,
    grids: &ControlGrid,
    config: &RegistrationConfig,
) -> Result<(f64, f64, f64, f64)> {
    config.validate()?;
    let (_, h, w) = stack.frames().dim();
    let field = ffd_upsample(grids, h, w)?;
    let warped = warp_frames(stack, &field);
    let sim = similarity_loss(&warped, config)?;
    let smooth = crate::bspline::bending_energy(grids, h, w)?;
    let cyclic = metrics::cyclic_loss(&field);
    Ok((
        sim + config.lambda_smooth * smooth + config.lambda_cyclic * cyclic,
        sim,
        smooth,
        cyclic,
    ))
}

/// Total loss with its analytic gradient with respect to every control
/// coefficient: similarity chained through bilinear warping and the FFD,
/// plus analytic bending and cyclic gradients.
pub fn loss_gradient(
    stack: &ImageStack,
    grids: &ControlGrid,
    config: &RegistrationConfig,
) -> Result<(LossTraceEntry, Array4<f64>)> {
    config.validate()?;
    let (n, h, w) = stack.frames().dim();
    let field = ffd_upsample(grids, h, w)?;

    // warp with sample-position derivatives
    let mut warped = Array3::<f64>::zeros((n, h, w));
    let mut dwy = Array3::<f64>::zeros((n, h, w));
    let mut dwx = Array3::<f64>::zeros((n, h, w));
    for f in 0..n {
        let frame = stack.frame(f);
        for y in 0..h {
            for x in 0..w {
                let py = y as f64 + field.u()[[f, y, x, 0]];
                let px = x as f64 + field.u()[[f, y, x, 1]];
                let (v, gy, gx) = bilinear_sample_grad(&frame, py, px);
                warped[[f, y, x]] = v;
                dwy[[f, y, x]] = gy;
                dwx[[f, y, x]] = gx;
            }
        }
    }

    let (sim, dsim_da) = match config.similarity {
        Similarity::Nmi => metrics::groupwise_nmi_loss_grad(&warped, config.bins)?,
        Similarity::Ncc => metrics::groupwise_ncc_loss_grad(&warped, config.ncc_window)?,
    };

    // dL/dfield from the similarity term plus the cyclic term
    let (cyclic, dcyc) = metrics::cyclic_loss_grad(&field);
    let mut dfield = Array4::<f64>::zeros((n, h, w, 2));
    for f in 0..n {
        for y in 0..h {
            for x in 0..w {
                let g = dsim_da[[f, y, x]];
                dfield[[f, y, x, 0]] =
                    g * dwy[[f, y, x]] + config.lambda_cyclic * dcyc[[f, y, x, 0]];
                dfield[[f, y, x, 1]] =
                    g * dwx[[f, y, x]] + config.lambda_cyclic * dcyc[[f, y, x, 1]];
            }
        }
    }
    let mut grad = ffd_adjoint(grids, &dfield)?;

    let (smooth, dsmooth) = bending_energy_grad(grids, h, w)?;
    grad.scaled_add(config.lambda_smooth, &dsmooth);

    let total = sim + config.lambda_smooth * smooth + config.lambda_cyclic * cyclic;
    Ok((
        LossTraceEntry {
            similarity: sim,
            smooth,
            cyclic,
            total,
        },
        grad,
    ))
}

/// One optimization round: adaptive moment-scaled gradient steps with
/// backtracking on total-loss increase. The returned grids never lose to the
/// initial total loss; the trace records accepted steps only, so it is
/// nonincreasing.
pub fn optimize_round(
    stack: &ImageStack,
    init: ControlGrid,
    config: &RegistrationConfig,
) -> Result<(ControlGrid, Vec<LossTraceEntry>)> {
    config.validate()?;
    let mut grids = init;
    let dims = grids.coeffs().dim();

    let (t0, s0, sm0, c0) = total_loss(stack, &grids, config)?;
    if !t0.is_finite() {
        return Err(QmrError::Convergence("initial loss is not finite".into()));
    }
    let mut trace = vec![LossTraceEntry {
        similarity: s0,
        smooth: sm0,
        cyclic: c0,
        total: t0,
    }];
    let mut best = t0;

    let beta1: f64 = 0.9;
    let beta2: f64 = 0.999;
    let eps = 1e-8;
    let mut m = Array4::<f64>::zeros(dims);
    let mut v = Array4::<f64>::zeros(dims);
    let mut lr = config.step_size;
    let mut rejected_streak = 0usize;
    let mut marked = best;
    let mut steps_since_mark = 0usize;

    for step in 1..=config.steps_per_round {
        let (_, grad) = loss_gradient(stack, &grids, config)?;
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(QmrError::Convergence(format!(
                "non-finite gradient at step {step}"
            )));
        }
        let bc1 = 1.0 - beta1.powi(step as i32);
        let bc2 = 1.0 - beta2.powi(step as i32);
        ndarray::Zip::from(&mut m).and(&grad).for_each(|mv, &g| {
            *mv = beta1 * *mv + (1.0 - beta1) * g;
        });
        ndarray::Zip::from(&mut v).and(&grad).for_each(|vv, &g| {
            *vv = beta2 * *vv + (1.0 - beta2) * g * g;
        });
        let direction = ndarray::Zip::from(&m).and(&v).map_collect(|&mv, &vv| {
            (mv / bc1) / ((vv / bc2).sqrt() + eps)
        });

        let mut accepted = false;
        for _ in 0..5 {
            let cand_coeffs = ndarray::Zip::from(grids.coeffs())
                .and(&direction)
                .map_collect(|&c, &d| c - lr * d);
            let cand = ControlGrid::new(cand_coeffs, grids.spacing())?;
            let (lt, ls, lsm, lc) = total_loss(stack, &cand, config)?;
            if !lt.is_finite() {
                return Err(QmrError::Convergence(format!(
                    "non-finite loss at step {step}"
                )));
            }
            if lt < best {
                grids = cand;
                best = lt;
                trace.push(LossTraceEntry {
                    similarity: ls,
                    smooth: lsm,
                    cyclic: lc,
                    total: lt,
                });
                lr = (lr * 1.3).min(config.step_size);
                accepted = true;
                break;
            }
            lr /= 2.0;
        }
        if accepted {
            rejected_streak = 0;
        } else {
            rejected_streak += 1;
            if rejected_streak >= 3 {
                break;
            }
        }
        if marked - best >= config.early_stop_min_improvement {
            marked = best;
            steps_since_mark = 0;
        } else {
            steps_since_mark += 1;
            if steps_since_mark >= config.early_stop_patience {
                break;
            }
        }
    }

    // Gauge fix: subtract the frame-mean coefficients. A displacement
    // common to all frames only moves the implicit reference (the cyclic
    // term pins it softly), and the similarity can otherwise drift along
    // that direction by re-binning intensities. Keep the projection only if
    // it does not lose to the starting point.
    let (n_frames, gh, gw, _) = dims;
    let mut projected = grids.coeffs().clone();
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..2 {
                let mean: f64 = (0..n_frames)
                    .map(|f| projected[[f, gy, gx, c]])
                    .sum::<f64>()
                    / n_frames as f64;
                for f in 0..n_frames {
                    projected[[f, gy, gx, c]] -= mean;
                }
            }
        }
    }
    let projected = ControlGrid::new(projected, grids.spacing())?;
    let (pt, _, _, _) = total_loss(stack, &projected, config)?;
    if pt <= t0 {
        return Ok((projected, trace));
    }
    Ok((grids, trace))
}

fn clamp_unit(stack: &ImageStack) -> Result<ImageStack> {
    stack.with_frames(stack.frames().mapv(|v| v.clamp(0.0, 1.0)))
}

/// The iterative decompose -> register -> warp loop.
///
/// Each round decomposes the currently warped (normalized) input, optimizes
/// a fresh control grid on the low-rank component, composes the new field
/// with the running total, and re-warps the input from scratch. The final
/// warped stack applies the composed field to the original intensities.
pub fn rpca_register(stack: &ImageStack, config: &RegistrationConfig) -> Result<RegistrationResult> {
    config.validate()?;
    let (n, h, w) = stack.frames().dim();
    let (norm_input, _) = normalize_stack(stack)?;

    let mut total = DisplacementField::zeros(n, h, w);
    let mut current = norm_input.clone();
    let mut grids_per_round = Vec::new();
    let mut loss_trace = Vec::new();
    let mut round_reports = Vec::new();
    let mut aborted = false;

    for _round in 0..config.rounds {
        let d_before = metrics::d_pca(&current, 1)?;
        let decomp = godec_decompose(&current, &config.rpca)?;
        let driving = match config.drive_on {
            // truncation can overshoot [0, 1] slightly; histograms need the
            // exact range
            DrivingStack::LowRank => clamp_unit(&decomp.low_rank)?,
            DrivingStack::Original => current.clone(),
        };
        let init = ControlGrid::zeros_for(n, h, w, config.control_spacing);
        let (grids, trace) = match optimize_round(&driving, init, config) {
            Ok(ok) => ok,
            Err(QmrError::Convergence(msg)) => {
                log::warn!("registration round aborted: {msg}");
                aborted = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let field = ffd_upsample(&grids, h, w)?;
        total = compose_displacements(&field, &total)?;
        current = warp_stack(&norm_input, &total)?;
        let d_after = metrics::d_pca(&current, 1)?;
        grids_per_round.push(grids);
        loss_trace.extend(trace);
        round_reports.push(RoundReport {
            d_pca_before: d_before,
            d_pca_after: d_after,
            rpca_iterations: decomp.iterations_used,
            rpca_final_error: decomp.final_relative_error,
        });
    }

    let warped = warp_stack(stack, &total)?;
    Ok(RegistrationResult {
        fields: total,
        grids_per_round,
        warped,
        loss_trace,
        round_reports,
        aborted,
    })
}
