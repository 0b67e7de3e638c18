//! Differentiable loss machinery: viscous PDE residuals, data/physics
//! losses, temporal causality weighting with stop-gradient semantics, stack
//! gradient norms, causal stack weights, and the aggregate objective.

use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lwr::{FluxModel, MeasurementSet};
use crate::model::StackedModel;
use crate::net::{stage_backward_jet, JetBatch, StageGrads};
use crate::{Error, Result};

/// How the temporal weights W(t_ℓ) are derived from per-slice losses.
///
/// The cumulative-exclusive form uses the accumulated loss of all earlier
/// slices, so W(t_1) = 1; the pointwise form exponentiates each slice's own
/// loss. Either way the weights are treated as constants under
/// differentiation (stop-gradient).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightConvention {
    #[default]
    CumulativeExclusive,
    Pointwise,
}

/// Unlabeled physics points in Λ.
///
/// Grid mode keeps points grouped by strictly increasing time slices, which
/// the temporal causality weighting needs; flat mode is an unordered list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollocationSet {
    ts: Vec<f64>,
    xs: Vec<f64>,
    grid: Option<GridInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GridInfo {
    t_slices: Vec<f64>,
    slice_of: Vec<usize>,
}

impl CollocationSet {
    /// Tensor-product grid of cell centers: N_t time slices × N_x positions.
    pub fn grid(t_final: f64, length: f64, n_t: usize, n_x: usize) -> Result<Self> {
        if n_t == 0 || n_x == 0 {
            return Err(Error::Config("collocation grid needs n_t, n_x >= 1".into()));
        }
        let t_slices: Vec<f64> = (0..n_t)
            .map(|l| (l as f64 + 0.5) * t_final / n_t as f64)
            .collect();
        let mut ts = Vec::with_capacity(n_t * n_x);
        let mut xs = Vec::with_capacity(n_t * n_x);
        let mut slice_of = Vec::with_capacity(n_t * n_x);
        for (l, &t) in t_slices.iter().enumerate() {
            for m in 0..n_x {
                ts.push(t);
                xs.push((m as f64 + 0.5) * length / n_x as f64);
                slice_of.push(l);
            }
        }
        Ok(Self {
            ts,
            xs,
            grid: Some(GridInfo { t_slices, slice_of }),
        })
    }

    /// `n` uniform random points in Λ, reproducible per seed.
    pub fn uniform(t_final: f64, length: f64, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("collocation set needs n >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ts = Vec::with_capacity(n);
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n {
            ts.push(rng.random_range(0.0..t_final));
            xs.push(rng.random_range(0.0..length));
        }
        Ok(Self { ts, xs, grid: None })
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    pub fn is_grid(&self) -> bool {
        self.grid.is_some()
    }

    pub fn ts(&self) -> &[f64] {
        &self.ts
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn n_slices(&self) -> Option<usize> {
        self.grid.as_ref().map(|g| g.t_slices.len())
    }

    pub(crate) fn slice_of(&self) -> Option<&[usize]> {
        self.grid.as_ref().map(|g| g.slice_of.as_slice())
    }

    /// Append points. In grid mode each point joins the slice with the
    /// nearest time stamp so the causal weighting keeps covering it.
    pub fn append(&mut self, points: &[(f64, f64)]) {
        for &(t, x) in points {
            self.ts.push(t);
            self.xs.push(x);
            if let Some(grid) = &mut self.grid {
                let l = grid
                    .t_slices
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| {
                        (*a - t).abs().partial_cmp(&(*b - t).abs()).unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                grid.slice_of.push(l);
            }
        }
    }
}

/// Viscous PDE residual r_γ = ∂t û + f'(û) ∂x û − γ ∂xx û at a batch of
/// points, computed by automatic differentiation of the forward pass.
pub fn pde_residual(
    model: &StackedModel,
    stage: usize,
    gamma: f64,
    flux: &FluxModel,
    ts: &[f64],
    xs: &[f64],
) -> Result<Array1<f64>> {
    if stage >= model.n_stacks() {
        return Err(Error::Domain(format!("stage {stage} out of range")));
    }
    if gamma < 0.0 {
        return Err(Error::Domain(format!("gamma must be >= 0, got {gamma}")));
    }
    let pass = model.forward_jets(ArrayView1::from(ts), ArrayView1::from(xs), stage, false);
    Ok(residual_from_jet(&pass.outputs[stage], flux, gamma))
}

pub(crate) fn residual_from_jet(jet: &JetBatch, flux: &FluxModel, gamma: f64) -> Array1<f64> {
    let n = jet.batch();
    let (jv, jdt, jdx, jdxx) = jet.channels();
    let mut r = Array1::zeros(n);
    for i in 0..n {
        let v = jv[[i, 0]];
        r[i] = jdt[[i, 0]] + flux.characteristic_speed(v) * jdx[[i, 0]]
            - gamma * jdxx[[i, 0]];
    }
    r
}

/// Mean squared error between û^{(stage)} and the observed densities.
pub fn data_loss(model: &StackedModel, stage: usize, data: &MeasurementSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("data loss over an empty measurement set".into()));
    }
    let ts: Vec<f64> = data.records.iter().map(|m| m.t).collect();
    let xs: Vec<f64> = data.records.iter().map(|m| m.x).collect();
    let pred = model.forward(stage, &ts, &xs)?;
    let mse = data
        .records
        .iter()
        .zip(pred.iter())
        .map(|(m, &p)| (p - m.u).powi(2))
        .sum::<f64>()
        / data.len() as f64;
    Ok(mse)
}

/// Mean of squared residuals over the collocation set.
pub fn physics_loss(
    model: &StackedModel,
    stage: usize,
    gamma: f64,
    flux: &FluxModel,
    colloc: &CollocationSet,
) -> Result<f64> {
    if colloc.is_empty() {
        return Err(Error::Empty("physics loss over an empty collocation set".into()));
    }
    let r = pde_residual(model, stage, gamma, flux, colloc.ts(), colloc.xs())?;
    Ok(r.iter().map(|r| r * r).sum::<f64>() / r.len() as f64)
}

/// Spatially averaged squared residual per time slice (grid mode only).
pub fn per_slice_losses(
    model: &StackedModel,
    stage: usize,
    gamma: f64,
    flux: &FluxModel,
    colloc: &CollocationSet,
) -> Result<Vec<f64>> {
    let slice_of = colloc
        .slice_of()
        .ok_or_else(|| Error::Domain("per-slice losses need a grid-mode collocation set".into()))?;
    let n_slices = colloc.n_slices().unwrap();
    let r = pde_residual(model, stage, gamma, flux, colloc.ts(), colloc.xs())?;
    Ok(slice_means(&r, slice_of, n_slices))
}

pub(crate) fn slice_means(r: &Array1<f64>, slice_of: &[usize], n_slices: usize) -> Vec<f64> {
    let mut sums = vec![0.0; n_slices];
    let mut counts = vec![0usize; n_slices];
    for (i, &l) in slice_of.iter().enumerate() {
        sums[l] += r[i] * r[i];
        counts[l] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect()
}

/// Temporal weights W(t_ℓ) from per-slice losses.
///
/// The returned weights are plain values; callers must not differentiate
/// through them (stop-gradient).
pub fn temporal_weights(
    per_slice: &[f64],
    kappa: f64,
    convention: WeightConvention,
) -> Result<Vec<f64>> {
    if kappa <= 0.0 {
        return Err(Error::Domain(format!("kappa must be positive, got {kappa}")));
    }
    if let Some(bad) = per_slice.iter().find(|&&l| l < 0.0 || !l.is_finite()) {
        return Err(Error::Domain(format!("negative or non-finite slice loss {bad}")));
    }
    Ok(match convention {
        WeightConvention::CumulativeExclusive => {
            let mut cum = 0.0;
            per_slice
                .iter()
                .map(|&l| {
                    let w = (-kappa * cum).exp();
                    cum += l;
                    w
                })
                .collect()
        }
        WeightConvention::Pointwise => per_slice.iter().map(|&l| (-kappa * l).exp()).collect(),
    })
}

/// Temporally weighted physics loss 𝓛_tc = (1/N_t) Σ_ℓ W(t_ℓ) 𝓛(t_ℓ).
pub fn temporally_weighted_physics_loss(
    model: &StackedModel,
    stage: usize,
    gamma: f64,
    flux: &FluxModel,
    colloc: &CollocationSet,
    kappa: f64,
    convention: WeightConvention,
) -> Result<f64> {
    let per_slice = per_slice_losses(model, stage, gamma, flux, colloc)?;
    let w = temporal_weights(&per_slice, kappa, convention)?;
    let n_t = per_slice.len() as f64;
    Ok(per_slice
        .iter()
        .zip(&w)
        .map(|(&l, &wl)| wl * l)
        .sum::<f64>()
        / n_t)
}

/// Euclidean norm of the gradient of stage i's temporally weighted physics
/// loss w.r.t. the parameters of stage i only (including its gain).
///
/// On a flat collocation set the weights degenerate to one and the plain
/// physics loss is differentiated instead.
pub fn stack_gradient_norm(
    model: &StackedModel,
    stage: usize,
    gamma: f64,
    flux: &FluxModel,
    colloc: &CollocationSet,
    kappa: f64,
    convention: WeightConvention,
) -> Result<f64> {
    if colloc.is_empty() {
        return Err(Error::Empty("gradient norm over an empty collocation set".into()));
    }
    if stage >= model.n_stacks() {
        return Err(Error::Domain(format!("stage {stage} out of range")));
    }
    let pass = model.forward_jets(
        ArrayView1::from(colloc.ts()),
        ArrayView1::from(colloc.xs()),
        stage,
        true,
    );
    let (sq, _alpha_grad) = stage_local_grad_sq(model, &pass, stage, gamma, flux, colloc, kappa, convention)?;
    Ok(sq.sqrt())
}

/// Shared core: squared gradient norm of the stage-local physics term plus
/// the gain gradient, reusing a recorded jet pass.
pub(crate) fn stage_local_grad_sq(
    model: &StackedModel,
    pass: &crate::model::ModelJetPass,
    stage: usize,
    gamma: f64,
    flux: &FluxModel,
    colloc: &CollocationSet,
    kappa: f64,
    convention: WeightConvention,
) -> Result<(f64, f64)> {
    let jet = &pass.outputs[stage];
    let r = residual_from_jet(jet, flux, gamma);
    let n = r.len();

    // per-point factor dL/dr with stop-gradiented weights
    let mut dldr = Array1::<f64>::zeros(n);
    match colloc.slice_of() {
        Some(slice_of) => {
            let n_slices = colloc.n_slices().unwrap();
            let per_slice = slice_means(&r, slice_of, n_slices);
            let w = temporal_weights(&per_slice, kappa, convention)?;
            let mut counts = vec![0usize; n_slices];
            for &l in slice_of {
                counts[l] += 1;
            }
            for i in 0..n {
                let l = slice_of[i];
                dldr[i] = 2.0 * r[i] * w[l] / (n_slices as f64 * counts[l] as f64);
            }
        }
        None => {
            for i in 0..n {
                dldr[i] = 2.0 * r[i] / n as f64;
            }
        }
    }

    // cotangent on the stage output jet: r = dt + a(v) dx − γ dxx
    let mut cot = JetBatch::zeros(n, 1);
    {
        let (jv, _, jdx, _) = jet.channels();
        let (mut cv, mut cdt, mut cdx, mut cdxx) = cot.channels_mut();
        for i in 0..n {
            let dx = jdx[[i, 0]];
            let v = jv[[i, 0]];
            cv[[i, 0]] = dldr[i] * (-2.0 * flux.free_flow_speed() * dx);
            cdt[[i, 0]] = dldr[i];
            cdx[[i, 0]] = dldr[i] * flux.characteristic_speed(v);
            cdxx[[i, 0]] = -dldr[i] * gamma;
        }
    }

    let stage_params = &model.stages[stage];
    let mut grads = StageGrads::zeros_like(stage_params);
    let mut alpha_grad = 0.0;
    if stage == 0 {
        let tape = pass.tapes[0].as_ref().expect("tape recorded");
        stage_backward_jet(stage_params, tape, cot, &mut grads);
    } else {
        // only the |α_i| N(...) branch depends on θ_i
        let raw = pass.raw_blocks[stage].as_ref().expect("block output");
        let alpha = model.alphas[stage - 1];
        // subgradient 0 of |α| at the kink, as usual for L1-style terms
        let sign = if alpha == 0.0 { 0.0 } else { alpha.signum() };
        {
            let (cv, cdt, cdx, cdxx) = cot.channels();
            let (rv, rdt, rdx, rdxx) = raw.channels();
            for i in 0..n {
                alpha_grad += sign
                    * (cv[[i, 0]] * rv[[i, 0]]
                        + cdt[[i, 0]] * rdt[[i, 0]]
                        + cdx[[i, 0]] * rdx[[i, 0]]
                        + cdxx[[i, 0]] * rdxx[[i, 0]]);
            }
        }
        let tape = pass.tapes[stage].as_ref().expect("tape recorded");
        stage_backward_jet(stage_params, tape, cot.scale(alpha.abs()), &mut grads);
    }
    Ok((grads.sq_norm() + alpha_grad * alpha_grad, alpha_grad))
}

/// Causal stack weights ω_i = exp(−ε (1/(n+1)) Σ_{j<=i} g_j).
///
/// The gradient norms are consumed as plain values (stop-gradient).
pub fn causal_stack_weights(g: &[f64], epsilon: f64, n: usize) -> Result<Vec<f64>> {
    if let Some(bad) = g.iter().find(|&&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Domain(format!("negative or non-finite gradient norm {bad}")));
    }
    let scale = epsilon / (n + 1) as f64;
    let mut cum = 0.0;
    Ok(g.iter()
        .map(|&gi| {
            cum += gi;
            (-scale * cum).exp()
        })
        .collect())
}

/// Per-stack and aggregate values of the training objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub total: f64,
    /// 𝓛_data per active stack.
    pub data_losses: Vec<f64>,
    /// Physics term per active stack: 𝓛_phy, or 𝓛_tc in causal mode.
    pub phys_losses: Vec<f64>,
    pub alpha_penalty: f64,
}

/// Aggregate multi-stack objective:
/// (1/(n+1)) Σ_{i active} [𝓛_data^(i) + λ_i 𝓛^(i)] + Σ α_j²,
/// where 𝓛^(i) is 𝓛_phy or 𝓛_tc depending on `causal`.
///
/// Inactive stacks contribute nothing. The normalization stays n+1
/// regardless of how many stacks are active.
#[allow(clippy::too_many_arguments)]
pub fn total_objective(
    model: &StackedModel,
    lambdas: &[f64],
    data: &MeasurementSet,
    colloc: &CollocationSet,
    flux: &FluxModel,
    active: usize,
    causal: bool,
    kappa: f64,
    convention: WeightConvention,
) -> Result<ObjectiveBreakdown> {
    let n_stacks = model.n_stacks();
    if lambdas.len() != n_stacks {
        return Err(Error::Shape(format!(
            "expected {} dual variables, got {}",
            n_stacks,
            lambdas.len()
        )));
    }
    if active == 0 || active > n_stacks {
        return Err(Error::Domain(format!(
            "active frontier {active} out of range 1..={n_stacks}"
        )));
    }
    let mut data_losses = Vec::with_capacity(active);
    let mut phys_losses = Vec::with_capacity(active);
    for i in 0..active {
        let gamma = model.schedule.viscosity(i)?;
        data_losses.push(data_loss(model, i, data)?);
        let phys = if causal {
            temporally_weighted_physics_loss(model, i, gamma, flux, colloc, kappa, convention)?
        } else {
            physics_loss(model, i, gamma, flux, colloc)?
        };
        phys_losses.push(phys);
    }
    let alpha_penalty: f64 = model.alphas.iter().map(|a| a * a).sum();
    let total = data_losses
        .iter()
        .zip(&phys_losses)
        .zip(lambdas)
        .map(|((&d, &p), &l)| d + l * p)
        .sum::<f64>()
        / n_stacks as f64
        + alpha_penalty;
    Ok(ObjectiveBreakdown {
        total,
        data_losses,
        phys_losses,
        alpha_penalty,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub objective: f64,
    pub data_losses: Vec<f64>,
    pub phys_losses: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Active frontier when the row was logged (n+1 unless causal).
    pub d_k: usize,
    pub w_min: Option<f64>,
    pub w_mean: Option<f64>,
    pub grad_norms: Option<Vec<f64>>,
    pub omegas: Option<Vec<f64>>,
}
