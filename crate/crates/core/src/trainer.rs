//! Training loops, the scenario matrix, evaluation metrics, and run
//! persistence.
//!
//! One epoch is: forward the active stacks on the collocation set (with
//! jets) and on the measurement set (values only), reverse-sweep the whole
//! composition to get exact gradients of the aggregate objective, take an
//! adaptive-moment step on the active stacks, and let the enabled
//! controllers (dual ascent, causality gating, RAR, stability stop) react.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::curriculum::{
    causality_step, dual_update, rar_resample, CausalityState, CurriculumEvent, DualState,
    RARConfig, StabilityWindow,
};
use crate::losses::{
    causal_stack_weights, residual_from_jet, slice_means, stage_local_grad_sq, temporal_weights,
    CollocationSet, LossReport, ObjectiveBreakdown, WeightConvention,
};
use crate::lwr::{FluxModel, GridSolution, MeasurementSet};
use crate::model::{init_model, InputMap, StackSpec, StackedModel, ViscositySchedule};
use crate::net::{stage_backward_jet, stage_backward_value, JetBatch, StageGrads};
use crate::{Error, Result};

/// Where the physics points come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CollocSpec {
    /// N_t × N_x tensor grid of cell centers (required in causal mode).
    Grid { n_t: usize, n_x: usize },
    /// Uniform random points in Λ.
    Uniform { n: usize },
}

/// Stability-stop settings; `None` in the config disables the check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    pub n_test: usize,
    pub delta: f64,
}

/// Everything needed to reproduce a run bit-for-bit from (config, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub causal: bool,
    pub adaptive: bool,
    pub primal_dual: bool,
    pub n_epoch: usize,
    /// Primal step size η_Θ.
    pub eta_theta: f64,
    pub seed: u64,
    pub spec: StackSpec,
    pub gamma_init: f64,
    pub p: f64,
    pub t_final: f64,
    pub length: f64,
    pub free_flow_speed: f64,
    pub kappa: f64,
    pub convention: WeightConvention,
    /// Initial causality coefficient ε.
    pub epsilon: f64,
    pub anneal_factor: f64,
    pub theta_unlock: f64,
    pub tau: usize,
    pub eta_lambda: f64,
    pub n_lambda: usize,
    pub rar: RARConfig,
    pub stability: Option<StabilityConfig>,
    pub colloc: CollocSpec,
    /// Log a LossReport row every this many epochs (first and last always).
    pub log_every: usize,
    /// Record per-stack parameter checksums with every logged row.
    pub debug_checksums: bool,
}

impl TrainingConfig {
    /// Small configuration for fast tests: tiny networks, short horizon.
    pub fn desk(seed: u64) -> Self {
        Self {
            causal: false,
            adaptive: false,
            primal_dual: false,
            n_epoch: 200,
            eta_theta: 1e-3,
            seed,
            spec: StackSpec {
                baseline_layers: vec![10, 10],
                block_layers: vec![8, 8],
                activation: crate::model::Activation::Tanh,
                n_blocks: 2,
            },
            gamma_init: 0.1,
            p: 0.5,
            t_final: 1.0,
            length: 1.0,
            free_flow_speed: 1.0,
            kappa: 10.0,
            convention: WeightConvention::CumulativeExclusive,
            epsilon: 0.1,
            anneal_factor: 5.0,
            theta_unlock: 0.9,
            tau: 50,
            eta_lambda: 0.1,
            n_lambda: 100,
            rar: RARConfig {
                m_new: 20,
                n_phy_candidates: 10_000,
                n_resample: 500,
            },
            stability: None,
            colloc: CollocSpec::Uniform { n: 200 },
            log_every: 10,
            debug_checksums: false,
        }
    }

    /// Full-scale reference configuration (§4-sized networks, 20k epochs).
    pub fn reference(seed: u64) -> Self {
        Self {
            spec: StackSpec::reference(),
            n_epoch: 20_000,
            colloc: CollocSpec::Uniform { n: 5000 },
            log_every: 100,
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_epoch == 0 {
            return Err(Error::Config("n_epoch must be >= 1".into()));
        }
        if !(self.eta_theta >= 0.0) || !self.eta_theta.is_finite() {
            return Err(Error::Config(format!(
                "primal step size must be finite and >= 0, got {}",
                self.eta_theta
            )));
        }
        self.spec.validate()?;
        self.rar.validate()?;
        if self.causal && !matches!(self.colloc, CollocSpec::Grid { .. }) {
            return Err(Error::Config(
                "causal mode needs a grid collocation set for per-slice weights".into(),
            ));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn build_collocation(&self) -> Result<CollocationSet> {
        match self.colloc {
            CollocSpec::Grid { n_t, n_x } => {
                CollocationSet::grid(self.t_final, self.length, n_t, n_x)
            }
            CollocSpec::Uniform { n } => {
                CollocationSet::uniform(self.t_final, self.length, n, self.seed ^ 0x5eed_c011)
            }
        }
    }

    pub fn build_model(&self) -> Result<StackedModel> {
        init_model(
            &self.spec,
            ViscositySchedule::new(self.gamma_init, self.p, self.spec.n_blocks.max(1))?,
            InputMap {
                t_final: self.t_final,
                length: self.length,
            },
            self.seed,
        )
    }
}

/// How a run ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    StabilityStop { epoch: usize },
    CausalityTermination { epoch: usize },
    Diverged { epoch: usize },
}

/// Final evaluation against the reference grid solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub relative_l2: f64,
    pub mean_mse: f64,
}

/// Complete record of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainingConfig,
    pub seed: u64,
    pub history: Vec<LossReport>,
    pub events: Vec<CurriculumEvent>,
    pub model: StackedModel,
    pub metrics: Metrics,
    pub wall_secs: f64,
    pub status: RunStatus,
    /// Per logged row: one checksum per stack (empty unless enabled).
    pub checksums: Vec<Vec<u64>>,
}

/// Deterministic 64-bit digest of one stack's parameters (bit patterns).
pub fn stage_checksum(model: &StackedModel, stage: usize) -> u64 {
    let mut h = DefaultHasher::new();
    for layer in &model.stages[stage].layers {
        for &w in layer.w.iter() {
            w.to_bits().hash(&mut h);
        }
        for &b in layer.b.iter() {
            b.to_bits().hash(&mut h);
        }
    }
    if stage > 0 {
        model.alphas[stage - 1].to_bits().hash(&mut h);
    }
    h.finish()
}

// ---------------------------------------------------------------------------
// Gradient of the aggregate objective
// ---------------------------------------------------------------------------

/// Pull one channel of a multi-channel jet cotangent into a 1-wide jet.
fn jet_channel(jet: &JetBatch, c: usize) -> JetBatch {
    let n = jet.batch();
    let mut out = JetBatch::zeros(n, 1);
    {
        let (jv, jdt, jdx, jdxx) = jet.channels();
        let (mut ov, mut odt, mut odx, mut odxx) = out.channels_mut();
        for i in 0..n {
            ov[[i, 0]] = jv[[i, c]];
            odt[[i, 0]] = jdt[[i, c]];
            odx[[i, 0]] = jdx[[i, c]];
            odxx[[i, 0]] = jdxx[[i, c]];
        }
    }
    out
}

fn jet_dot(a: &JetBatch, b: &JetBatch) -> f64 {
    a.dot_all(b)
}

/// Gradients of the aggregate objective w.r.t. every active parameter.
pub(crate) struct ObjectiveGradient {
    pub breakdown: ObjectiveBreakdown,
    /// Parameter gradients per active stack.
    pub grads: Vec<StageGrads>,
    /// Gain gradients per block (index j ↔ α_{j+1}); zero for inactive.
    pub alpha_grads: Vec<f64>,
    /// Temporal-weight summaries per active stack (grid mode only).
    pub w_min: Option<f64>,
    pub w_mean: Option<f64>,
    /// The recorded physics jet pass, reusable for g_i.
    pub jet_pass: crate::model::ModelJetPass,
}

/// Flattened parameter gradients of the aggregate objective.
///
/// Returns the loss breakdown, one flat gradient vector per active stack
/// (each stack's weight matrices in row-major order followed by the bias
/// vector, layer by layer), and the per-block gain gradients. Exposed for
/// external gradient validation against reference computations.
#[allow(clippy::too_many_arguments)]
pub fn parameter_gradients(
    model: &StackedModel,
    lambdas: &[f64],
    data: &MeasurementSet,
    colloc: &CollocationSet,
    flux: &FluxModel,
    active: usize,
    causal: bool,
    kappa: f64,
    convention: WeightConvention,
) -> Result<(ObjectiveBreakdown, Vec<Vec<f64>>, Vec<f64>)> {
    let grad = objective_gradient(
        model, lambdas, data, colloc, flux, active, causal, kappa, convention,
    )?;
    let flat = grad
        .grads
        .iter()
        .map(|g| {
            g.layers
                .iter()
                .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
                .collect()
        })
        .collect();
    Ok((grad.breakdown, flat, grad.alpha_grads))
}

/// Forward + reverse sweep of the whole active stack composition.
///
/// Losses are read off the same forward passes that feed the reverse sweep,
/// so reported values and gradients are always consistent.
#[allow(clippy::too_many_arguments)]
pub(crate) fn objective_gradient(
    model: &StackedModel,
    lambdas: &[f64],
    data: &MeasurementSet,
    colloc: &CollocationSet,
    flux: &FluxModel,
    active: usize,
    causal: bool,
    kappa: f64,
    convention: WeightConvention,
) -> Result<ObjectiveGradient> {
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
    if data.is_empty() || colloc.is_empty() {
        return Err(Error::Empty("training needs data and collocation points".into()));
    }
    if causal && !colloc.is_grid() {
        return Err(Error::Domain(
            "causal physics loss needs a grid collocation set".into(),
        ));
    }

    let n_phy = colloc.len();
    let n_data = data.len();
    let norm = n_stacks as f64;

    let jet_pass = model.forward_jets(
        ArrayView1::from(colloc.ts()),
        ArrayView1::from(colloc.xs()),
        active - 1,
        true,
    );
    let data_ts: Vec<f64> = data.records.iter().map(|m| m.t).collect();
    let data_xs: Vec<f64> = data.records.iter().map(|m| m.x).collect();
    let val_pass = model.forward_values(
        ArrayView1::from(&data_ts[..]),
        ArrayView1::from(&data_xs[..]),
        active - 1,
        true,
    );

    // per-stack output cotangents and loss values
    let mut phys_cots: Vec<JetBatch> = Vec::with_capacity(active);
    let mut data_cots: Vec<Array2<f64>> = Vec::with_capacity(active);
    let mut data_losses = Vec::with_capacity(active);
    let mut phys_losses = Vec::with_capacity(active);
    let mut w_min = f64::INFINITY;
    let mut w_sum = 0.0;
    let mut w_count = 0usize;
    for i in 0..active {
        let gamma = model.schedule.viscosity(i)?;
        let jet = &jet_pass.outputs[i];
        let r = residual_from_jet(jet, flux, gamma);

        // dL/dr per point, including λ_i and the 1/(n+1) normalization
        let mut dldr = Array1::<f64>::zeros(n_phy);
        let coeff = lambdas[i] / norm;
        if causal {
            let slice_of = colloc.slice_of().unwrap();
            let n_slices = colloc.n_slices().unwrap();
            let per_slice = slice_means(&r, slice_of, n_slices);
            let w = temporal_weights(&per_slice, kappa, convention)?;
            let mut counts = vec![0usize; n_slices];
            for &l in slice_of {
                counts[l] += 1;
            }
            let ltc = per_slice.iter().zip(&w).map(|(&l, &wl)| wl * l).sum::<f64>()
                / n_slices as f64;
            phys_losses.push(ltc);
            for k in 0..n_phy {
                let l = slice_of[k];
                dldr[k] = coeff * 2.0 * r[k] * w[l] / (n_slices as f64 * counts[l] as f64);
            }
            for &wl in &w {
                w_min = w_min.min(wl);
                w_sum += wl;
                w_count += 1;
            }
        } else {
            phys_losses.push(r.iter().map(|r| r * r).sum::<f64>() / n_phy as f64);
            for k in 0..n_phy {
                dldr[k] = coeff * 2.0 * r[k] / n_phy as f64;
            }
        }

        let mut cot = JetBatch::zeros(n_phy, 1);
        {
            let (jv, _, jdx, _) = jet.channels();
            let (mut cv, mut cdt, mut cdx, mut cdxx) = cot.channels_mut();
            for k in 0..n_phy {
                let v = jv[[k, 0]];
                let dx = jdx[[k, 0]];
                cv[[k, 0]] = dldr[k] * (-2.0 * flux.free_flow_speed() * dx);
                cdt[[k, 0]] = dldr[k];
                cdx[[k, 0]] = dldr[k] * flux.characteristic_speed(v);
                cdxx[[k, 0]] = -dldr[k] * gamma;
            }
        }
        phys_cots.push(cot);

        let pred = val_pass.outputs[i].column(0);
        let mut dcot = Array2::<f64>::zeros((n_data, 1));
        let mut mse = 0.0;
        for (k, m) in data.records.iter().enumerate() {
            let e = pred[k] - m.u;
            mse += e * e;
            dcot[[k, 0]] = 2.0 * e / (n_data as f64 * norm);
        }
        data_losses.push(mse / n_data as f64);
        data_cots.push(dcot);
    }

    // reverse sweep from the deepest active stack down to the baseline
    let mut grads: Vec<StageGrads> = model.stages[..active]
        .iter()
        .map(StageGrads::zeros_like)
        .collect();
    let mut alpha_grads = vec![0.0; model.alphas.len()];
    let mut carry_jet: Option<JetBatch> = None;
    let mut carry_val: Option<Array2<f64>> = None;
    for i in (0..active).rev() {
        let mut acc_jet = phys_cots[i].clone();
        if let Some(c) = carry_jet.take() {
            acc_jet.add_assign(&c);
        }
        let mut acc_val = data_cots[i].clone();
        if let Some(c) = carry_val.take() {
            acc_val += &c;
        }
        if i == 0 {
            stage_backward_jet(
                &model.stages[0],
                jet_pass.tapes[0].as_ref().unwrap(),
                acc_jet,
                &mut grads[0],
            );
            stage_backward_value(
                &model.stages[0],
                val_pass.tapes[0].as_ref().unwrap(),
                acc_val,
                &mut grads[0],
            );
        } else {
            let alpha = model.alphas[i - 1];
            let sign = if alpha == 0.0 { 0.0 } else { alpha.signum() };
            let raw_jet = jet_pass.raw_blocks[i].as_ref().unwrap();
            let raw_val = val_pass.raw_blocks[i].as_ref().unwrap();
            let mut a_grad = sign * jet_dot(&acc_jet, raw_jet);
            for k in 0..n_data {
                a_grad += sign * acc_val[[k, 0]] * raw_val[[k, 0]];
            }
            // the α² penalty of an active block
            a_grad += 2.0 * alpha;
            alpha_grads[i - 1] = a_grad;

            let in_jet = stage_backward_jet(
                &model.stages[i],
                jet_pass.tapes[i].as_ref().unwrap(),
                acc_jet.scale(alpha.abs()),
                &mut grads[i],
            );
            let in_val = stage_backward_value(
                &model.stages[i],
                val_pass.tapes[i].as_ref().unwrap(),
                &acc_val * alpha.abs(),
                &mut grads[i],
            );
            // skip connection (identity) plus the û_prev input channel
            let mut cj = jet_channel(&in_jet, 2);
            cj.add_assign(&acc_jet);
            carry_jet = Some(cj);
            let mut cv = acc_val;
            cv.column_mut(0)
                .iter_mut()
                .zip(in_val.column(2))
                .for_each(|(a, &b)| *a += b);
            carry_val = Some(cv);
        }
    }

    let alpha_penalty: f64 = model.alphas.iter().map(|a| a * a).sum();
    let total = data_losses
        .iter()
        .zip(&phys_losses)
        .zip(&lambdas[..active])
        .map(|((&d, &p), &l)| d + l * p)
        .sum::<f64>()
        / norm
        + alpha_penalty;

    Ok(ObjectiveGradient {
        breakdown: ObjectiveBreakdown {
            total,
            data_losses,
            phys_losses,
            alpha_penalty,
        },
        grads,
        alpha_grads,
        w_min: (w_count > 0).then_some(w_min),
        w_mean: (w_count > 0).then_some(w_sum / w_count as f64),
        jet_pass,
    })
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adaptive-moment state with an independent timestep per stack, so frozen
/// stacks keep their moments and bias correction untouched while inactive.
struct AdamState {
    m: Vec<StageGrads>,
    v: Vec<StageGrads>,
    alpha_m: Vec<f64>,
    alpha_v: Vec<f64>,
    t: Vec<u64>,
}

impl AdamState {
    fn new(model: &StackedModel) -> Self {
        Self {
            m: model.stages.iter().map(StageGrads::zeros_like).collect(),
            v: model.stages.iter().map(StageGrads::zeros_like).collect(),
            alpha_m: vec![0.0; model.alphas.len()],
            alpha_v: vec![0.0; model.alphas.len()],
            t: vec![0; model.n_stacks()],
        }
    }

    fn step(&mut self, model: &mut StackedModel, g: &ObjectiveGradient, active: usize, lr: f64) {
        for i in 0..active {
            self.t[i] += 1;
            let bc1 = 1.0 - BETA1.powi(self.t[i] as i32);
            let bc2 = 1.0 - BETA2.powi(self.t[i] as i32);
            for (l, (gw, gb)) in g.grads[i].layers.iter().enumerate() {
                let (mw, mb) = &mut self.m[i].layers[l];
                let (vw, vb) = &mut self.v[i].layers[l];
                let layer = &mut model.stages[i].layers[l];
                ndarray::Zip::from(&mut layer.w)
                    .and(mw)
                    .and(vw)
                    .and(gw)
                    .for_each(|p, m, v, &gr| {
                        *m = BETA1 * *m + (1.0 - BETA1) * gr;
                        *v = BETA2 * *v + (1.0 - BETA2) * gr * gr;
                        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                    });
                ndarray::Zip::from(&mut layer.b)
                    .and(mb)
                    .and(vb)
                    .and(gb)
                    .for_each(|p, m, v, &gr| {
                        *m = BETA1 * *m + (1.0 - BETA1) * gr;
                        *v = BETA2 * *v + (1.0 - BETA2) * gr * gr;
                        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                    });
            }
            if i > 0 {
                let j = i - 1;
                let gr = g.alpha_grads[j];
                self.alpha_m[j] = BETA1 * self.alpha_m[j] + (1.0 - BETA1) * gr;
                self.alpha_v[j] = BETA2 * self.alpha_v[j] + (1.0 - BETA2) * gr * gr;
                model.alphas[j] -=
                    lr * (self.alpha_m[j] / bc1) / ((self.alpha_v[j] / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Evaluate û^{(stage)} on the reference grid's nodes.
pub fn predict_grid(model: &StackedModel, stage: usize, truth: &GridSolution) -> Result<Array2<f64>> {
    let (nt, nx) = (truth.t_axis.len(), truth.x_axis.len());
    let mut pred = Array2::zeros((nt, nx));
    let xs = truth.x_axis.clone();
    for (k, &t) in truth.t_axis.iter().enumerate() {
        let ts = vec![t; nx];
        let row = model.forward(stage, &ts, &xs)?;
        pred.row_mut(k).assign(&row);
    }
    Ok(pred)
}

/// Relative L2 error ‖û − u‖₂ / ‖u‖₂ over all grid nodes.
pub fn relative_l2(prediction: &Array2<f64>, truth: &GridSolution) -> Result<f64> {
    if prediction.dim() != truth.density.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs truth {:?}",
            prediction.dim(),
            truth.density.dim()
        )));
    }
    let denom = truth.density.iter().map(|u| u * u).sum::<f64>().sqrt();
    if denom == 0.0 {
        return Err(Error::Domain("reference field has zero L2 norm".into()));
    }
    let num = prediction
        .iter()
        .zip(truth.density.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

/// Per-node squared error field and its mean.
pub fn pointwise_mse(
    prediction: &Array2<f64>,
    truth: &GridSolution,
) -> Result<(f64, Array2<f64>)> {
    if prediction.dim() != truth.density.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs truth {:?}",
            prediction.dim(),
            truth.density.dim()
        )));
    }
    let field = (prediction - &truth.density).mapv(|e| e * e);
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    Ok((mean, field))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Run the full training loop (Algorithms 1/2 plus the optional curricula)
/// and evaluate against the reference solution.
///
/// A non-finite objective aborts the run with `RunStatus::Diverged` recorded;
/// the partial history and last-good parameters are still returned.
pub fn train(
    config: &TrainingConfig,
    data: &MeasurementSet,
    truth: &GridSolution,
) -> Result<RunRecord> {
    train_inner(config, data, truth, None, 0)
}

/// Continue a finished run for `extra_epochs` more epochs from its final
/// checkpoint. Controller and optimizer state restart fresh (only parameters
/// carry over); epoch numbering continues from the last logged epoch.
pub fn resume(
    record: &RunRecord,
    extra_epochs: usize,
    data: &MeasurementSet,
    truth: &GridSolution,
) -> Result<RunRecord> {
    let offset = record.history.last().map_or(0, |r| r.epoch);
    let mut config = record.config.clone();
    config.n_epoch = extra_epochs;
    let mut cont = train_inner(&config, data, truth, Some(record.model.clone()), offset)?;
    let mut history = record.history.clone();
    history.extend(cont.history);
    cont.history = history;
    let mut events = record.events.clone();
    events.extend(cont.events);
    cont.events = events;
    Ok(cont)
}

fn train_inner(
    config: &TrainingConfig,
    data: &MeasurementSet,
    truth: &GridSolution,
    init: Option<StackedModel>,
    offset: usize,
) -> Result<RunRecord> {
    config.validate()?;
    let start = Instant::now();
    let flux = FluxModel::new(config.free_flow_speed)?;
    let mut model = match init {
        Some(m) => m,
        None => config.build_model()?,
    };
    let n_stacks = model.n_stacks();
    let mut colloc = config.build_collocation()?;
    let mut adam = AdamState::new(&model);

    let mut dual = if config.primal_dual {
        DualState::new(n_stacks - 1, config.eta_lambda, config.n_lambda)?
    } else {
        DualState::fixed_unit(n_stacks - 1)
    };
    let mut causality = config
        .causal
        .then(|| {
            CausalityState::new(
                n_stacks - 1,
                config.epsilon,
                config.anneal_factor,
                config.theta_unlock,
                config.tau,
            )
        })
        .transpose()?;
    let mut stability = config
        .stability
        .map(|s| {
            StabilityWindow::uniform(
                s.n_test,
                config.t_final,
                config.length,
                s.delta,
                config.seed ^ 0x7e57_da7a,
            )
        })
        .transpose()?;

    let mut history: Vec<LossReport> = Vec::new();
    let mut checksums: Vec<Vec<u64>> = Vec::new();
    let mut events: Vec<CurriculumEvent> = Vec::new();
    let mut status = RunStatus::Completed;

    let first_epoch = offset + 1;
    let last_epoch = offset + config.n_epoch;
    'epochs: for epoch in first_epoch..=last_epoch {
        let active = causality.as_ref().map_or(n_stacks, |c| c.d_k);

        // resampling checkpoint: RAR growth and/or stability check
        if epoch > first_epoch && (epoch - 1) % config.rar.n_resample == 0 {
            if config.adaptive && config.rar.m_new > 0 {
                let (grown, added) = rar_resample(
                    &model,
                    &flux,
                    &colloc,
                    &config.rar,
                    active,
                    config.seed.wrapping_add(epoch as u64),
                )?;
                colloc = grown;
                events.push(CurriculumEvent::Resample {
                    epoch,
                    added: added.len(),
                    pool: colloc.len(),
                });
            }
            if let Some(window) = stability.as_mut() {
                let preds = model.forward(active - 1, &window.test_ts.clone(), &window.test_xs.clone())?;
                let decision = window.observe(preds.as_slice().unwrap())?;
                events.push(CurriculumEvent::StabilityCheck {
                    epoch,
                    s: decision.s,
                    stop: decision.stop,
                });
                if decision.stop {
                    status = RunStatus::StabilityStop { epoch };
                    events.push(CurriculumEvent::Terminated {
                        epoch,
                        reason: "stability".into(),
                    });
                    break 'epochs;
                }
            }
        }

        let grad = objective_gradient(
            &model,
            &dual.lambdas,
            data,
            &colloc,
            &flux,
            active,
            config.causal,
            config.kappa,
            config.convention,
        )?;
        if !grad.breakdown.total.is_finite() {
            status = RunStatus::Diverged { epoch };
            events.push(CurriculumEvent::Terminated {
                epoch,
                reason: "divergence".into(),
            });
            break 'epochs;
        }

        adam.step(&mut model, &grad, active, config.eta_theta);

        if config.primal_dual && epoch % dual.n_lambda == 0 {
            dual_update(&mut dual, &grad.breakdown.phys_losses, n_stacks - 1)?;
            events.push(CurriculumEvent::DualUpdate {
                epoch,
                lambdas: dual.lambdas.clone(),
            });
        }

        let mut grad_norms = None;
        let mut omegas = None;
        let mut terminated = false;
        if let Some(state) = causality.as_mut() {
            let mut g = Vec::with_capacity(active);
            for i in 0..active {
                let gamma = model.schedule.viscosity(i)?;
                let (sq, _) = stage_local_grad_sq(
                    &model,
                    &grad.jet_pass,
                    i,
                    gamma,
                    &flux,
                    &colloc,
                    config.kappa,
                    config.convention,
                )?;
                g.push(sq.sqrt());
            }
            let omega = causal_stack_weights(&g, state.epsilon, n_stacks - 1)?;
            let before = state.d_k;
            terminated = causality_step(state, &omega)?;
            if state.d_k > before {
                events.push(CurriculumEvent::Unlock {
                    epoch,
                    d_k: state.d_k,
                    epsilon: state.epsilon,
                });
            }
            grad_norms = Some(g);
            omegas = Some(omega);
        }

        if epoch == first_epoch || epoch == last_epoch || epoch % config.log_every == 0 || terminated
        {
            history.push(LossReport {
                epoch,
                objective: grad.breakdown.total,
                data_losses: grad.breakdown.data_losses.clone(),
                phys_losses: grad.breakdown.phys_losses.clone(),
                lambdas: dual.lambdas.clone(),
                d_k: active,
                w_min: grad.w_min,
                w_mean: grad.w_mean,
                grad_norms,
                omegas,
            });
            if config.debug_checksums {
                checksums.push((0..n_stacks).map(|i| stage_checksum(&model, i)).collect());
            }
        }

        if terminated {
            status = RunStatus::CausalityTermination { epoch };
            events.push(CurriculumEvent::Terminated {
                epoch,
                reason: "causality".into(),
            });
            break 'epochs;
        }
    }

    let final_stage = causality.as_ref().map_or(n_stacks, |c| c.d_k) - 1;
    let pred = predict_grid(&model, final_stage, truth)?;
    let metrics = Metrics {
        relative_l2: relative_l2(&pred, truth)?,
        mean_mse: pointwise_mse(&pred, truth)?.0,
    };

    Ok(RunRecord {
        config: config.clone(),
        seed: config.seed,
        history,
        events,
        model,
        metrics,
        wall_secs: start.elapsed().as_secs_f64(),
        status,
        checksums,
    })
}

// ---------------------------------------------------------------------------
// Scenario matrix
// ---------------------------------------------------------------------------

/// One cell of the 2×4 experiment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub causal: bool,
    pub adaptive: bool,
    pub primal_dual: bool,
}

impl Scenario {
    /// Table-order name: Baseline, Adaptive, PD, Adaptive+PD (× causal).
    pub fn name(&self) -> String {
        let curr = match (self.adaptive, self.primal_dual) {
            (false, false) => "baseline",
            (true, false) => "adaptive",
            (false, true) => "pd",
            (true, true) => "adaptive-pd",
        };
        let mode = if self.causal { "causal" } else { "non-causal" };
        format!("{mode}/{curr}")
    }
}

/// The full matrix in reporting order: non-causal row first, then causal,
/// each over {baseline, adaptive, PD, adaptive+PD}.
pub fn scenario_matrix() -> Vec<Scenario> {
    let mut out = Vec::with_capacity(8);
    for causal in [false, true] {
        for (adaptive, primal_dual) in [(false, false), (true, false), (false, true), (true, true)]
        {
            out.push(Scenario {
                causal,
                adaptive,
                primal_dual,
            });
        }
    }
    out
}

/// Outcome of one matrix cell × seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRun {
    pub scenario: Scenario,
    pub seed: u64,
    pub record: Option<RunRecord>,
    pub error: Option<String>,
}

/// Per-scenario aggregate of the mean pointwise MSE across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: Scenario,
    pub n_ok: usize,
    pub median_mse: Option<f64>,
    pub q1_mse: Option<f64>,
    pub q3_mse: Option<f64>,
    pub median_rel_l2: Option<f64>,
}

/// Median and quartiles by sorting; quartile index convention is the
/// midpoint-interpolated empirical quantile.
pub fn median_quartiles(values: &[f64]) -> Option<(f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| {
        let idx = p * (v.len() - 1) as f64;
        let lo = idx.floor() as usize;
        let hi = idx.ceil() as usize;
        let frac = idx - lo as f64;
        v[lo] * (1.0 - frac) + v[hi] * frac
    };
    Some((q(0.25), q(0.5), q(0.75)))
}

/// Specialize a base configuration to one matrix cell and seed index.
///
/// Causal cells require per-slice structure, so a uniform collocation budget
/// is mirrored onto a square-ish grid of the same size.
pub fn scenario_config(base: &TrainingConfig, scenario: Scenario, seed_index: usize) -> TrainingConfig {
    let mut cfg = base.clone();
    cfg.causal = scenario.causal;
    cfg.adaptive = scenario.adaptive;
    cfg.primal_dual = scenario.primal_dual;
    cfg.seed = base.seed.wrapping_add(seed_index as u64);
    if cfg.causal && !matches!(cfg.colloc, CollocSpec::Grid { .. }) {
        let n = match cfg.colloc {
            CollocSpec::Uniform { n } => n,
            CollocSpec::Grid { n_t, n_x } => n_t * n_x,
        };
        let side = (n as f64).sqrt().ceil() as usize;
        cfg.colloc = CollocSpec::Grid { n_t: side, n_x: side };
    }
    cfg
}

/// Execute the scenario matrix for `n_seeds` seeds each; failures are
/// recorded and the sweep continues.
pub fn run_scenarios(
    base: &TrainingConfig,
    data: &MeasurementSet,
    truth: &GridSolution,
    n_seeds: usize,
    scenarios: &[Scenario],
) -> Result<(Vec<ScenarioRun>, Vec<ScenarioSummary>)> {
    if n_seeds == 0 {
        return Err(Error::Config("n_seeds must be >= 1".into()));
    }
    let mut runs = Vec::with_capacity(scenarios.len() * n_seeds);
    for &scenario in scenarios {
        for s in 0..n_seeds {
            let cfg = scenario_config(base, scenario, s);
            match train(&cfg, data, truth) {
                Ok(record) => runs.push(ScenarioRun {
                    scenario,
                    seed: cfg.seed,
                    record: Some(record),
                    error: None,
                }),
                Err(e) => runs.push(ScenarioRun {
                    scenario,
                    seed: cfg.seed,
                    record: None,
                    error: Some(e.to_string()),
                }),
            }
        }
    }

    let summaries = scenarios
        .iter()
        .map(|&scenario| {
            let mses: Vec<f64> = runs
                .iter()
                .filter(|r| r.scenario == scenario)
                .filter_map(|r| r.record.as_ref())
                .map(|rec| rec.metrics.mean_mse)
                .collect();
            let l2s: Vec<f64> = runs
                .iter()
                .filter(|r| r.scenario == scenario)
                .filter_map(|r| r.record.as_ref())
                .map(|rec| rec.metrics.relative_l2)
                .collect();
            let quart = median_quartiles(&mses);
            ScenarioSummary {
                scenario,
                n_ok: mses.len(),
                median_mse: quart.map(|(_, m, _)| m),
                q1_mse: quart.map(|(q1, _, _)| q1),
                q3_mse: quart.map(|(_, _, q3)| q3),
                median_rel_l2: median_quartiles(&l2s).map(|(_, m, _)| m),
            }
        })
        .collect();
    Ok((runs, summaries))
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

fn join_vec(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn split_vec(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|p| p.parse::<f64>().map_err(|e| Error::Shape(e.to_string())))
        .collect()
}

/// Sidecar for the scalar fields that don't live in losses.csv.
#[derive(Serialize, Deserialize)]
struct RunMeta {
    config: TrainingConfig,
    seed: u64,
    wall_secs: f64,
    status: RunStatus,
    checksums: Vec<Vec<u64>>,
}

impl RunRecord {
    /// Persist as a directory: config.json, events.jsonl, losses.csv,
    /// checkpoint.json, metrics.json, prediction.csv.
    pub fn save(&self, dir: &Path, truth: Option<&GridSolution>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = RunMeta {
            config: self.config.clone(),
            seed: self.seed,
            wall_secs: self.wall_secs,
            status: self.status.clone(),
            checksums: self.checksums.clone(),
        };
        serde_json::to_writer_pretty(std::fs::File::create(dir.join("config.json"))?, &meta)?;
        serde_json::to_writer_pretty(
            std::fs::File::create(dir.join("metrics.json"))?,
            &self.metrics,
        )?;
        self.model.save_json(&dir.join("checkpoint.json"))?;

        let mut events = std::io::BufWriter::new(std::fs::File::create(dir.join("events.jsonl"))?);
        use std::io::Write;
        for e in &self.events {
            serde_json::to_writer(&mut events, e)?;
            writeln!(events)?;
        }
        events.flush()?;

        let mut w = csv::Writer::from_path(dir.join("losses.csv"))?;
        w.write_record([
            "epoch",
            "objective",
            "d_k",
            "data_losses",
            "phys_losses",
            "lambdas",
            "w_min",
            "w_mean",
            "grad_norms",
            "omegas",
        ])?;
        for row in &self.history {
            w.write_record(&[
                row.epoch.to_string(),
                format!("{}", row.objective),
                row.d_k.to_string(),
                join_vec(&row.data_losses),
                join_vec(&row.phys_losses),
                join_vec(&row.lambdas),
                row.w_min.map_or(String::new(), |v| format!("{v}")),
                row.w_mean.map_or(String::new(), |v| format!("{v}")),
                row.grad_norms.as_deref().map_or(String::new(), join_vec),
                row.omegas.as_deref().map_or(String::new(), join_vec),
            ])?;
        }
        w.flush()?;

        if let Some(truth) = truth {
            let final_stage = self.model.n_stacks() - 1;
            let pred = predict_grid(&self.model, final_stage, truth)?;
            let grid = GridSolution {
                density: pred,
                t_axis: truth.t_axis.clone(),
                x_axis: truth.x_axis.clone(),
            };
            crate::lwr::write_grid_csv(&grid, &dir.join("prediction.csv"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: RunMeta =
            serde_json::from_reader(std::fs::File::open(dir.join("config.json"))?)?;
        let metrics: Metrics =
            serde_json::from_reader(std::fs::File::open(dir.join("metrics.json"))?)?;
        let model = StackedModel::load_json(&dir.join("checkpoint.json"))?;

        let events_text = std::fs::read_to_string(dir.join("events.jsonl"))?;
        let events = events_text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect::<Result<Vec<CurriculumEvent>>>()?;

        let mut history = Vec::new();
        let mut r = csv::Reader::from_path(dir.join("losses.csv"))?;
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 10 {
                return Err(Error::Shape(format!(
                    "losses.csv row has {} fields, expected 10",
                    rec.len()
                )));
            }
            let parse_opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>()
                        .map(Some)
                        .map_err(|e| Error::Shape(e.to_string()))
                }
            };
            let parse_opt_vec = |s: &str| -> Result<Option<Vec<f64>>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    split_vec(s).map(Some)
                }
            };
            history.push(LossReport {
                epoch: rec[0].parse().map_err(|e: std::num::ParseIntError| {
                    Error::Shape(e.to_string())
                })?,
                objective: rec[1]
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| Error::Shape(e.to_string()))?,
                d_k: rec[2].parse().map_err(|e: std::num::ParseIntError| {
                    Error::Shape(e.to_string())
                })?,
                data_losses: split_vec(&rec[3])?,
                phys_losses: split_vec(&rec[4])?,
                lambdas: split_vec(&rec[5])?,
                w_min: parse_opt(&rec[6])?,
                w_mean: parse_opt(&rec[7])?,
                grad_norms: parse_opt_vec(&rec[8])?,
                omegas: parse_opt_vec(&rec[9])?,
            });
        }

        Ok(RunRecord {
            config: meta.config,
            seed: meta.seed,
            history,
            events,
            model,
            metrics,
            wall_secs: meta.wall_secs,
            status: meta.status,
            checksums: meta.checksums,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lwr::{piecewise_constant_profile, sample_measurements, simulate, Domain, DEFAULT_CFL};
    use approx::assert_relative_eq;

    fn tiny_dataset() -> (MeasurementSet, GridSolution) {
        let domain = Domain::new(0.5, 1.0, 60, 24).unwrap();
        let flux = FluxModel::new(1.0).unwrap();
        let u0 = piecewise_constant_profile(domain.n_x, 3, 11);
        let left = vec![u0[0]; domain.n_t + 1];
        let right = vec![u0[domain.n_x]; domain.n_t + 1];
        let truth = simulate(&u0, &left, &right, &domain, &flux, DEFAULT_CFL).unwrap();
        let data = sample_measurements(&truth, &[0.0, 1.0], true, 0.0, 5).unwrap();
        (data, truth)
    }

    fn tiny_config(seed: u64) -> TrainingConfig {
        let mut cfg = TrainingConfig::desk(seed);
        cfg.t_final = 0.5;
        cfg.n_epoch = 5;
        cfg.spec = StackSpec {
            baseline_layers: vec![6, 6],
            block_layers: vec![5],
            activation: crate::model::Activation::Tanh,
            n_blocks: 2,
        };
        cfg.colloc = CollocSpec::Uniform { n: 40 };
        cfg.log_every = 1;
        cfg
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (data, _) = tiny_dataset();
        let cfg = tiny_config(1);
        let model = cfg.build_model().unwrap();
        let flux = FluxModel::new(1.0).unwrap();
        let colloc = CollocationSet::grid(0.5, 1.0, 4, 5).unwrap();
        let lambdas = vec![0.7, 1.0, 1.3];
        let kappa = 5.0;
        let conv = WeightConvention::CumulativeExclusive;

        for &causal in &[false, true] {
            let g = objective_gradient(
                &model, &lambdas, &data, &colloc, &flux, 3, causal, kappa, conv,
            )
            .unwrap();
            // frozen-weight objective for the finite-difference probe
            let frozen_w: Vec<Vec<f64>> = (0..3)
                .map(|i| {
                    let gamma = model.schedule.viscosity(i).unwrap();
                    let per = crate::losses::per_slice_losses(&model, i, gamma, &flux, &colloc)
                        .unwrap();
                    temporal_weights(&per, kappa, conv).unwrap()
                })
                .collect();
            let obj = |m: &StackedModel| {
                let mut total = 0.0;
                for i in 0..3 {
                    let gamma = m.schedule.viscosity(i).unwrap();
                    let d = crate::losses::data_loss(m, i, &data).unwrap();
                    let p = if causal {
                        let per =
                            crate::losses::per_slice_losses(m, i, gamma, &flux, &colloc).unwrap();
                        per.iter()
                            .zip(&frozen_w[i])
                            .map(|(&l, &w)| w * l)
                            .sum::<f64>()
                            / per.len() as f64
                    } else {
                        crate::losses::physics_loss(m, i, gamma, &flux, &colloc).unwrap()
                    };
                    total += d + lambdas[i] * p;
                }
                total / 3.0 + m.alphas.iter().map(|a| a * a).sum::<f64>()
            };
            let h = 1e-6;
            // spot-check a handful of parameters in every stage
            for stage in 0..3 {
                let (rows, cols) = model.stages[stage].layers[0].w.dim();
                for &(r, c) in &[(0, 0), (rows - 1, cols - 1)] {
                    let mut mp = model.clone();
                    mp.stages[stage].layers[0].w[[r, c]] += h;
                    let mut mm = model.clone();
                    mm.stages[stage].layers[0].w[[r, c]] -= h;
                    let fd = (obj(&mp) - obj(&mm)) / (2.0 * h);
                    assert_relative_eq!(
                        g.grads[stage].layers[0].0[[r, c]],
                        fd,
                        max_relative = 1e-4,
                        epsilon = 1e-8
                    );
                }
                let mut mp = model.clone();
                mp.stages[stage].layers[0].b[0] += h;
                let mut mm = model.clone();
                mm.stages[stage].layers[0].b[0] -= h;
                let fd = (obj(&mp) - obj(&mm)) / (2.0 * h);
                assert_relative_eq!(
                    g.grads[stage].layers[0].1[0],
                    fd,
                    max_relative = 1e-4,
                    epsilon = 1e-8
                );
            }
            for j in 0..2 {
                let mut mp = model.clone();
                mp.alphas[j] += h;
                let mut mm = model.clone();
                mm.alphas[j] -= h;
                let fd = (obj(&mp) - obj(&mm)) / (2.0 * h);
                assert_relative_eq!(g.alpha_grads[j], fd, max_relative = 1e-4, epsilon = 1e-8);
            }
            // reported breakdown matches the standalone objective
            let standalone = crate::losses::total_objective(
                &model, &lambdas, &data, &colloc, &flux, 3, causal, kappa, conv,
            )
            .unwrap();
            assert_eq!(g.breakdown.total, standalone.total);
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (data, truth) = tiny_dataset();
        let mut cfg = tiny_config(2);
        cfg.n_epoch = 1;
        cfg.eta_theta = 0.0;
        let before = cfg.build_model().unwrap();
        let record = train(&cfg, &data, &truth).unwrap();
        assert_eq!(record.model, before);
        assert_eq!(record.history.len(), 1);
        assert_eq!(record.status, RunStatus::Completed);
    }

    #[test]
    fn training_is_deterministic() {
        let (data, truth) = tiny_dataset();
        let cfg = tiny_config(3);
        let a = train(&cfg, &data, &truth).unwrap();
        let b = train(&cfg, &data, &truth).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn training_reduces_objective() {
        let (data, truth) = tiny_dataset();
        let mut cfg = tiny_config(4);
        cfg.n_epoch = 150;
        let record = train(&cfg, &data, &truth).unwrap();
        let first = record.history.first().unwrap().objective;
        let last = record.history.last().unwrap().objective;
        assert!(last < first, "objective {first} -> {last}");
    }

    #[test]
    fn pd_lambdas_nondecreasing() {
        let (data, truth) = tiny_dataset();
        let mut cfg = tiny_config(5);
        cfg.primal_dual = true;
        cfg.n_lambda = 2;
        cfg.n_epoch = 20;
        let record = train(&cfg, &data, &truth).unwrap();
        let mut prev = vec![0.0; 3];
        for row in &record.history {
            for (a, b) in prev.iter().zip(&row.lambdas) {
                assert!(b >= a);
            }
            prev = row.lambdas.clone();
        }
        // λ actually moved
        assert!(record.history.last().unwrap().lambdas[0] > 0.0);
    }

    #[test]
    fn causal_run_freezes_locked_stacks() {
        let (data, truth) = tiny_dataset();
        let mut cfg = tiny_config(6);
        cfg.causal = true;
        cfg.colloc = CollocSpec::Grid { n_t: 6, n_x: 8 };
        cfg.theta_unlock = 0.5;
        cfg.tau = 3;
        cfg.n_epoch = 30;
        cfg.debug_checksums = true;
        let init = cfg.build_model().unwrap();
        let init_sums: Vec<u64> = (0..3).map(|i| stage_checksum(&init, i)).collect();
        let record = train(&cfg, &data, &truth).unwrap();
        let mut prev_dk = 0;
        for (row, sums) in record.history.iter().zip(&record.checksums) {
            assert!(row.d_k >= prev_dk, "frontier regressed");
            prev_dk = row.d_k;
            for i in row.d_k..3 {
                assert_eq!(sums[i], init_sums[i], "stack {i} moved while locked");
            }
            if let Some(om) = &row.omegas {
                for pair in om.windows(2) {
                    assert!(pair[1] <= pair[0]);
                }
                for &w in om {
                    assert!(w > 0.0 && w <= 1.0);
                }
            }
        }
    }

    #[test]
    fn adaptive_run_grows_collocation() {
        let (data, truth) = tiny_dataset();
        let mut cfg = tiny_config(7);
        cfg.adaptive = true;
        cfg.rar = RARConfig {
            m_new: 4,
            n_phy_candidates: 50,
            n_resample: 5,
        };
        cfg.n_epoch = 12;
        let record = train(&cfg, &data, &truth).unwrap();
        let resamples: Vec<_> = record
            .events
            .iter()
            .filter(|e| matches!(e, CurriculumEvent::Resample { .. }))
            .collect();
        assert_eq!(resamples.len(), 2); // epochs 6 and 11
    }

    #[test]
    fn stability_stop_triggers_on_frozen_model() {
        let (data, truth) = tiny_dataset();
        let mut cfg = tiny_config(8);
        cfg.eta_theta = 0.0; // predictions never change
        cfg.stability = Some(StabilityConfig {
            n_test: 20,
            delta: 1e-6,
        });
        cfg.rar.n_resample = 3;
        cfg.n_epoch = 50;
        let record = train(&cfg, &data, &truth).unwrap();
        assert!(matches!(record.status, RunStatus::StabilityStop { .. }));
        assert!(record.history.len() < 50);
    }

    #[test]
    fn metric_examples() {
        let truth = GridSolution {
            density: ndarray::array![[3.0, 4.0]],
            t_axis: vec![0.0],
            x_axis: vec![0.0, 1.0],
        };
        let perfect = truth.density.clone();
        assert_eq!(relative_l2(&perfect, &truth).unwrap(), 0.0);
        let zero = Array2::zeros((1, 2));
        assert_relative_eq!(relative_l2(&zero, &truth).unwrap(), 1.0);
        let partial = ndarray::array![[3.0, 0.0]];
        assert_relative_eq!(relative_l2(&partial, &truth).unwrap(), 0.8);

        let (mean, field) = pointwise_mse(&perfect, &truth).unwrap();
        assert_eq!(mean, 0.0);
        assert!(field.iter().all(|&v| v == 0.0));
        let shifted = &truth.density + 0.1;
        let (mean, field) = pointwise_mse(&shifted, &truth).unwrap();
        assert_relative_eq!(mean, 0.01, max_relative = 1e-12);
        for &v in field.iter() {
            assert_relative_eq!(v, 0.01, max_relative = 1e-12);
        }
        // mean MSE vs relative L2 identity
        let rel = relative_l2(&shifted, &truth).unwrap();
        let norm_sq: f64 = truth.density.iter().map(|u| u * u).sum();
        assert_relative_eq!(
            mean,
            rel * rel * norm_sq / truth.density.len() as f64,
            max_relative = 1e-12
        );

        let zero_truth = GridSolution {
            density: Array2::zeros((1, 2)),
            t_axis: vec![0.0],
            x_axis: vec![0.0, 1.0],
        };
        assert!(relative_l2(&zero, &zero_truth).is_err());
        let wrong = Array2::zeros((2, 2));
        assert!(relative_l2(&wrong, &truth).is_err());
        assert!(pointwise_mse(&wrong, &truth).is_err());
    }

    #[test]
    fn quartile_sort_oracle() {
        assert_eq!(median_quartiles(&[]), None);
        let (q1, m, q3) = median_quartiles(&[5.0, 1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!(m, 3.0);
        assert_eq!(q1, 2.0);
        assert_eq!(q3, 4.0);
        let (_, m, _) = median_quartiles(&[2.0, 1.0]).unwrap();
        assert_relative_eq!(m, 1.5);
    }

    #[test]
    fn scenario_matrix_layout() {
        let m = scenario_matrix();
        assert_eq!(m.len(), 8);
        assert_eq!(m[0].name(), "non-causal/baseline");
        assert_eq!(m[3].name(), "non-causal/adaptive-pd");
        assert_eq!(m[4].name(), "causal/baseline");
        assert!(m[..4].iter().all(|s| !s.causal));
        assert!(m[4..].iter().all(|s| s.causal));
    }

    #[test]
    fn sweep_produces_expected_run_count() {
        let (data, truth) = tiny_dataset();
        let mut cfg = tiny_config(9);
        cfg.n_epoch = 2;
        let two = &scenario_matrix()[..2];
        let (runs, summaries) = run_scenarios(&cfg, &data, &truth, 2, two).unwrap();
        assert_eq!(runs.len(), 4);
        assert_eq!(summaries.len(), 2);
        for s in &summaries {
            assert_eq!(s.n_ok, 2);
            assert!(s.median_mse.is_some());
        }
    }

    #[test]
    fn resume_continues_epoch_numbering() {
        let (data, truth) = tiny_dataset();
        let cfg = tiny_config(11); // n_epoch = 5, log_every = 1
        let first = train(&cfg, &data, &truth).unwrap();
        let cont = resume(&first, 4, &data, &truth).unwrap();
        let epochs: Vec<usize> = cont.history.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, (1..=9).collect::<Vec<_>>());
    }

    #[test]
    fn run_record_round_trip() {
        let (data, truth) = tiny_dataset();
        let mut cfg = tiny_config(10);
        cfg.causal = true;
        cfg.colloc = CollocSpec::Grid { n_t: 5, n_x: 6 };
        cfg.primal_dual = true;
        cfg.n_lambda = 2;
        cfg.n_epoch = 6;
        cfg.debug_checksums = true;
        let record = train(&cfg, &data, &truth).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        record.save(tmp.path(), Some(&truth)).unwrap();
        let back = RunRecord::load(tmp.path()).unwrap();
        assert_eq!(record, back);
        assert!(tmp.path().join("prediction.csv").exists());
    }
}
