//! Curriculum controllers: stack-wise primal–dual ascent, causality
//! gating/unlocking, residual-based adaptive refinement (RAR), and the
//! prediction-stability stopping rule.
//!
//! Each controller is a small sequential state machine driven by the training
//! loop once per epoch (or once per resampling checkpoint). They never touch
//! network parameters directly; they only produce weights, activation
//! frontiers, extra collocation points, and stop decisions.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::CollocationSet;
use crate::lwr::FluxModel;
use crate::model::StackedModel;
use crate::{Error, Result};

/// Dual variables λ_i weighting each stack's physics loss, updated by
/// projected gradient ascent on the averaged Lagrangian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub lambdas: Vec<f64>,
    pub eta_lambda: f64,
    pub n_lambda: usize,
}

impl DualState {
    /// Fresh dual state with λ ≡ 0 for `n + 1` stacks.
    pub fn new(n: usize, eta_lambda: f64, n_lambda: usize) -> Result<Self> {
        if !(eta_lambda > 0.0) || !eta_lambda.is_finite() {
            return Err(Error::Config(format!(
                "dual step size must be positive, got {eta_lambda}"
            )));
        }
        if n_lambda == 0 {
            return Err(Error::Config("dual update period must be >= 1".into()));
        }
        Ok(Self {
            lambdas: vec![0.0; n + 1],
            eta_lambda,
            n_lambda,
        })
    }

    /// Fixed unit weights for the non-PD baseline; never updated.
    pub fn fixed_unit(n: usize) -> Self {
        Self {
            lambdas: vec![1.0; n + 1],
            eta_lambda: 0.1,
            n_lambda: usize::MAX,
        }
    }
}

/// One dual ascent step: λ_i ← max(0, λ_i + η_λ 𝓛_phy^{(i)} / (n + 1)).
///
/// `physics_losses` covers the currently active stacks only (a prefix of the
/// λ vector); inactive stacks keep their multipliers untouched.
pub fn dual_update(state: &mut DualState, physics_losses: &[f64], n: usize) -> Result<()> {
    if state.lambdas.len() != n + 1 || physics_losses.len() > n + 1 {
        return Err(Error::Shape(format!(
            "dual update: {} multipliers, {} losses, n = {n}",
            state.lambdas.len(),
            physics_losses.len()
        )));
    }
    for (i, &l) in physics_losses.iter().enumerate() {
        if l < 0.0 || !l.is_finite() {
            return Err(Error::Domain(format!(
                "physics loss must be finite and nonnegative, got {l}"
            )));
        }
        state.lambdas[i] = (state.lambdas[i] + state.eta_lambda * l / (n + 1) as f64).max(0.0);
    }
    Ok(())
}

/// Causality frontier: how many stacks are active and when to unlock the next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalityState {
    /// Number of active stacks (1 = baseline only).
    pub d_k: usize,
    pub epsilon: f64,
    pub anneal_factor: f64,
    pub theta_unlock: f64,
    pub tau: usize,
    pub streak: usize,
    /// Total stack count n + 1; the frontier never exceeds it.
    pub n_stacks: usize,
}

impl CausalityState {
    pub fn new(
        n: usize,
        epsilon: f64,
        anneal_factor: f64,
        theta_unlock: f64,
        tau: usize,
    ) -> Result<Self> {
        if !(epsilon > 0.0) || !(anneal_factor > 0.0) {
            return Err(Error::Config(
                "epsilon and anneal factor must be positive".into(),
            ));
        }
        if !(theta_unlock > 0.0 && theta_unlock < 1.0) {
            return Err(Error::Config(format!(
                "unlocking threshold must lie in (0, 1), got {theta_unlock}"
            )));
        }
        if tau == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        Ok(Self {
            d_k: 1,
            epsilon,
            anneal_factor,
            theta_unlock,
            tau,
            streak: 0,
            n_stacks: n + 1,
        })
    }
}

/// Advance the causality controller by one epoch.
///
/// The deepest active stack's causal weight is compared against ϑ; after τ
/// consecutive passes the next stack unlocks (and ε is annealed), or — if the
/// final stack already satisfied the criterion — training terminates.
/// Returns `true` on termination.
pub fn causality_step(state: &mut CausalityState, omegas: &[f64]) -> Result<bool> {
    if omegas.len() != state.d_k {
        return Err(Error::Shape(format!(
            "expected {} causal weights, got {}",
            state.d_k,
            omegas.len()
        )));
    }
    let deepest = omegas[state.d_k - 1];
    if deepest >= state.theta_unlock {
        state.streak += 1;
    } else {
        state.streak = 0;
    }
    if state.streak >= state.tau {
        if state.d_k < state.n_stacks {
            state.d_k += 1;
            state.streak = 0;
            state.epsilon *= state.anneal_factor;
        } else {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Residual-based adaptive refinement configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RARConfig {
    /// Points appended per resample.
    pub m_new: usize,
    /// Uniform candidate pool size.
    pub n_phy_candidates: usize,
    /// Resampling period in epochs.
    pub n_resample: usize,
}

impl RARConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_phy_candidates < self.m_new {
            return Err(Error::Config(format!(
                "candidate pool ({}) smaller than m_new ({})",
                self.n_phy_candidates, self.m_new
            )));
        }
        if self.n_resample == 0 {
            return Err(Error::Config("resampling period must be >= 1".into()));
        }
        Ok(())
    }
}

/// Split `m_new` into per-block quotas by floor division over `n_blocks`
/// blocks, handing the remainder to the lowest indices.
pub fn rar_quotas(m_new: usize, n_blocks: usize) -> Vec<usize> {
    let base = m_new / n_blocks;
    let rem = m_new % n_blocks;
    (0..n_blocks)
        .map(|i| base + usize::from(i < rem))
        .collect()
}

/// Quotas when only the first `active` of `n_blocks` stacks participate: the
/// full split is computed first, then inactive blocks' shares are handed back
/// to the active ones one point at a time, cycling in index order.
pub fn rar_quotas_active(m_new: usize, n_blocks: usize, active: usize) -> Vec<usize> {
    assert!(active >= 1 && active <= n_blocks);
    let full = rar_quotas(m_new, n_blocks);
    let mut q: Vec<usize> = full[..active].to_vec();
    let spare: usize = full[active..].iter().sum();
    for k in 0..spare {
        q[k % active] += 1;
    }
    q
}

/// Top-q_i selection: for each block, the indices of the `quotas[i]` largest
/// entries of `abs_residuals[i]` (ties broken by lower index), unioned over
/// blocks and returned in ascending index order.
pub fn select_top_indices(abs_residuals: &[Vec<f64>], quotas: &[usize]) -> Vec<usize> {
    let mut union = BTreeSet::new();
    for (res, &q) in abs_residuals.iter().zip(quotas) {
        let mut order: Vec<usize> = (0..res.len()).collect();
        order.sort_by(|&a, &b| {
            res[b]
                .partial_cmp(&res[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        union.extend(order.into_iter().take(q));
    }
    union.into_iter().collect()
}

/// One RAR pass: draw a uniform candidate pool in Λ, score |r_{γ_i}| for each
/// active block, and append the union of the per-block top-q_i candidates.
///
/// Duplicates across blocks are appended once, so the growth is at most
/// `m_new`. Returns the enlarged set and the appended points.
pub fn rar_resample(
    model: &StackedModel,
    flux: &FluxModel,
    colloc: &CollocationSet,
    config: &RARConfig,
    active: usize,
    seed: u64,
) -> Result<(CollocationSet, Vec<(f64, f64)>)> {
    config.validate()?;
    if config.m_new == 0 {
        return Ok((colloc.clone(), Vec::new()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_final = model.input_map.t_final;
    let length = model.input_map.length;
    let ts: Vec<f64> = (0..config.n_phy_candidates)
        .map(|_| rng.random_range(0.0..t_final))
        .collect();
    let xs: Vec<f64> = (0..config.n_phy_candidates)
        .map(|_| rng.random_range(0.0..length))
        .collect();

    let mut abs_res = Vec::with_capacity(active);
    for stage in 0..active {
        let gamma = model.schedule.viscosity(stage)?;
        let r = crate::losses::pde_residual(model, stage, gamma, flux, &ts, &xs)?;
        abs_res.push(r.iter().map(|v| v.abs()).collect());
    }
    let quotas = rar_quotas_active(config.m_new, model.spec.n_blocks + 1, active);
    let picked = select_top_indices(&abs_res, &quotas);
    let points: Vec<(f64, f64)> = picked.into_iter().map(|i| (ts[i], xs[i])).collect();
    let mut out = colloc.clone();
    out.append(&points);
    Ok((out, points))
}

/// Prediction-stability stopping rule over a held-out test set.
///
/// At each resampling checkpoint the caller records the model's predictions
/// on 𝒟_test; e_k is the mean squared change since the previous checkpoint
/// and S(k) averages e over the trailing window. Training stops when
/// S(k) < δ (strictly).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityWindow {
    pub test_ts: Vec<f64>,
    pub test_xs: Vec<f64>,
    pub delta: f64,
    pub window_len: usize,
    snapshot: Option<Vec<f64>>,
    e_history: Vec<f64>,
}

/// Outcome of one stability check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityDecision {
    pub stop: bool,
    /// Running mean S(k); `None` until enough history accumulates.
    pub s: Option<f64>,
}

impl StabilityWindow {
    /// Uniform 𝒟_test of `n_test` points in [0, T] × [0, L].
    pub fn uniform(n_test: usize, t_final: f64, length: f64, delta: f64, seed: u64) -> Result<Self> {
        if n_test == 0 {
            return Err(Error::Empty("stability test set".into()));
        }
        if delta < 0.0 {
            return Err(Error::Config(format!(
                "stability threshold must be nonnegative, got {delta}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let test_ts = (0..n_test).map(|_| rng.random_range(0.0..t_final)).collect();
        let test_xs = (0..n_test).map(|_| rng.random_range(0.0..length)).collect();
        Ok(Self {
            test_ts,
            test_xs,
            delta,
            window_len: 2,
            snapshot: None,
            e_history: Vec::new(),
        })
    }

    /// Record a checkpoint's predictions and decide whether to stop.
    pub fn observe(&mut self, predictions: &[f64]) -> Result<StabilityDecision> {
        if predictions.len() != self.test_ts.len() {
            return Err(Error::Shape(format!(
                "expected {} test predictions, got {}",
                self.test_ts.len(),
                predictions.len()
            )));
        }
        let decision = match &self.snapshot {
            None => StabilityDecision { stop: false, s: None },
            Some(prev) => {
                let e = prev
                    .iter()
                    .zip(predictions)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / predictions.len() as f64;
                self.e_history.push(e);
                let tail = &self.e_history[self.e_history.len().saturating_sub(self.window_len)..];
                let s = tail.iter().sum::<f64>() / tail.len() as f64;
                StabilityDecision {
                    stop: s < self.delta,
                    s: Some(s),
                }
            }
        };
        self.snapshot = Some(predictions.to_vec());
        Ok(decision)
    }
}

/// Controller events appended to the run's JSON-lines log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum CurriculumEvent {
    DualUpdate { epoch: usize, lambdas: Vec<f64> },
    Unlock { epoch: usize, d_k: usize, epsilon: f64 },
    Resample { epoch: usize, added: usize, pool: usize },
    StabilityCheck { epoch: usize, s: Option<f64>, stop: bool },
    Terminated { epoch: usize, reason: String },
}
