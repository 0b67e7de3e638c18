//! The stacked residual architecture with a vanishing viscosity schedule.
//!
//! Stage 0 is a plain fully connected network û⁰(t, x). Each residual block
//! i >= 1 consumes (t, x, û^{i-1}) and refines the prediction as
//! û^i = û^{i-1} + |α_i| N([t, x, û^{i-1}]; θ_i). Viscosities assigned to the
//! per-stage physics losses decay to zero over the stack.

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::net::{
    stage_forward_jet, stage_forward_value, JetBatch, StageParams, StageTape, ValueTape,
};
use crate::{Error, Result};

/// Architecture description: hidden widths of the baseline net and of each
/// residual block, plus the number of blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackSpec {
    pub baseline_layers: Vec<usize>,
    pub block_layers: Vec<usize>,
    pub activation: Activation,
    pub n_blocks: usize,
}

impl StackSpec {
    /// Network sizes used by the reference experiments: a 3x40 baseline and
    /// three residual blocks of 4x50.
    pub fn reference() -> Self {
        Self {
            baseline_layers: vec![40, 40, 40],
            block_layers: vec![50, 50, 50, 50],
            activation: Activation::Tanh,
            n_blocks: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.baseline_layers.is_empty() || self.baseline_layers.iter().any(|&w| w == 0) {
            return Err(Error::Config("baseline widths must all be >= 1".into()));
        }
        if self.n_blocks > 0
            && (self.block_layers.is_empty() || self.block_layers.iter().any(|&w| w == 0))
        {
            return Err(Error::Config("block widths must all be >= 1".into()));
        }
        Ok(())
    }
}

/// Smooth elementwise nonlinearity. The residual needs ∂xx, so anything
/// here must be at least C².
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
}

/// γ_i = γ_init (1 - (i/n)^p): strictly decreasing, γ_0 = γ_init, γ_n = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViscositySchedule {
    pub gamma_init: f64,
    pub p: f64,
    pub n: usize,
}

impl ViscositySchedule {
    pub fn new(gamma_init: f64, p: f64, n: usize) -> Result<Self> {
        if !(gamma_init > 0.0) {
            return Err(Error::Config(format!(
                "gamma_init must be positive, got {gamma_init}"
            )));
        }
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Config(format!("p must lie in (0, 1], got {p}")));
        }
        if n == 0 {
            return Err(Error::Config("schedule needs n >= 1".into()));
        }
        Ok(Self { gamma_init, p, n })
    }

    /// Viscosity coefficient for stage i, 0 <= i <= n.
    pub fn viscosity(&self, i: usize) -> Result<f64> {
        if i > self.n {
            return Err(Error::Domain(format!(
                "stage index {i} out of range 0..={}",
                self.n
            )));
        }
        if i == self.n {
            // exact zero at the final stage
            return Ok(0.0);
        }
        let frac = i as f64 / self.n as f64;
        Ok(self.gamma_init * (1.0 - frac.powf(self.p)))
    }

    pub fn gammas(&self) -> Vec<f64> {
        (0..=self.n).map(|i| self.viscosity(i).unwrap()).collect()
    }
}

/// Affine map of Λ onto [-1, 1]² applied before the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputMap {
    pub t_final: f64,
    pub length: f64,
}

/// The full stacked model: per-stage parameters, residual gains, schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedModel {
    pub spec: StackSpec,
    pub(crate) stages: Vec<StageParams>,
    pub alphas: Vec<f64>,
    pub schedule: ViscositySchedule,
    pub input_map: InputMap,
    pub seed: u64,
}

/// Initial value for the residual gains: keeps early corrections small.
pub const ALPHA_INIT: f64 = 0.1;

/// Draw a fresh model with Glorot-uniform weights, deterministic per seed.
pub fn init_model(
    spec: &StackSpec,
    schedule: ViscositySchedule,
    input_map: InputMap,
    seed: u64,
) -> Result<StackedModel> {
    spec.validate()?;
    crate::blas::init();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stages = Vec::with_capacity(spec.n_blocks + 1);
    stages.push(StageParams::init(2, &spec.baseline_layers, &mut rng));
    for _ in 0..spec.n_blocks {
        stages.push(StageParams::init(3, &spec.block_layers, &mut rng));
    }
    let alphas = vec![ALPHA_INIT; spec.n_blocks];
    Ok(StackedModel {
        spec: spec.clone(),
        stages,
        alphas,
        schedule,
        input_map,
        seed,
    })
}

/// Output of a training-mode forward pass: per-stage output jets plus the
/// tapes needed for the reverse sweep.
pub(crate) struct ModelJetPass {
    /// û^{(i)} jets, one per evaluated stage.
    pub outputs: Vec<JetBatch>,
    /// Raw block outputs N(·; θ_i) before the |α_i| gain (index 0 unused).
    pub raw_blocks: Vec<Option<JetBatch>>,
    pub tapes: Vec<Option<StageTape>>,
}

pub(crate) struct ModelValuePass {
    pub outputs: Vec<Array2<f64>>,
    pub raw_blocks: Vec<Option<Array2<f64>>>,
    pub tapes: Vec<Option<ValueTape>>,
}

impl StackedModel {
    pub fn n_stacks(&self) -> usize {
        self.stages.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.spec.n_blocks
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(|s| s.param_count()).sum::<usize>() + self.alphas.len()
    }

    /// Seed jet for the normalized (t, x) input channels. Derivative seeds
    /// use the chain rule of the affine map, so every propagated derivative
    /// is taken w.r.t. the physical coordinates.
    fn seed_input(&self, ts: ArrayView1<f64>, xs: ArrayView1<f64>) -> JetBatch {
        let n = ts.len();
        let mut jet = JetBatch::zeros(n, 2);
        let st = 2.0 / self.input_map.t_final;
        let sx = 2.0 / self.input_map.length;
        {
            let (mut v, mut dt, mut dx, _) = jet.channels_mut();
            for i in 0..n {
                v[[i, 0]] = st * ts[i] - 1.0;
                v[[i, 1]] = sx * xs[i] - 1.0;
                dt[[i, 0]] = st;
                dx[[i, 1]] = sx;
            }
        }
        jet
    }

    /// Stack the (t, x, û_prev) jet for a residual block input.
    fn block_input(&self, base: &JetBatch, prev: &JetBatch) -> JetBatch {
        let n = base.batch();
        let mut jet = JetBatch::zeros(n, 3);
        {
            let (bv, bdt, bdx, bdxx) = base.channels();
            let (pv, pdt, pdx, pdxx) = prev.channels();
            let (mut v, mut dt, mut dx, mut dxx) = jet.channels_mut();
            for (dst, src, prev_col) in [
                (&mut v, &bv, &pv),
                (&mut dt, &bdt, &pdt),
                (&mut dx, &bdx, &pdx),
                (&mut dxx, &bdxx, &pdxx),
            ] {
                dst.slice_mut(ndarray::s![.., 0..2]).assign(src);
                dst.column_mut(2).assign(&prev_col.column(0));
            }
        }
        jet
    }

    /// Forward all stages up to `upto` with full jets.
    pub(crate) fn forward_jets(
        &self,
        ts: ArrayView1<f64>,
        xs: ArrayView1<f64>,
        upto: usize,
        record: bool,
    ) -> ModelJetPass {
        crate::blas::init();
        assert!(upto < self.n_stacks());
        let base = self.seed_input(ts, xs);
        let mut outputs = Vec::with_capacity(upto + 1);
        let mut raw_blocks = vec![None];
        let mut tapes = Vec::with_capacity(upto + 1);

        let (out0, tape0) = stage_forward_jet(&self.stages[0], base.clone(), record);
        outputs.push(out0);
        tapes.push(tape0);
        for i in 1..=upto {
            let input = self.block_input(&base, &outputs[i - 1]);
            let (raw, tape) = stage_forward_jet(&self.stages[i], input, record);
            let mut out = raw.scale(self.alphas[i - 1].abs());
            out.add_assign(&outputs[i - 1]);
            outputs.push(out);
            raw_blocks.push(Some(raw));
            tapes.push(tape);
        }
        ModelJetPass {
            outputs,
            raw_blocks,
            tapes,
        }
    }

    /// Value-only forward of all stages up to `upto`.
    pub(crate) fn forward_values(
        &self,
        ts: ArrayView1<f64>,
        xs: ArrayView1<f64>,
        upto: usize,
        record: bool,
    ) -> ModelValuePass {
        crate::blas::init();
        assert!(upto < self.n_stacks());
        let n = ts.len();
        let st = 2.0 / self.input_map.t_final;
        let sx = 2.0 / self.input_map.length;
        let mut base = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            base[[i, 0]] = st * ts[i] - 1.0;
            base[[i, 1]] = sx * xs[i] - 1.0;
        }
        let mut outputs = Vec::with_capacity(upto + 1);
        let mut raw_blocks = vec![None];
        let mut tapes = Vec::with_capacity(upto + 1);
        let (out0, tape0) = stage_forward_value(&self.stages[0], base.view(), record);
        outputs.push(out0);
        tapes.push(tape0);
        for i in 1..=upto {
            let mut input = Array2::<f64>::zeros((n, 3));
            input.slice_mut(ndarray::s![.., 0..2]).assign(&base);
            input.column_mut(2).assign(&outputs[i - 1].column(0));
            let (raw, tape) = stage_forward_value(&self.stages[i], input.view(), record);
            let out = &outputs[i - 1] + &(&raw * self.alphas[i - 1].abs());
            outputs.push(out);
            raw_blocks.push(Some(raw));
            tapes.push(tape);
        }
        ModelValuePass {
            outputs,
            raw_blocks,
            tapes,
        }
    }

    /// Prediction û^{(stage)} at a batch of points.
    pub fn forward(&self, stage: usize, ts: &[f64], xs: &[f64]) -> Result<Array1<f64>> {
        if stage >= self.n_stacks() {
            return Err(Error::Domain(format!(
                "stage {stage} out of range 0..={}",
                self.n_stacks() - 1
            )));
        }
        if ts.len() != xs.len() {
            return Err(Error::Shape("t and x batches differ in length".into()));
        }
        let pass = self.forward_values(
            ArrayView1::from(ts),
            ArrayView1::from(xs),
            stage,
            false,
        );
        Ok(pass.outputs[stage].column(0).to_owned())
    }

    /// Contribution of residual block i at a batch of points:
    /// |α_i| N([t, x, û^{i-1}]; θ_i).
    pub fn block_contribution(&self, block: usize, ts: &[f64], xs: &[f64]) -> Result<Array1<f64>> {
        if block == 0 || block >= self.n_stacks() {
            return Err(Error::Domain(format!(
                "block {block} out of range 1..={}",
                self.n_stacks() - 1
            )));
        }
        let pass = self.forward_values(
            ArrayView1::from(ts),
            ArrayView1::from(xs),
            block,
            false,
        );
        let raw = pass.raw_blocks[block].as_ref().expect("block output");
        Ok(raw.column(0).mapv(|v| v * self.alphas[block - 1].abs()))
    }

    /// Serialize to a single JSON container (spec, parameters, gains,
    /// schedule, creation seed).
    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn toy_spec() -> StackSpec {
        StackSpec {
            baseline_layers: vec![6, 6],
            block_layers: vec![5, 5],
            activation: Activation::Tanh,
            n_blocks: 2,
        }
    }

    fn toy_model(seed: u64) -> StackedModel {
        init_model(
            &toy_spec(),
            ViscositySchedule::new(0.1, 0.5, 2).unwrap(),
            InputMap {
                t_final: 1.0,
                length: 1.0,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let s = ViscositySchedule::new(0.1, 0.5, 3).unwrap();
        assert_eq!(s.viscosity(0).unwrap(), 0.1);
        assert_eq!(s.viscosity(3).unwrap(), 0.0);
        assert_relative_eq!(
            s.viscosity(1).unwrap(),
            0.1 * (1.0 - (1.0f64 / 3.0).sqrt()),
            max_relative = 1e-12
        );
        assert!(s.viscosity(4).is_err());
    }

    #[test]
    fn schedule_strictly_decreasing() {
        for p in [0.25, 0.5, 1.0] {
            let s = ViscositySchedule::new(0.1, p, 5).unwrap();
            let g = s.gammas();
            for w in g.windows(2) {
                assert!(w[1] < w[0], "p={p}: {w:?}");
            }
        }
    }

    #[test]
    fn init_deterministic() {
        assert_eq!(toy_model(5), toy_model(5));
        assert_ne!(toy_model(5), toy_model(6));
    }

    #[test]
    fn baseline_only_model() {
        let spec = StackSpec {
            baseline_layers: vec![4],
            block_layers: vec![],
            activation: Activation::Tanh,
            n_blocks: 0,
        };
        let m = init_model(
            &spec,
            ViscositySchedule::new(0.1, 0.5, 1).unwrap(),
            InputMap {
                t_final: 1.0,
                length: 1.0,
            },
            0,
        )
        .unwrap();
        assert_eq!(m.n_stacks(), 1);
        assert!(m.alphas.is_empty());
        assert!(m.forward(0, &[0.5], &[0.5]).is_ok());
    }

    #[test]
    fn reference_parameter_count() {
        let m = init_model(
            &StackSpec::reference(),
            ViscositySchedule::new(0.1, 0.5, 3).unwrap(),
            InputMap {
                t_final: 1.0,
                length: 1.0,
            },
            0,
        )
        .unwrap();
        // baseline 2-40-40-40-1, blocks 3-50-50-50-50-1
        let baseline = (2 * 40 + 40) + 2 * (40 * 40 + 40) + (40 + 1);
        let block = (3 * 50 + 50) + 3 * (50 * 50 + 50) + (50 + 1);
        assert_eq!(m.param_count(), baseline + 3 * block + 3);
    }

    #[test]
    fn zero_alphas_collapse_to_baseline() {
        let mut m = toy_model(1);
        m.alphas = vec![0.0, 0.0];
        let ts = [0.2, 0.7];
        let xs = [0.3, 0.9];
        let u0 = m.forward(0, &ts, &xs).unwrap();
        let u2 = m.forward(2, &ts, &xs).unwrap();
        for i in 0..2 {
            assert_eq!(u0[i], u2[i]);
        }
    }

    #[test]
    fn single_vs_batched_consistency() {
        let m = toy_model(2);
        let ts = [0.1, 0.5, 0.9];
        let xs = [0.8, 0.2, 0.4];
        let batched = m.forward(2, &ts, &xs).unwrap();
        for i in 0..3 {
            let single = m.forward(2, &[ts[i]], &[xs[i]]).unwrap();
            assert_eq!(single[0], batched[i]);
        }
    }

    #[test]
    fn hand_computed_forward() {
        // 1-hidden-unit toy: baseline 2-1-1, one block 3-1-1 with known
        // weights; compare against a pencil-and-paper evaluation.
        let spec = StackSpec {
            baseline_layers: vec![1],
            block_layers: vec![1],
            activation: Activation::Tanh,
            n_blocks: 1,
        };
        let mut m = init_model(
            &spec,
            ViscositySchedule::new(0.1, 0.5, 1).unwrap(),
            InputMap {
                t_final: 2.0,
                length: 2.0,
            },
            0,
        )
        .unwrap();
        // baseline: h = tanh(0.3 tn + 0.5 xn + 0.1); u0 = 2h - 0.2
        m.stages[0].layers[0].w = ndarray::array![[0.3], [0.5]];
        m.stages[0].layers[0].b = ndarray::array![0.1];
        m.stages[0].layers[1].w = ndarray::array![[2.0]];
        m.stages[0].layers[1].b = ndarray::array![-0.2];
        // block: h = tanh(0.2 tn - 0.4 xn + 0.6 u0 + 0.05); raw = 1.5h + 0.3
        m.stages[1].layers[0].w = ndarray::array![[0.2], [-0.4], [0.6]];
        m.stages[1].layers[0].b = ndarray::array![0.05];
        m.stages[1].layers[1].w = ndarray::array![[1.5]];
        m.stages[1].layers[1].b = ndarray::array![0.3];
        m.alphas = vec![-0.25]; // |α| applies at evaluation

        let (t, x) = (0.8, 1.4);
        let (tn, xn) = (t - 1.0, x - 1.0); // map to [-1, 1] with T = L = 2
        let u0 = 2.0 * (0.3 * tn + 0.5 * xn + 0.1f64).tanh() - 0.2;
        let raw = 1.5 * (0.2 * tn - 0.4 * xn + 0.6 * u0 + 0.05f64).tanh() + 0.3;
        let expect = u0 + 0.25 * raw;
        let got = m.forward(1, &[t], &[x]).unwrap();
        assert_relative_eq!(got[0], expect, max_relative = 1e-14);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = toy_model(3);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("model.json");
        m.save_json(&path).unwrap();
        let back = StackedModel::load_json(&path).unwrap();
        assert_eq!(m, back);
    }

    proptest! {
        #[test]
        fn gain_sensitivity(stage in 0usize..3, jb in 0usize..2) {
            // perturbing α_j changes û^{(i)} only for i >= j
            let mut m = toy_model(4);
            let base = m.forward(stage, &[0.4], &[0.6]).unwrap()[0];
            m.alphas[jb] += 0.05;
            let after = m.forward(stage, &[0.4], &[0.6]).unwrap()[0];
            if stage >= jb + 1 {
                prop_assert!((after - base).abs() > 0.0);
            } else {
                prop_assert_eq!(after, base);
            }
        }

        #[test]
        fn forward_deterministic(t in 0.0f64..1.0, x in 0.0f64..1.0) {
            let m = toy_model(8);
            let a = m.forward(2, &[t], &[x]).unwrap();
            let b = m.forward(2, &[t], &[x]).unwrap();
            prop_assert_eq!(a[0], b[0]);
        }
    }
}
