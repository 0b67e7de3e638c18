//! Batched feedforward engine with nested derivative propagation.
//!
//! Every neuron carries a 2-jet in the spatiotemporal inputs: the value v
//! together with ∂t, ∂x and ∂xx. Propagating the jet forward yields the
//! quantities needed by the viscous PDE residual in a single pass; a
//! hand-written reverse sweep over the recorded tape produces exact parameter
//! gradients of any scalar loss built from the jet components.
//!
//! Layout convention: batches are row-major `[batch, width]`, weights are
//! `[in, out]` so a layer is one GEMM per jet component.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use std::mem::MaybeUninit;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A batch of 2-jets: value and derivatives w.r.t. the physical (t, x).
///
/// The four channels are packed into one `(4·batch, width)` row-major array
/// (rows `[0, b)` value, `[b, 2b)` ∂t, `[2b, 3b)` ∂x, `[3b, 4b)` ∂xx), so a
/// dense layer is a single GEMM over all channels and the elementwise chain
/// rules run over contiguous row blocks.
#[derive(Debug, Clone)]
pub(crate) struct JetBatch {
    data: Array2<f64>,
    batch: usize,
}

impl JetBatch {
    pub fn zeros(batch: usize, width: usize) -> Self {
        Self {
            data: Array2::zeros((4 * batch, width)),
            batch,
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    fn channel(&self, c: usize) -> ArrayView2<'_, f64> {
        self.data
            .slice(ndarray::s![c * self.batch..(c + 1) * self.batch, ..])
    }

    pub fn v(&self) -> ArrayView2<'_, f64> {
        self.channel(0)
    }

    pub fn dt(&self) -> ArrayView2<'_, f64> {
        self.channel(1)
    }

    pub fn dx(&self) -> ArrayView2<'_, f64> {
        self.channel(2)
    }

    pub fn dxx(&self) -> ArrayView2<'_, f64> {
        self.channel(3)
    }

    /// All four channel views at once.
    pub fn channels(&self) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>, ArrayView2<'_, f64>, ArrayView2<'_, f64>) {
        (self.channel(0), self.channel(1), self.channel(2), self.channel(3))
    }

    /// All four channel views at once, mutably.
    pub fn channels_mut(
        &mut self,
    ) -> (
        ArrayViewMut2<'_, f64>,
        ArrayViewMut2<'_, f64>,
        ArrayViewMut2<'_, f64>,
        ArrayViewMut2<'_, f64>,
    ) {
        let b = self.batch;
        let (v, rest) = self.data.view_mut().split_at(Axis(0), b);
        let (dt, rest) = rest.split_at(Axis(0), b);
        let (dx, dxx) = rest.split_at(Axis(0), b);
        (v, dt, dx, dxx)
    }

    pub fn v_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        self.channels_mut().0
    }

    fn map_linear(&self, w: &Array2<f64>) -> Self {
        Self {
            data: dot_c(self.data.view(), w.view()),
            batch: self.batch,
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.data += &other.data;
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            data: &self.data * c,
            batch: self.batch,
        }
    }

    /// Elementwise dot product over all channels.
    pub fn dot_all(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// One dense layer: weights `[in, out]` and bias `[out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct LayerParams {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LayerParams {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
        Self {
            w,
            b: Array1::zeros(fan_out),
        }
    }
}

/// Parameters of one stage: dense layers with tanh between them, linear last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct StageParams {
    pub layers: Vec<LayerParams>,
}

impl StageParams {
    /// Build a net `in_dim -> hidden... -> 1` with Glorot-uniform weights.
    pub fn init(in_dim: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let layers = dims
            .windows(2)
            .map(|d| LayerParams::glorot(d[0], d[1], rng))
            .collect();
        Self { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + l.b.len())
            .sum()
    }
}

/// Gradient buffers mirroring [`StageParams`].
#[derive(Debug, Clone)]
pub(crate) struct StageGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl StageGrads {
    pub fn zeros_like(params: &StageParams) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| (Array2::zeros(l.w.dim()), Array1::zeros(l.b.dim())))
            .collect();
        Self { layers }
    }

    pub fn sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|(w, b)| {
                w.iter().map(|g| g * g).sum::<f64>() + b.iter().map(|g| g * g).sum::<f64>()
            })
            .sum()
    }
}

/// Tape recorded by a jet forward pass through one stage.
pub(crate) struct StageTape {
    /// Input jet of the first dense layer.
    input: JetBatch,
    /// Per hidden activation: pre-activation jet and activation output jet.
    /// Storing the output makes it the next layer's recorded input, so the
    /// reverse sweep never recomputes or copies layer inputs.
    act: Vec<(JetBatch, JetBatch)>,
}

/// Row-major flat view of an array; copies only if the storage is not
/// contiguous (jet arrays built by `dot`/`from_shape_vec` always are).
fn flat(a: &Array2<f64>) -> std::borrow::Cow<'_, [f64]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

fn from_flat(dim: (usize, usize), data: Vec<f64>) -> Array2<f64> {
    Array2::from_shape_vec(dim, data).expect("length matches shape")
}

/// An uninitialized buffer for a kernel that overwrites every element.
/// Zero-filling these first is pure memset traffic on the hot path.
fn uninit_buf(n: usize) -> Vec<MaybeUninit<f64>> {
    let mut v = Vec::with_capacity(n);
    // Safety: MaybeUninit<f64> is valid uninitialized.
    unsafe { v.set_len(n) };
    v
}

/// Reinterpret a fully-written buffer as initialized values.
///
/// Safety: every element must have been written.
unsafe fn assume_init_vec(v: Vec<MaybeUninit<f64>>) -> Vec<f64> {
    let mut v = std::mem::ManuallyDrop::new(v);
    // Safety: MaybeUninit<f64> and f64 share layout; ownership is moved.
    unsafe { Vec::from_raw_parts(v.as_mut_ptr().cast(), v.len(), v.capacity()) }
}

// ---- temporary instrumentation (removed before final) ----
pub(crate) mod gemm_stats {
    use std::collections::HashMap;
    use std::sync::Mutex;
    use std::time::Duration;
    pub static STATS: Mutex<Option<HashMap<(char, usize, usize, usize), (u64, Duration)>>> =
        Mutex::new(None);
    pub fn enabled() -> bool {
        static ON: std::sync::OnceLock<bool> = std::sync::OnceLock::new();
        *ON.get_or_init(|| std::env::var("VSR_GEMM_STATS").is_ok())
    }
    pub fn record(kind: char, m: usize, k: usize, n: usize, d: Duration) {
        let mut g = STATS.lock().unwrap();
        let map = g.get_or_insert_with(HashMap::new);
        let e = map.entry((kind, m, k, n)).or_insert((0, Duration::ZERO));
        e.0 += 1;
        e.1 += d;
    }
    pub fn dump() {
        if let Some(map) = STATS.lock().unwrap().as_ref() {
            let mut v: Vec<_> = map.iter().collect();
            v.sort_by_key(|(_, (_, d))| std::cmp::Reverse(*d));
            for ((kind, m, k, n), (c, d)) in v {
                eprintln!("GEMMSTAT {kind} m={m} k={k} n={n} calls={c} total={:?}", d);
            }
        }
    }
}
// ---- end temporary instrumentation ----

/// Matrix product with a guaranteed row-major result. `dot` may hand back a
/// column-major array for some operand layouts, which forces every later
/// `flat` into an element-by-element copy on the backward hot path; going
/// through CBLAS directly also skips zero-filling the output (β = 0
/// overwrites it). The call matches what `dot` issues for the same operand
/// layouts, so results are bit-identical.
fn dot_c(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    use cblas_sys::{cblas_dgemm, CBLAS_LAYOUT, CBLAS_TRANSPOSE};
    let (m, k) = a.dim();
    let n = b.ncols();
    let _t0 = gemm_stats::enabled().then(std::time::Instant::now);
    let a_slice = a.as_slice().expect("lhs of dot_c is row-major");
    // Tall-skinny products (big batch, layer widths ≤ 64) go through the
    // dedicated kernel: BLAS spends more time packing the operands than
    // multiplying them at these widths. A transposed rhs is materialized
    // first — it is at most 64×64, while the packing this avoids is O(m·k).
    if m >= 64 && k >= 1 && k <= crate::math::GEMM_TALL_MAX && n <= crate::math::GEMM_TALL_MAX {
        let b_std = b.as_standard_layout();
        let b_rm: &[f64] = b_std.as_slice().expect("standard layout is row-major");
        let mut c = uninit_buf(m * n);
        if crate::math::gemm_nn_tall(a_slice, m, k, b_rm, n, &mut c) {
            if let Some(t0) = _t0 {
                gemm_stats::record('T', m, k, n, t0.elapsed());
            }
            // Safety: gemm_nn_tall wrote every element.
            return from_flat((m, n), unsafe { assume_init_vec(c) });
        }
    }
    // The rhs is either row-major or a transposed view of a row-major array.
    let (trans_b, b_slice, ldb) = if let Some(s) = b.to_slice() {
        (CBLAS_TRANSPOSE::CblasNoTrans, s, n)
    } else {
        let bt = b.t();
        let s = bt.to_slice().expect("rhs of dot_c is (transposed) row-major");
        (CBLAS_TRANSPOSE::CblasTrans, s, k)
    };
    let mut c = uninit_buf(m * n);
    if k == 0 {
        c.fill(MaybeUninit::new(0.0));
    } else {
        // Safety: dimensions and leading strides match the slices above, and
        // with β = 0 BLAS writes all m·n elements of c.
        unsafe {
            cblas_dgemm(
                CBLAS_LAYOUT::CblasRowMajor,
                CBLAS_TRANSPOSE::CblasNoTrans,
                trans_b,
                m as i32,
                n as i32,
                k as i32,
                1.0,
                a_slice.as_ptr(),
                k as i32,
                b_slice.as_ptr(),
                ldb as i32,
                0.0,
                c.as_mut_ptr().cast(),
                n as i32,
            );
        }
    }
    if let Some(t0) = _t0 {
        gemm_stats::record('N', m, k, n, t0.elapsed());
    }
    // Safety: every element was written above.
    from_flat((m, n), unsafe { assume_init_vec(c) })
}

/// Accumulate `aᵀ · b` into `c` (all row-major), in one GEMM call.
fn dot_tn_acc(a: &Array2<f64>, b: &Array2<f64>, c: &mut Array2<f64>) {
    use cblas_sys::{cblas_dgemm, CBLAS_LAYOUT, CBLAS_TRANSPOSE};
    let _t0 = gemm_stats::enabled().then(std::time::Instant::now);
    let (rows, m) = a.dim();
    let n = b.ncols();
    assert_eq!(rows, b.nrows());
    assert_eq!(c.dim(), (m, n));
    let a_slice = a.as_slice().expect("lhs of dot_tn_acc is row-major");
    let b_slice = b.as_slice().expect("rhs of dot_tn_acc is row-major");
    let c_slice = c.as_slice_mut().expect("accumulator of dot_tn_acc is row-major");
    // Safety: dimensions and leading strides match the slices above.
    unsafe {
        cblas_dgemm(
            CBLAS_LAYOUT::CblasRowMajor,
            CBLAS_TRANSPOSE::CblasTrans,
            CBLAS_TRANSPOSE::CblasNoTrans,
            m as i32,
            n as i32,
            rows as i32,
            1.0,
            a_slice.as_ptr(),
            m as i32,
            b_slice.as_ptr(),
            n as i32,
            1.0,
            c_slice.as_mut_ptr(),
            n as i32,
        );
    }
    if let Some(t0) = _t0 {
        gemm_stats::record('G', m, n, rows, t0.elapsed());
    }
}

/// tanh jet: y = tanh(v), y' = p dt, with p = 1 - tanh², and
/// y_xx = p2 dx² + p dxx where p2 = φ'' = -2 tanh · p.
///
/// One fused pass: the chain rules are memory-bound, so every component is
/// produced from a single read of the pre-activation jet.
fn tanh_jet(pre: &JetBatch) -> JetBatch {
    let dim = pre.data.dim();
    let n = pre.data.len() / 4;
    let packed = flat(&pre.data);
    let (pv, rest) = packed.split_at(n);
    let (pdt, rest) = rest.split_at(n);
    let (pdx, pdxx) = rest.split_at(n);
    let mut buf = uninit_buf(4 * n);
    {
        let (t, rest) = buf.split_at_mut(n);
        let (dt, rest) = rest.split_at_mut(n);
        let (dx, dxx) = rest.split_at_mut(n);
        crate::math::tanh_slice_uninit(pv, t);
        // Safety: tanh_slice_uninit wrote every element of `t`.
        let t = unsafe { &*(t as *const [MaybeUninit<f64>] as *const [f64]) };
        crate::math::jet_forward_chain(t, pdt, pdx, pdxx, dt, dx, dxx);
    }
    // Safety: the two kernels above wrote every element.
    JetBatch {
        data: from_flat(dim, unsafe { assume_init_vec(buf) }),
        batch: pre.batch,
    }
}

/// Forward a jet batch through one stage, optionally recording a tape.
pub(crate) fn stage_forward_jet(
    params: &StageParams,
    input: JetBatch,
    record: bool,
) -> (JetBatch, Option<StageTape>) {
    let n_layers = params.layers.len();
    let mut act: Vec<(JetBatch, JetBatch)> = Vec::with_capacity(n_layers - 1);
    // holds the running activation when no tape is recorded, and the final
    // linear output in either mode
    let mut last: Option<JetBatch> = None;
    for (l, layer) in params.layers.iter().enumerate() {
        let src = if l == 0 {
            &input
        } else if record {
            &act[l - 1].1
        } else {
            last.as_ref().expect("previous layer output")
        };
        let mut pre = src.map_linear(&layer.w);
        {
            let mut v = pre.v_mut();
            v += &layer.b;
        }
        if l + 1 < n_layers {
            let out = tanh_jet(&pre);
            if record {
                act.push((pre, out));
            } else {
                last = Some(out);
            }
        } else {
            last = Some(pre);
        }
    }
    let out = last.expect("stage has at least one layer");
    let tape = record.then(|| StageTape { input, act });
    (out, tape)
}

/// Reverse sweep through one stage.
///
/// `cot` is the cotangent on the stage output jet. Parameter gradients are
/// accumulated into `grads`; the cotangent on the stage input jet is
/// returned so callers can chain through stacked stages.
pub(crate) fn stage_backward_jet(
    params: &StageParams,
    tape: &StageTape,
    cot: JetBatch,
    grads: &mut StageGrads,
) -> JetBatch {
    let n_layers = params.layers.len();
    let mut g = cot;
    for l in (0..n_layers).rev() {
        if l + 1 < n_layers {
            // backward through the tanh that followed dense layer l:
            // one fused pass applying the elementwise chain rule of the
            // tanh jet to all four cotangent components
            let (pre, out) = &tape.act[l];
            let dim = pre.data.dim();
            let n = pre.data.len() / 4;
            let pre_packed = flat(&pre.data);
            let out_packed = flat(&out.data);
            let cot_packed = flat(&g.data);
            let ts = &out_packed[..n];
            let (_, rest) = pre_packed.split_at(n);
            let (pdt, rest) = rest.split_at(n);
            let (pdx, pdxx) = rest.split_at(n);
            let (cv, rest) = cot_packed.split_at(n);
            let (cdt, rest) = rest.split_at(n);
            let (cdx, cdxx) = rest.split_at(n);
            let mut buf = uninit_buf(4 * n);
            {
                let (gv, rest) = buf.split_at_mut(n);
                let (gdt, rest) = rest.split_at_mut(n);
                let (gdx, gdxx) = rest.split_at_mut(n);
                crate::math::jet_backward_chain(
                    ts, pdt, pdx, pdxx, cv, cdt, cdx, cdxx, gv, gdt, gdx, gdxx,
                );
            }
            // Safety: jet_backward_chain wrote every element.
            g = JetBatch {
                data: from_flat(dim, unsafe { assume_init_vec(buf) }),
                batch: g.batch,
            };
        }
        // backward through dense layer l: the packed layout folds the sum of
        // the four per-channel weight-gradient products into one GEMM
        let layer_input = if l == 0 { &tape.input } else { &tape.act[l - 1].1 };
        let (gw, gb) = &mut grads.layers[l];
        dot_tn_acc(&layer_input.data, &g.data, gw);
        *gb += &g.v().sum_axis(Axis(0));
        g = JetBatch {
            data: dot_c(g.data.view(), params.layers[l].w.t()),
            batch: g.batch,
        };
    }
    g
}

/// Tape for a value-only forward pass (no input derivatives).
pub(crate) struct ValueTape {
    input: Array2<f64>,
    act: Vec<Array2<f64>>, // tanh outputs per hidden layer
}

pub(crate) fn stage_forward_value(
    params: &StageParams,
    input: ArrayView2<f64>,
    record: bool,
) -> (Array2<f64>, Option<ValueTape>) {
    let n_layers = params.layers.len();
    let mut act = Vec::with_capacity(n_layers - 1);
    let mut cur = input.to_owned();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut pre = cur.dot(&layer.w);
        pre += &layer.b;
        if l + 1 < n_layers {
            let t = {
                let src = flat(&pre);
                let mut out = uninit_buf(src.len());
                crate::math::tanh_slice_uninit(&src, &mut out);
                // Safety: tanh_slice_uninit wrote every element.
                from_flat(pre.dim(), unsafe { assume_init_vec(out) })
            };
            if record {
                act.push(t.clone());
            }
            cur = t;
        } else {
            cur = pre;
        }
    }
    let tape = record.then(|| ValueTape {
        input: input.to_owned(),
        act,
    });
    (cur, tape)
}

/// Reverse sweep of the value-only pass; returns the input cotangent.
pub(crate) fn stage_backward_value(
    params: &StageParams,
    tape: &ValueTape,
    cot: Array2<f64>,
    grads: &mut StageGrads,
) -> Array2<f64> {
    let n_layers = params.layers.len();
    let mut g = cot;
    for l in (0..n_layers).rev() {
        if l + 1 < n_layers {
            let t = &tape.act[l];
            Zip::from(&mut g).and(t).for_each(|g_, &t_| *g_ *= 1.0 - t_ * t_);
        }
        let layer_input = if l == 0 {
            tape.input.view()
        } else {
            tape.act[l - 1].view()
        };
        let (gw, gb) = &mut grads.layers[l];
        *gw += &layer_input.t().dot(&g);
        *gb += &g.sum_axis(Axis(0));
        g = dot_c(g.view(), params.layers[l].w.t());
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;

    /// Write one entry of a jet channel (0=v, 1=dt, 2=dx, 3=dxx).
    fn set(jet: &mut JetBatch, ch: usize, i: usize, j: usize, val: f64) {
        let b = jet.batch();
        jet.data[[ch * b + i, j]] = val;
    }

    fn tiny_stage(seed: u64, in_dim: usize) -> StageParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        StageParams::init(in_dim, &[5, 4], &mut rng)
    }

    fn seed_input(ts: &[f64], xs: &[f64]) -> JetBatch {
        let n = ts.len();
        let mut jet = JetBatch::zeros(n, 2);
        for i in 0..n {
            set(&mut jet, 0, i, 0, ts[i]);
            set(&mut jet, 0, i, 1, xs[i]);
            set(&mut jet, 1, i, 0, 1.0);
            set(&mut jet, 2, i, 1, 1.0);
        }
        jet
    }

    fn eval_value(params: &StageParams, t: f64, x: f64) -> f64 {
        let input = array![[t, x]];
        let (out, _) = stage_forward_value(params, input.view(), false);
        out[[0, 0]]
    }

    #[test]
    fn jet_matches_finite_differences() {
        let params = tiny_stage(1, 2);
        let (t0, x0) = (0.3, -0.4);
        let jet = seed_input(&[t0], &[x0]);
        let (out, _) = stage_forward_jet(&params, jet, false);
        let h = 1e-5;
        let f = |t, x| eval_value(&params, t, x);
        let fd_t = (f(t0 + h, x0) - f(t0 - h, x0)) / (2.0 * h);
        let fd_x = (f(t0, x0 + h) - f(t0, x0 - h)) / (2.0 * h);
        let fd_xx = (f(t0, x0 + h) - 2.0 * f(t0, x0) + f(t0, x0 - h)) / (h * h);
        assert_relative_eq!(out.v()[[0, 0]], f(t0, x0), max_relative = 1e-12);
        assert_relative_eq!(out.dt()[[0, 0]], fd_t, max_relative = 1e-7);
        assert_relative_eq!(out.dx()[[0, 0]], fd_x, max_relative = 1e-7);
        assert_relative_eq!(out.dxx()[[0, 0]], fd_xx, max_relative = 1e-4);
    }

    /// Scalar loss mixing all four jet components, used for gradient checks.
    fn jet_loss(params: &StageParams, jet: JetBatch) -> f64 {
        let (out, _) = stage_forward_jet(params, jet, false);
        let mut s = 0.0;
        for i in 0..out.batch() {
            s += out.v()[[i, 0]].powi(2)
                + 0.7 * out.dt()[[i, 0]].powi(2)
                + 0.3 * out.dx()[[i, 0]] * out.dt()[[i, 0]]
                + 0.1 * out.dxx()[[i, 0]].powi(2);
        }
        s
    }

    #[test]
    fn backward_matches_finite_differences() {
        let params = tiny_stage(2, 2);
        let ts = [0.1, -0.5, 0.8];
        let xs = [0.4, 0.2, -0.9];
        let jet = seed_input(&ts, &xs);
        let (out, tape) = stage_forward_jet(&params, jet.clone(), true);
        // cotangent of jet_loss at the output
        let mut cot = JetBatch::zeros(out.batch(), 1);
        for i in 0..out.batch() {
            set(&mut cot, 0, i, 0, 2.0 * out.v()[[i, 0]]);
            set(&mut cot, 1, i, 0, 1.4 * out.dt()[[i, 0]] + 0.3 * out.dx()[[i, 0]]);
            set(&mut cot, 2, i, 0, 0.3 * out.dt()[[i, 0]]);
            set(&mut cot, 3, i, 0, 0.2 * out.dxx()[[i, 0]]);
        }
        let mut grads = StageGrads::zeros_like(&params);
        stage_backward_jet(&params, tape.as_ref().unwrap(), cot, &mut grads);

        let h = 1e-6;
        for l in 0..params.layers.len() {
            let (rows, cols) = params.layers[l].w.dim();
            for &(r, c) in &[(0usize, 0usize), (rows - 1, cols - 1), (rows / 2, cols / 2)] {
                let mut pp = params.clone();
                pp.layers[l].w[[r, c]] += h;
                let mut pm = params.clone();
                pm.layers[l].w[[r, c]] -= h;
                let fd = (jet_loss(&pp, jet.clone()) - jet_loss(&pm, jet.clone())) / (2.0 * h);
                assert_relative_eq!(grads.layers[l].0[[r, c]], fd, max_relative = 1e-5, epsilon = 1e-8);
            }
            let blen = params.layers[l].b.len();
            for &bi in &[0usize, blen - 1] {
                let mut pp = params.clone();
                pp.layers[l].b[bi] += h;
                let mut pm = params.clone();
                pm.layers[l].b[bi] -= h;
                let fd = (jet_loss(&pp, jet.clone()) - jet_loss(&pm, jet.clone())) / (2.0 * h);
                assert_relative_eq!(grads.layers[l].1[bi], fd, max_relative = 1e-5, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn backward_input_cotangent_matches_fd() {
        // gradient of the loss w.r.t. the third input channel (used when
        // chaining stacked stages)
        let params = tiny_stage(3, 3);
        let mut jet = JetBatch::zeros(2, 3);
        set(&mut jet, 0, 0, 0, 0.1);
        set(&mut jet, 0, 0, 1, 0.2);
        set(&mut jet, 0, 0, 2, 0.5);
        set(&mut jet, 0, 1, 0, -0.3);
        set(&mut jet, 0, 1, 1, 0.7);
        set(&mut jet, 0, 1, 2, 0.25);
        set(&mut jet, 1, 0, 0, 1.0);
        set(&mut jet, 1, 1, 0, 1.0);
        set(&mut jet, 2, 0, 1, 1.0);
        set(&mut jet, 2, 1, 1, 1.0);
        set(&mut jet, 1, 0, 2, 0.3); // the u-channel carries its own jet
        set(&mut jet, 2, 0, 2, -0.2);
        set(&mut jet, 3, 0, 2, 0.1);

        let (out, tape) = stage_forward_jet(&params, jet.clone(), true);
        let mut cot = JetBatch::zeros(2, 1);
        for i in 0..2 {
            set(&mut cot, 0, i, 0, 2.0 * out.v()[[i, 0]]);
            set(&mut cot, 1, i, 0, 1.4 * out.dt()[[i, 0]] + 0.3 * out.dx()[[i, 0]]);
            set(&mut cot, 2, i, 0, 0.3 * out.dt()[[i, 0]]);
            set(&mut cot, 3, i, 0, 0.2 * out.dxx()[[i, 0]]);
        }
        let mut grads = StageGrads::zeros_like(&params);
        let gin = stage_backward_jet(&params, tape.as_ref().unwrap(), cot, &mut grads);

        let h = 1e-6;
        // perturb v and dx of the u-channel of point 0
        for (comp, expected) in [(0usize, gin.v()[[0, 2]]), (2usize, gin.dx()[[0, 2]])] {
            let mut jp = jet.clone();
            let mut jm = jet.clone();
            match comp {
                0 => {
                    { let d = jp.v()[[0, 2]] + h; set(&mut jp, 0, 0, 2, d); }
                    { let d = jm.v()[[0, 2]] - h; set(&mut jm, 0, 0, 2, d); }
                }
                _ => {
                    { let d = jp.dx()[[0, 2]] + h; set(&mut jp, 2, 0, 2, d); }
                    { let d = jm.dx()[[0, 2]] - h; set(&mut jm, 2, 0, 2, d); }
                }
            }
            let fd = (jet_loss(&params, jp) - jet_loss(&params, jm)) / (2.0 * h);
            assert_relative_eq!(expected, fd, max_relative = 1e-5, epsilon = 1e-9);
        }
    }

    #[test]
    fn value_backward_matches_fd() {
        let params = tiny_stage(4, 2);
        let input = array![[0.2, -0.1], [0.6, 0.3]];
        let (out, tape) = stage_forward_value(&params, input.view(), true);
        let cot = out.mapv(|v| 2.0 * v); // loss = sum v²
        let mut grads = StageGrads::zeros_like(&params);
        stage_backward_value(&params, tape.as_ref().unwrap(), cot, &mut grads);
        let loss = |p: &StageParams| {
            let (o, _) = stage_forward_value(p, input.view(), false);
            o.iter().map(|v| v * v).sum::<f64>()
        };
        let h = 1e-6;
        let mut pp = params.clone();
        pp.layers[0].w[[0, 0]] += h;
        let mut pm = params.clone();
        pm.layers[0].w[[0, 0]] -= h;
        let fd = (loss(&pp) - loss(&pm)) / (2.0 * h);
        assert_relative_eq!(grads.layers[0].0[[0, 0]], fd, max_relative = 1e-6, epsilon = 1e-10);
    }

    #[test]
    #[ignore]
    fn gemm_paths_timing_probe() {
        use std::time::Instant;
        let m = 20000;
        for &(k, n) in &[(50usize, 50usize), (40, 40)] {
            let a = Array2::from_shape_fn((m, k), |(i, j)| ((i * 31 + j) % 17) as f64 * 0.1);
            let b = Array2::from_shape_fn((k, n), |(i, j)| ((i * 7 + j) % 13) as f64 * 0.05);
            // custom path (m >= 64, k,n <= 64)
            let t0 = Instant::now();
            let mut s1 = 0.0;
            for _ in 0..50 {
                let c = dot_c(a.view(), b.view());
                s1 += c[[0, 0]];
            }
            let tc = t0.elapsed().as_secs_f64() / 50.0;
            // cblas path: force by calling with a wide b? instead call cblas directly
            let t0 = Instant::now();
            let mut s2 = 0.0;
            for _ in 0..50 {
                let c = a.dot(&b);
                s2 += c[[0, 0]];
            }
            let tb = t0.elapsed().as_secs_f64() / 50.0;
            println!("k={k} n={n}: custom {:.3} ms, cblas {:.3} ms (sums {s1} {s2})", tc * 1e3, tb * 1e3);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = tiny_stage(9, 2);
        let b = tiny_stage(9, 2);
        assert_eq!(a, b);
    }
}
