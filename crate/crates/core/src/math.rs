//! Vectorized elementwise transcendentals for the network hot loops.
//!
//! The standard-library `tanh` goes through libm one element at a time and
//! dominates training profiles. The kernel here is branch-free so the
//! compiler can auto-vectorize it inside the feature-gated wrappers:
//! `tanh(x) = sign(x) · (1 - y) / (1 + y)` with `y = exp(-2|x|)`, and the
//! exponential evaluated by the usual base-2 range reduction
//! `exp(-t) = 2^{-n} · P(r)`, `r = n·ln2 - t ∈ [-ln2/2, ln2/2]`, with a
//! degree-12 Taylor polynomial for `P`.
//!
//! Every operation involved (add, mul, fma, div, min, bit moves) rounds
//! identically on every dispatch path, so results are independent of the
//! CPU the code runs on. Accuracy versus libm is a few ulp relative plus
//! ~1e-16 absolute (the `1 - y` cancellation floor for tiny arguments; see
//! the test below), far below any tolerance used in this crate. NaN inputs
//! are not
//! given the libm treatment (they saturate instead of propagating); the
//! training loops never produce them on the activation path.

/// Scalar core of the vectorized tanh. `#[inline(always)]` so it fuses into
/// the feature-gated loops below.
#[inline(always)]
fn tanh_one(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    // 1.5 · 2^52: adding it rounds to the nearest integer and leaves that
    // integer in the low mantissa bits.
    const SHIFT: f64 = 6755399441055744.0;
    // ln 2 split so that n · LN2_HI is exact for the n in range.
    const LN2_HI: f64 = 0.693_147_180_369_123_816_49;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;

    // Saturation: for t ≥ 44, (1-y)/(1+y) rounds to 1 exactly as libm does.
    let t = (2.0 * x.abs()).min(44.0);
    let nf = t.mul_add(LOG2E, SHIFT);
    let n = nf - SHIFT; // round(t · log2 e) as an integer-valued f64, in [0, 64]
    let r = n.mul_add(-LN2_LO, n.mul_add(-LN2_HI, t)); // t - n·ln2, negated below
    let r = -r; // r = n·ln2 - t ∈ [-ln2/2, ln2/2]

    // exp(r) by Horner; degree 12 keeps the truncation below 1 ulp.
    const C: [f64; 13] = [
        1.0,
        1.0,
        0.5,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5040.0,
        1.0 / 40320.0,
        1.0 / 362880.0,
        1.0 / 3628800.0,
        1.0 / 39916800.0,
        1.0 / 479001600.0,
    ];
    let mut q = C[12];
    q = q.mul_add(r, C[11]);
    q = q.mul_add(r, C[10]);
    q = q.mul_add(r, C[9]);
    q = q.mul_add(r, C[8]);
    q = q.mul_add(r, C[7]);
    q = q.mul_add(r, C[6]);
    q = q.mul_add(r, C[5]);
    q = q.mul_add(r, C[4]);
    q = q.mul_add(r, C[3]);
    q = q.mul_add(r, C[2]);
    q = q.mul_add(r, C[1]);
    q = q.mul_add(r, C[0]);

    // y = q · 2^{-n}: n sits in the low mantissa bits of nf; q ∈ [0.7, 1.42]
    // so subtracting n from its exponent field cannot underflow.
    // wrapping: q > 0.7 keeps the exponent field well above n, so the
    // subtraction cannot underflow (and a checked form would add a panic
    // branch that blocks vectorization)
    let y = f64::from_bits(q.to_bits().wrapping_sub((nf.to_bits() & 0x7ff) << 52));
    ((1.0 - y) / (1.0 + y)).copysign(x)
}

use std::mem::MaybeUninit;

/// View an initialized buffer as a write-only uninit buffer.
#[cfg(test)]
fn as_uninit(s: &mut [f64]) -> &mut [MaybeUninit<f64>] {
    // Safety: MaybeUninit<f64> has the same layout as f64, and callers only
    // ever write initialized values through the returned slice.
    unsafe { &mut *(s as *mut [f64] as *mut [MaybeUninit<f64>]) }
}

#[inline(always)]
fn tanh_loop(x: &[f64], out: &mut [MaybeUninit<f64>]) {
    for (o, &v) in out.iter_mut().zip(x) {
        o.write(tanh_one(v));
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512dq,fma")]
unsafe fn tanh_avx512(x: &[f64], out: &mut [MaybeUninit<f64>]) {
    tanh_loop(x, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn tanh_avx2(x: &[f64], out: &mut [MaybeUninit<f64>]) {
    tanh_loop(x, out);
}

/// Elementwise tanh of `x` into `out` (same length); `out` may start
/// uninitialized and is fully written.
pub(crate) fn tanh_slice_uninit(x: &[f64], out: &mut [MaybeUninit<f64>]) {
    assert_eq!(x.len(), out.len());
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f")
            && std::arch::is_x86_feature_detected!("avx512dq")
        {
            // Safety: features checked above.
            return unsafe { tanh_avx512(x, out) };
        }
        if std::arch::is_x86_feature_detected!("avx2")
            && std::arch::is_x86_feature_detected!("fma")
        {
            // Safety: features checked above.
            return unsafe { tanh_avx2(x, out) };
        }
    }
    tanh_loop(x, out);
}

/// Elementwise tanh of `x` into an initialized `out` (same length).
#[cfg(test)]
pub(crate) fn tanh_slice(x: &[f64], out: &mut [f64]) {
    tanh_slice_uninit(x, as_uninit(out));
}

/// Elementwise chain rule pushing a pre-activation jet through tanh, given
/// the already-computed activations `t`:
/// `dt = p·pdt`, `dx = p·pdx`, `dxx = -2t·p·pdx² + p·pdxx` with `p = 1-t²`.
#[inline(always)]
fn jet_forward_loop(
    t: &[f64],
    pdt: &[f64],
    pdx: &[f64],
    pdxx: &[f64],
    dt: &mut [MaybeUninit<f64>],
    dx: &mut [MaybeUninit<f64>],
    dxx: &mut [MaybeUninit<f64>],
) {
    let n = t.len();
    let (pdt, pdx, pdxx) = (&pdt[..n], &pdx[..n], &pdxx[..n]);
    let (dt, dx, dxx) = (&mut dt[..n], &mut dx[..n], &mut dxx[..n]);
    for i in 0..n {
        let th = t[i];
        let p = 1.0 - th * th;
        dt[i].write(p * pdt[i]);
        dx[i].write(p * pdx[i]);
        dxx[i].write(-2.0 * th * p * pdx[i] * pdx[i] + p * pdxx[i]);
    }
}

/// Reverse-mode counterpart of [`jet_forward_loop`]: maps the cotangent on
/// the activation output jet (`cv..cdxx`) to the cotangent on the
/// pre-activation jet (`gv..gdxx`).
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn jet_backward_loop(
    t: &[f64],
    pdt: &[f64],
    pdx: &[f64],
    pdxx: &[f64],
    cv: &[f64],
    cdt: &[f64],
    cdx: &[f64],
    cdxx: &[f64],
    gv: &mut [MaybeUninit<f64>],
    gdt: &mut [MaybeUninit<f64>],
    gdx: &mut [MaybeUninit<f64>],
    gdxx: &mut [MaybeUninit<f64>],
) {
    let n = t.len();
    let (pdt, pdx, pdxx) = (&pdt[..n], &pdx[..n], &pdxx[..n]);
    let (cv, cdt, cdx, cdxx) = (&cv[..n], &cdt[..n], &cdx[..n], &cdxx[..n]);
    let (gv, gdt) = (&mut gv[..n], &mut gdt[..n]);
    let (gdx, gdxx) = (&mut gdx[..n], &mut gdxx[..n]);
    for i in 0..n {
        let t_ = t[i];
        let p = 1.0 - t_ * t_;
        let p2 = -2.0 * t_ * p; // dφ'/dv and φ''
        let dp2 = -2.0 * p * (p - 2.0 * t_ * t_); // dφ''/dv
        let dt_in = pdt[i];
        let dx_in = pdx[i];
        let dxx_in = pdxx[i];
        gv[i].write(
            cv[i] * p
                + cdt[i] * dt_in * p2
                + cdx[i] * dx_in * p2
                + cdxx[i] * (dx_in * dx_in * dp2 + dxx_in * p2),
        );
        gdt[i].write(cdt[i] * p);
        gdx[i].write(cdx[i] * p + cdxx[i] * 2.0 * p2 * dx_in);
        gdxx[i].write(cdxx[i] * p);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn jet_forward_avx512(
    t: &[f64],
    pdt: &[f64],
    pdx: &[f64],
    pdxx: &[f64],
    dt: &mut [MaybeUninit<f64>],
    dx: &mut [MaybeUninit<f64>],
    dxx: &mut [MaybeUninit<f64>],
) {
    jet_forward_loop(t, pdt, pdx, pdxx, dt, dx, dxx);
}

#[allow(clippy::too_many_arguments)]
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn jet_backward_avx512(
    t: &[f64],
    pdt: &[f64],
    pdx: &[f64],
    pdxx: &[f64],
    cv: &[f64],
    cdt: &[f64],
    cdx: &[f64],
    cdxx: &[f64],
    gv: &mut [MaybeUninit<f64>],
    gdt: &mut [MaybeUninit<f64>],
    gdx: &mut [MaybeUninit<f64>],
    gdxx: &mut [MaybeUninit<f64>],
) {
    jet_backward_loop(t, pdt, pdx, pdxx, cv, cdt, cdx, cdxx, gv, gdt, gdx, gdxx);
}

/// Dispatched [`jet_forward_loop`]. Plain mul/add only, so every path
/// rounds identically; the wide path just processes more lanes per cycle.
pub(crate) fn jet_forward_chain(
    t: &[f64],
    pdt: &[f64],
    pdx: &[f64],
    pdxx: &[f64],
    dt: &mut [MaybeUninit<f64>],
    dx: &mut [MaybeUninit<f64>],
    dxx: &mut [MaybeUninit<f64>],
) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx512f") {
        // Safety: feature checked above.
        return unsafe { jet_forward_avx512(t, pdt, pdx, pdxx, dt, dx, dxx) };
    }
    jet_forward_loop(t, pdt, pdx, pdxx, dt, dx, dxx);
}

/// Dispatched [`jet_backward_loop`]; same determinism note as above.
#[allow(clippy::too_many_arguments)]
pub(crate) fn jet_backward_chain(
    t: &[f64],
    pdt: &[f64],
    pdx: &[f64],
    pdxx: &[f64],
    cv: &[f64],
    cdt: &[f64],
    cdx: &[f64],
    cdxx: &[f64],
    gv: &mut [MaybeUninit<f64>],
    gdt: &mut [MaybeUninit<f64>],
    gdx: &mut [MaybeUninit<f64>],
    gdxx: &mut [MaybeUninit<f64>],
) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx512f") {
        // Safety: feature checked above.
        return unsafe {
            jet_backward_avx512(t, pdt, pdx, pdxx, cv, cdt, cdx, cdxx, gv, gdt, gdx, gdxx)
        };
    }
    jet_backward_loop(t, pdt, pdx, pdxx, cv, cdt, cdx, cdxx, gv, gdt, gdx, gdxx);
}

/// Maximum inner/output width handled by [`gemm_nn_tall`]; wider products
/// fall back to BLAS.
pub(crate) const GEMM_TALL_MAX: usize = 64;

/// `C = A·B` for a tall row-major `A` (m×k) and a small row-major `B` (k×n),
/// with `1 ≤ k` and `1 ≤ n ≤ 64`, writing the row-major `C` (m×n) into a
/// possibly uninitialized buffer.
///
/// BLAS packs both operands before multiplying, which for k,n ≤ 64 costs more
/// than the arithmetic itself; here `B` simply stays resident in L1 while `A`
/// and `C` stream through once. Accumulation is a plain k-ordered FMA chain,
/// so the result is deterministic (though not bit-identical to BLAS, whose
/// blocking reorders the sums).
///
/// Returns `false` (buffer untouched) when the AVX-512 path is unavailable or
/// the shape is out of range; the caller then uses BLAS.
pub(crate) fn gemm_nn_tall(
    a: &[f64],
    m: usize,
    k: usize,
    b: &[f64],
    n: usize,
    c: &mut [MaybeUninit<f64>],
) -> bool {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if k == 0 || n == 0 || n > GEMM_TALL_MAX || k > GEMM_TALL_MAX {
        return false;
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx512f") {
        let nv = n.div_ceil(8);
        // Safety: feature checked above; slice lengths checked by the asserts.
        unsafe {
            let (a, b, c) = (a.as_ptr(), b.as_ptr(), c.as_mut_ptr().cast::<f64>());
            match nv {
                1 => gemm_tall_nv::<1>(a, m, k, b, n, c),
                2 => gemm_tall_nv::<2>(a, m, k, b, n, c),
                3 => gemm_tall_nv::<3>(a, m, k, b, n, c),
                4 => gemm_tall_nv::<4>(a, m, k, b, n, c),
                5 => gemm_tall_nv::<5>(a, m, k, b, n, c),
                6 => gemm_tall_nv::<6>(a, m, k, b, n, c),
                7 => gemm_tall_nv::<7>(a, m, k, b, n, c),
                _ => gemm_tall_nv::<8>(a, m, k, b, n, c),
            }
        }
        return true;
    }
    #[cfg(not(target_arch = "x86_64"))]
    let _ = (a, b, c);
    false
}

/// One block of `R` output rows for [`gemm_tall_nv`]: `R·NV` zmm accumulators
/// walk the shared k loop, so each load of a `B` row feeds `R` FMA chains.
/// `R = 3`, `NV ≤ 8` keeps `3·8 + 3 + 1 = 28` live vectors within the 32
/// registers.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
#[inline]
unsafe fn gemm_tall_rows<const NV: usize, const R: usize>(
    a: *const f64,
    k: usize,
    b: *const f64,
    n: usize,
    c: *mut f64,
    tail: u8,
) {
    use std::arch::x86_64::*;
    // Safety contract (caller): `a` points at R rows of length k (stride k),
    // `b` at a k×n row-major matrix, `c` at R rows of length n (stride n);
    // `tail` masks the last vector of each n-row to the valid lanes.
    unsafe {
        let mut acc = [[_mm512_setzero_pd(); NV]; R];
        for kk in 0..k {
            let brow = b.add(kk * n);
            let mut va = [_mm512_setzero_pd(); R];
            for (r, v) in va.iter_mut().enumerate() {
                *v = _mm512_set1_pd(*a.add(r * k + kk));
            }
            // One B vector live at a time keeps the register demand at
            // R·NV + R + 1 so the accumulators never spill.
            for j in 0..NV {
                // Masked load on the tail vector: lanes past n would read past
                // the end of `b` on the final k row.
                let vb = if j == NV - 1 && tail != 0xff {
                    _mm512_maskz_loadu_pd(tail, brow.add(8 * j))
                } else {
                    _mm512_loadu_pd(brow.add(8 * j))
                };
                for (r, row) in acc.iter_mut().enumerate() {
                    row[j] = _mm512_fmadd_pd(va[r], vb, row[j]);
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            let crow = c.add(r * n);
            for (j, &x) in row.iter().enumerate() {
                if j == NV - 1 && tail != 0xff {
                    _mm512_mask_storeu_pd(crow.add(8 * j), tail, x);
                } else {
                    _mm512_storeu_pd(crow.add(8 * j), x);
                }
            }
        }
    }
}

/// [`gemm_nn_tall`] monomorphized over `NV = ⌈n/8⌉` so the j loops unroll
/// and the accumulators live in registers.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_tall_nv<const NV: usize>(
    a: *const f64,
    m: usize,
    k: usize,
    b: *const f64,
    n: usize,
    c: *mut f64,
) {
    let rem = n % 8;
    let tail: u8 = if rem == 0 { 0xff } else { (1u8 << rem) - 1 };
    // Safety: caller guarantees a is m×k, b is k×n, c is m×n, all row-major.
    unsafe {
        let mut i = 0;
        while i + 3 <= m {
            gemm_tall_rows::<NV, 3>(a.add(i * k), k, b, n, c.add(i * n), tail);
            i += 3;
        }
        while i < m {
            gemm_tall_rows::<NV, 1>(a.add(i * k), k, b, n, c.add(i * n), tail);
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tall_gemm_matches_naive_product() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &(m, k, n) in &[
            (1usize, 1usize, 1usize),
            (2, 3, 7),
            (3, 5, 8),
            (4, 2, 9),
            (67, 50, 50),
            (65, 64, 64),
            (70, 1, 17),
            (64, 40, 1),
        ] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut c = vec![MaybeUninit::new(f64::NAN); m * n];
            if !gemm_nn_tall(&a, m, k, &b, n, &mut c) {
                continue; // no AVX-512 on this host; BLAS handles these shapes
            }
            for i in 0..m {
                for j in 0..n {
                    let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                    // Safety: gemm_nn_tall returned true, so c is fully written.
                    let got = unsafe { c[i * n + j].assume_init() };
                    let tol = 1e-13 * want.abs().max(1.0);
                    assert!(
                        (got - want).abs() <= tol,
                        "({m},{k},{n}) at ({i},{j}): got {got}, want {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn matches_libm_to_a_few_ulp() {
        let mut xs: Vec<f64> = Vec::new();
        // log-spaced magnitudes from denormal-ish to deep saturation
        for k in -60..=12 {
            let m = 2f64.powi(k);
            for frac in [1.0, 1.37, 1.77] {
                xs.push(m * frac);
                xs.push(-m * frac);
            }
        }
        xs.extend([0.0, -0.0, 1e-300, 22.0, -22.0, 50.0, 700.0]);
        let mut out = vec![0.0; xs.len()];
        tanh_slice(&xs, &mut out);
        for (&x, &got) in xs.iter().zip(&out) {
            let want = x.tanh();
            // few-ulp relative plus the absolute cancellation floor of 1 - y
            let tol = 4.0 * f64::EPSILON * want.abs() + 1.2e-16;
            assert!(
                (got - want).abs() <= tol,
                "tanh({x:e}): got {got:e}, libm {want:e}"
            );
            // saturation and zero must be exact
            if x.abs() >= 22.0 || x == 0.0 {
                assert_eq!(got, want, "x = {x:e}");
                assert_eq!(got.is_sign_negative(), want.is_sign_negative());
            }
        }
    }

    #[test]
    fn preserves_signed_zero() {
        let xs = [0.0, -0.0];
        let mut out = [1.0; 2];
        tanh_slice(&xs, &mut out);
        assert_eq!(out[0], 0.0);
        assert!(!out[0].is_sign_negative());
        assert_eq!(out[1], 0.0);
        assert!(out[1].is_sign_negative());
    }
}
