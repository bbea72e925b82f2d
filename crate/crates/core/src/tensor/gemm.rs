//! Dense matrix-multiply kernels.
//!
//! Everything compute-heavy in the tensor engine (projections, attention,
//! im2col convolutions) lowers to `C += op(A) * op(B)` on row-major buffers.
//! The f32 path dispatches at runtime to an AVX-512 or AVX2 micro-kernel and
//! splits row blocks across rayon; f64 (used by the gradient-check suite)
//! runs a simple blocked loop. Row blocks write disjoint slices of C, so
//! results are bitwise reproducible for a fixed build.

use rayon::prelude::*;

/// C[m,n] (+)= op(A)[m,k] * op(B)[k,n].
///
/// `a_trans` means A is stored as [k,m] and used transposed; likewise
/// `b_trans` means B is stored as [n,k]. When `accumulate` is false C is
/// overwritten.
pub fn gemm_f32(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(0.0);
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }

    // Kernels want contiguous A rows; materialize the transpose when needed.
    let a_scratch;
    let a_rows: &[f32] = if a_trans {
        a_scratch = transpose(a, k, m);
        &a_scratch
    } else {
        a
    };

    let packed = pack_b(b, k, n, b_trans);

    let work = m * n * k;
    if work < 1 << 21 {
        strip_rows(a_rows, &packed, c, 0, m, k, n);
    } else {
        // Chunk rows so each rayon task is a multiple of the micro-kernel height.
        let chunk = ((m + 1) / 2).max(MR).div_ceil(MR) * MR;
        c.par_chunks_mut(chunk * n)
            .enumerate()
            .for_each(|(ci, c_chunk)| {
                let i0 = ci * chunk;
                let rows = c_chunk.len() / n;
                strip_rows(&a_rows[i0 * k..(i0 + rows) * k], &packed, c_chunk, 0, rows, k, n);
            });
    }
}

/// f64 variant; tests-scale only, no SIMD dispatch.
pub fn gemm_f64(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(0.0);
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let a_scratch;
    let a_rows: &[f64] = if a_trans {
        a_scratch = transpose(a, k, m);
        &a_scratch
    } else {
        a
    };
    let b_scratch;
    let b_rows: &[f64] = if b_trans {
        b_scratch = transpose(b, n, k);
        &b_scratch
    } else {
        b
    };
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a_rows[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b_rows[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    // src is [rows, cols]; output [cols, rows]
    let mut out = Vec::with_capacity(src.len());
    unsafe { out.set_len(src.len()) };
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

const MR: usize = 8;
const NR: usize = 32;

/// B repacked into NR-wide strips: strip s holds k rows of NR floats
/// (zero-padded at the right edge) so the micro-kernel streams contiguously.
fn pack_b(b: &[f32], k: usize, n: usize, b_trans: bool) -> Vec<f32> {
    let nstrips = n.div_ceil(NR);
    let mut packed = vec![0.0f32; nstrips * k * NR];
    for s in 0..nstrips {
        let j0 = s * NR;
        let w = NR.min(n - j0);
        let base = s * k * NR;
        if b_trans {
            // B stored [n,k]: element (p,j) at b[j*k + p]
            for (jj, col) in (j0..j0 + w).enumerate() {
                let src = &b[col * k..col * k + k];
                for p in 0..k {
                    packed[base + p * NR + jj] = src[p];
                }
            }
        } else {
            for p in 0..k {
                packed[base + p * NR..base + p * NR + w]
                    .copy_from_slice(&b[p * n + j0..p * n + j0 + w]);
            }
        }
    }
    packed
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Isa {
    Avx512,
    Avx2,
    Scalar,
}

fn isa() -> Isa {
    use std::sync::OnceLock;
    static ISA: OnceLock<Isa> = OnceLock::new();
    *ISA.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            if is_x86_feature_detected!("avx512f") {
                return Isa::Avx512;
            }
            if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                return Isa::Avx2;
            }
        }
        Isa::Scalar
    })
}

fn strip_rows(a: &[f32], packed: &[f32], c: &mut [f32], i_start: usize, rows: usize, k: usize, n: usize) {
    let nstrips = n.div_ceil(NR);
    let which = isa();
    let mut i = i_start;
    while i < i_start + rows {
        let mrows = MR.min(i_start + rows - i);
        for s in 0..nstrips {
            let j0 = s * NR;
            let ncols = NR.min(n - j0);
            let a_ptr = &a[i * k..];
            let b_panel = &packed[s * k * NR..(s * k * NR) + k * NR];
            let c_off = i * n + j0;
            match which {
                #[cfg(target_arch = "x86_64")]
                Isa::Avx512 => unsafe {
                    kernel_avx512(a_ptr.as_ptr(), k, b_panel.as_ptr(), k, c[c_off..].as_mut_ptr(), n, mrows, ncols)
                },
                #[cfg(target_arch = "x86_64")]
                Isa::Avx2 => unsafe {
                    kernel_avx2(a_ptr.as_ptr(), k, b_panel.as_ptr(), k, c[c_off..].as_mut_ptr(), n, mrows, ncols)
                },
                _ => kernel_scalar(a_ptr, k, b_panel, k, &mut c[c_off..], n, mrows, ncols),
            }
        }
        i += MR;
    }
}

/// 8x32 AVX-512 micro-kernel: 16 accumulator registers, A broadcast from
/// contiguous rows, B streamed from the packed panel.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn kernel_avx512(
    a: *const f32,
    lda: usize,
    bpanel: *const f32,
    k: usize,
    c: *mut f32,
    ldc: usize,
    mrows: usize,
    ncols: usize,
) {
    use std::arch::x86_64::*;
    let mut acc: [[__m512; 2]; MR] = [[_mm512_setzero_ps(); 2]; MR];
    let mut bp = bpanel;
    if mrows == MR {
        for p in 0..k {
            let b0 = _mm512_loadu_ps(bp);
            let b1 = _mm512_loadu_ps(bp.add(16));
            bp = bp.add(NR);
            for i in 0..MR {
                let av = _mm512_set1_ps(*a.add(i * lda + p));
                acc[i][0] = _mm512_fmadd_ps(av, b0, acc[i][0]);
                acc[i][1] = _mm512_fmadd_ps(av, b1, acc[i][1]);
            }
        }
    } else {
        for p in 0..k {
            let b0 = _mm512_loadu_ps(bp);
            let b1 = _mm512_loadu_ps(bp.add(16));
            bp = bp.add(NR);
            for (i, accr) in acc.iter_mut().enumerate().take(mrows) {
                let av = _mm512_set1_ps(*a.add(i * lda + p));
                accr[0] = _mm512_fmadd_ps(av, b0, accr[0]);
                accr[1] = _mm512_fmadd_ps(av, b1, accr[1]);
            }
        }
    }
    if ncols == NR {
        for (i, accr) in acc.iter().enumerate().take(mrows) {
            let cp = c.add(i * ldc);
            _mm512_storeu_ps(cp, _mm512_add_ps(_mm512_loadu_ps(cp), accr[0]));
            _mm512_storeu_ps(cp.add(16), _mm512_add_ps(_mm512_loadu_ps(cp.add(16)), accr[1]));
        }
    } else {
        let m0: u16 = if ncols >= 16 { 0xffff } else { (1u16 << ncols) - 1 };
        let rem = ncols.saturating_sub(16);
        let m1: u16 = if rem == 0 { 0 } else { ((1u32 << rem) - 1) as u16 };
        for (i, accr) in acc.iter().enumerate().take(mrows) {
            let cp = c.add(i * ldc);
            let c0 = _mm512_maskz_loadu_ps(m0, cp);
            _mm512_mask_storeu_ps(cp, m0, _mm512_add_ps(c0, accr[0]));
            if rem > 0 {
                let c1 = _mm512_maskz_loadu_ps(m1, cp.add(16));
                _mm512_mask_storeu_ps(cp.add(16), m1, _mm512_add_ps(c1, accr[1]));
            }
        }
    }
}

/// 8x32 AVX2 micro-kernel mirroring the AVX-512 shape with 4 ymm per row pair.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2", enable = "fma")]
unsafe fn kernel_avx2(
    a: *const f32,
    lda: usize,
    bpanel: *const f32,
    k: usize,
    c: *mut f32,
    ldc: usize,
    mrows: usize,
    ncols: usize,
) {
    use std::arch::x86_64::*;
    // process in half-width (16-col) sub-strips to stay within 16 ymm registers
    for half in 0..2 {
        let j0 = half * 16;
        if j0 >= ncols {
            break;
        }
        let cols = (ncols - j0).min(16);
        let mut acc: [[__m256; 2]; 4] = [[_mm256_setzero_ps(); 2]; 4];
        let rows_here = mrows.min(4);
        // two passes of up to 4 rows each
        for quad in 0..2 {
            let r0 = quad * 4;
            if r0 >= mrows {
                break;
            }
            let rows = (mrows - r0).min(4);
            for accr in acc.iter_mut() {
                accr[0] = _mm256_setzero_ps();
                accr[1] = _mm256_setzero_ps();
            }
            let mut bp = bpanel.add(j0);
            for p in 0..k {
                let b0 = _mm256_loadu_ps(bp);
                let b1 = _mm256_loadu_ps(bp.add(8));
                bp = bp.add(NR);
                for (i, accr) in acc.iter_mut().enumerate().take(rows) {
                    let av = _mm256_set1_ps(*a.add((r0 + i) * lda + p));
                    accr[0] = _mm256_fmadd_ps(av, b0, accr[0]);
                    accr[1] = _mm256_fmadd_ps(av, b1, accr[1]);
                }
            }
            for (i, accr) in acc.iter().enumerate().take(rows) {
                let cp = c.add((r0 + i) * ldc + j0);
                if cols == 16 {
                    _mm256_storeu_ps(cp, _mm256_add_ps(_mm256_loadu_ps(cp), accr[0]));
                    _mm256_storeu_ps(cp.add(8), _mm256_add_ps(_mm256_loadu_ps(cp.add(8)), accr[1]));
                } else {
                    let mut buf = [0.0f32; 16];
                    _mm256_storeu_ps(buf.as_mut_ptr(), accr[0]);
                    _mm256_storeu_ps(buf.as_mut_ptr().add(8), accr[1]);
                    for (jj, &v) in buf.iter().enumerate().take(cols) {
                        *cp.add(jj) += v;
                    }
                }
            }
        }
        let _ = rows_here;
    }
}

fn kernel_scalar(
    a: &[f32],
    lda: usize,
    bpanel: &[f32],
    k: usize,
    c: &mut [f32],
    ldc: usize,
    mrows: usize,
    ncols: usize,
) {
    let mut acc = [[0.0f32; NR]; MR];
    for p in 0..k {
        let brow = &bpanel[p * NR..(p + 1) * NR];
        for (i, accr) in acc.iter_mut().enumerate().take(mrows) {
            let av = a[i * lda + p];
            for (x, &bv) in accr.iter_mut().zip(brow) {
                *x += av * bv;
            }
        }
    }
    for (i, accr) in acc.iter().enumerate().take(mrows) {
        let crow = &mut c[i * ldc..i * ldc + ncols];
        for (cv, &v) in crow.iter_mut().zip(accr.iter()) {
            *cv += v;
        }
    }
}

#[cfg(test)]
pub(crate) fn gemm_naive_f32(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0f64;
            for p in 0..k {
                let av = if a_trans { a[p * m + i] } else { a[i * k + p] };
                let bv = if b_trans { b[j * k + p] } else { b[p * n + j] };
                s += (av as f64) * (bv as f64);
            }
            c[i * n + j] = s as f32;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(len: usize, salt: u32) -> Vec<f32> {
        (0..len)
            .map(|i| {
                let h = (i as u32).wrapping_mul(2654435761).wrapping_add(salt);
                ((h >> 8) as f32 / (1u32 << 24) as f32) - 0.5
            })
            .collect()
    }

    #[test]
    fn matches_naive_over_shape_sweep() {
        let shapes = [
            (1, 1, 1),
            (3, 5, 7),
            (8, 16, 32),
            (9, 17, 33),
            (13, 64, 50),
            (70, 33, 65),
            (128, 96, 96),
        ];
        for &(m, k, n) in &shapes {
            for &at in &[false, true] {
                for &bt in &[false, true] {
                    let a = filled(m * k, 1);
                    let b = filled(k * n, 2);
                    let want = gemm_naive_f32(m, k, n, &a, at, &b, bt);
                    let mut got = vec![0.0f32; m * n];
                    gemm_f32(m, k, n, &a, at, &b, bt, &mut got, false);
                    for (g, w) in got.iter().zip(&want) {
                        assert!(
                            (g - w).abs() <= 1e-4 * (1.0 + w.abs()),
                            "mismatch at shape ({m},{k},{n}) at={at} bt={bt}: {g} vs {w}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn accumulate_adds_to_existing() {
        let (m, k, n) = (5, 4, 6);
        let a = filled(m * k, 3);
        let b = filled(k * n, 4);
        let base = filled(m * n, 5);
        let mut c = base.clone();
        gemm_f32(m, k, n, &a, false, &b, false, &mut c, true);
        let prod = gemm_naive_f32(m, k, n, &a, false, &b, false);
        for i in 0..m * n {
            assert!((c[i] - (base[i] + prod[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn parallel_path_is_deterministic() {
        // large enough to cross the rayon threshold
        let (m, k, n) = (512, 72, 64);
        let a = filled(m * k, 9);
        let b = filled(k * n, 10);
        let mut c1 = vec![0.0f32; m * n];
        let mut c2 = vec![0.0f32; m * n];
        gemm_f32(m, k, n, &a, false, &b, false, &mut c1, false);
        gemm_f32(m, k, n, &a, false, &b, false, &mut c2, false);
        assert_eq!(c1, c2);
        let want = gemm_naive_f32(m, k, n, &a, false, &b, false);
        for (g, w) in c1.iter().zip(&want) {
            assert!((g - w).abs() <= 2e-4 * (1.0 + w.abs()));
        }
    }

    #[test]
    fn f64_matches_f32_reference() {
        let (m, k, n) = (7, 9, 11);
        let a32 = filled(m * k, 6);
        let b32 = filled(k * n, 7);
        let a: Vec<f64> = a32.iter().map(|&x| x as f64).collect();
        let b: Vec<f64> = b32.iter().map(|&x| x as f64).collect();
        for &at in &[false, true] {
            for &bt in &[false, true] {
                let mut c = vec![0.0f64; m * n];
                gemm_f64(m, k, n, &a, at, &b, bt, &mut c, false);
                let want = gemm_naive_f32(m, k, n, &a32, at, &b32, bt);
                for (g, w) in c.iter().zip(&want) {
                    assert!((g - *w as f64).abs() < 1e-4);
                }
            }
        }
    }
}
