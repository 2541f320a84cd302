//! Bit-packed ±1 matrices and popcount matrix products.
//!
//! Element `(r, c)` lives in bit `c % 64` of word `c / 64` of row `r`;
//! a set bit is +1, a clear bit is −1. Pad bits past `cols` are always zero,
//! so popcounts over whole words never see them as long as both operands
//! agree on which bits are real (XNOR is masked explicitly on the last word).

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::tensor::FloatTensor;

pub const WORD_BITS: usize = 64;

#[inline]
pub fn words_for(cols: usize) -> usize {
    cols.div_ceil(WORD_BITS)
}

#[inline]
fn tail_mask(cols: usize) -> u64 {
    match cols % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    data: Vec<u64>,
}

impl BitMatrix {
    /// All elements −1.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let words_per_row = words_for(cols);
        Self { rows, cols, words_per_row, data: vec![0; rows * words_per_row] }
    }

    /// Wraps raw words; pad bits must be zero.
    pub fn from_words(rows: usize, cols: usize, data: Vec<u64>) -> Result<Self> {
        let wpr = words_for(cols);
        if data.len() != rows * wpr {
            return shape_err(format!("{} words for a {rows}x{cols} bit matrix, expected {}", data.len(), rows * wpr));
        }
        if wpr > 0 {
            let mask = tail_mask(cols);
            if data.chunks_exact(wpr).any(|row| row[wpr - 1] & !mask != 0) {
                return shape_err("pad bits set past the last column");
            }
        }
        Ok(Self { rows, cols, words_per_row: wpr, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut positive: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                if positive(r, c) {
                    m.set(r, c, true);
                }
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[u64] {
        &self.data
    }

    pub fn row_words(&self, r: usize) -> &[u64] {
        &self.data[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.words_per_row + c / WORD_BITS] >> (c % WORD_BITS) & 1 == 1
    }

    /// Sign of element `(r, c)` as ±1.
    #[inline]
    pub fn sign(&self, r: usize, c: usize) -> i32 {
        if self.get(r, c) {
            1
        } else {
            -1
        }
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, positive: bool) {
        let w = &mut self.data[r * self.words_per_row + c / WORD_BITS];
        let bit = 1u64 << (c % WORD_BITS);
        if positive {
            *w |= bit;
        } else {
            *w &= !bit;
        }
    }

    /// Dense ±1 values.
    pub fn unpack(&self) -> FloatTensor {
        let mut data = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                data.push(self.sign(r, c) as f64);
            }
        }
        FloatTensor::matrix(self.rows, self.cols, data).expect("consistent dims")
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.get(r, c) {
                    t.set(c, r, true);
                }
            }
        }
        t
    }

    /// Columns `[start, end)` repacked from bit 0.
    pub fn slice_cols(&self, start: usize, end: usize) -> Self {
        let mut out = Self::zeros(self.rows, end - start);
        for r in 0..self.rows {
            for c in start..end {
                if self.get(r, c) {
                    out.set(r, c - start, true);
                }
            }
        }
        out
    }

    pub fn count_ones(&self) -> u64 {
        self.data.iter().map(|w| w.count_ones() as u64).sum()
    }
}

/// Row-major `i32` matrix produced by the popcount kernels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i32>,
}

impl IntMatrix {
    pub fn at(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }

    pub fn to_float(&self) -> FloatTensor {
        FloatTensor::matrix(self.rows, self.cols, self.data.iter().map(|&v| v as f64).collect())
            .expect("consistent dims")
    }

    /// `scale · self` as reals.
    pub fn scaled(&self, scale: f64) -> FloatTensor {
        FloatTensor::matrix(self.rows, self.cols, self.data.iter().map(|&v| scale * v as f64).collect())
            .expect("consistent dims")
    }
}

/// Packs `x >= 0` as +1 (so `sign(0) = +1`) and `x < 0` as −1.
pub fn pack_signs(x: &FloatTensor) -> Result<BitMatrix> {
    let (rows, cols) = x.require_2d("pack_signs input")?;
    Ok(pack_signs_slice(x.data(), rows, cols))
}

pub(crate) fn pack_signs_slice(data: &[f64], rows: usize, cols: usize) -> BitMatrix {
    let wpr = words_for(cols);
    let mut words = vec![0u64; rows * wpr];
    for (r, row) in data.chunks_exact(cols.max(1)).take(rows).enumerate() {
        let out = &mut words[r * wpr..(r + 1) * wpr];
        for (c, &v) in row.iter().enumerate() {
            if v >= 0.0 {
                out[c / WORD_BITS] |= 1u64 << (c % WORD_BITS);
            }
        }
    }
    BitMatrix { rows, cols, words_per_row: wpr, data: words }
}

// Below this many word operations the rayon split costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 16;

#[inline]
fn xnor_dot(a: &[u64], b: &[u64], last_mask: u64) -> i32 {
    let n = a.len();
    let mut agree = 0u32;
    for i in 0..n.saturating_sub(1) {
        agree += (!(a[i] ^ b[i])).count_ones();
    }
    if n > 0 {
        agree += (!(a[n - 1] ^ b[n - 1]) & last_mask).count_ones();
    }
    agree as i32
}

/// `a · bᵀ` with both operands row-major: `a: m×k`, `bt: n×k`.
///
/// Each entry is `2·popcount(XNOR(a_i, bt_j)) − k`, the exact ±1 dot product.
pub fn binary_gemm_nt(a: &BitMatrix, bt: &BitMatrix) -> Result<IntMatrix> {
    if a.cols != bt.cols {
        return shape_err(format!(
            "binary_gemm inner dims differ: {}x{} times ({}x{})ᵀ",
            a.rows, a.cols, bt.rows, bt.cols
        ));
    }
    let (m, n, k) = (a.rows, bt.rows, a.cols as i32);
    let mask = tail_mask(a.cols);
    let mut out = vec![0i32; m * n];
    let fill = |(i, row): (usize, &mut [i32])| {
        let ar = a.row_words(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = 2 * xnor_dot(ar, bt.row_words(j), mask) - k;
        }
    };
    if n > 0 {
        if m * n * a.words_per_row.max(1) >= PAR_THRESHOLD {
            out.par_chunks_mut(n).enumerate().for_each(fill);
        } else {
            out.chunks_mut(n).enumerate().for_each(fill);
        }
    }
    Ok(IntMatrix { rows: m, cols: n, data: out })
}

/// `a · b` for `a: m×k`, `b: k×n`; `b` is transposed internally so both
/// operands stream row-major.
pub fn binary_gemm(a: &BitMatrix, b: &BitMatrix) -> Result<IntMatrix> {
    if a.cols != b.rows {
        return shape_err(format!("binary_gemm dims: {}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols));
    }
    binary_gemm_nt(a, &b.transpose())
}

/// `mask · sᵀ` where `mask: m×k` selects entries (set bit = include, i.e. the
/// 0/1 matrix) and `st: n×k` holds ±1 signs. Entry `(i, j)` is the sum of the
/// signs `st[j, t]` over every `t` with `mask[i, t]` set:
/// `2·popcount(mask ∧ s) − popcount(mask)`.
pub fn masked_sign_sum(mask: &BitMatrix, st: &BitMatrix) -> Result<IntMatrix> {
    if mask.cols != st.cols {
        return shape_err(format!("masked_sign_sum inner dims differ: {} vs {}", mask.cols, st.cols));
    }
    let (m, n) = (mask.rows, st.rows);
    let mut out = vec![0i32; m * n];
    for i in 0..m {
        let mr = mask.row_words(i);
        let selected: u32 = mr.iter().map(|w| w.count_ones()).sum();
        for j in 0..n {
            let both: u32 = mr.iter().zip(st.row_words(j)).map(|(x, y)| (x & y).count_ones()).sum();
            out[i * n + j] = 2 * both as i32 - selected as i32;
        }
    }
    Ok(IntMatrix { rows: m, cols: n, data: out })
}

/// Straightforward integer products over unpacked values; the independent
/// oracle the popcount kernels are checked against.
pub mod reference {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{binary_gemm, BitMatrix, IntMatrix};

    /// Outcome of [`oracle_sweep`].
    #[derive(Debug, Clone, PartialEq, Eq)]
    pub struct GemmSweep {
        pub cases: usize,
        /// `(m, k, n)` of every case whose output differed anywhere.
        pub mismatches: Vec<(usize, usize, usize)>,
    }

    impl GemmSweep {
        pub fn passed(&self) -> bool {
            self.mismatches.is_empty()
        }
    }

    /// Compares the popcount kernel with [`naive_sign_gemm`] on `cases`
    /// random sign matrices with every dimension in `1..=max_dim`.
    pub fn oracle_sweep(cases: usize, max_dim: usize, seed: u64) -> GemmSweep {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mismatches = Vec::new();
        for _ in 0..cases {
            let (m, k, n) =
                (rng.random_range(1..=max_dim), rng.random_range(1..=max_dim), rng.random_range(1..=max_dim));
            let a = BitMatrix::from_fn(m, k, |_, _| rng.random());
            let b = BitMatrix::from_fn(k, n, |_, _| rng.random());
            let fast = binary_gemm(&a, &b).expect("matching inner dims");
            if fast != naive_sign_gemm(&a, &b) {
                mismatches.push((m, k, n));
            }
        }
        GemmSweep { cases, mismatches }
    }

    /// Naive ±1 GEMM: `a: m×k`, `b: k×n`.
    pub fn naive_sign_gemm(a: &BitMatrix, b: &BitMatrix) -> IntMatrix {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        assert_eq!(k, b.rows());
        let av: Vec<i32> = (0..m * k).map(|i| a.sign(i / k, i % k)).collect();
        let bv: Vec<i32> = (0..k * n).map(|i| b.sign(i / n, i % n)).collect();
        let mut data = vec![0i32; m * n];
        for i in 0..m {
            for t in 0..k {
                let x = av[i * k + t];
                for j in 0..n {
                    data[i * n + j] += x * bv[t * n + j];
                }
            }
        }
        IntMatrix { rows: m, cols: n, data }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::reference::naive_sign_gemm;
    use super::*;

    fn random_bits(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> BitMatrix {
        BitMatrix::from_fn(rows, cols, |_, _| rng.random_bool(0.5))
    }

    #[test]
    fn pack_signs_hand_example() {
        let x = FloatTensor::from_rows(&[vec![0.5, -0.2], vec![0.0, -1.0]]).unwrap();
        let b = pack_signs(&x).unwrap();
        assert!(b.get(0, 0) && !b.get(0, 1) && b.get(1, 0) && !b.get(1, 1));
    }

    #[test]
    fn pack_all_positive() {
        let b = pack_signs(&FloatTensor::full(&[3, 3], 0.7)).unwrap();
        assert_eq!(b.count_ones(), 9);
    }

    #[test]
    fn pack_unpack_matches_elementwise_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = FloatTensor::matrix(64, 65, (0..64 * 65).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let u = pack_signs(&x).unwrap().unpack();
        for (a, b) in x.data().iter().zip(u.data()) {
            assert_eq!(*b, if *a >= 0.0 { 1.0 } else { -1.0 });
        }
    }

    #[test]
    fn pad_bits_stay_clear() {
        let b = pack_signs(&FloatTensor::full(&[2, 70], 1.0)).unwrap();
        assert_eq!(b.words_per_row(), 2);
        assert_eq!(b.row_words(1)[1], (1u64 << 6) - 1);
        assert!(BitMatrix::from_words(1, 3, vec![0b1000]).is_err());
    }

    #[test]
    fn element_maps_to_word_and_bit() {
        for &(r, c) in &[(0usize, 0usize), (1, 63), (2, 64), (0, 129)] {
            let mut m = BitMatrix::zeros(3, 130);
            m.set(r, c, true);
            let w = m.words()[r * m.words_per_row() + c / 64];
            assert_eq!(w, 1u64 << (c % 64));
            assert_eq!(m.count_ones(), 1);
        }
    }

    #[test]
    fn four_element_dot() {
        let a = BitMatrix::from_fn(1, 4, |_, c| c % 2 == 0); // + - + -
        let b = BitMatrix::from_fn(4, 1, |r, _| r < 2); // + + - -
        assert_eq!(binary_gemm(&a, &b).unwrap().data, vec![0]);
    }

    #[test]
    fn self_product_diagonal_is_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_bits(&mut rng, 9, 100);
        let out = binary_gemm_nt(&a, &a).unwrap();
        for i in 0..9 {
            assert_eq!(out.at(i, i), 100);
        }
    }

    #[test]
    fn small_sweep_matches() {
        let s = super::reference::oracle_sweep(50, 80, 1);
        assert!(s.passed(), "{:?}", s.mismatches);
        assert_eq!(s.cases, 50);
    }

    #[test]
    fn random_32x48x16_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_bits(&mut rng, 32, 48);
        let b = random_bits(&mut rng, 48, 16);
        assert_eq!(binary_gemm(&a, &b).unwrap(), naive_sign_gemm(&a, &b));
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let a = BitMatrix::zeros(2, 3);
        let b = BitMatrix::zeros(4, 2);
        assert!(binary_gemm(&a, &b).is_err());
    }

    #[test]
    fn masked_sum_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mask = random_bits(&mut rng, 7, 70);
        let s = random_bits(&mut rng, 3, 70);
        let out = masked_sign_sum(&mask, &s).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let want: i32 = (0..70).filter(|&t| mask.get(i, t)).map(|t| s.sign(j, t)).sum();
                assert_eq!(out.at(i, j), want);
            }
        }
    }

    proptest! {
        #[test]
        fn gemm_equals_oracle_with_range_and_parity(
            m in 1usize..40, k in 1usize..200, n in 1usize..40, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_bits(&mut rng, m, k);
            let b = random_bits(&mut rng, k, n);
            let out = binary_gemm(&a, &b).unwrap();
            prop_assert_eq!(&out, &naive_sign_gemm(&a, &b));
            for &v in &out.data {
                prop_assert!(v.unsigned_abs() as usize <= k);
                prop_assert_eq!((v - k as i32).rem_euclid(2), 0);
            }
        }

        #[test]
        fn unpack_repack_is_identity(rows in 1usize..10, cols in 1usize..150, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = random_bits(&mut rng, rows, cols);
            prop_assert_eq!(pack_signs(&b.unpack()).unwrap(), b);
        }
    }
}
