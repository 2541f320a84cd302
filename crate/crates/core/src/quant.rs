//! Quantizers and their straight-through gradients.

use crate::bittensor::{pack_signs_slice, BitMatrix};
use crate::error::{shape_err, Error, Result};
use crate::tensor::FloatTensor;

/// How quantization sites behave in the forward pass.
///
/// `Surrogate` swaps every `sign` for `clip(x, −1, 1)` and every rounding for
/// the identity, giving a piecewise-smooth network whose exact derivative is
/// the straight-through gradient. Gradient checks run in this mode; the
/// backward rules are shared by both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Quantizer {
    #[default]
    Exact,
    Surrogate,
}

impl Quantizer {
    #[inline]
    pub fn sign(self, x: f64) -> f64 {
        match self {
            Quantizer::Exact => {
                if x >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Quantizer::Surrogate => {
                crate::kink::observe(x.abs() - 1.0);
                x.clamp(-1.0, 1.0)
            }
        }
    }

    /// Quantized attention level for `v = p / α_P`, before rescaling.
    #[inline]
    pub fn prob_level(self, v: f64) -> f64 {
        let c = v.clamp(0.0, 1.0);
        match self {
            // f64::round rounds half away from zero.
            Quantizer::Exact => c.round(),
            Quantizer::Surrogate => {
                crate::kink::observe(v.abs().min((v - 0.5).abs()).min((v - 1.0).abs()));
                c
            }
        }
    }
}

/// Straight-through estimate of `d sign(x)/dx · upstream`: passes inside
/// `|x| ≤ 1`, zero outside.
#[inline]
pub fn ste_backward(x: f64, upstream: f64) -> f64 {
    if x.abs() <= 1.0 {
        upstream
    } else {
        0.0
    }
}

/// Learnable per-input-channel threshold of `sign(x + β)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RSignParams {
    pub beta: Vec<f64>,
}

impl RSignParams {
    pub fn zeros(channels: usize) -> Self {
        Self { beta: vec![0.0; channels] }
    }
}

/// `x + β` broadcast over rows.
pub(crate) fn shift_channels(x: &FloatTensor, beta: &[f64]) -> Result<FloatTensor> {
    if x.cols() != beta.len() {
        return shape_err(format!("rsign threshold has {} channels, input has {}", beta.len(), x.cols()));
    }
    let mut out = x.as_matrix();
    let c = beta.len();
    for row in out.data_mut().chunks_exact_mut(c.max(1)) {
        for (v, b) in row.iter_mut().zip(beta) {
            *v += b;
        }
    }
    Ok(out)
}

pub fn rsign(x: &FloatTensor, p: &RSignParams) -> Result<BitMatrix> {
    x.require_2d("rsign input")?;
    let s = shift_channels(x, &p.beta)?;
    Ok(pack_signs_slice(s.data(), s.rows(), s.cols()))
}

/// A binarized weight matrix `sign(W − μ(W))` with its L1 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct BinWeight {
    /// Signs stored transposed, `D_out × D_in`, so GEMM streams rows.
    pub bits_t: BitMatrix,
    pub alpha: f64,
    /// Per-output-column mean of the source weights.
    pub mu: Vec<f64>,
}

impl BinWeight {
    pub fn d_in(&self) -> usize {
        self.bits_t.cols()
    }

    pub fn d_out(&self) -> usize {
        self.bits_t.rows()
    }

    /// Logical `D_in × D_out` sign matrix.
    pub fn bits(&self) -> BitMatrix {
        self.bits_t.transpose()
    }
}

/// Binarizes `w: D_in × D_out` with column-mean centring and `α = mean|w|`.
pub fn binarize_weights(w: &FloatTensor) -> Result<BinWeight> {
    let (d_in, d_out) = w.require_2d("weight")?;
    if d_in == 0 || d_out == 0 {
        return shape_err("cannot binarize an empty weight matrix");
    }
    let mu: Vec<f64> = w.col_sums().into_iter().map(|s| s / d_in as f64).collect();
    let alpha = w.data().iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64;
    let mut bits_t = BitMatrix::zeros(d_out, d_in);
    for i in 0..d_in {
        for j in 0..d_out {
            if w.at(i, j) - mu[j] >= 0.0 {
                bits_t.set(j, i, true);
            }
        }
    }
    Ok(BinWeight { bits_t, alpha, mu })
}

/// Learnable rescaling of the rounded attention probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnProbScale {
    alpha_p: f64,
}

impl AttnProbScale {
    pub fn new(alpha_p: f64) -> Result<Self> {
        if alpha_p > 0.0 && alpha_p.is_finite() {
            Ok(Self { alpha_p })
        } else {
            Err(Error::Param(format!("attention scale must be positive, got {alpha_p}")))
        }
    }

    pub fn get(self) -> f64 {
        self.alpha_p
    }
}

/// `α_P · round(clip(p / α_P, 0, 1))`; every output is `0` or `α_P`.
pub fn quantize_attention_probs(probs: &FloatTensor, s: AttnProbScale) -> FloatTensor {
    quantize_probs_with(probs, s.get(), Quantizer::Exact)
}

pub(crate) fn quantize_probs_with(probs: &FloatTensor, alpha: f64, q: Quantizer) -> FloatTensor {
    probs.map(|p| alpha * q.prob_level(p / alpha))
}

/// LSQ gradient scale for one attention matrix with `n` entries.
pub fn lsq_grad_scale(n: usize) -> f64 {
    1.0 / (n.max(1) as f64).sqrt()
}

/// Raw `dL/dα_P` contribution of one element: `q(v) − v·1[0<v<1]`.
#[inline]
pub(crate) fn attn_scale_local(p: f64, alpha: f64, q: Quantizer) -> f64 {
    let v = p / alpha;
    let inside = if v > 0.0 && v < 1.0 { v } else { 0.0 };
    q.prob_level(v) - inside
}

/// `dL/dα_P` under the straight-through rule, scaled by the LSQ factor
/// `1/sqrt(#entries)`.
pub fn attn_scale_gradient(probs: &FloatTensor, s: AttnProbScale, upstream: &FloatTensor) -> Result<f64> {
    if probs.shape() != upstream.shape() {
        return shape_err("attention gradient shapes differ");
    }
    let raw: f64 = probs
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&p, &g)| g * attn_scale_local(p, s.get(), Quantizer::Exact))
        .sum();
    Ok(raw * lsq_grad_scale(probs.len()))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::bittensor::pack_signs;

    fn row(v: &[f64]) -> FloatTensor {
        FloatTensor::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn rsign_adds_threshold_first() {
        let b = rsign(&row(&[-0.5, 0.2]), &RSignParams { beta: vec![0.3, 0.3] }).unwrap();
        assert_eq!(b.unpack().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn rsign_at_negative_threshold_is_positive() {
        let b = rsign(&row(&[-0.3, 0.7]), &RSignParams { beta: vec![0.3, -0.7] }).unwrap();
        assert_eq!(b.unpack().data(), &[1.0, 1.0]);
    }

    #[test]
    fn rsign_channel_mismatch() {
        assert!(rsign(&row(&[1.0, 2.0]), &RSignParams::zeros(3)).is_err());
    }

    #[test]
    fn binarize_hand_example() {
        let w = FloatTensor::from_rows(&[vec![0.6, -0.3], vec![0.3, 0.1]]).unwrap();
        let b = binarize_weights(&w).unwrap();
        assert!((b.mu[0] - 0.45).abs() < 1e-12 && (b.mu[1] + 0.10).abs() < 1e-12);
        assert!((b.alpha - 0.325).abs() < 1e-12);
        assert_eq!(b.bits().unpack().data(), &[1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn binarize_symmetric_weights() {
        let w = FloatTensor::from_rows(&[vec![0.2, -0.2], vec![-0.2, 0.2]]).unwrap();
        let b = binarize_weights(&w).unwrap();
        assert!((b.alpha - 0.2).abs() < 1e-15);
        assert_eq!(b.bits().unpack(), pack_signs(&w).unwrap().unpack());
    }

    #[test]
    fn binarize_empty_fails() {
        assert!(binarize_weights(&FloatTensor::zeros(&[0, 3])).is_err());
    }

    #[test]
    fn ste_cases() {
        assert_eq!(ste_backward(0.5, 3.0), 3.0);
        assert_eq!(ste_backward(2.0, 3.0), 0.0);
        assert_eq!(ste_backward(-1.0, 3.0), 3.0);
    }

    #[test]
    fn quantize_examples() {
        let s = AttnProbScale::new(0.5).unwrap();
        assert_eq!(quantize_attention_probs(&row(&[0.7, 0.2, 0.1]), s).data(), &[0.5, 0.0, 0.0]);
        let one = AttnProbScale::new(1.0).unwrap();
        assert_eq!(quantize_attention_probs(&row(&[0.6, 0.3, 0.1]), one).data(), &[1.0, 0.0, 0.0]);
        assert_eq!(quantize_attention_probs(&row(&[0.5, 0.5]), one).data(), &[1.0, 1.0]);
    }

    #[test]
    fn nonpositive_scale_rejected() {
        assert!(AttnProbScale::new(0.0).is_err());
        assert!(AttnProbScale::new(-1.0).is_err());
    }

    #[test]
    fn scale_gradient_examples() {
        let s = AttnProbScale::new(1.0).unwrap();
        // v = 0.6: 1 − 0.6, then LSQ scale 1/sqrt(1).
        let g = attn_scale_gradient(&row(&[0.6]), s, &row(&[1.0])).unwrap();
        assert!((g - 0.4).abs() < 1e-12);
        // v at 0 or ≥ 1: derivative is the rounded value.
        let g = attn_scale_gradient(&row(&[0.0, 1.0]), s, &row(&[1.0, 1.0])).unwrap();
        assert!((g - 1.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn scale_gradient_matches_finite_difference_of_surrogate() {
        let probs = row(&[0.13, 0.42, 0.07, 0.38]);
        let up = row(&[0.3, -1.2, 0.8, 0.5]);
        let alpha = 0.61;
        let f = |a: f64| -> f64 {
            quantize_probs_with(&probs, a, Quantizer::Surrogate).data().iter().zip(up.data()).map(|(x, g)| x * g).sum()
        };
        let h = 1e-6;
        let fd = (f(alpha + h) - f(alpha - h)) / (2.0 * h);
        let analytic: f64 = probs
            .data()
            .iter()
            .zip(up.data())
            .map(|(&p, &g)| g * attn_scale_local(p, alpha, Quantizer::Surrogate))
            .sum();
        assert!((fd - analytic).abs() < 1e-5, "{fd} vs {analytic}");
    }

    proptest! {
        #[test]
        fn zero_threshold_rsign_is_plain_packing(v in proptest::collection::vec(-2.0f64..2.0, 1..100)) {
            let x = row(&v);
            prop_assert_eq!(rsign(&x, &RSignParams::zeros(v.len())).unwrap(), pack_signs(&x).unwrap());
        }

        #[test]
        fn quantized_values_and_idempotence(v in proptest::collection::vec(0.0f64..1.0, 1..50), a in 0.01f64..2.0) {
            let s = AttnProbScale::new(a).unwrap();
            let once = quantize_attention_probs(&row(&v), s);
            prop_assert!(once.data().iter().all(|&x| x == 0.0 || x == a));
            prop_assert_eq!(quantize_attention_probs(&once, s), once);
        }

        #[test]
        fn ste_is_clipped_passthrough(x in -3.0f64..3.0, g in -5.0f64..5.0, h in -5.0f64..5.0) {
            let d = ste_backward(x, g) - ste_backward(x, h);
            prop_assert!(d.abs() <= (g - h).abs());
            if x.abs() > 1.0 { prop_assert_eq!(ste_backward(x, g), 0.0); }
        }

        #[test]
        fn alpha_is_mean_abs(v in proptest::collection::vec(-3.0f64..3.0, 1..60), d_out in 1usize..6) {
            let d_in = v.len().div_ceil(d_out);
            let mut data = v.clone();
            data.resize(d_in * d_out, 0.25);
            let w = FloatTensor::matrix(d_in, d_out, data.clone()).unwrap();
            let mean = data.iter().map(|x| x.abs()).sum::<f64>() / data.len() as f64;
            prop_assert!((binarize_weights(&w).unwrap().alpha - mean).abs() < 1e-12);
        }

        #[test]
        fn centred_columns_have_zero_mean(v in proptest::collection::vec(-1.0f64..1.0, 12)) {
            let w = FloatTensor::matrix(4, 3, v).unwrap();
            let b = binarize_weights(&w).unwrap();
            for j in 0..3 {
                let m: f64 = (0..4).map(|i| w.at(i, j) - b.mu[j]).sum::<f64>() / 4.0;
                prop_assert!(m.abs() < 1e-9);
            }
        }
    }
}
