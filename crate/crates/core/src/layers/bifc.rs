//! Binary fully-connected layer: `RPReLU(BN(α·Rsign(X) ⊗ sign(W − μ)) + R(X))`.

use super::norm::{BatchNorm, BnCache};
use super::rprelu::RPReLU;
use super::shortcut::{self, ShortcutKind};
use super::Ctx;
use crate::bittensor::{binary_gemm_nt, pack_signs_slice};
use crate::error::{Error, Result};
use crate::param::{join, Param, StateMut, StateRef, Stateful};
use crate::quant::{binarize_weights, shift_channels, ste_backward, BinWeight, Quantizer};
use crate::tensor::{matmul, matmul_tn, to_storage, FloatTensor};

/// Binary weight with its optional full-precision latent copy.
///
/// `frozen` is what inference uses; it is re-derived from `latent` after
/// every optimizer step. Models loaded from a weight file carry only the
/// frozen form.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryWeight {
    /// `D_in × D_out` latent weights.
    pub latent: Option<Param>,
    pub frozen: BinWeight,
}

impl BinaryWeight {
    pub fn from_latent(w: FloatTensor) -> Result<Self> {
        let frozen = storage_binarize(&w)?;
        Ok(Self { latent: Some(Param::new(w)), frozen })
    }

    pub fn from_frozen(frozen: BinWeight) -> Self {
        Self { latent: None, frozen }
    }

    pub fn d_in(&self) -> usize {
        self.frozen.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.frozen.d_out()
    }

    /// Re-binarizes from the latent weights.
    pub fn refresh(&mut self) -> Result<()> {
        if let Some(p) = &self.latent {
            self.frozen = storage_binarize(&p.value)?;
        }
        Ok(())
    }

    fn latent(&self) -> Result<&Param> {
        self.latent
            .as_ref()
            .ok_or_else(|| Error::Internal("binary layer has no latent weights to differentiate".into()))
    }
}

fn storage_binarize(w: &FloatTensor) -> Result<BinWeight> {
    let mut b = binarize_weights(w)?;
    b.alpha = to_storage(b.alpha);
    b.mu.iter_mut().for_each(|m| *m = to_storage(*m));
    Ok(b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiFCLayer {
    pub weight: BinaryWeight,
    /// RSign threshold `β_X`, one per input channel.
    pub rsign_beta: Param,
    pub bn: BatchNorm,
    pub rprelu: RPReLU,
}

#[derive(Debug, Clone)]
pub struct BiFCCache {
    quant: Quantizer,
    /// `x + β`, the sign-site input.
    shifted: FloatTensor,
    bn: BnCache,
    /// RPReLU input.
    pre_act: FloatTensor,
}

impl BiFCLayer {
    pub fn new(weight: BinaryWeight) -> Result<Self> {
        let (d_in, d_out) = (weight.d_in(), weight.d_out());
        ShortcutKind::for_dims(d_in, d_out)?;
        Ok(Self {
            weight,
            rsign_beta: Param::filled(&[d_in], 0.0),
            bn: BatchNorm::new(d_out),
            rprelu: RPReLU::new(d_out),
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.weight.d_out()
    }

    fn shortcut_kind(&self) -> ShortcutKind {
        ShortcutKind::for_dims(self.d_in(), self.d_out()).expect("validated at construction")
    }

    /// `α · Rsign(x) ⊗ sign(W − μ)` for the shifted input.
    fn binary_product(&self, shifted: &FloatTensor, quant: Quantizer) -> Result<FloatTensor> {
        let w = &self.weight.frozen;
        match quant {
            Quantizer::Exact => {
                let xb = pack_signs_slice(shifted.data(), shifted.rows(), shifted.cols());
                Ok(binary_gemm_nt(&xb, &w.bits_t)?.scaled(w.alpha))
            }
            Quantizer::Surrogate => {
                let xq = shifted.map(|v| quant.sign(v));
                let wq = self.surrogate_weight()?;
                let mut y = matmul(&xq, &wq);
                y.data_mut().iter_mut().for_each(|v| *v *= w.alpha);
                Ok(y)
            }
        }
    }

    /// `clip(W − μ, −1, 1)` from the latent weights with frozen statistics.
    fn surrogate_weight(&self) -> Result<FloatTensor> {
        let w = self.weight.latent()?;
        let mu = &self.weight.frozen.mu;
        let d_out = self.d_out();
        let mut out = w.value.as_matrix();
        for row in out.data_mut().chunks_exact_mut(d_out) {
            for (v, m) in row.iter_mut().zip(mu) {
                *v = Quantizer::Surrogate.sign(*v - m);
            }
        }
        Ok(out)
    }

    pub fn forward(&self, x: &FloatTensor, ctx: Ctx) -> Result<(FloatTensor, BiFCCache)> {
        if x.cols() != self.d_in() {
            return Err(Error::Shape(format!("binary layer expects {} input channels, got {}", self.d_in(), x.cols())));
        }
        let shifted = shift_channels(x, self.rsign_beta.data())?;
        let y = self.binary_product(&shifted, ctx.quant)?;
        let (mut pre_act, bn) = self.bn.forward(&y, ctx)?;
        pre_act.add_assign(&shortcut::apply(self.shortcut_kind(), x, self.d_out()));
        let out = self.rprelu.forward(&pre_act)?;
        Ok((out, BiFCCache { quant: ctx.quant, shifted, bn, pre_act }))
    }

    /// Inference forward.
    pub fn apply(&self, x: &FloatTensor) -> Result<FloatTensor> {
        Ok(self.forward(x, Ctx::INFER)?.0)
    }

    pub fn backward(&mut self, cache: BiFCCache, dout: &FloatTensor) -> Result<FloatTensor> {
        let kind = self.shortcut_kind();
        let d_in = self.d_in();
        let quant = cache.quant;
        let ds = self.rprelu.backward(&cache.pre_act, dout);
        let mut dx = shortcut::backward(kind, &ds, d_in);
        let dy = self.bn.backward(cache.bn, &ds);

        let alpha = self.weight.frozen.alpha;
        // Quantized weights, D_in × D_out.
        let wq = match quant {
            Quantizer::Exact => self.weight.frozen.bits_t.unpack().transpose(),
            Quantizer::Surrogate => self.surrogate_weight()?,
        };
        let xq = cache.shifted.map(|v| quant.sign(v));

        let mut dwq = matmul_tn(&xq, &dy);
        dwq.data_mut().iter_mut().for_each(|v| *v *= alpha);
        let mu = self.weight.frozen.mu.clone();
        let d_out = self.d_out();
        let latent = self
            .weight
            .latent
            .as_mut()
            .ok_or_else(|| Error::Internal("binary layer has no latent weights to differentiate".into()))?;
        let wv = latent.value.data().to_vec();
        let g = latent.grad_mut();
        for (idx, (gv, d)) in g.iter_mut().zip(dwq.data()).enumerate() {
            *gv += ste_backward(wv[idx] - mu[idx % d_out], *d);
        }

        let dxq = matmul(&dy, &wq.transpose());
        let mut dbeta = vec![0.0; d_in];
        for ((dxr, dqr), sr) in dx
            .data_mut()
            .chunks_exact_mut(d_in)
            .zip(dxq.data().chunks_exact(d_in))
            .zip(cache.shifted.data().chunks_exact(d_in))
        {
            for j in 0..d_in {
                let d = ste_backward(sr[j], alpha * dqr[j]);
                dbeta[j] += d;
                dxr[j] += d;
            }
        }
        self.rsign_beta.accumulate(&dbeta);
        Ok(dx)
    }
}

impl Stateful for BiFCLayer {
    fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, StateRef<'a>)>) {
        out.push((join(prefix, "weight"), StateRef::Binary(&self.weight)));
        out.push((join(prefix, "rsign_beta"), StateRef::Param(&self.rsign_beta)));
        self.bn.state(&join(prefix, "bn"), out);
        self.rprelu.state(&join(prefix, "act"), out);
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, StateMut<'a>)>) {
        out.push((join(prefix, "weight"), StateMut::Binary(&mut self.weight)));
        out.push((join(prefix, "rsign_beta"), StateMut::Param(&mut self.rsign_beta)));
        self.bn.state_mut(&join(prefix, "bn"), out);
        self.rprelu.state_mut(&join(prefix, "act"), out);
    }
}

pub fn bifc_forward(x: &FloatTensor, layer: &BiFCLayer) -> Result<FloatTensor> {
    layer.apply(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bittensor::{binary_gemm, pack_signs};

    fn identity_layer(w: FloatTensor) -> BiFCLayer {
        let d_out = w.cols();
        let mut l = BiFCLayer::new(BinaryWeight::from_latent(w).unwrap()).unwrap();
        l.bn = BatchNorm::identity(d_out);
        l.rprelu = RPReLU::identity(d_out);
        l
    }

    #[test]
    fn hand_evaluated_two_by_two() {
        let w = FloatTensor::from_rows(&[vec![0.5, -0.5], vec![-0.5, 0.5]]).unwrap();
        let l = identity_layer(w);
        assert_eq!(l.weight.frozen.alpha, 0.5);
        let x = FloatTensor::matrix(1, 2, vec![0.4, -0.6]).unwrap();
        let out = bifc_forward(&x, &l).unwrap();
        assert!((out.data()[0] - 1.4).abs() < 1e-12 && (out.data()[1] + 1.6).abs() < 1e-12);
    }

    #[test]
    fn duplication_shortcut_shape() {
        let w = FloatTensor::full(&[2, 4], 0.1);
        let l = identity_layer(w);
        let x = FloatTensor::matrix(3, 2, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap();
        assert_eq!(bifc_forward(&x, &l).unwrap().shape(), &[3, 4]);
    }

    #[test]
    fn unrelated_widths_rejected() {
        let w = FloatTensor::full(&[3, 4], 0.1);
        assert!(matches!(BiFCLayer::new(BinaryWeight::from_latent(w).unwrap()), Err(Error::Config(_))));
    }

    #[test]
    fn identity_config_is_scaled_integer_gemm_plus_shortcut() {
        let w = FloatTensor::matrix(6, 3, (0..18).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.01).collect()).unwrap();
        let l = identity_layer(w);
        let x = FloatTensor::matrix(4, 6, (0..24).map(|i| ((i * 5 % 13) as f64 - 6.0) * 0.1).collect()).unwrap();
        let got = l.apply(&x).unwrap();
        let ints = binary_gemm(&pack_signs(&x).unwrap(), &l.weight.frozen.bits()).unwrap();
        let sc = shortcut_r_ref(&x, 6, 3);
        for i in 0..4 {
            for j in 0..3 {
                let want = l.weight.frozen.alpha * ints.at(i, j) as f64 + sc.at(i, j);
                assert_eq!(got.at(i, j), want);
            }
        }
    }

    fn shortcut_r_ref(x: &FloatTensor, ci: usize, co: usize) -> FloatTensor {
        super::super::shortcut_r(x, ci, co).unwrap()
    }
}
