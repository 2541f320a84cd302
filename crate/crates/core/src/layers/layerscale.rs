use crate::error::{shape_err, Result};
use crate::param::{join, Param, StateMut, StateRef, Stateful};
use crate::tensor::FloatTensor;

pub const LAYERSCALE_INIT: f64 = 0.1;

/// Per-channel scale and bias applied to a residual branch before the add:
/// `α ⊙ branch + β + skip`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerScale {
    pub alpha: Param,
    pub bias: Param,
}

impl LayerScale {
    pub fn new(channels: usize) -> Self {
        Self::with(channels, LAYERSCALE_INIT, 0.0)
    }

    pub fn with(channels: usize, alpha: f64, bias: f64) -> Self {
        Self { alpha: Param::filled(&[channels], alpha), bias: Param::filled(&[channels], bias) }
    }

    pub fn forward(&self, branch: &FloatTensor, skip: &FloatTensor) -> Result<FloatTensor> {
        let c = self.alpha.len();
        if branch.shape() != skip.shape() || branch.cols() != c {
            return shape_err(format!(
                "layerscale: branch {:?}, skip {:?}, {c} channels",
                branch.shape(),
                skip.shape()
            ));
        }
        let (a, b) = (self.alpha.data(), self.bias.data());
        let mut out = skip.clone();
        for (orow, brow) in out.data_mut().chunks_exact_mut(c).zip(branch.data().chunks_exact(c)) {
            for j in 0..c {
                orow[j] += a[j] * brow[j] + b[j];
            }
        }
        Ok(out)
    }

    /// Returns the branch gradient; the skip gradient is `dout` itself.
    pub fn backward(&mut self, branch: &FloatTensor, dout: &FloatTensor) -> FloatTensor {
        let c = self.alpha.len();
        let a = self.alpha.data().to_vec();
        let mut da = vec![0.0; c];
        let mut db = vec![0.0; c];
        let mut dbranch = dout.as_matrix();
        for (drow, brow) in dbranch.data_mut().chunks_exact_mut(c).zip(branch.data().chunks_exact(c)) {
            for j in 0..c {
                da[j] += drow[j] * brow[j];
                db[j] += drow[j];
                drow[j] *= a[j];
            }
        }
        self.alpha.accumulate(&da);
        self.bias.accumulate(&db);
        dbranch
    }
}

impl Stateful for LayerScale {
    fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, StateRef<'a>)>) {
        out.push((join(prefix, "alpha"), StateRef::Param(&self.alpha)));
        out.push((join(prefix, "bias"), StateRef::Param(&self.bias)));
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, StateMut<'a>)>) {
        out.push((join(prefix, "alpha"), StateMut::Param(&mut self.alpha)));
        out.push((join(prefix, "bias"), StateMut::Param(&mut self.bias)));
    }
}

pub fn layerscale_residual(branch: &FloatTensor, skip: &FloatTensor, p: &LayerScale) -> Result<FloatTensor> {
    p.forward(branch, skip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(v: &[f64]) -> FloatTensor {
        FloatTensor::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn zero_scale_passes_skip() {
        let p = LayerScale::with(2, 0.0, 0.0);
        let skip = m(&[1.25, -3.5]);
        assert_eq!(layerscale_residual(&m(&[9.0, 7.0]), &skip, &p).unwrap(), skip);
    }

    #[test]
    fn unit_scale_is_plain_residual() {
        let p = LayerScale::with(2, 1.0, 0.0);
        assert_eq!(layerscale_residual(&m(&[1.0, 2.0]), &m(&[3.0, 4.0]), &p).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn scalar_substitution() {
        let p = LayerScale::with(1, 2.0, 1.0);
        assert_eq!(layerscale_residual(&m(&[3.0]), &m(&[4.0]), &p).unwrap().data(), &[11.0]);
    }

    #[test]
    fn alpha_gradient_is_upstream_times_branch_summed() {
        let mut p = LayerScale::with(2, 0.5, 0.0);
        let branch = FloatTensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
        let up = FloatTensor::from_rows(&[vec![0.5, 1.0], vec![2.0, 4.0]]).unwrap();
        p.backward(&branch, &up);
        assert_eq!(p.alpha.grad, vec![6.5, -2.0]);
        assert_eq!(p.bias.grad, vec![2.5, 5.0]);
    }

    #[test]
    fn shape_mismatch() {
        let p = LayerScale::new(2);
        assert!(layerscale_residual(&m(&[1.0, 2.0]), &m(&[1.0]), &p).is_err());
    }
}
