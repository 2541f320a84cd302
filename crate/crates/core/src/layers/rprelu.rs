use crate::error::{shape_err, Result};
use crate::param::{join, Param, StateMut, StateRef, Stateful};
use crate::tensor::FloatTensor;

/// Shifted PReLU: `(x−γ)+ζ` above the kink at `γ`, `slope·(x−γ)+ζ` below.
#[derive(Debug, Clone, PartialEq)]
pub struct RPReLU {
    pub gamma: Param,
    pub zeta: Param,
    pub slope: Param,
}

pub const RPRELU_INIT_SLOPE: f64 = 0.25;

impl RPReLU {
    pub fn new(channels: usize) -> Self {
        Self::with(channels, 0.0, 0.0, RPRELU_INIT_SLOPE)
    }

    pub fn identity(channels: usize) -> Self {
        Self::with(channels, 0.0, 0.0, 1.0)
    }

    pub fn with(channels: usize, gamma: f64, zeta: f64, slope: f64) -> Self {
        Self {
            gamma: Param::filled(&[channels], gamma),
            zeta: Param::filled(&[channels], zeta),
            slope: Param::filled(&[channels], slope),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        let c = self.channels();
        if x.cols() != c {
            return shape_err(format!("rprelu has {c} channels, input has {}", x.cols()));
        }
        let (g, z, s) = (self.gamma.data(), self.zeta.data(), self.slope.data());
        let mut out = x.as_matrix();
        for row in out.data_mut().chunks_exact_mut(c) {
            for j in 0..c {
                let d = row[j] - g[j];
                crate::kink::observe(d);
                row[j] = if d > 0.0 { d } else { s[j] * d } + z[j];
            }
        }
        Ok(out)
    }

    /// `x` is the forward input.
    pub fn backward(&mut self, x: &FloatTensor, dout: &FloatTensor) -> FloatTensor {
        let c = self.channels();
        let g = self.gamma.data().to_vec();
        let s = self.slope.data().to_vec();
        let mut dg = vec![0.0; c];
        let mut dz = vec![0.0; c];
        let mut ds = vec![0.0; c];
        let mut dx = dout.as_matrix();
        for (dr, xr) in dx.data_mut().chunks_exact_mut(c).zip(x.data().chunks_exact(c)) {
            for j in 0..c {
                let d = xr[j] - g[j];
                let up = dr[j];
                let local = if d > 0.0 { 1.0 } else { s[j] };
                dz[j] += up;
                dg[j] -= local * up;
                if d <= 0.0 {
                    ds[j] += d * up;
                }
                dr[j] = local * up;
            }
        }
        self.gamma.accumulate(&dg);
        self.zeta.accumulate(&dz);
        self.slope.accumulate(&ds);
        dx
    }
}

impl Stateful for RPReLU {
    fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, StateRef<'a>)>) {
        out.push((join(prefix, "gamma"), StateRef::Param(&self.gamma)));
        out.push((join(prefix, "zeta"), StateRef::Param(&self.zeta)));
        out.push((join(prefix, "slope"), StateRef::Param(&self.slope)));
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, StateMut<'a>)>) {
        out.push((join(prefix, "gamma"), StateMut::Param(&mut self.gamma)));
        out.push((join(prefix, "zeta"), StateMut::Param(&mut self.zeta)));
        out.push((join(prefix, "slope"), StateMut::Param(&mut self.slope)));
    }
}

pub fn rprelu(x: &FloatTensor, p: &RPReLU) -> Result<FloatTensor> {
    p.forward(x)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn col(v: &[f64]) -> FloatTensor {
        FloatTensor::matrix(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn degenerate_is_identity() {
        let x = col(&[-3.0, 0.0, 2.5]);
        assert_eq!(rprelu(&x, &RPReLU::identity(1)).unwrap(), x);
    }

    #[test]
    fn default_slope_examples() {
        let y = rprelu(&col(&[2.0, -4.0]), &RPReLU::new(1)).unwrap();
        assert_eq!(y.data(), &[2.0, -1.0]);
    }

    #[test]
    fn kink_value_is_zeta() {
        let p = RPReLU::with(1, 0.75, -0.25, 0.1);
        assert_eq!(rprelu(&col(&[0.75]), &p).unwrap().data(), &[-0.25]);
    }

    proptest! {
        #[test]
        fn continuous_with_one_kink(g in -2.0f64..2.0, z in -2.0f64..2.0, s in -1.0f64..1.0) {
            let p = RPReLU::with(1, g, z, s);
            // parameters live on the f32 grid
            let (g, s) = (p.gamma.data()[0], p.slope.data()[0]);
            let eps = 1e-9;
            let y = rprelu(&col(&[g - eps, g, g + eps]), &p).unwrap();
            prop_assert!((y.data()[0] - y.data()[1]).abs() < 1e-8);
            prop_assert!((y.data()[2] - y.data()[1]).abs() < 1e-8);
            // linear on each side
            let far = rprelu(&col(&[g + 1.0, g + 2.0, g - 1.0, g - 2.0]), &p).unwrap();
            prop_assert!((far.data()[1] - far.data()[0] - 1.0).abs() < 1e-9);
            prop_assert!((far.data()[2] - far.data()[3] - s).abs() < 1e-9);
        }
    }
}
