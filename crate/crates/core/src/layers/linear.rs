use crate::error::{shape_err, Result};
use crate::param::{join, Param, StateMut, StateRef, Stateful};
use crate::tensor::{matmul, matmul_nt, matmul_tn, FloatTensor};

/// Full-precision affine layer `x·W + b` with `W: D_in × D_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(weight: FloatTensor, bias: Vec<f64>) -> Result<Self> {
        let (_, d_out) = weight.require_2d("linear weight")?;
        if bias.len() != d_out {
            return shape_err("linear bias length differs from output width");
        }
        Ok(Self { weight: Param::new(weight), bias: Param::new(FloatTensor::new(vec![d_out], bias)?) })
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        if x.cols() != self.d_in() {
            return shape_err(format!("linear expects {} inputs, got {}", self.d_in(), x.cols()));
        }
        let mut y = matmul(&x.as_matrix(), &self.weight.value);
        let b = self.bias.data();
        for row in y.data_mut().chunks_exact_mut(b.len()) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &FloatTensor, dy: &FloatTensor) -> FloatTensor {
        let dw = matmul_tn(&x.as_matrix(), dy);
        self.weight.accumulate(dw.data());
        self.bias.accumulate(&dy.col_sums());
        matmul_nt(dy, &self.weight.value)
    }
}

impl Stateful for Linear {
    fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, StateRef<'a>)>) {
        out.push((join(prefix, "weight"), StateRef::Param(&self.weight)));
        out.push((join(prefix, "bias"), StateRef::Param(&self.bias)));
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, StateMut<'a>)>) {
        out.push((join(prefix, "weight"), StateMut::Param(&mut self.weight)));
        out.push((join(prefix, "bias"), StateMut::Param(&mut self.bias)));
    }
}
