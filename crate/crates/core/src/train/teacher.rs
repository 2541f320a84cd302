//! Small full-precision MLP used as the distillation teacher.

use crate::error::Result;
use crate::init::Init;
use crate::layers::Linear;
use crate::param::{join, StateMut, StateRef, Stateful};
use crate::tensor::{concat_rows, FloatTensor};

use super::data::{BatchSampler, SyntheticDataset};
use super::loss::cross_entropy;
use super::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    pub fc1: Linear,
    pub fc2: Linear,
}

fn flatten(images: &[&FloatTensor]) -> FloatTensor {
    let rows: Vec<FloatTensor> = images
        .iter()
        .map(|im| {
            let data = im.data().iter().map(|v| (v - 127.5) / 64.0).collect();
            FloatTensor::matrix(1, im.len(), data).expect("consistent dims")
        })
        .collect();
    concat_rows(&rows)
}

impl Teacher {
    pub fn new(inputs: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut init = Init::new(seed);
        Self { fc1: init.linear(inputs, hidden), fc2: init.linear(hidden, classes) }
    }

    fn forward(&self, x: &FloatTensor) -> Result<(FloatTensor, FloatTensor)> {
        let h = self.fc1.forward(x)?.map(|v| v.max(0.0));
        Ok((self.fc2.forward(&h)?, h))
    }

    pub fn logits(&self, images: &[&FloatTensor]) -> Result<FloatTensor> {
        Ok(self.forward(&flatten(images))?.0)
    }

    /// Trains on `data` with cross-entropy; deterministic given `seed`.
    pub fn train(data: &SyntheticDataset, hidden: usize, steps: usize, seed: u64) -> Result<Self> {
        let inputs = data.side * data.side * 3;
        let mut t = Teacher::new(inputs, hidden, data.classes, seed);
        let mut opt = Adam::new(AdamConfig::new(1e-3, steps));
        let mut sampler = BatchSampler::new(data.len(), 32, seed ^ 0x7eac);
        for _ in 0..steps {
            let idx = sampler.next_batch();
            let imgs: Vec<&FloatTensor> = idx.iter().map(|&i| &data.images[i]).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let x = flatten(&imgs);
            let (logits, h) = t.forward(&x)?;
            let (_, dlogits) = cross_entropy(&logits, &labels)?;
            t.fc1.weight.zero_grad();
            t.fc1.bias.zero_grad();
            t.fc2.weight.zero_grad();
            t.fc2.bias.zero_grad();
            let dh = t.fc2.backward(&h, &dlogits);
            let dh = dh.zip_map(&h, |d, a| if a > 0.0 { d } else { 0.0 })?;
            t.fc1.backward(&x, &dh);
            opt.update(&mut t);
        }
        Ok(t)
    }
}

impl Stateful for Teacher {
    fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, StateRef<'a>)>) {
        self.fc1.state(&join(prefix, "fc1"), out);
        self.fc2.state(&join(prefix, "fc2"), out);
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, StateMut<'a>)>) {
        self.fc1.state_mut(&join(prefix, "fc1"), out);
        self.fc2.state_mut(&join(prefix, "fc2"), out);
    }
}
