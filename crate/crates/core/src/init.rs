//! Seeded parameter initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::layers::{BiFCLayer, BinaryWeight, Linear};
use crate::tensor::{to_storage, FloatTensor};

pub const INIT_STD: f64 = 0.02;

pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Normal samples redrawn until they fall within two standard
    /// deviations, rounded to storage precision.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> FloatTensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = self.rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break to_storage(z * std);
                }
            })
            .collect();
        FloatTensor::new(shape.to_vec(), data).expect("shape product matches")
    }

    pub fn linear(&mut self, d_in: usize, d_out: usize) -> Linear {
        Linear::new(self.trunc_normal(&[d_in, d_out], INIT_STD), vec![0.0; d_out]).expect("consistent dims")
    }

    pub fn bifc(&mut self, d_in: usize, d_out: usize) -> Result<BiFCLayer> {
        let w = self.trunc_normal(&[d_in, d_out], INIT_STD);
        BiFCLayer::new(BinaryWeight::from_latent(w)?)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
