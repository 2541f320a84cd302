//! Deterministic synthetic image classification: ten classes of
//! geometric patterns with random phase, frequency, placement, colors and
//! pixel noise.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::FloatTensor;

pub const NUM_PATTERNS: usize = 10;

/// Foreground colors, drawn independently of the class.
const PALETTE: [[f64; 3]; NUM_PATTERNS] = [
    [230.0, 60.0, 60.0],
    [60.0, 200.0, 70.0],
    [70.0, 90.0, 230.0],
    [220.0, 210.0, 60.0],
    [200.0, 70.0, 210.0],
    [60.0, 210.0, 210.0],
    [240.0, 150.0, 40.0],
    [150.0, 150.0, 150.0],
    [120.0, 60.0, 30.0],
    [240.0, 240.0, 240.0],
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// `side × side × 3` images with values in `[0, 255]`.
    pub images: Vec<FloatTensor>,
    pub labels: Vec<usize>,
    pub side: usize,
    pub classes: usize,
}

/// Foreground coverage in `[0, 1]` of class `c` at normalized `(u, v)`.
fn pattern(c: usize, u: f64, v: f64, freq: f64, phase: f64, cx: f64, cy: f64, radius: f64) -> f64 {
    let stripe = |t: f64| if (2.0 * PI * freq * t + phase).sin() > 0.0 { 1.0 } else { 0.0 };
    let r = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
    match c {
        0 => stripe(v),
        1 => stripe(u),
        2 => stripe((u + v) / 2.0),
        3 => stripe((u - v) / 2.0),
        4 => {
            let a = (2.0 * PI * freq * u / 2.0 + phase).sin();
            let b = (2.0 * PI * freq * v / 2.0).sin();
            if a * b > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        5 => {
            if r < radius {
                1.0
            } else {
                0.0
            }
        }
        6 => {
            if (r - radius).abs() < 0.08 {
                1.0
            } else {
                0.0
            }
        }
        7 => u,
        8 => v,
        _ => {
            // four quadrant blocks with the main diagonal lit
            let q = (u > cx) == (v > cy);
            if q {
                1.0
            } else {
                0.0
            }
        }
    }
}

impl SyntheticDataset {
    /// `n` balanced samples (label `i mod classes`) of size `side × side`.
    pub fn generate(n: usize, side: usize, classes: usize, seed: u64) -> Result<Self> {
        if classes == 0 || classes > NUM_PATTERNS {
            return Err(Error::Input(format!("synthetic task supports 1..={NUM_PATTERNS} classes")));
        }
        if side < 4 {
            return Err(Error::Input("synthetic images need a side of at least 4".into()));
        }
        let noise = Normal::new(0.0, 12.0).expect("valid normal");
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let c = i % classes;
            let freq = rng.random_range(2.5..4.5);
            let phase = rng.random_range(0.0..2.0 * PI);
            let cx = rng.random_range(0.35..0.65);
            let cy = rng.random_range(0.35..0.65);
            let radius = rng.random_range(0.2..0.32);
            let fg: Vec<f64> =
                PALETTE[rng.random_range(0..NUM_PATTERNS)].iter().map(|v| v + rng.random_range(-25.0..25.0)).collect();
            let bg: Vec<f64> = (0..3).map(|_| rng.random_range(10.0..90.0)).collect();
            let mut data = Vec::with_capacity(side * side * 3);
            for y in 0..side {
                for x in 0..side {
                    let (u, v) = ((x as f64 + 0.5) / side as f64, (y as f64 + 0.5) / side as f64);
                    let m = pattern(c, u, v, freq, phase, cx, cy, radius);
                    for ch in 0..3 {
                        let px = bg[ch] + m * (fg[ch] - bg[ch]) + noise.sample(&mut rng);
                        data.push(px.clamp(0.0, 255.0).round());
                    }
                }
            }
            images.push(FloatTensor::new(vec![side, side, 3], data)?);
            labels.push(c);
        }
        Ok(Self { images, labels, side, classes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Reshuffles every epoch and yields index batches of a fixed size.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { rng, order, pos: 0, batch: batch.min(n).max(1) }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = SyntheticDataset::generate(40, 32, 10, 5).unwrap();
        assert_eq!(a, SyntheticDataset::generate(40, 32, 10, 5).unwrap());
        assert_ne!(a.images, SyntheticDataset::generate(40, 32, 10, 6).unwrap().images);
        for c in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 4);
        }
        assert!(a.images.iter().all(|im| im.data().iter().all(|&v| (0.0..=255.0).contains(&v))));
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 5, 1);
        let mut seen: Vec<usize> = s.next_batch();
        seen.extend(s.next_batch());
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
