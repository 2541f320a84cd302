//! The channel-matching residual of a binary layer: identity, n-fold
//! concatenation, or the mean over n contiguous channel chunks.

use crate::error::{Error, Result};
use crate::tensor::FloatTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShortcutKind {
    Identity,
    Duplicate(usize),
    ChunkMean(usize),
}

impl ShortcutKind {
    pub fn for_dims(c_in: usize, c_out: usize) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::Config("zero-width layer".into()));
        }
        if c_in == c_out {
            Ok(Self::Identity)
        } else if c_out.is_multiple_of(c_in) {
            Ok(Self::Duplicate(c_out / c_in))
        } else if c_in.is_multiple_of(c_out) {
            Ok(Self::ChunkMean(c_in / c_out))
        } else {
            Err(Error::Config(format!(
                "no integer relation between input width {c_in} and output width {c_out} for the residual shortcut"
            )))
        }
    }
}

pub fn shortcut_r(x: &FloatTensor, c_in: usize, c_out: usize) -> Result<FloatTensor> {
    let kind = ShortcutKind::for_dims(c_in, c_out)?;
    if x.cols() != c_in {
        return Err(Error::Shape(format!("shortcut expects {c_in} channels, got {}", x.cols())));
    }
    Ok(apply(kind, x, c_out))
}

pub(crate) fn apply(kind: ShortcutKind, x: &FloatTensor, c_out: usize) -> FloatTensor {
    let rows = x.rows();
    match kind {
        ShortcutKind::Identity => x.as_matrix(),
        ShortcutKind::Duplicate(n) => {
            let mut data = Vec::with_capacity(rows * c_out);
            for r in 0..rows {
                for _ in 0..n {
                    data.extend_from_slice(x.row(r));
                }
            }
            FloatTensor::matrix(rows, c_out, data).expect("consistent dims")
        }
        ShortcutKind::ChunkMean(n) => {
            let mut data = vec![0.0; rows * c_out];
            let inv = 1.0 / n as f64;
            for r in 0..rows {
                let src = x.row(r);
                let dst = &mut data[r * c_out..(r + 1) * c_out];
                for chunk in src.chunks_exact(c_out) {
                    for (d, s) in dst.iter_mut().zip(chunk) {
                        *d += s;
                    }
                }
                dst.iter_mut().for_each(|d| *d *= inv);
            }
            FloatTensor::matrix(rows, c_out, data).expect("consistent dims")
        }
    }
}

/// Adjoint of [`apply`].
pub(crate) fn backward(kind: ShortcutKind, dout: &FloatTensor, c_in: usize) -> FloatTensor {
    let rows = dout.rows();
    match kind {
        ShortcutKind::Identity => dout.as_matrix(),
        ShortcutKind::Duplicate(_) => {
            let mut data = vec![0.0; rows * c_in];
            for r in 0..rows {
                let dst = &mut data[r * c_in..(r + 1) * c_in];
                for chunk in dout.row(r).chunks_exact(c_in) {
                    for (d, s) in dst.iter_mut().zip(chunk) {
                        *d += s;
                    }
                }
            }
            FloatTensor::matrix(rows, c_in, data).expect("consistent dims")
        }
        ShortcutKind::ChunkMean(n) => {
            let inv = 1.0 / n as f64;
            let mut data = Vec::with_capacity(rows * c_in);
            for r in 0..rows {
                for _ in 0..n {
                    data.extend(dout.row(r).iter().map(|v| v * inv));
                }
            }
            FloatTensor::matrix(rows, c_in, data).expect("consistent dims")
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn row(v: &[f64]) -> FloatTensor {
        FloatTensor::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn three_cases() {
        let x = row(&[1.0, 2.0]);
        assert_eq!(shortcut_r(&x, 2, 2).unwrap(), x);
        assert_eq!(shortcut_r(&x, 2, 4).unwrap().data(), &[1.0, 2.0, 1.0, 2.0]);
        assert_eq!(shortcut_r(&row(&[1.0, 2.0, 3.0, 4.0]), 4, 2).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn unrelated_widths_are_config_errors() {
        assert!(matches!(shortcut_r(&row(&[0.0; 3]), 3, 4), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn duplication_preserves_mean_magnitude(v in proptest::collection::vec(-5.0f64..5.0, 1..20), n in 2usize..5) {
            let c = v.len();
            let out = shortcut_r(&row(&v), c, n * c).unwrap();
            let m_in = v.iter().map(|x| x.abs()).sum::<f64>() / c as f64;
            let m_out = out.data().iter().map(|x| x.abs()).sum::<f64>() / (n * c) as f64;
            prop_assert!((m_in - m_out).abs() < 1e-12);
        }

        #[test]
        fn backward_is_adjoint(v in proptest::collection::vec(-1.0f64..1.0, 12), u in proptest::collection::vec(-1.0f64..1.0, 12)) {
            // <R x, y> == <x, Rᵀ y> for each kind with 12 ↔ {12, 4} channels
            for (ci, co) in [(12usize, 12usize), (12, 4)] {
                let kind = ShortcutKind::for_dims(ci, co).unwrap();
                let x = row(&v[..ci]);
                let y = row(&u[..co]);
                let lhs: f64 = apply(kind, &x, co).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                let rhs: f64 = backward(kind, &y, ci).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
                prop_assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }
}
