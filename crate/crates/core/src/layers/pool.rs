//! Spatial pooling: the four stride-1 average-pool branches, `R×R`
//! non-overlapping pooling, and global average pooling.

use super::Grid;
use crate::error::{shape_err, Result};
use crate::tensor::FloatTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Axis {
    Height,
    Width,
}

/// Kernels of the multi-pooling block as (axis, length): 1×3, 3×1, 1×5, 5×1.
const BRANCHES: [(Axis, usize); 4] = [(Axis::Width, 3), (Axis::Height, 3), (Axis::Width, 5), (Axis::Height, 5)];

fn check_spatial(x: &FloatTensor, grid: Grid) -> Result<()> {
    if grid.cls {
        return shape_err("spatial pooling needs a token grid without a class token");
    }
    if grid.h == 0 || grid.w == 0 {
        return shape_err("spatial dims must be at least 1");
    }
    if x.rows() != grid.rows() {
        return shape_err(format!("{} rows do not match grid {:?}", x.rows(), grid));
    }
    Ok(())
}

/// Window `[lo, hi)` of a centred odd kernel at `i`, clipped to `[0, n)`.
#[inline]
fn window(i: usize, k: usize, n: usize) -> (usize, usize) {
    let half = k / 2;
    (i.saturating_sub(half), (i + half + 1).min(n))
}

/// One stride-1 average pool along `axis`, averaging valid elements only.
/// With `adjoint` set, applies the transposed operator instead.
fn pool_1d(x: &FloatTensor, out: &mut [f64], grid: Grid, axis: Axis, k: usize, adjoint: bool) {
    let c = x.cols();
    let (h, w) = (grid.h, grid.w);
    let src = x.data();
    for b in 0..grid.batch {
        let base = b * h * w;
        for i in 0..h {
            for j in 0..w {
                let (pos, n) = match axis {
                    Axis::Width => (j, w),
                    Axis::Height => (i, h),
                };
                let (lo, hi) = window(pos, k, n);
                let inv = 1.0 / (hi - lo) as f64;
                let o = base + i * w + j;
                for t in lo..hi {
                    let p = match axis {
                        Axis::Width => base + i * w + t,
                        Axis::Height => base + t * w + j,
                    };
                    if adjoint {
                        for ch in 0..c {
                            out[p * c + ch] += src[o * c + ch] * inv;
                        }
                    } else {
                        for ch in 0..c {
                            out[o * c + ch] += src[p * c + ch] * inv;
                        }
                    }
                }
            }
        }
    }
}

/// Sum of the four average-pool branches over a batch of spatial maps.
pub fn multi_pool_forward(x: &FloatTensor, grid: Grid) -> Result<FloatTensor> {
    check_spatial(x, grid)?;
    let mut out = FloatTensor::zeros(&[x.rows(), x.cols()]);
    for (axis, k) in BRANCHES {
        pool_1d(x, out.data_mut(), grid, axis, k, false);
    }
    Ok(out)
}

pub fn multi_pool_backward(dout: &FloatTensor, grid: Grid) -> FloatTensor {
    let mut dx = FloatTensor::zeros(&[dout.rows(), dout.cols()]);
    for (axis, k) in BRANCHES {
        pool_1d(dout, dx.data_mut(), grid, axis, k, true);
    }
    dx
}

/// Multi-pooling branches on one `H × W × C` map.
pub fn multi_pool_branches(x: &FloatTensor) -> Result<FloatTensor> {
    let [h, w, _c] = x.shape() else {
        return shape_err(format!("expected an H×W×C map, got {:?}", x.shape()));
    };
    let out = multi_pool_forward(x, Grid::spatial(1, *h, *w))?;
    out.reshape(x.shape().to_vec())
}

/// Single 1×k (`along_width`) or k×1 branch on one map, for inspection.
pub fn pool_branch(x: &FloatTensor, k: usize, along_width: bool) -> Result<FloatTensor> {
    let [h, w, _c] = x.shape() else {
        return shape_err(format!("expected an H×W×C map, got {:?}", x.shape()));
    };
    let grid = Grid::spatial(1, *h, *w);
    check_spatial(x, grid)?;
    let mut out = FloatTensor::zeros(x.shape());
    let axis = if along_width { Axis::Width } else { Axis::Height };
    pool_1d(x, out.data_mut(), grid, axis, k, false);
    Ok(out)
}

/// Non-overlapping `r × r` average pooling; returns the pooled grid.
pub fn avg_pool_r(x: &FloatTensor, grid: Grid, r: usize) -> Result<(FloatTensor, Grid)> {
    check_spatial(x, grid)?;
    if r == 0 || !grid.h.is_multiple_of(r) || !grid.w.is_multiple_of(r) {
        return shape_err(format!("reduction {r} does not divide grid {}x{}", grid.h, grid.w));
    }
    let (ph, pw) = (grid.h / r, grid.w / r);
    let c = x.cols();
    let out_grid = Grid::spatial(grid.batch, ph, pw);
    let mut out = vec![0.0; out_grid.rows() * c];
    let inv = 1.0 / (r * r) as f64;
    for b in 0..grid.batch {
        for i in 0..grid.h {
            for j in 0..grid.w {
                let src = x.row(b * grid.h * grid.w + i * grid.w + j);
                let o = (b * ph * pw + (i / r) * pw + j / r) * c;
                for (d, s) in out[o..o + c].iter_mut().zip(src) {
                    *d += s * inv;
                }
            }
        }
    }
    Ok((FloatTensor::matrix(out_grid.rows(), c, out)?, out_grid))
}

/// Adjoint of [`avg_pool_r`]; `grid` is the input (fine) grid.
pub fn avg_pool_r_backward(dout: &FloatTensor, grid: Grid, r: usize) -> FloatTensor {
    let (ph, pw) = (grid.h / r, grid.w / r);
    let c = dout.cols();
    let inv = 1.0 / (r * r) as f64;
    let mut dx = Vec::with_capacity(grid.rows() * c);
    for b in 0..grid.batch {
        for i in 0..grid.h {
            for j in 0..grid.w {
                let src = dout.row(b * ph * pw + (i / r) * pw + j / r);
                dx.extend(src.iter().map(|v| v * inv));
            }
        }
    }
    FloatTensor::matrix(grid.rows(), c, dx).expect("consistent dims")
}

/// Per-channel mean over the `N` tokens of a single `N × D` matrix.
pub fn global_avg_pool(tokens: &FloatTensor) -> Result<FloatTensor> {
    if tokens.rows() == 0 {
        return shape_err("global average pooling over zero tokens");
    }
    mean_pool_batched(tokens, 1, tokens.rows())
}

/// Per-image token means: `(batch·n) × D → batch × D`.
pub fn mean_pool_batched(x: &FloatTensor, batch: usize, n: usize) -> Result<FloatTensor> {
    if n == 0 || x.rows() != batch * n {
        return shape_err(format!("cannot pool {} rows as {batch} images of {n} tokens", x.rows()));
    }
    let c = x.cols();
    let mut out = vec![0.0; batch * c];
    for b in 0..batch {
        let dst = &mut out[b * c..(b + 1) * c];
        for t in 0..n {
            for (d, s) in dst.iter_mut().zip(x.row(b * n + t)) {
                *d += s;
            }
        }
        dst.iter_mut().for_each(|d| *d /= n as f64);
    }
    FloatTensor::matrix(batch, c, out)
}

pub fn mean_pool_backward(dout: &FloatTensor, n: usize) -> FloatTensor {
    let c = dout.cols();
    let mut dx = Vec::with_capacity(dout.rows() * n * c);
    for b in 0..dout.rows() {
        for _ in 0..n {
            dx.extend(dout.row(b).iter().map(|v| v / n as f64));
        }
    }
    FloatTensor::matrix(dout.rows() * n, c, dx).expect("consistent dims")
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn constant_map_gives_four_times_constant() {
        let x = FloatTensor::full(&[4, 6, 2], 1.5);
        let y = multi_pool_branches(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| (v - 6.0).abs() < 1e-12));
    }

    #[test]
    fn one_by_three_branch_on_a_row() {
        let x = FloatTensor::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let y = pool_branch(&x, 3, true).unwrap();
        assert_eq!(y.data(), &[1.5, 2.0, 2.5]);
    }

    #[test]
    fn kernels_larger_than_map_use_whole_extent() {
        let x = FloatTensor::new(vec![1, 2, 1], vec![1.0, 3.0]).unwrap();
        assert_eq!(pool_branch(&x, 5, true).unwrap().data(), &[2.0, 2.0]);
        // height 1: every K×1 branch is the identity
        assert_eq!(pool_branch(&x, 5, false).unwrap().data(), &[1.0, 3.0]);
    }

    #[test]
    fn empty_map_is_shape_error() {
        assert!(multi_pool_branches(&FloatTensor::zeros(&[0, 3, 1])).is_err());
    }

    #[test]
    fn gap_examples() {
        let x = FloatTensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.0, 4.0]);
        let one = FloatTensor::from_rows(&[vec![0.25, -7.0]]).unwrap();
        assert_eq!(global_avg_pool(&one).unwrap(), one);
        assert!(global_avg_pool(&FloatTensor::zeros(&[0, 2])).is_err());
    }

    #[test]
    fn gap_matches_direct_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = FloatTensor::matrix(196, 384, (0..196 * 384).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let g = global_avg_pool(&x).unwrap();
        for j in 0..384 {
            let m = (0..196).map(|i| x.at(i, j)).sum::<f64>() / 196.0;
            assert!((g.data()[j] - m).abs() < 1e-12);
        }
    }

    #[test]
    fn avg_pool_r_means_blocks() {
        let x = FloatTensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let (y, g) = avg_pool_r(&x, Grid::spatial(1, 2, 2), 2).unwrap();
        assert_eq!((g.h, g.w), (1, 1));
        assert_eq!(y.data(), &[3.0]);
        assert!(avg_pool_r(&x, Grid::spatial(1, 2, 2), 3).is_err());
    }

    proptest! {
        #[test]
        fn branches_are_linear(
            a in -3.0f64..3.0, b in -3.0f64..3.0,
            xs in proptest::collection::vec(-1.0f64..1.0, 30),
            ys in proptest::collection::vec(-1.0f64..1.0, 30),
        ) {
            let x = FloatTensor::new(vec![3, 5, 2], xs).unwrap();
            let y = FloatTensor::new(vec![3, 5, 2], ys).unwrap();
            let lhs = multi_pool_branches(&x.zip_map(&y, |u, v| a * u + b * v).unwrap()).unwrap();
            let fx = multi_pool_branches(&x).unwrap();
            let fy = multi_pool_branches(&y).unwrap();
            let rhs = fx.zip_map(&fy, |u, v| a * u + b * v).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }

        #[test]
        fn backward_is_adjoint(xs in proptest::collection::vec(-1.0f64..1.0, 40), ys in proptest::collection::vec(-1.0f64..1.0, 40)) {
            let grid = Grid::spatial(2, 4, 5);
            let x = FloatTensor::matrix(40, 1, xs).unwrap();
            let y = FloatTensor::matrix(40, 1, ys).unwrap();
            let dot = |a: &FloatTensor, b: &FloatTensor| a.data().iter().zip(b.data()).map(|(u, v)| u * v).sum::<f64>();
            let lhs = dot(&multi_pool_forward(&x, grid).unwrap(), &y);
            let rhs = dot(&x, &multi_pool_backward(&y, grid));
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
