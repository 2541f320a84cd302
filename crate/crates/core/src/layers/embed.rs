//! Non-overlapping patch embeddings (stem and between-stage downsampling).

use serde::{Deserialize, Serialize};

use super::bifc::{BiFCCache, BiFCLayer};
use super::linear::Linear;
use super::{Ctx, Grid};
use crate::error::{shape_err, Result};
use crate::param::{join, StateMut, StateRef, Stateful};
use crate::tensor::FloatTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Full,
    Binary,
}

/// Regroups `P × P` patches: `(B·H·W) × C → (B·H/P·W/P) × (P²·C)`.
/// Features of a patch are ordered (row-in-patch, column-in-patch, channel).
pub fn patchify(x: &FloatTensor, grid: Grid, p: usize) -> Result<(FloatTensor, Grid)> {
    if grid.cls {
        return shape_err("cannot patchify a sequence with a class token");
    }
    if p == 0 || !grid.h.is_multiple_of(p) || !grid.w.is_multiple_of(p) {
        return shape_err(format!("patch size {p} does not divide {}x{}", grid.h, grid.w));
    }
    if x.rows() != grid.rows() {
        return shape_err(format!("{} rows do not match grid {:?}", x.rows(), grid));
    }
    let c = x.cols();
    let out_grid = Grid::spatial(grid.batch, grid.h / p, grid.w / p);
    let mut data = Vec::with_capacity(x.len());
    for b in 0..grid.batch {
        for i in 0..out_grid.h {
            for j in 0..out_grid.w {
                for py in 0..p {
                    for px in 0..p {
                        let r = b * grid.h * grid.w + (i * p + py) * grid.w + (j * p + px);
                        data.extend_from_slice(x.row(r));
                    }
                }
            }
        }
    }
    Ok((FloatTensor::matrix(out_grid.rows(), p * p * c, data)?, out_grid))
}

/// Inverse permutation of [`patchify`]; `grid` is the fine grid.
pub fn unpatchify(patches: &FloatTensor, grid: Grid, p: usize) -> FloatTensor {
    let c = patches.cols() / (p * p);
    let (oh, ow) = (grid.h / p, grid.w / p);
    let mut out = FloatTensor::zeros(&[grid.rows(), c]);
    for b in 0..grid.batch {
        for i in 0..oh {
            for j in 0..ow {
                let src = patches.row(b * oh * ow + i * ow + j);
                for py in 0..p {
                    for px in 0..p {
                        let r = b * grid.h * grid.w + (i * p + py) * grid.w + (j * p + px);
                        let off = (py * p + px) * c;
                        out.row_mut(r).copy_from_slice(&src[off..off + c]);
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Full(Linear),
    Binary(BiFCLayer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbed {
    pub patch: usize,
    pub proj: Projection,
}

#[derive(Debug, Clone)]
pub struct EmbedCache {
    in_grid: Grid,
    patches: FloatTensor,
    binary: Option<BiFCCache>,
}

impl PatchEmbed {
    pub fn out_dim(&self) -> usize {
        match &self.proj {
            Projection::Full(l) => l.d_out(),
            Projection::Binary(l) => l.d_out(),
        }
    }

    pub fn precision(&self) -> Precision {
        match self.proj {
            Projection::Full(_) => Precision::Full,
            Projection::Binary(_) => Precision::Binary,
        }
    }

    pub fn forward(&self, x: &FloatTensor, grid: Grid, ctx: Ctx) -> Result<(FloatTensor, Grid, EmbedCache)> {
        let (patches, out_grid) = patchify(x, grid, self.patch)?;
        let (out, binary) = match &self.proj {
            Projection::Full(l) => (l.forward(&patches)?, None),
            Projection::Binary(l) => {
                let (o, c) = l.forward(&patches, ctx)?;
                (o, Some(c))
            }
        };
        Ok((out, out_grid, EmbedCache { in_grid: grid, patches, binary }))
    }

    pub fn backward(&mut self, cache: EmbedCache, dout: &FloatTensor) -> Result<FloatTensor> {
        let dpatches = match (&mut self.proj, cache.binary) {
            (Projection::Full(l), _) => l.backward(&cache.patches, dout),
            (Projection::Binary(l), Some(c)) => l.backward(c, dout)?,
            (Projection::Binary(_), None) => {
                return Err(crate::error::Error::Internal("missing binary embed cache".into()))
            }
        };
        Ok(unpatchify(&dpatches, cache.in_grid, self.patch))
    }
}

impl Stateful for PatchEmbed {
    fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, StateRef<'a>)>) {
        match &self.proj {
            Projection::Full(l) => l.state(&join(prefix, "proj"), out),
            Projection::Binary(l) => l.state(&join(prefix, "proj"), out),
        }
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, StateMut<'a>)>) {
        match &mut self.proj {
            Projection::Full(l) => l.state_mut(&join(prefix, "proj"), out),
            Projection::Binary(l) => l.state_mut(&join(prefix, "proj"), out),
        }
    }
}

/// Embeds one `H × W × C` image or feature map; returns the tokens and the
/// output grid `(H/P, W/P)`.
pub fn patch_embed(x: &FloatTensor, embed: &PatchEmbed) -> Result<(FloatTensor, (usize, usize))> {
    let [h, w, _c] = x.shape() else {
        return shape_err(format!("expected an H×W×C input, got {:?}", x.shape()));
    };
    let (out, g, _) = embed.forward(x, Grid::spatial(1, *h, *w), Ctx::INFER)?;
    Ok((out, (g.h, g.w)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(p: usize, c_in: usize, d: usize) -> PatchEmbed {
        let w = FloatTensor::full(&[p * p * c_in, d], 0.01);
        PatchEmbed { patch: p, proj: Projection::Full(Linear::new(w, vec![0.0; d]).unwrap()) }
    }

    #[test]
    fn stem_token_count() {
        let img = FloatTensor::zeros(&[224, 224, 3]);
        let (t, g) = patch_embed(&img, &full(4, 3, 64)).unwrap();
        assert_eq!(t.shape(), &[3136, 64]);
        assert_eq!(g, (56, 56));
    }

    #[test]
    fn downsample_token_count() {
        let map = FloatTensor::zeros(&[56, 56, 64]);
        let (t, g) = patch_embed(&map, &full(2, 64, 128)).unwrap();
        assert_eq!(t.shape(), &[784, 128]);
        assert_eq!(g, (28, 28));
    }

    #[test]
    fn unit_patch_identity_projection() {
        let mut eye = FloatTensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let e = PatchEmbed { patch: 1, proj: Projection::Full(Linear::new(eye, vec![0.0; 3]).unwrap()) };
        let x = FloatTensor::new(vec![2, 2, 3], (0..12).map(|v| v as f64).collect()).unwrap();
        let (t, _) = patch_embed(&x, &e).unwrap();
        assert_eq!(t.data(), x.data());
    }

    #[test]
    fn indivisible_is_shape_error() {
        assert!(patch_embed(&FloatTensor::zeros(&[10, 12, 3]), &full(4, 3, 8)).is_err());
    }

    #[test]
    fn unpatchify_inverts() {
        let grid = Grid::spatial(2, 4, 6);
        let x = FloatTensor::matrix(48, 3, (0..144).map(|v| v as f64).collect()).unwrap();
        let (p, _) = patchify(&x, grid, 2).unwrap();
        assert_eq!(unpatchify(&p, grid, 2), x);
    }
}
