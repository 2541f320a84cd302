//! Binary multi-head attention, with optional spatial reduction of the
//! key/value tokens.
//!
//! Per head: `A = Rsign(Q)·Rsign(K)ᵀ` by popcount, `P` is the rounded and
//! rescaled softmax of `A/√D_h`, and the head output is
//! `RPReLU(BN(P·Rsign(V)) + Q + N(K) + N(V))` where `N` is nearest-neighbour
//! upsampling back to the query grid (the identity without reduction).
//! Since `P ∈ {0, α_P}`, `P·Rsign(V)` is a masked sign sum, again popcount.

use crate::bittensor::{binary_gemm_nt, masked_sign_sum, pack_signs_slice, BitMatrix};
use crate::error::{shape_err, Error, Result};
use crate::init::Init;
use crate::layers::bifc::{BiFCCache, BiFCLayer};
use crate::layers::norm::{BatchNorm, BnCache};
use crate::layers::pool::{avg_pool_r, avg_pool_r_backward};
use crate::layers::rprelu::RPReLU;
use crate::layers::{Ctx, Grid};
use crate::param::{join, Param, StateMut, StateRef, Stateful};
use crate::quant::{attn_scale_local, lsq_grad_scale, shift_channels, ste_backward, Quantizer};
use crate::tensor::{matmul, matmul_nt, matmul_tn, FloatTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiMHAConfig {
    pub dim: usize,
    pub heads: usize,
    pub reduction: usize,
}

impl BiMHAConfig {
    pub fn new(dim: usize, heads: usize, reduction: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide width {dim}")));
        }
        if reduction == 0 {
            return Err(Error::Config("reduction ratio must be at least 1".into()));
        }
        Ok(Self { dim, heads, reduction })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn has_sr_projection(&self) -> bool {
        self.reduction > 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiAttention {
    pub cfg: BiMHAConfig,
    pub q: BiFCLayer,
    pub k: BiFCLayer,
    pub v: BiFCLayer,
    pub o: BiFCLayer,
    /// Projection after `R×R` pooling, present iff `reduction > 1`.
    pub sr: Option<BiFCLayer>,
    pub rsign_q: Param,
    pub rsign_k: Param,
    pub rsign_v: Param,
    /// Shared over the concatenated head channels.
    pub bn: BatchNorm,
    pub act: RPReLU,
    /// `α_P`, shape `[1]`.
    pub alpha_p: Param,
}

#[derive(Debug, Clone)]
struct HeadCache {
    /// Softmax output, `n × m`.
    probs: FloatTensor,
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    quant: Quantizer,
    grid: Grid,
    kv_grid: Grid,
    q: BiFCCache,
    k: BiFCCache,
    v: BiFCCache,
    sr: Option<BiFCCache>,
    q_out: FloatTensor,
    k_out: FloatTensor,
    v_out: FloatTensor,
    heads: Vec<HeadCache>,
    bn: BnCache,
    pre_act: FloatTensor,
    o: BiFCCache,
}

/// Gathers rows `[r0, r0+n)` and columns `[c0, c0+w)` of `x`, applying `f`.
fn block(x: &FloatTensor, r0: usize, n: usize, c0: usize, w: usize, f: impl Fn(f64) -> f64) -> FloatTensor {
    let mut data = Vec::with_capacity(n * w);
    for r in r0..r0 + n {
        data.extend(x.row(r)[c0..c0 + w].iter().map(|&v| f(v)));
    }
    FloatTensor::matrix(n, w, data).expect("consistent dims")
}

fn add_block(x: &mut FloatTensor, r0: usize, c0: usize, b: &FloatTensor) {
    for i in 0..b.rows() {
        for (d, s) in x.row_mut(r0 + i)[c0..c0 + b.cols()].iter_mut().zip(b.row(i)) {
            *d += s;
        }
    }
}

fn softmax_rows(a: &mut FloatTensor) {
    let c = a.cols();
    for row in a.data_mut().chunks_exact_mut(c.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

/// Row-wise softmax in full precision.
pub fn softmax(a: &FloatTensor) -> FloatTensor {
    let mut out = a.as_matrix();
    softmax_rows(&mut out);
    out
}

impl BiAttention {
    /// Fresh attention for a stage whose key/value grid has `kv_tokens`
    /// tokens. `α_P` starts at `2/kv_tokens`, so initially a probability
    /// survives rounding iff it exceeds the uniform level.
    pub fn new(cfg: BiMHAConfig, kv_tokens: usize, init: &mut Init) -> Result<Self> {
        let d = cfg.dim;
        let sr = if cfg.has_sr_projection() { Some(init.bifc(d, d)?) } else { None };
        Ok(Self {
            cfg,
            q: init.bifc(d, d)?,
            k: init.bifc(d, d)?,
            v: init.bifc(d, d)?,
            o: init.bifc(d, d)?,
            sr,
            rsign_q: Param::filled(&[d], 0.0),
            rsign_k: Param::filled(&[d], 0.0),
            rsign_v: Param::filled(&[d], 0.0),
            bn: BatchNorm::new(d),
            act: RPReLU::new(d),
            alpha_p: Param::filled(&[1], 2.0 / kv_tokens.max(1) as f64),
        })
    }

    fn check(&self, h: &FloatTensor, grid: Grid) -> Result<()> {
        if h.cols() != self.cfg.dim {
            return shape_err(format!("attention width {} vs input {}", self.cfg.dim, h.cols()));
        }
        if h.rows() != grid.rows() {
            return shape_err(format!("{} rows do not match grid {:?}", h.rows(), grid));
        }
        if self.cfg.has_sr_projection() != self.sr.is_some() {
            return Err(Error::Internal("reduction projection presence mismatch".into()));
        }
        Ok(())
    }

    pub fn forward(&self, h: &FloatTensor, grid: Grid, ctx: Ctx) -> Result<(FloatTensor, AttnCache)> {
        self.check(h, grid)?;
        let BiMHAConfig { heads, reduction, .. } = self.cfg;
        let quant = ctx.quant;
        let alpha = self.alpha_p.data()[0];
        if alpha <= 0.0 {
            return Err(Error::Param(format!("attention scale must be positive, got {alpha}")));
        }

        let (q_out, q_cache) = self.q.forward(h, ctx)?;
        let (kv_in, kv_grid, sr_cache) = match &self.sr {
            Some(sr) => {
                let (pooled, pg) = avg_pool_r(h, grid, reduction)?;
                let (proj, c) = sr.forward(&pooled, ctx)?;
                (proj, pg, Some(c))
            }
            None => (h.as_matrix(), grid, None),
        };
        let (k_out, k_cache) = self.k.forward(&kv_in, ctx)?;
        let (v_out, v_cache) = self.v.forward(&kv_in, ctx)?;

        let qs = shift_channels(&q_out, self.rsign_q.data())?;
        let ks = shift_channels(&k_out, self.rsign_k.data())?;
        let vs = shift_channels(&v_out, self.rsign_v.data())?;

        let (ocat, head_caches) = mix_heads(&qs, &ks, &vs, heads, grid, kv_grid, alpha, quant)?;

        let (mut pre_act, bn_cache) = self.bn.forward(&ocat, ctx)?;
        pre_act.add_assign(&q_out);
        if self.sr.is_some() {
            pre_act.add_assign(&upsample_batched(&k_out, kv_grid, grid)?);
            pre_act.add_assign(&upsample_batched(&v_out, kv_grid, grid)?);
        } else {
            pre_act.add_assign(&k_out);
            pre_act.add_assign(&v_out);
        }
        let act = self.act.forward(&pre_act)?;
        let (out, o_cache) = self.o.forward(&act, ctx)?;
        Ok((
            out,
            AttnCache {
                quant,
                grid,
                kv_grid,
                q: q_cache,
                k: k_cache,
                v: v_cache,
                sr: sr_cache,
                q_out,
                k_out,
                v_out,
                heads: head_caches,
                bn: bn_cache,
                pre_act,
                o: o_cache,
            },
        ))
    }

    /// Quantized attention matrices `P` (per image, per head) of an
    /// inference pass, for inspection.
    pub fn attention_probs(&self, h: &FloatTensor, grid: Grid) -> Result<Vec<FloatTensor>> {
        let (_, cache) = self.forward(h, grid, Ctx::INFER)?;
        let alpha = self.alpha_p.data()[0];
        Ok(cache.heads.iter().map(|hc| hc.probs.map(|s| alpha * Quantizer::Exact.prob_level(s / alpha))).collect())
    }

    pub fn backward(&mut self, cache: AttnCache, dout: &FloatTensor) -> Result<FloatTensor> {
        let BiMHAConfig { heads, .. } = self.cfg;
        let dh = self.cfg.head_dim();
        let quant = cache.quant;
        let (grid, kv_grid) = (cache.grid, cache.kv_grid);
        let (n, m) = (grid.tokens(), kv_grid.tokens());
        let alpha = self.alpha_p.data()[0];
        let scale = 1.0 / (dh as f64).sqrt();

        let dact = self.o.backward(cache.o, dout)?;
        let dpre = self.act.backward(&cache.pre_act, &dact);
        let mut dq_out = dpre.clone();
        let (mut dk_out, mut dv_out) = if self.sr.is_some() {
            let d = upsample_batched_backward(&dpre, kv_grid, grid);
            (d.clone(), d)
        } else {
            (dpre.clone(), dpre.clone())
        };
        let docat = self.bn.backward(cache.bn, &dpre);

        let qs = shift_channels(&cache.q_out, self.rsign_q.data())?;
        let ks = shift_channels(&cache.k_out, self.rsign_k.data())?;
        let vs = shift_channels(&cache.v_out, self.rsign_v.data())?;
        // Gradients w.r.t. the quantized Q, K, V operands.
        let mut dqq = FloatTensor::zeros(&[qs.rows(), qs.cols()]);
        let mut dkq = FloatTensor::zeros(&[ks.rows(), ks.cols()]);
        let mut dvq = FloatTensor::zeros(&[vs.rows(), vs.cols()]);
        let mut dalpha = 0.0;
        let g = lsq_grad_scale(n * m);

        for b in 0..grid.batch {
            for hd in 0..heads {
                let c0 = hd * dh;
                let probs = &cache.heads[b * heads + hd].probs;
                let d_o = block(&docat, b * n, n, c0, dh, |v| v);
                let qq = block(&qs, b * n, n, c0, dh, |v| quant.sign(v));
                let kq = block(&ks, b * m, m, c0, dh, |v| quant.sign(v));
                let vq = block(&vs, b * m, m, c0, dh, |v| quant.sign(v));
                let p = probs.map(|s| alpha * quant.prob_level(s / alpha));

                let dp = matmul_nt(&d_o, &vq);
                add_block(&mut dvq, b * m, c0, &matmul_tn(&p, &d_o));

                let mut ds = dp.clone();
                let mut raw = 0.0;
                for (dsv, (&s, &dpv)) in ds.data_mut().iter_mut().zip(probs.data().iter().zip(dp.data())) {
                    let v = s / alpha;
                    raw += dpv * attn_scale_local(s, alpha, quant);
                    *dsv = if v > 0.0 && v < 1.0 { dpv } else { 0.0 };
                }
                dalpha += raw * g;

                // softmax adjoint, then the 1/√D_h scale
                let mut da = ds;
                for (drow, srow) in da.data_mut().chunks_exact_mut(m).zip(probs.data().chunks_exact(m)) {
                    let dot: f64 = drow.iter().zip(srow).map(|(d, s)| d * s).sum();
                    for (d, s) in drow.iter_mut().zip(srow) {
                        *d = s * (*d - dot) * scale;
                    }
                }
                add_block(&mut dqq, b * n, c0, &matmul(&da, &kq));
                add_block(&mut dkq, b * m, c0, &matmul_tn(&da, &qq));
            }
        }
        self.alpha_p.accumulate(&[dalpha]);

        ste_into(&qs, &dqq, &mut dq_out, &mut self.rsign_q);
        ste_into(&ks, &dkq, &mut dk_out, &mut self.rsign_k);
        ste_into(&vs, &dvq, &mut dv_out, &mut self.rsign_v);

        let mut dkv = self.k.backward(cache.k, &dk_out)?;
        dkv.add_assign(&self.v.backward(cache.v, &dv_out)?);
        let mut dh_in = match (&mut self.sr, cache.sr) {
            (Some(sr), Some(c)) => {
                let dpooled = sr.backward(c, &dkv)?;
                avg_pool_r_backward(&dpooled, grid, self.cfg.reduction)
            }
            (None, None) => dkv,
            _ => return Err(Error::Internal("reduction cache mismatch".into())),
        };
        dh_in.add_assign(&self.q.backward(cache.q, &dq_out)?);
        Ok(dh_in)
    }
}

/// Per-head `P·Rsign(V)` for shifted `Q`, `K`, `V`, concatenated over heads.
#[allow(clippy::too_many_arguments)]
fn mix_heads(
    qs: &FloatTensor,
    ks: &FloatTensor,
    vs: &FloatTensor,
    heads: usize,
    grid: Grid,
    kv_grid: Grid,
    alpha: f64,
    quant: Quantizer,
) -> Result<(FloatTensor, Vec<HeadCache>)> {
    let dim = qs.cols();
    let dh = dim / heads;
    let (n, m) = (grid.tokens(), kv_grid.tokens());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ocat = FloatTensor::zeros(&[grid.rows(), dim]);
    let mut caches = Vec::with_capacity(grid.batch * heads);
    for b in 0..grid.batch {
        for hd in 0..heads {
            let c0 = hd * dh;
            let (scores, out) = match quant {
                Quantizer::Exact => {
                    let qb = block(qs, b * n, n, c0, dh, |v| v);
                    let kb = block(ks, b * m, m, c0, dh, |v| v);
                    let vt = block(vs, b * m, m, c0, dh, |v| v).transpose();
                    let qbits = pack_signs_slice(qb.data(), n, dh);
                    let kbits = pack_signs_slice(kb.data(), m, dh);
                    let mut a = binary_gemm_nt(&qbits, &kbits)?.scaled(scale);
                    softmax_rows(&mut a);
                    let mask = BitMatrix::from_fn(n, m, |i, j| quant.prob_level(a.at(i, j) / alpha) > 0.0);
                    let vbits = pack_signs_slice(vt.data(), dh, m);
                    (a, masked_sign_sum(&mask, &vbits)?.scaled(alpha))
                }
                Quantizer::Surrogate => {
                    let qq = block(qs, b * n, n, c0, dh, |v| quant.sign(v));
                    let kq = block(ks, b * m, m, c0, dh, |v| quant.sign(v));
                    let vq = block(vs, b * m, m, c0, dh, |v| quant.sign(v));
                    let mut a = matmul_nt(&qq, &kq);
                    a.data_mut().iter_mut().for_each(|v| *v *= scale);
                    softmax_rows(&mut a);
                    let p = a.map(|s| alpha * quant.prob_level(s / alpha));
                    (a, matmul(&p, &vq))
                }
            };
            add_block(&mut ocat, b * n, c0, &out);
            caches.push(HeadCache { probs: scores });
        }
    }
    Ok((ocat, caches))
}

/// Straight-through backward of an `Rsign` site: adds the masked gradient
/// to `dx` and accumulates the threshold gradient.
fn ste_into(shifted: &FloatTensor, dq: &FloatTensor, dx: &mut FloatTensor, beta: &mut Param) {
    let c = shifted.cols();
    let mut db = vec![0.0; c];
    for ((dxr, dqr), sr) in
        dx.data_mut().chunks_exact_mut(c).zip(dq.data().chunks_exact(c)).zip(shifted.data().chunks_exact(c))
    {
        for j in 0..c {
            let d = ste_backward(sr[j], dqr[j]);
            db[j] += d;
            dxr[j] += d;
        }
    }
    beta.accumulate(&db);
}

impl Stateful for BiAttention {
    fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, StateRef<'a>)>) {
        self.q.state(&join(prefix, "q"), out);
        if let Some(sr) = &self.sr {
            sr.state(&join(prefix, "sr"), out);
        }
        self.k.state(&join(prefix, "k"), out);
        self.v.state(&join(prefix, "v"), out);
        out.push((join(prefix, "rsign_q"), StateRef::Param(&self.rsign_q)));
        out.push((join(prefix, "rsign_k"), StateRef::Param(&self.rsign_k)));
        out.push((join(prefix, "rsign_v"), StateRef::Param(&self.rsign_v)));
        out.push((join(prefix, "alpha_p"), StateRef::Param(&self.alpha_p)));
        self.bn.state(&join(prefix, "bn"), out);
        self.act.state(&join(prefix, "act"), out);
        self.o.state(&join(prefix, "o"), out);
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, StateMut<'a>)>) {
        self.q.state_mut(&join(prefix, "q"), out);
        if let Some(sr) = &mut self.sr {
            sr.state_mut(&join(prefix, "sr"), out);
        }
        self.k.state_mut(&join(prefix, "k"), out);
        self.v.state_mut(&join(prefix, "v"), out);
        out.push((join(prefix, "rsign_q"), StateMut::Param(&mut self.rsign_q)));
        out.push((join(prefix, "rsign_k"), StateMut::Param(&mut self.rsign_k)));
        out.push((join(prefix, "rsign_v"), StateMut::Param(&mut self.rsign_v)));
        out.push((join(prefix, "alpha_p"), StateMut::Param(&mut self.alpha_p)));
        self.bn.state_mut(&join(prefix, "bn"), out);
        self.act.state_mut(&join(prefix, "act"), out);
        self.o.state_mut(&join(prefix, "o"), out);
    }
}

/// Bi-MHA on a single `N × D` sequence (no spatial reduction).
pub fn bi_mha_forward(h_norm: &FloatTensor, attn: &BiAttention) -> Result<FloatTensor> {
    if attn.cfg.has_sr_projection() {
        return Err(Error::Config("plain Bi-MHA requires reduction 1".into()));
    }
    let grid = Grid::spatial(1, h_norm.rows(), 1);
    Ok(attn.forward(&h_norm.as_matrix(), grid, Ctx::INFER)?.0)
}

/// Bi-SR-MHA on a single `H·W × D` token map.
pub fn bi_sr_mha_forward(h_norm: &FloatTensor, spatial: (usize, usize), attn: &BiAttention) -> Result<FloatTensor> {
    let (h, w) = spatial;
    let r = attn.cfg.reduction;
    if h % r != 0 || w % r != 0 {
        return shape_err(format!("reduction {r} does not divide {h}x{w}"));
    }
    let grid = Grid::spatial(1, h, w);
    Ok(attn.forward(&h_norm.as_matrix(), grid, Ctx::INFER)?.0)
}

/// Nearest-neighbour resize of one `h × w × C` map to `H × W`:
/// `out[i, j] = x[⌊i·h/H⌋, ⌊j·w/W⌋]`.
pub fn upsample_nn(x: &FloatTensor, target: (usize, usize)) -> Result<FloatTensor> {
    let [h, w, c] = x.shape() else {
        return shape_err(format!("expected an h×w×C map, got {:?}", x.shape()));
    };
    let (th, tw) = target;
    if th < *h || tw < *w {
        return shape_err(format!("target {th}x{tw} is smaller than source {h}x{w}"));
    }
    let out = upsample_batched(x, Grid::spatial(1, *h, *w), Grid::spatial(1, th, tw))?;
    out.reshape(vec![th, tw, *c])
}

fn source_index(i: usize, j: usize, from: Grid, to: Grid) -> usize {
    (i * from.h / to.h) * from.w + j * from.w / to.w
}

pub(crate) fn upsample_batched(x: &FloatTensor, from: Grid, to: Grid) -> Result<FloatTensor> {
    if to.h < from.h || to.w < from.w || from.cls || to.cls {
        return shape_err("nearest-neighbour upsampling only enlarges spatial grids");
    }
    let c = x.cols();
    let mut data = Vec::with_capacity(to.rows() * c);
    for b in 0..from.batch {
        for i in 0..to.h {
            for j in 0..to.w {
                data.extend_from_slice(x.row(b * from.h * from.w + source_index(i, j, from, to)));
            }
        }
    }
    FloatTensor::matrix(to.rows(), c, data)
}

pub(crate) fn upsample_batched_backward(dout: &FloatTensor, from: Grid, to: Grid) -> FloatTensor {
    let c = dout.cols();
    let mut dx = FloatTensor::zeros(&[from.rows(), c]);
    for b in 0..from.batch {
        for i in 0..to.h {
            for j in 0..to.w {
                let src = dout.row(b * to.h * to.w + i * to.w + j);
                let dst = dx.row_mut(b * from.h * from.w + source_index(i, j, from, to));
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attn(dim: usize, heads: usize, r: usize, kv_tokens: usize, seed: u64) -> BiAttention {
        let cfg = BiMHAConfig::new(dim, heads, r).unwrap();
        BiAttention::new(cfg, kv_tokens, &mut Init::new(seed)).unwrap()
    }

    fn input(rows: usize, cols: usize, seed: u64) -> FloatTensor {
        let data = (0..rows * cols).map(|i| ((i as f64 + seed as f64) * 0.7391).sin()).collect();
        FloatTensor::matrix(rows, cols, data).unwrap()
    }

    /// One-input, one-output BiFC whose output at input 0.25 is 0.5.
    fn half_fc() -> BiFCLayer {
        let w = crate::layers::BinaryWeight::from_latent(FloatTensor::full(&[1, 1], 0.25)).unwrap();
        let mut l = BiFCLayer::new(w).unwrap();
        l.bn = BatchNorm::identity(1);
        l.rprelu = RPReLU::identity(1);
        l
    }

    #[test]
    fn degenerate_single_token_head() {
        let mut a = attn(1, 1, 1, 1, 0);
        a.q = half_fc();
        a.k = half_fc();
        a.v = half_fc();
        a.bn = BatchNorm::identity(1);
        a.act = RPReLU::identity(1);
        a.alpha_p = Param::filled(&[1], 1.0);
        let h = FloatTensor::full(&[1, 1], 0.25);
        let (_, cache) = a.forward(&h, Grid::spatial(1, 1, 1), Ctx::INFER).unwrap();
        assert_eq!(cache.q_out.data(), &[0.5]);
        assert_eq!(cache.heads[0].probs.data(), &[1.0]);
        assert_eq!(cache.pre_act.data(), &[2.5]);
    }

    #[test]
    fn flat_shape_contract() {
        let a = attn(384, 6, 1, 196, 1);
        let y = bi_mha_forward(&input(196, 384, 0), &a).unwrap();
        assert_eq!(y.shape(), &[196, 384]);
    }

    #[test]
    fn reduced_shapes() {
        let a = attn(8, 1, 8, 49, 2);
        let grid = Grid::spatial(1, 56, 56);
        let h = input(3136, 8, 1);
        let (y, cache) = a.forward(&h, grid, Ctx::INFER).unwrap();
        assert_eq!(y.shape(), &[3136, 8]);
        assert_eq!(cache.k_out.shape(), &[49, 8]);
        assert_eq!(cache.heads[0].probs.shape(), &[3136, 49]);
        assert_eq!(upsample_batched(&cache.k_out, cache.kv_grid, grid).unwrap().rows(), 3136);
        let err = bi_sr_mha_forward(&input(30, 8, 0), (5, 6), &a);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn unit_reduction_matches_plain_attention() {
        let a = attn(16, 2, 1, 12, 3);
        let h = input(12, 16, 2);
        let plain = bi_mha_forward(&h, &a).unwrap();
        let sr = bi_sr_mha_forward(&h, (3, 4), &a).unwrap();
        assert_eq!(plain, sr);
        assert!(a.sr.is_none());
    }

    #[test]
    fn probabilities_take_two_values() {
        let a = attn(16, 4, 2, 4, 4);
        let h = input(16, 16, 3);
        let alpha = a.alpha_p.data()[0];
        for p in a.attention_probs(&h, Grid::spatial(1, 4, 4)).unwrap() {
            assert!(p.data().iter().all(|&v| v == 0.0 || v == alpha));
        }
        let (_, cache) = a.forward(&h, Grid::spatial(1, 4, 4), Ctx::INFER).unwrap();
        for hc in &cache.heads {
            for r in 0..hc.probs.rows() {
                assert!((hc.probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn exact_and_dense_head_mixing_agree() {
        let (qs, ks, vs) = (input(20, 12, 1), input(20, 12, 2), input(20, 12, 3));
        let grid = Grid::spatial(1, 4, 5);
        let (packed, _) = mix_heads(&qs, &ks, &vs, 3, grid, grid, 0.08, Quantizer::Exact).unwrap();
        // dense oracle with sign/round applied explicitly
        let sg = |v: f64| if v >= 0.0 { 1.0 } else { -1.0 };
        let mut dense = FloatTensor::zeros(&[20, 12]);
        for hd in 0..3 {
            let q = block(&qs, 0, 20, hd * 4, 4, sg);
            let k = block(&ks, 0, 20, hd * 4, 4, sg);
            let v = block(&vs, 0, 20, hd * 4, 4, sg);
            let mut a = matmul_nt(&q, &k);
            a.data_mut().iter_mut().for_each(|x| *x *= 0.5);
            let p = softmax(&a).map(|s| 0.08 * (s / 0.08).clamp(0.0, 1.0).round());
            add_block(&mut dense, 0, hd * 4, &matmul(&p, &v));
        }
        assert!(packed.max_abs_diff(&dense) < 1e-12);
    }

    #[test]
    fn head_order_is_immaterial() {
        let (qs, ks, vs) = (input(12, 12, 4), input(12, 12, 5), input(12, 12, 6));
        let grid = Grid::spatial(1, 3, 4);
        let perm = [2usize, 0, 1];
        let permute = |x: &FloatTensor| {
            let mut out = FloatTensor::zeros(&[x.rows(), x.cols()]);
            for (dst, &src) in perm.iter().enumerate() {
                out.set_cols(dst * 4, &x.slice_cols(src * 4, src * 4 + 4));
            }
            out
        };
        let (cat, _) = mix_heads(&qs, &ks, &vs, 3, grid, grid, 0.1, Quantizer::Exact).unwrap();
        let (cat_p, _) =
            mix_heads(&permute(&qs), &permute(&ks), &permute(&vs), 3, grid, grid, 0.1, Quantizer::Exact).unwrap();
        assert_eq!(cat_p, permute(&cat));
        // projecting with correspondingly permuted input rows gives the same result
        let w = input(12, 5, 9);
        let w_p = permute(&w.transpose()).transpose();
        assert!(matmul(&cat, &w).max_abs_diff(&matmul(&cat_p, &w_p)) < 1e-12);
    }

    #[test]
    fn upsample_two_by_two_blocks() {
        let x = FloatTensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_nn(&x, (4, 4)).unwrap();
        let want = [1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.];
        assert_eq!(y.data(), &want);
    }

    #[test]
    fn upsample_identity_and_constant() {
        let x = FloatTensor::new(vec![2, 3, 2], (0..12).map(|v| v as f64).collect()).unwrap();
        assert_eq!(upsample_nn(&x, (2, 3)).unwrap(), x);
        let c = FloatTensor::full(&[1, 1, 3], 0.7);
        let y = upsample_nn(&c, (2, 2)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
        let y = upsample_nn(&FloatTensor::full(&[3, 2, 1], -2.0), (7, 5)).unwrap();
        assert!(y.data().iter().all(|&v| v == -2.0));
    }

    #[test]
    fn upsample_rejects_shrinking() {
        assert!(upsample_nn(&FloatTensor::zeros(&[4, 4, 1]), (2, 4)).is_err());
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let from = Grid::spatial(2, 2, 3);
        let to = Grid::spatial(2, 4, 7);
        let x = FloatTensor::matrix(12, 2, (0..24).map(|v| (v as f64).cos()).collect()).unwrap();
        let y = FloatTensor::matrix(56, 2, (0..112).map(|v| (v as f64 * 0.3).sin()).collect()).unwrap();
        let dot = |a: &FloatTensor, b: &FloatTensor| a.data().iter().zip(b.data()).map(|(u, v)| u * v).sum::<f64>();
        let lhs = dot(&upsample_batched(&x, from, to).unwrap(), &y);
        let rhs = dot(&x, &upsample_batched_backward(&y, from, to));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(BiMHAConfig::new(10, 3, 1).is_err());
        assert!(!BiMHAConfig::new(12, 3, 1).unwrap().has_sr_projection());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let a = FloatTensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap();
        let s = softmax(&a);
        for i in 0..2 {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
