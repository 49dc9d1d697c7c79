//! Layout-aware compression of high-resolution crop tokens.
//!
//! After cropping, a page is represented twice: a low-resolution global map
//! (h x w tokens) and r*c high-resolution sub-image maps of the same shape.
//! The sub-image maps are reorganized into one (r*h) x (c*w) map laid out in
//! sub-image blocks, which makes position (X, Y) of the big map cover the same
//! page region as global position (ceil(X/r), ceil(Y/c)).
//!
//! The default variant compresses by grouped cross-attention: each global
//! token attends only to the r*c high-resolution tokens covering its own
//! region (its group), projected by per-layer query/key/value matrices with no
//! biases, and the incoming query is added back as a residual. The groups
//! partition the big map, so compression cost is linear in the number of
//! high-resolution tokens rather than quadratic.
//!
//! The remaining variants exist for controlled comparisons: complete
//! cross-attention (every query sees every token), parameter-free group
//! means, a learned-query resampler, and parameter-free adaptive mean
//! pooling.

use crate::encoder::{FeatureVar, Provenance};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{uniform_fan_in, Bound, ParamSet};
use crate::reducer::ReducedVar;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantKind {
    /// Grouped cross-attention (the default).
    GroupAtt,
    /// Cross-attention where every query attends to every token.
    CompleteAtt,
    /// Mean over each group plus the global residual; no parameters.
    GroupMean,
    /// Learned queries attending to global + high-resolution tokens.
    Resampler,
    /// Adaptive mean pooling of the big map down to the global grid.
    AdaptiveMean,
}

impl VariantKind {
    pub fn name(self) -> &'static str {
        match self {
            VariantKind::GroupAtt => "group_att",
            VariantKind::CompleteAtt => "complete_att",
            VariantKind::GroupMean => "group_mean",
            VariantKind::Resampler => "resampler",
            VariantKind::AdaptiveMean => "adaptive_mean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "group_att" => VariantKind::GroupAtt,
            "complete_att" => VariantKind::CompleteAtt,
            "group_mean" => VariantKind::GroupMean,
            "resampler" => VariantKind::Resampler,
            "adaptive_mean" => VariantKind::AdaptiveMean,
            other => return Err(Error::Config(format!("unknown compressor variant {other:?}"))),
        })
    }
}

/// Where in the pipeline compression happens: on reduced tokens (default) or
/// directly on encoder tokens before horizontal merging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    AfterReducer,
    AfterVit,
}

impl Placement {
    pub fn name(self) -> &'static str {
        match self {
            Placement::AfterReducer => "after_reducer",
            Placement::AfterVit => "after_vit",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "after_reducer" => Placement::AfterReducer,
            "after_vit" => Placement::AfterVit,
            other => return Err(Error::Config(format!("unknown placement {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompressorConfig {
    pub kind: VariantKind,
    pub placement: Placement,
    /// Token width at the compression point.
    pub dim: usize,
    pub heads: usize,
    /// Cross-attention layers. Mean variants ignore this; the resampler
    /// conventionally uses 1.
    pub layers: usize,
    /// Learned query count; resampler only.
    pub query_count: usize,
}

impl CompressorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("compressor dim must be positive".into()));
        }
        match self.kind {
            VariantKind::GroupAtt | VariantKind::CompleteAtt | VariantKind::Resampler => {
                if self.heads == 0 || self.dim % self.heads != 0 {
                    return Err(Error::Config(format!(
                        "compressor dim {} not divisible by heads {}",
                        self.dim, self.heads
                    )));
                }
                if self.layers == 0 {
                    return Err(Error::Config("attention compressor needs at least 1 layer".into()));
                }
                if self.kind == VariantKind::Resampler && self.query_count == 0 {
                    return Err(Error::Config("resampler needs query_count >= 1".into()));
                }
            }
            VariantKind::GroupMean | VariantKind::AdaptiveMean => {}
        }
        Ok(())
    }
}

/// Grid-shaped token map at the compression width; the common shape of
/// reduced maps (after_reducer) and raw feature maps (after_vit).
#[derive(Debug, Clone, Copy)]
pub struct MapTokens {
    /// [h * w, dim], row-major over (h, w).
    pub tokens: Var,
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    pub provenance: Provenance,
}

impl MapTokens {
    pub fn from_reduced(rv: &ReducedVar) -> MapTokens {
        MapTokens { tokens: rv.tokens, h: rv.h, w: rv.w4, dim: rv.d_hat, provenance: rv.provenance }
    }

    pub fn from_feature(fv: &FeatureVar) -> MapTokens {
        MapTokens { tokens: fv.tokens, h: fv.h, w: fv.w, dim: fv.d, provenance: fv.provenance }
    }
}

/// The reorganized high-resolution map: sub-image maps tiled in block layout.
#[derive(Debug, Clone, Copy)]
pub struct ReorgVar {
    /// [(r*h) * (c*w), dim], row-major over the big grid.
    pub tokens: Var,
    pub r: usize,
    pub c: usize,
    /// Per-sub-image grid shape.
    pub h: usize,
    pub w: usize,
    pub dim: usize,
}

impl ReorgVar {
    pub fn rows(&self) -> usize {
        self.r * self.h
    }
    pub fn cols(&self) -> usize {
        self.c * self.w
    }
    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// High-resolution token coordinates (1-based) covered by global token
/// (i, j) of an h x w global map under an r x c crop grid: the r*c block
/// rows r*(i-1)+1..=r*i, cols c*(j-1)+1..=c*j of the reorganized map.
pub fn group_of(
    i: usize,
    j: usize,
    r: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Result<Vec<(usize, usize)>> {
    if r == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::Argument(format!("group_of: degenerate geometry r={r} c={c} h={h} w={w}")));
    }
    if i == 0 || i > h || j == 0 || j > w {
        return Err(Error::Argument(format!(
            "group_of: query ({i}, {j}) outside 1..={h} x 1..={w}"
        )));
    }
    let mut cells = Vec::with_capacity(r * c);
    for x in r * (i - 1) + 1..=r * i {
        for y in c * (j - 1) + 1..=c * j {
            cells.push((x, y));
        }
    }
    Ok(cells)
}

/// Flat 0-based row indices into the reorganized token matrix for group (i0, j0)
/// (0-based query coordinates).
fn group_flat(i0: usize, j0: usize, r: usize, c: usize, h: usize, w: usize) -> Result<Vec<usize>> {
    let cols_total = c * w;
    Ok(group_of(i0 + 1, j0 + 1, r, c, h, w)?
        .into_iter()
        .map(|(x, y)| (x - 1) * cols_total + (y - 1))
        .collect())
}

/// Tile sub-image maps (row-major grid order) into one big map in block
/// layout: sub (gr, gc) occupies rows gr*h..(gr+1)*h, cols gc*w..(gc+1)*w.
pub fn reorganize_var<S: Scalar>(
    g: &mut Graph<S>,
    subs: &[MapTokens],
    r: usize,
    c: usize,
) -> Result<ReorgVar> {
    if subs.is_empty() || subs.len() != r * c {
        return Err(Error::Consistency(format!(
            "reorganize: {} sub-image maps for a {r}x{c} grid",
            subs.len()
        )));
    }
    let (h, w, dim) = (subs[0].h, subs[0].w, subs[0].dim);
    for (idx, sub) in subs.iter().enumerate() {
        if (sub.h, sub.w, sub.dim) != (h, w, dim) {
            return Err(Error::Consistency(format!(
                "reorganize: sub-image {idx} has shape ({}, {}, {}), expected ({h}, {w}, {dim})",
                sub.h, sub.w, sub.dim
            )));
        }
        let want = Provenance::Sub { row: idx / c, col: idx % c };
        if sub.provenance != want {
            return Err(Error::Consistency(format!(
                "reorganize: sub-image {idx} carries provenance {:?}, expected {:?}",
                sub.provenance, want
            )));
        }
    }
    let mut row_blocks = Vec::with_capacity(r);
    for gr in 0..r {
        let mut blocks = Vec::with_capacity(c);
        for gc in 0..c {
            let sub = &subs[gr * c + gc];
            // [h*w, dim] -> [h, w*dim] so horizontal concatenation interleaves
            // whole tokens.
            blocks.push(g.reshape(sub.tokens, &[h, w * dim])?);
        }
        row_blocks.push(g.concat_cols(&blocks)?);
    }
    let big = g.concat_rows(&row_blocks)?;
    let tokens = g.reshape(big, &[r * h * c * w, dim])?;
    Ok(ReorgVar { tokens, r, c, h, w, dim })
}

/// Record of one attention distribution: (layer, flat query index, head,
/// softmax output var of shape [1, keys] or [queries, keys]).
pub type AttnRecord = (usize, usize, usize, Var);

#[derive(Debug, Clone)]
pub struct DocCompressor {
    pub cfg: CompressorConfig,
}

impl DocCompressor {
    pub fn new(cfg: CompressorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(DocCompressor { cfg })
    }

    /// Output token count for a global map of h x w tokens. Every variant
    /// keeps the global grid except the resampler, which emits its fixed
    /// query count.
    pub fn out_len(&self, h: usize, w: usize) -> usize {
        match self.cfg.kind {
            VariantKind::Resampler => self.cfg.query_count,
            _ => h * w,
        }
    }

    /// Register parameters under "cmp.". Mean variants have none.
    pub fn register_params<S: Scalar>(&self, ps: &mut ParamSet<S>, rng: &mut Rng) -> Result<()> {
        let dim = self.cfg.dim;
        match self.cfg.kind {
            VariantKind::GroupAtt | VariantKind::CompleteAtt => {
                for l in 0..self.cfg.layers {
                    for w in ["wq", "wk", "wv"] {
                        ps.register(&format!("cmp.l{l}.{w}"), &[dim, dim], uniform_fan_in(dim), rng)?;
                    }
                }
            }
            VariantKind::Resampler => {
                ps.register("cmp.query", &[self.cfg.query_count, dim], uniform_fan_in(dim), rng)?;
                for l in 0..self.cfg.layers {
                    for w in ["wq", "wk", "wv"] {
                        ps.register(&format!("cmp.l{l}.{w}"), &[dim, dim], uniform_fan_in(dim), rng)?;
                    }
                }
            }
            VariantKind::GroupMean | VariantKind::AdaptiveMean => {}
        }
        Ok(())
    }

    /// Compress one page: global map + reorganized sub-image map -> compressed
    /// tokens [len, dim]. len equals the global token count for every variant
    /// except the resampler, where it is query_count.
    pub fn compress_var<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        global: &MapTokens,
        reorg: &ReorgVar,
    ) -> Result<Var> {
        self.compress_traced(g, bound, global, reorg, None)
    }

    /// As [`compress_var`], optionally recording every attention distribution.
    pub fn compress_traced<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        global: &MapTokens,
        reorg: &ReorgVar,
        mut trace: Option<&mut Vec<AttnRecord>>,
    ) -> Result<Var> {
        if global.provenance != Provenance::Global {
            return Err(Error::Consistency(format!(
                "compress: query map has provenance {:?}, expected Global",
                global.provenance
            )));
        }
        if global.dim != self.cfg.dim || reorg.dim != self.cfg.dim {
            return Err(Error::dim(
                "compress",
                format!(
                    "widths disagree: global {}, reorganized {}, compressor {}",
                    global.dim, reorg.dim, self.cfg.dim
                ),
            ));
        }
        if reorg.h != global.h || reorg.w != global.w {
            return Err(Error::Consistency(format!(
                "compress: global map {}x{} vs per-sub-image map {}x{}",
                global.h, global.w, reorg.h, reorg.w
            )));
        }
        let (h, w) = (global.h, global.w);
        let (r, c) = (reorg.r, reorg.c);
        let nq = h * w;
        let dim = self.cfg.dim;

        match self.cfg.kind {
            VariantKind::GroupAtt => {
                let mut q_cur = global.tokens;
                for l in 0..self.cfg.layers {
                    let qp = g.matmul(q_cur, bound.var(&format!("cmp.l{l}.wq"))?)?;
                    let kp = g.matmul(reorg.tokens, bound.var(&format!("cmp.l{l}.wk"))?)?;
                    let vp = g.matmul(reorg.tokens, bound.var(&format!("cmp.l{l}.wv"))?)?;
                    let mut rows = Vec::with_capacity(nq);
                    for i0 in 0..h {
                        for j0 in 0..w {
                            let qi = i0 * w + j0;
                            let idxs = group_flat(i0, j0, r, c, h, w)?;
                            let qrow = g.slice_rows(qp, qi, qi + 1)?;
                            let kg = g.gather_rows(kp, idxs.clone())?;
                            let vg = g.gather_rows(vp, idxs)?;
                            rows.push(self.attend_row(g, qrow, kg, vg, l, qi, &mut trace)?);
                        }
                    }
                    let attended = g.concat_rows(&rows)?;
                    q_cur = g.add(attended, q_cur)?;
                }
                Ok(q_cur)
            }
            VariantKind::CompleteAtt => {
                let mut q_cur = global.tokens;
                for l in 0..self.cfg.layers {
                    let qp = g.matmul(q_cur, bound.var(&format!("cmp.l{l}.wq"))?)?;
                    let kp = g.matmul(reorg.tokens, bound.var(&format!("cmp.l{l}.wk"))?)?;
                    let vp = g.matmul(reorg.tokens, bound.var(&format!("cmp.l{l}.wv"))?)?;
                    let attended = self.attend_full(g, qp, kp, vp, l, &mut trace)?;
                    q_cur = g.add(attended, q_cur)?;
                }
                Ok(q_cur)
            }
            VariantKind::GroupMean => {
                let rc = r * c;
                let mean_row =
                    g.constant(Tensor::filled(&[1, rc], S::one() / S::from_usize(rc)));
                let mut rows = Vec::with_capacity(nq);
                for i0 in 0..h {
                    for j0 in 0..w {
                        let idxs = group_flat(i0, j0, r, c, h, w)?;
                        let grp = g.gather_rows(reorg.tokens, idxs)?;
                        rows.push(g.matmul(mean_row, grp)?);
                    }
                }
                let pooled = g.concat_rows(&rows)?;
                g.add(pooled, global.tokens)
            }
            VariantKind::Resampler => {
                let keys_src = g.concat_rows(&[global.tokens, reorg.tokens])?;
                let mut q_cur = bound.var("cmp.query")?;
                for l in 0..self.cfg.layers {
                    let qp = g.matmul(q_cur, bound.var(&format!("cmp.l{l}.wq"))?)?;
                    let kp = g.matmul(keys_src, bound.var(&format!("cmp.l{l}.wk"))?)?;
                    let vp = g.matmul(keys_src, bound.var(&format!("cmp.l{l}.wv"))?)?;
                    let attended = self.attend_full(g, qp, kp, vp, l, &mut trace)?;
                    q_cur = g.add(attended, q_cur)?;
                }
                Ok(q_cur)
            }
            VariantKind::AdaptiveMean => {
                let (rows_hi, cols_hi) = (reorg.rows(), reorg.cols());
                let hwd = g.reshape(reorg.tokens, &[rows_hi, cols_hi, dim])?;
                let dhw = g.permute3(hwd, [2, 0, 1])?;
                let pooled = g.adaptive_mean_pool3(dhw, h, w)?;
                let back = g.permute3(pooled, [1, 2, 0])?;
                g.reshape(back, &[nq, dim])
            }
        }
    }

    /// One query row against its keys/values, multi-head.
    fn attend_row<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        qrow: Var,
        keys: Var,
        values: Var,
        layer: usize,
        query_idx: usize,
        trace: &mut Option<&mut Vec<AttnRecord>>,
    ) -> Result<Var> {
        let heads = self.cfg.heads;
        let dk = self.cfg.dim / heads;
        let scale = S::from_f64(1.0 / (dk as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let (lo, hi) = (hd * dk, (hd + 1) * dk);
            let qh = g.slice_cols(qrow, lo, hi)?;
            let kh = g.slice_cols(keys, lo, hi)?;
            let vh = g.slice_cols(values, lo, hi)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let att = g.softmax_rows(scores)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push((layer, query_idx, hd, att));
            }
            outs.push(g.matmul(att, vh)?);
        }
        if heads == 1 {
            Ok(outs[0])
        } else {
            g.concat_cols(&outs)
        }
    }

    /// All queries against a shared key/value set, multi-head.
    fn attend_full<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        qp: Var,
        kp: Var,
        vp: Var,
        layer: usize,
        trace: &mut Option<&mut Vec<AttnRecord>>,
    ) -> Result<Var> {
        let heads = self.cfg.heads;
        let dk = self.cfg.dim / heads;
        let scale = S::from_f64(1.0 / (dk as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let (lo, hi) = (hd * dk, (hd + 1) * dk);
            let qh = g.slice_cols(qp, lo, hi)?;
            let kh = g.slice_cols(kp, lo, hi)?;
            let vh = g.slice_cols(vp, lo, hi)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let att = g.softmax_rows(scores)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.push((layer, usize::MAX, hd, att));
            }
            outs.push(g.matmul(att, vh)?);
        }
        if heads == 1 {
            Ok(outs[0])
        } else {
            g.concat_cols(&outs)
        }
    }
}

/// Floating-point operation estimate for one page compression, split into
/// projection work (the q/k/v matmuls) and attention work (scores, softmax,
/// weighted sums). One multiply-add counts as 2 flops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompressFlops {
    pub projections: u128,
    pub attention: u128,
}

impl CompressFlops {
    pub fn total(&self) -> u128 {
        self.projections + self.attention
    }
}

pub fn compressor_flops(cfg: &CompressorConfig, r: usize, c: usize, h: usize, w: usize) -> CompressFlops {
    let dim = cfg.dim as u128;
    let heads = cfg.heads.max(1) as u128;
    let layers = cfg.layers as u128;
    let nq = (h * w) as u128;
    let n_hi = (r * c * h * w) as u128;
    let per_query = |keys: u128| keys * (4 * dim + 3 * heads);
    match cfg.kind {
        VariantKind::GroupAtt => CompressFlops {
            projections: layers * 2 * dim * dim * (nq + 2 * n_hi),
            attention: layers * nq * per_query((r * c) as u128),
        },
        VariantKind::CompleteAtt => CompressFlops {
            projections: layers * 2 * dim * dim * (nq + 2 * n_hi),
            attention: layers * nq * per_query(n_hi),
        },
        VariantKind::GroupMean => {
            CompressFlops { projections: 0, attention: n_hi * dim + nq * dim }
        }
        VariantKind::Resampler => {
            let qc = cfg.query_count as u128;
            CompressFlops {
                projections: layers * 2 * dim * dim * (qc + 2 * (nq + n_hi)),
                attention: layers * qc * per_query(nq + n_hi),
            }
        }
        VariantKind::AdaptiveMean => CompressFlops { projections: 0, attention: n_hi * dim },
    }
}
