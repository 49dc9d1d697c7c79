//! Patch-embedding transformer encoder for fixed-size crops.
//!
//! Every crop (the global view and each sub-image) is encoded independently
//! by the same weights: non-overlapping patch convolution, learned positional
//! embedding, then `depth` pre-norm bidirectional attention blocks. depth 0 is
//! a plain patch embedder, which keeps gradient-check geometries cheap.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::RawImage;
use crate::params::{uniform_fan_in, Bound, Init, ParamSet};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Layer-norm epsilon used by every norm in the crate.
pub const LN_EPS: f64 = 1e-5;

/// Where a feature map came from. Downstream stages use this to validate that
/// queries really are global views and keys really are sub-images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Global,
    Sub { row: usize, col: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Crop side length in pixels; every input must be exactly base x base.
    pub base: usize,
    /// Patch side length; base must be divisible by it.
    pub patch: usize,
    /// Number of attention blocks (0 = patch embedding only).
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base == 0 || self.patch == 0 || self.d_model == 0 || self.heads == 0 {
            return Err(Error::Config(format!("encoder config has a zero field: {self:?}")));
        }
        if self.base % self.patch != 0 {
            return Err(Error::Config(format!(
                "crop base {} is not divisible by patch {}",
                self.base, self.patch
            )));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// Tokens per side: the feature map is grid() x grid().
    pub fn grid(&self) -> usize {
        self.base / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Feature map handle inside a graph: tokens are [h*w, d] in row-major
/// spatial order.
#[derive(Debug, Clone, Copy)]
pub struct FeatureVar {
    pub tokens: Var,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub provenance: Provenance,
}

/// Concrete feature map: values are [h, w, d].
#[derive(Debug, Clone)]
pub struct FeatureMap<S: Scalar> {
    pub values: Tensor<S>,
    pub provenance: Provenance,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn h(&self) -> usize {
        self.values.dim(0)
    }
    pub fn w(&self) -> usize {
        self.values.dim(1)
    }
    pub fn d(&self) -> usize {
        self.values.dim(2)
    }
}

#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub cfg: EncoderConfig,
}

impl VisualEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(VisualEncoder { cfg })
    }

    /// Register all encoder parameters under "enc.".
    pub fn register_params<S: Scalar>(&self, ps: &mut ParamSet<S>, rng: &mut Rng) -> Result<()> {
        let d = self.cfg.d_model;
        let p = self.cfg.patch;
        let patch_fan = 3 * p * p;
        ps.register("enc.patch.w", &[d, 3, p, p], uniform_fan_in(patch_fan), rng)?;
        ps.register("enc.patch.b", &[d], uniform_fan_in(patch_fan), rng)?;
        ps.register("enc.pos", &[self.cfg.tokens(), d], Init::Zeros, rng)?;
        for b in 0..self.cfg.depth {
            let pre = format!("enc.blk{b}");
            ps.register(&format!("{pre}.ln1.g"), &[d], Init::IdentityLike, rng)?;
            ps.register(&format!("{pre}.ln1.b"), &[d], Init::Zeros, rng)?;
            for w in ["wq", "wk", "wv", "wo"] {
                ps.register(&format!("{pre}.attn.{w}"), &[d, d], uniform_fan_in(d), rng)?;
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                ps.register(&format!("{pre}.attn.{bias}"), &[d], uniform_fan_in(d), rng)?;
            }
            ps.register(&format!("{pre}.ln2.g"), &[d], Init::IdentityLike, rng)?;
            ps.register(&format!("{pre}.ln2.b"), &[d], Init::Zeros, rng)?;
            ps.register(&format!("{pre}.mlp.w1"), &[d, 4 * d], uniform_fan_in(d), rng)?;
            ps.register(&format!("{pre}.mlp.b1"), &[4 * d], uniform_fan_in(d), rng)?;
            ps.register(&format!("{pre}.mlp.w2"), &[4 * d, d], uniform_fan_in(4 * d), rng)?;
            ps.register(&format!("{pre}.mlp.b2"), &[d], uniform_fan_in(4 * d), rng)?;
        }
        Ok(())
    }

    /// Encode one crop into the graph. The crop must be exactly base x base;
    /// single-channel inputs are replicated to three channels.
    pub fn encode_var<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        img: &RawImage,
        provenance: Provenance,
    ) -> Result<FeatureVar> {
        let base = self.cfg.base;
        if img.height != base || img.width != base {
            return Err(Error::dim(
                "encode",
                format!("expected {base}x{base} crop, got {}x{}", img.height, img.width),
            ));
        }
        let rgb = img.to_three_channel();
        let x = g.constant(rgb.to_chw_tensor::<S>());
        let kernel = bound.var("enc.patch.w")?;
        let grid = self.cfg.grid();
        let d = self.cfg.d_model;
        let conv = g.conv2d(x, kernel, (self.cfg.patch, self.cfg.patch))?;
        let conv = g.add_channel_bias(conv, bound.var("enc.patch.b")?)?;
        // [d, grid, grid] -> [grid, grid, d] -> [grid*grid, d]
        let hwd = g.permute3(conv, [1, 2, 0])?;
        let tokens = g.reshape(hwd, &[grid * grid, d])?;
        let mut x = g.add(tokens, bound.var("enc.pos")?)?;
        for b in 0..self.cfg.depth {
            x = self.block(g, bound, x, b)?;
        }
        Ok(FeatureVar { tokens: x, h: grid, w: grid, d, provenance })
    }

    fn block<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        x: Var,
        b: usize,
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let dk = d / heads;
        let pre = format!("enc.blk{b}");
        let n = g.value(x).dim(0);

        let a = g.layer_norm(x, bound.var(&format!("{pre}.ln1.g"))?, bound.var(&format!("{pre}.ln1.b"))?, LN_EPS)?;
        let q = g.linear(a, bound.var(&format!("{pre}.attn.wq"))?, bound.var(&format!("{pre}.attn.bq"))?)?;
        let k = g.linear(a, bound.var(&format!("{pre}.attn.wk"))?, bound.var(&format!("{pre}.attn.bk"))?)?;
        let v = g.linear(a, bound.var(&format!("{pre}.attn.wv"))?, bound.var(&format!("{pre}.attn.bv"))?)?;
        let scale = S::from_f64(1.0 / (dk as f64).sqrt());
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let att = g.softmax_rows(scores)?;
            head_outs.push(g.matmul(att, vh)?);
        }
        let merged =
            if heads == 1 { head_outs[0] } else { g.concat_cols(&head_outs)? };
        let o = g.linear(merged, bound.var(&format!("{pre}.attn.wo"))?, bound.var(&format!("{pre}.attn.bo"))?)?;
        let x = g.add(x, o)?;
        debug_assert_eq!(g.value(x).dim(0), n);

        let m = g.layer_norm(x, bound.var(&format!("{pre}.ln2.g"))?, bound.var(&format!("{pre}.ln2.b"))?, LN_EPS)?;
        let hmid = g.linear(m, bound.var(&format!("{pre}.mlp.w1"))?, bound.var(&format!("{pre}.mlp.b1"))?)?;
        let hact = g.gelu(hmid);
        let out = g.linear(hact, bound.var(&format!("{pre}.mlp.w2"))?, bound.var(&format!("{pre}.mlp.b2"))?)?;
        g.add(x, out)
    }

    /// Encode the global view and every sub-image of a sliced page. Sub-maps
    /// come back in the same row-major order as the input.
    pub fn encode_page_var<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        global: &RawImage,
        subs: &[RawImage],
        grid: (usize, usize),
    ) -> Result<(FeatureVar, Vec<FeatureVar>)> {
        let (rows, cols) = grid;
        if subs.len() != rows * cols {
            return Err(Error::Consistency(format!(
                "{} sub-images for a {}x{} grid",
                subs.len(),
                rows,
                cols
            )));
        }
        let gfm = self.encode_var(g, bound, global, Provenance::Global)?;
        let mut sfms = Vec::with_capacity(subs.len());
        for (i, sub) in subs.iter().enumerate() {
            let prov = Provenance::Sub { row: i / cols, col: i % cols };
            sfms.push(self.encode_var(g, bound, sub, prov)?);
        }
        Ok((gfm, sfms))
    }

    /// Concrete single-image encode used outside training loops.
    pub fn encode<S: Scalar>(
        &self,
        params: &ParamSet<S>,
        img: &RawImage,
        provenance: Provenance,
    ) -> Result<FeatureMap<S>> {
        let mut g = Graph::<S>::new();
        let bound = params.bind_const(&mut g);
        let fv = self.encode_var(&mut g, &bound, img, provenance)?;
        let values = g.value(fv.tokens).reshaped(&[fv.h, fv.w, fv.d])?;
        Ok(FeatureMap { values, provenance })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig { base: 28, patch: 14, depth: 1, d_model: 8, heads: 2 }
    }

    fn setup(cfg: EncoderConfig, seed: u64) -> (VisualEncoder, ParamSet<f64>) {
        let enc = VisualEncoder::new(cfg).unwrap();
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(seed);
        enc.register_params(&mut ps, &mut rng).unwrap();
        (enc, ps)
    }

    fn noise_image(side: usize, seed: u64) -> RawImage {
        let mut rng = Rng::new(seed);
        let mut img = RawImage::constant(side, side, 3, 0.0).unwrap();
        for y in 0..side {
            for x in 0..side {
                for c in 0..3 {
                    img.set(y, x, c, rng.uniform::<f64>(0.0, 1.0) as f32);
                }
            }
        }
        img
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig { base: 56, patch: 14, depth: 1, d_model: 8, heads: 2 }
            .validate()
            .is_ok());
        assert!(EncoderConfig { base: 50, patch: 14, depth: 1, d_model: 8, heads: 2 }
            .validate()
            .is_err());
        assert!(EncoderConfig { base: 56, patch: 14, depth: 1, d_model: 9, heads: 2 }
            .validate()
            .is_err());
    }

    #[test]
    fn output_shape_is_grid_tokens() {
        let (enc, ps) = setup(small_cfg(), 1);
        let fm = enc.encode(&ps, &noise_image(28, 5), Provenance::Global).unwrap();
        assert_eq!(fm.values.shape(), &[2, 2, 8]);
    }

    #[test]
    fn wrong_input_size_is_dim_error() {
        let (enc, ps) = setup(small_cfg(), 1);
        let err = enc.encode(&ps, &noise_image(27, 5), Provenance::Global);
        assert!(matches!(err, Err(Error::Dim { .. })));
    }

    #[test]
    fn depth_zero_is_patch_embedding_plus_position() {
        let cfg = EncoderConfig { base: 28, patch: 14, depth: 0, d_model: 4, heads: 1 };
        let (enc, ps) = setup(cfg, 2);
        let fm = enc.encode(&ps, &noise_image(28, 6), Provenance::Global).unwrap();
        assert_eq!(fm.values.shape(), &[2, 2, 4]);
        // With zero positional embeddings the tokens are pure patch
        // projections: constant-color patches of equal color must map to
        // identical tokens.
        let flat = RawImage::constant(28, 28, 3, 0.5).unwrap();
        let fm = enc.encode(&ps, &flat, Provenance::Global).unwrap();
        let first: Vec<f64> = (0..4).map(|k| fm.values.at3(0, 0, k)).collect();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..4 {
                    assert!((fm.values.at3(i, j, k) - first[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gray_input_equals_replicated_rgb() {
        let (enc, ps) = setup(small_cfg(), 3);
        let mut gray = RawImage::constant(28, 28, 1, 0.0).unwrap();
        for y in 0..28 {
            for x in 0..28 {
                gray.set(y, x, 0, ((y * x) % 7) as f32 / 7.0);
            }
        }
        let rgb = gray.to_three_channel();
        let a = enc.encode(&ps, &gray, Provenance::Global).unwrap();
        let b = enc.encode(&ps, &rgb, Provenance::Global).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn encoding_is_deterministic_and_weight_dependent() {
        let (enc, ps) = setup(small_cfg(), 4);
        let img = noise_image(28, 7);
        let a = enc.encode(&ps, &img, Provenance::Global).unwrap();
        let b = enc.encode(&ps, &img, Provenance::Global).unwrap();
        assert_eq!(a.values, b.values);
        let (_, ps2) = setup(small_cfg(), 5);
        let c = enc.encode(&ps2, &img, Provenance::Global).unwrap();
        assert!(a.values.max_abs_diff(&c.values).unwrap() > 1e-6);
    }

    #[test]
    fn page_encode_keeps_order_and_provenance() {
        let (enc, ps) = setup(small_cfg(), 8);
        let mut g = Graph::<f64>::new();
        let bound = ps.bind_const(&mut g);
        let imgs: Vec<RawImage> = (0..4).map(|i| noise_image(28, 100 + i)).collect();
        let (gfm, sfms) = enc
            .encode_page_var(&mut g, &bound, &imgs[0], &imgs[1..3].to_vec(), (1, 2))
            .unwrap();
        assert_eq!(gfm.provenance, Provenance::Global);
        assert_eq!(sfms[0].provenance, Provenance::Sub { row: 0, col: 0 });
        assert_eq!(sfms[1].provenance, Provenance::Sub { row: 0, col: 1 });
        let err = enc.encode_page_var(&mut g, &bound, &imgs[0], &imgs[1..3].to_vec(), (2, 2));
        assert!(matches!(err, Err(Error::Consistency(_))));
    }

    #[test]
    fn encoder_gradients_check_against_finite_differences() {
        let cfg = EncoderConfig { base: 28, patch: 14, depth: 1, d_model: 4, heads: 2 };
        let (enc, ps) = setup(cfg, 11);
        let img = noise_image(28, 21);
        let report = crate::gradcheck::grad_check(
            |g, b| {
                let fm = enc.encode_var(g, b, &img, Provenance::Global)?;
                Ok(g.sum_all(fm.tokens))
            },
            &ps,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "max rel err {:e} at {:?}", report.max_rel_err, report.worst);
    }
}
