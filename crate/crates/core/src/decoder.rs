//! Byte-level causal decoder that consumes compressed visual tokens.
//!
//! The prompt is laid out by the sequencer ([`crate::sequencer::assemble`]);
//! this module embeds it, runs pre-norm causal self-attention blocks over it,
//! and either scores a teacher-forced target span or decodes greedily. Visual
//! tokens enter the sequence as-is, so the compressed width must equal the
//! decoder width.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{uniform_fan_in, Bound, Init, ParamSet};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::sequencer::{AssembledSequence, SeqItem, Vocab, SEP};
use crate::tensor::Tensor;

pub use crate::encoder::LN_EPS;

/// Additive attention-mask value for future positions. Large enough that the
/// masked probabilities underflow to exactly zero, small enough to keep every
/// intermediate finite in f32.
const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_seq: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder width {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq == 0 {
            return Err(Error::Config("decoder needs vocab_size and max_seq >= 1".into()));
        }
        Ok(())
    }
}

/// Prompt element with concrete (already evaluated) image tokens; the
/// generation path re-inserts them as graph constants each step.
#[derive(Debug, Clone)]
pub enum ConcreteItem<S: Scalar> {
    Ordinal(usize),
    ImageTokens(Tensor<S>),
    Text(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct ToyDecoder {
    pub cfg: DecoderConfig,
}

impl ToyDecoder {
    pub fn new(cfg: DecoderConfig) -> Result<ToyDecoder> {
        cfg.validate()?;
        Ok(ToyDecoder { cfg })
    }

    /// Register parameters under "dec.".
    pub fn register_params<S: Scalar>(&self, ps: &mut ParamSet<S>, rng: &mut Rng) -> Result<()> {
        let d = self.cfg.d_model;
        ps.register("dec.embed", &[self.cfg.vocab_size, d], uniform_fan_in(d), rng)?;
        ps.register("dec.pos", &[self.cfg.max_seq, d], Init::Zeros, rng)?;
        for b in 0..self.cfg.depth {
            let p = |s: &str| format!("dec.b{b}.{s}");
            ps.register(&p("ln1.g"), &[d], Init::IdentityLike, rng)?;
            ps.register(&p("ln1.b"), &[d], Init::Zeros, rng)?;
            for w in ["wq", "wk", "wv", "wo"] {
                ps.register(&p(&format!("attn.{w}")), &[d, d], uniform_fan_in(d), rng)?;
                ps.register(&p(&format!("attn.{w}b")), &[d], Init::Zeros, rng)?;
            }
            ps.register(&p("ln2.g"), &[d], Init::IdentityLike, rng)?;
            ps.register(&p("ln2.b"), &[d], Init::Zeros, rng)?;
            ps.register(&p("mlp.w1"), &[d, 4 * d], uniform_fan_in(d), rng)?;
            ps.register(&p("mlp.b1"), &[4 * d], Init::Zeros, rng)?;
            ps.register(&p("mlp.w2"), &[4 * d, d], uniform_fan_in(4 * d), rng)?;
            ps.register(&p("mlp.b2"), &[d], Init::Zeros, rng)?;
        }
        ps.register("dec.lnf.g", &[d], Init::IdentityLike, rng)?;
        ps.register("dec.lnf.b", &[d], Init::Zeros, rng)?;
        ps.register("dec.unembed", &[d, self.cfg.vocab_size], uniform_fan_in(d), rng)?;
        Ok(())
    }

    fn check_ids(&self, ids: &[usize], what: &str) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(Error::Argument(format!(
                "{what}: token id {bad} outside vocab of {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Embed prompt items plus `extra_ids`, returning the input matrix
    /// [len, d] with positions added.
    fn embed_sequence<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        items: &[SeqItem],
        extra_ids: &[usize],
    ) -> Result<(Var, usize)> {
        let embed = bound.var("dec.embed")?;
        let mut rows = Vec::new();
        let mut len = 0;
        for item in items {
            match item {
                SeqItem::Ordinal(k) => {
                    // Ordinal ids sit at the top of the vocab; reconstruct the
                    // layout from the decoder's own vocab size.
                    let vocab = Vocab { max_images: self.cfg.vocab_size.saturating_sub(258) };
                    let id = vocab.ordinal(*k)?;
                    self.check_ids(&[id], "page marker")?;
                    rows.push(g.gather_rows(embed, vec![id])?);
                    len += 1;
                }
                SeqItem::ImageTokens { var, len: n } => {
                    let shape = g.value(*var).shape().to_vec();
                    if shape != [*n, self.cfg.d_model] {
                        return Err(Error::dim(
                            "decode",
                            format!(
                                "image tokens are {shape:?}, decoder expects [{n}, {}]",
                                self.cfg.d_model
                            ),
                        ));
                    }
                    rows.push(*var);
                    len += n;
                }
                SeqItem::Text(ids) => {
                    if ids.is_empty() {
                        continue;
                    }
                    self.check_ids(ids, "prompt text")?;
                    rows.push(g.gather_rows(embed, ids.clone())?);
                    len += ids.len();
                }
            }
        }
        if !extra_ids.is_empty() {
            self.check_ids(extra_ids, "target")?;
            rows.push(g.gather_rows(embed, extra_ids.to_vec())?);
            len += extra_ids.len();
        }
        if len == 0 {
            return Err(Error::Argument("decode: empty input sequence".into()));
        }
        if len > self.cfg.max_seq {
            return Err(Error::Config(format!(
                "decode: sequence of {len} exceeds max_seq {}",
                self.cfg.max_seq
            )));
        }
        let x = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
        let pos = bound.var("dec.pos")?;
        let pos_slice = g.slice_rows(pos, 0, len)?;
        Ok((g.add(x, pos_slice)?, len))
    }

    /// Causal transformer over the embedded input; returns logits [len, vocab].
    fn logits<S: Scalar>(&self, g: &mut Graph<S>, bound: &Bound, x: Var, len: usize) -> Result<Var> {
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let dk = d / heads;
        let scale = S::from_f64(1.0 / (dk as f64).sqrt());
        let mask = g.constant(Tensor::from_fn(&[len, len], |i| {
            let (r, c) = (i / len, i % len);
            if c <= r {
                S::zero()
            } else {
                S::from_f64(MASK_NEG)
            }
        }));
        let mut h = x;
        for b in 0..self.cfg.depth {
            let p = |s: &str| format!("dec.b{b}.{s}");
            let ln1g = bound.var(&p("ln1.g"))?;
            let ln1b = bound.var(&p("ln1.b"))?;
            let xn = g.layer_norm(h, ln1g, ln1b, LN_EPS)?;
            let q = {
                let w = bound.var(&p("attn.wq"))?;
                let bias = bound.var(&p("attn.wqb"))?;
                g.linear(xn, w, bias)?
            };
            let k = {
                let w = bound.var(&p("attn.wk"))?;
                let bias = bound.var(&p("attn.wkb"))?;
                g.linear(xn, w, bias)?
            };
            let v = {
                let w = bound.var(&p("attn.wv"))?;
                let bias = bound.var(&p("attn.wvb"))?;
                g.linear(xn, w, bias)?
            };
            let mut head_outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (lo, hi) = (hd * dk, (hd + 1) * dk);
                let qh = g.slice_cols(q, lo, hi)?;
                let kh = g.slice_cols(k, lo, hi)?;
                let vh = g.slice_cols(v, lo, hi)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale);
                let masked = g.add(scores, mask)?;
                let att = g.softmax_rows(masked)?;
                head_outs.push(g.matmul(att, vh)?);
            }
            let merged = if heads == 1 { head_outs[0] } else { g.concat_cols(&head_outs)? };
            let wo = bound.var(&p("attn.wo"))?;
            let wob = bound.var(&p("attn.wob"))?;
            let att_out = g.linear(merged, wo, wob)?;
            h = g.add(h, att_out)?;

            let ln2g = bound.var(&p("ln2.g"))?;
            let ln2b = bound.var(&p("ln2.b"))?;
            let hn = g.layer_norm(h, ln2g, ln2b, LN_EPS)?;
            let w1 = bound.var(&p("mlp.w1"))?;
            let b1 = bound.var(&p("mlp.b1"))?;
            let w2 = bound.var(&p("mlp.w2"))?;
            let b2 = bound.var(&p("mlp.b2"))?;
            let up = g.linear(hn, w1, b1)?;
            let act = g.gelu(up);
            let down = g.linear(act, w2, b2)?;
            h = g.add(h, down)?;
        }
        let lnfg = bound.var("dec.lnf.g")?;
        let lnfb = bound.var("dec.lnf.b")?;
        let hn = g.layer_norm(h, lnfg, lnfb, LN_EPS)?;
        let unembed = bound.var("dec.unembed")?;
        g.matmul(hn, unembed)
    }

    /// Teacher-forced mean cross-entropy over the target span. `target_full`
    /// must already carry its terminator; an empty target scores 0.
    pub fn decode_loss<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        seq: &AssembledSequence,
        target_full: &[usize],
    ) -> Result<Var> {
        if target_full.is_empty() {
            return Ok(g.constant(Tensor::scalar(S::zero())));
        }
        self.check_ids(target_full, "target")?;
        // Input: prompt, SEP, then all but the last target token.
        let mut extra = Vec::with_capacity(target_full.len());
        extra.push(SEP);
        extra.extend_from_slice(&target_full[..target_full.len() - 1]);
        let (x, len) = self.embed_sequence(g, bound, &seq.items, &extra)?;
        debug_assert_eq!(len, seq.prefix_len + target_full.len());
        let logits = self.logits(g, bound, x, len)?;
        // Position prefix_len (the SEP) predicts target_full[0], and so on.
        let pred_rows: Vec<usize> = (seq.prefix_len..len).collect();
        let span = g.gather_rows(logits, pred_rows)?;
        g.cross_entropy_mean(span, target_full.to_vec())
    }

    /// Greedy decoding: append argmax tokens until EOS or `max_new`. Returns
    /// generated ids without the terminator.
    pub fn generate<S: Scalar>(
        &self,
        params: &ParamSet<S>,
        items: &[ConcreteItem<S>],
        vocab: &Vocab,
        max_new: usize,
    ) -> Result<Vec<usize>> {
        let mut generated: Vec<usize> = Vec::new();
        for _ in 0..max_new {
            let mut g = Graph::<S>::new();
            let bound = params.bind_const(&mut g);
            let seq_items: Vec<SeqItem> = items
                .iter()
                .map(|it| match it {
                    ConcreteItem::Ordinal(k) => SeqItem::Ordinal(*k),
                    ConcreteItem::ImageTokens(t) => {
                        let len = t.dim(0);
                        SeqItem::ImageTokens { var: g.constant(t.clone()), len }
                    }
                    ConcreteItem::Text(ids) => SeqItem::Text(ids.clone()),
                })
                .collect();
            let mut extra = Vec::with_capacity(1 + generated.len());
            extra.push(SEP);
            extra.extend_from_slice(&generated);
            let (x, len) = self.embed_sequence(&mut g, &bound, &seq_items, &extra)?;
            let logits = self.logits(&mut g, &bound, x, len)?;
            let row = g.value(logits);
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for t in 0..self.cfg.vocab_size {
                let v = row.at2(len - 1, t).as_f64();
                if v > best_v {
                    best_v = v;
                    best = t;
                }
            }
            if best == vocab.eos() {
                break;
            }
            generated.push(best);
        }
        Ok(generated)
    }
}
