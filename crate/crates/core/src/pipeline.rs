//! End-to-end wiring: raw page image -> crop plan -> visual encoding ->
//! horizontal merge -> layout-aware compression -> decoder sequence.
//!
//! Width bookkeeping: the encoder emits width `d`; the merger maps to `d_hat`,
//! which is also the decoder width. With compression after the merger the
//! compressor runs at `d_hat`; compressing straight on encoder tokens runs at
//! `d` and merges afterwards. Either way a page contributes one global-map's
//! worth of tokens (the resampler instead emits its fixed query count).

use crate::compressor::{
    reorganize_var, CompressorConfig, DocCompressor, MapTokens, Placement, VariantKind,
};
use crate::cropper::{plan_crops, slice_image, CropPlan};
use crate::decoder::{ConcreteItem, DecoderConfig, ToyDecoder};
use crate::encoder::{EncoderConfig, FeatureVar, Provenance, VisualEncoder};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::RawImage;
use crate::params::{Bound, ParamSet};
use crate::reducer::{HReducer, MERGE};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::sequencer::{assemble, budget, TokenBudget, Vocab};
use crate::synthdoc::Sample;
use crate::tensor::Tensor;
use crate::training::{train_stage, weighted_indices, StageReport, StageSpec};

/// Compressor knobs minus the width, which the pipeline derives from the
/// placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompressorSettings {
    pub kind: VariantKind,
    pub placement: Placement,
    pub heads: usize,
    pub layers: usize,
    pub query_count: usize,
}

/// Decoder knobs minus width and vocab, which the pipeline derives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderSettings {
    pub depth: usize,
    pub heads: usize,
    pub max_seq: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineConfig {
    pub max_crops: usize,
    pub encoder: EncoderConfig,
    /// Width after the horizontal merger; also the decoder width.
    pub d_hat: usize,
    pub compressor: CompressorSettings,
    pub decoder: DecoderSettings,
    pub max_images: usize,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub encoder: VisualEncoder,
    pub reducer: HReducer,
    pub compressor: DocCompressor,
    pub decoder: ToyDecoder,
    pub vocab: Vocab,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Pipeline> {
        if cfg.max_crops == 0 {
            return Err(Error::Config("pipeline needs max_crops >= 1".into()));
        }
        let encoder = VisualEncoder::new(cfg.encoder)?;
        if cfg.encoder.grid() % MERGE != 0 {
            return Err(Error::Config(format!(
                "encoder grid {} not divisible by the merge factor {MERGE}",
                cfg.encoder.grid()
            )));
        }
        let reducer = HReducer::new(cfg.encoder.d_model, cfg.d_hat)?;
        let cmp_dim = match cfg.compressor.placement {
            Placement::AfterReducer => cfg.d_hat,
            Placement::AfterVit => cfg.encoder.d_model,
        };
        if cfg.compressor.placement == Placement::AfterVit
            && cfg.compressor.kind == VariantKind::Resampler
        {
            return Err(Error::Config(
                "compressing before the merger requires grid-shaped output; the resampler has none"
                    .into(),
            ));
        }
        let compressor = DocCompressor::new(CompressorConfig {
            kind: cfg.compressor.kind,
            placement: cfg.compressor.placement,
            dim: cmp_dim,
            heads: cfg.compressor.heads,
            layers: cfg.compressor.layers,
            query_count: cfg.compressor.query_count,
        })?;
        let vocab = Vocab::new(cfg.max_images)?;
        let decoder = ToyDecoder::new(DecoderConfig {
            vocab_size: vocab.size(),
            d_model: cfg.d_hat,
            depth: cfg.decoder.depth,
            heads: cfg.decoder.heads,
            max_seq: cfg.decoder.max_seq,
        })?;
        Ok(Pipeline { cfg, encoder, reducer, compressor, decoder, vocab })
    }

    pub fn register_params<S: Scalar>(&self, ps: &mut ParamSet<S>, rng: &mut Rng) -> Result<()> {
        self.encoder.register_params(ps, rng)?;
        self.reducer.register_params(ps, rng)?;
        self.compressor.register_params(ps, rng)?;
        self.decoder.register_params(ps, rng)?;
        Ok(())
    }

    pub fn init_params<S: Scalar>(&self, seed: u64) -> Result<ParamSet<S>> {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(seed);
        self.register_params(&mut ps, &mut rng)?;
        Ok(ps)
    }

    pub fn plan(&self, img: &RawImage) -> Result<CropPlan> {
        plan_crops(img, self.cfg.max_crops, self.cfg.encoder.base)
    }

    /// Visual half of the pipeline for one page: returns the compressed
    /// tokens [len, d_hat] and len.
    pub fn encode_page_var<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        img: &RawImage,
    ) -> Result<(Var, usize)> {
        let plan = self.plan(img)?;
        let (global_img, sub_imgs) = slice_image(img, &plan)?;
        self.encode_maps_var(g, bound, &global_img, &sub_imgs, (plan.rows, plan.cols))
    }

    /// Same as encode_page_var but from pre-cut crops and an explicit grid.
    pub fn encode_maps_var<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        global_img: &RawImage,
        sub_imgs: &[RawImage],
        grid: (usize, usize),
    ) -> Result<(Var, usize)> {
        let (rows, cols) = grid;
        let (gfm, sfms) = self.encoder.encode_page_var(g, bound, global_img, sub_imgs, grid)?;
        let out = match self.cfg.compressor.placement {
            Placement::AfterReducer => {
                let gred = self.reducer.reduce_var(g, bound, &gfm)?;
                let sreds = sfms
                    .iter()
                    .map(|f| self.reducer.reduce_var(g, bound, f))
                    .collect::<Result<Vec<_>>>()?;
                let global = MapTokens::from_reduced(&gred);
                let maps: Vec<MapTokens> = sreds.iter().map(MapTokens::from_reduced).collect();
                let reorg = reorganize_var(g, &maps, rows, cols)?;
                self.compressor.compress_var(g, bound, &global, &reorg)?
            }
            Placement::AfterVit => {
                let global = MapTokens::from_feature(&gfm);
                let maps: Vec<MapTokens> = sfms.iter().map(MapTokens::from_feature).collect();
                let reorg = reorganize_var(g, &maps, rows, cols)?;
                let compressed = self.compressor.compress_var(g, bound, &global, &reorg)?;
                let fv = FeatureVar {
                    tokens: compressed,
                    h: gfm.h,
                    w: gfm.w,
                    d: gfm.d,
                    provenance: Provenance::Global,
                };
                self.reducer.reduce_var(g, bound, &fv)?.tokens
            }
        };
        let len = g.value(out).dim(0);
        Ok((out, len))
    }

    /// Concrete page encoding for generation and inspection.
    pub fn encode_page<S: Scalar>(&self, params: &ParamSet<S>, img: &RawImage) -> Result<Tensor<S>> {
        let mut g = Graph::<S>::new();
        let bound = params.bind_const(&mut g);
        let (out, _) = self.encode_page_var(&mut g, &bound, img)?;
        Ok(g.value(out).clone())
    }

    /// Teacher-forced loss for one task sample.
    pub fn sample_loss_var<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        sample: &Sample,
    ) -> Result<Var> {
        let mut images = Vec::with_capacity(sample.pages.len());
        for page in &sample.pages {
            images.push(self.encode_page_var(g, bound, &page.image)?);
        }
        let instr = self.vocab.encode_text(&sample.instruction);
        let seq = assemble(&images, &instr, &self.vocab)?;
        let mut target = self.vocab.encode_text(&sample.target);
        target.push(self.vocab.eos());
        self.decoder.decode_loss(g, bound, &seq, &target)
    }

    /// Mean loss over a batch of samples, in one graph.
    pub fn batch_loss_var<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        samples: &[&Sample],
    ) -> Result<Var> {
        if samples.is_empty() {
            return Err(Error::Argument("batch_loss: empty batch".into()));
        }
        let mut acc: Option<Var> = None;
        for sample in samples {
            let loss = self.sample_loss_var(g, bound, sample)?;
            acc = Some(match acc {
                None => loss,
                Some(a) => g.add(a, loss)?,
            });
        }
        Ok(g.scale(acc.unwrap(), S::from_f64(1.0 / samples.len() as f64)))
    }

    /// Greedy answer for one sample.
    pub fn predict<S: Scalar>(
        &self,
        params: &ParamSet<S>,
        sample: &Sample,
        max_new: usize,
    ) -> Result<String> {
        let mut items = Vec::with_capacity(2 * sample.pages.len() + 1);
        for (i, page) in sample.pages.iter().enumerate() {
            items.push(ConcreteItem::Ordinal(i + 1));
            items.push(ConcreteItem::ImageTokens(self.encode_page(params, &page.image)?));
        }
        items.push(ConcreteItem::Text(self.vocab.encode_text(&sample.instruction)));
        let ids = self.decoder.generate(params, &items, &self.vocab, max_new)?;
        Ok(self.vocab.decode_text(&ids))
    }

    /// Token arithmetic for a page cropped to `rows` x `cols`.
    pub fn token_budget(&self, rows: usize, cols: usize) -> Result<TokenBudget> {
        budget(self.cfg.encoder.base, self.cfg.encoder.patch, rows, cols)
    }
}

/// One stage plus its data: corpora with mixture weights and a batch size.
#[derive(Debug, Clone)]
pub struct StagePlan {
    pub spec: StageSpec,
    pub batch: usize,
    pub mixes: Vec<(f64, Vec<Sample>)>,
}

/// Run the staged schedule, drawing each batch from the stage's corpus
/// mixture (corpora by weight, samples uniformly within a corpus).
pub fn run_schedule<S: Scalar>(
    pipeline: &Pipeline,
    params: &mut ParamSet<S>,
    plan: &[StagePlan],
    rng: &mut Rng,
) -> Result<Vec<StageReport>> {
    let mut reports = Vec::with_capacity(plan.len());
    for stage in plan {
        if stage.batch == 0 {
            return Err(Error::Config(format!("stage {:?} has zero batch", stage.spec.name)));
        }
        if stage.mixes.iter().all(|(_, corpus)| corpus.is_empty()) {
            return Err(Error::Config(format!("stage {:?} has no samples", stage.spec.name)));
        }
        let weights: Vec<f64> = stage
            .mixes
            .iter()
            .map(|(w, corpus)| if corpus.is_empty() { 0.0 } else { *w })
            .collect();
        let report = train_stage(params, &stage.spec, rng, |g, bound, rng, _step| {
            let picks = weighted_indices(rng, &weights, stage.batch)?;
            let batch: Vec<&Sample> = picks
                .into_iter()
                .map(|ci| {
                    let corpus = &stage.mixes[ci].1;
                    &corpus[rng.below(corpus.len())]
                })
                .collect();
            pipeline.batch_loss_var(g, bound, &batch)
        })?;
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdoc::{gen_sample, PageSpec, TaskKind};

    fn tiny_cfg(kind: VariantKind, placement: Placement) -> PipelineConfig {
        PipelineConfig {
            max_crops: 12,
            encoder: EncoderConfig { base: 56, patch: 14, depth: 1, d_model: 8, heads: 2 },
            d_hat: 8,
            compressor: CompressorSettings { kind, placement, heads: 2, layers: 2, query_count: 3 },
            decoder: DecoderSettings { depth: 1, heads: 2, max_seq: 160 },
            max_images: 10,
        }
    }

    fn page_spec() -> PageSpec {
        PageSpec { glyph_rows: 1, glyph_cols: 4, scale: 1, canvas_h: 32, canvas_w: 32, alphabet: 36 }
    }

    #[test]
    fn single_page_loss_is_finite_and_differentiable() {
        let p = Pipeline::new(tiny_cfg(VariantKind::GroupAtt, Placement::AfterReducer)).unwrap();
        let params = p.init_params::<f64>(1).unwrap();
        let mut rng = Rng::new(2);
        let sample = gen_sample(&mut rng, TaskKind::SingleParse, 1, &page_spec()).unwrap();
        let mut g = Graph::<f64>::new();
        let bound = params.bind(&mut g);
        let loss = p.sample_loss_var(&mut g, &bound, &sample).unwrap();
        assert!(g.value(loss).item().unwrap().is_finite());
        let grads = g.backward(loss).unwrap();
        // Every registered parameter participates for the default variant.
        let mut missing = Vec::new();
        for (name, var) in bound.iter() {
            if grads.get(var).is_none() {
                missing.push(name.to_string());
            }
        }
        assert!(missing.is_empty(), "parameters without gradient: {missing:?}");
    }

    #[test]
    fn wide_page_uses_multiple_crops_and_budget_length() {
        let p = Pipeline::new(tiny_cfg(VariantKind::GroupAtt, Placement::AfterReducer)).unwrap();
        let params = p.init_params::<f64>(3).unwrap();
        let spec = PageSpec { glyph_rows: 1, glyph_cols: 8, scale: 1, canvas_h: 56, canvas_w: 224, alphabet: 36 };
        let mut rng = Rng::new(4);
        let sample = gen_sample(&mut rng, TaskKind::SingleParse, 1, &spec).unwrap();
        let plan = p.plan(&sample.pages[0].image).unwrap();
        assert_eq!((plan.rows, plan.cols), (1, 4));
        let tokens = p.encode_page(&params, &sample.pages[0].image).unwrap();
        let budget = p.token_budget(plan.rows, plan.cols).unwrap();
        assert_eq!(tokens.dim(0), budget.compressed);
        assert_eq!(tokens.dim(1), 8);
    }

    #[test]
    fn both_placements_yield_same_shape() {
        let mut rng = Rng::new(5);
        let sample = gen_sample(&mut rng, TaskKind::SingleParse, 1, &page_spec()).unwrap();
        let mut shapes = Vec::new();
        for placement in [Placement::AfterReducer, Placement::AfterVit] {
            let p = Pipeline::new(tiny_cfg(VariantKind::GroupAtt, placement)).unwrap();
            let params = p.init_params::<f64>(6).unwrap();
            let t = p.encode_page(&params, &sample.pages[0].image).unwrap();
            shapes.push(t.shape().to_vec());
        }
        assert_eq!(shapes[0], shapes[1]);
    }

    #[test]
    fn resampler_page_length_is_query_count() {
        let p = Pipeline::new(tiny_cfg(VariantKind::Resampler, Placement::AfterReducer)).unwrap();
        let params = p.init_params::<f64>(7).unwrap();
        let mut rng = Rng::new(8);
        let sample = gen_sample(&mut rng, TaskKind::SingleParse, 1, &page_spec()).unwrap();
        let t = p.encode_page(&params, &sample.pages[0].image).unwrap();
        assert_eq!(t.dim(0), 3);
    }

    #[test]
    fn resampler_cannot_precede_merger() {
        assert!(matches!(
            Pipeline::new(tiny_cfg(VariantKind::Resampler, Placement::AfterVit)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn predict_returns_text_for_multipage() {
        let p = Pipeline::new(tiny_cfg(VariantKind::GroupAtt, Placement::AfterReducer)).unwrap();
        let params = p.init_params::<f64>(9).unwrap();
        let mut rng = Rng::new(10);
        let sample = gen_sample(&mut rng, TaskKind::Lookup, 3, &page_spec()).unwrap();
        let out = p.predict(&params, &sample, 6).unwrap();
        assert!(out.len() <= 6 * 4);
    }

    #[test]
    fn schedule_smoke_run_trains_and_freezes() {
        let p = Pipeline::new(tiny_cfg(VariantKind::GroupAtt, Placement::AfterReducer)).unwrap();
        let mut params = p.init_params::<f32>(11).unwrap();
        let mut rng = Rng::new(12);
        let corpus: Vec<Sample> = (0..4)
            .map(|_| gen_sample(&mut rng, TaskKind::SingleParse, 1, &page_spec()).unwrap())
            .collect();
        let snapshot = |ps: &ParamSet<f32>| -> Vec<u32> {
            ps.get("enc.patch.w").unwrap().tensor.data().iter().map(|v| v.to_bits()).collect()
        };
        let enc_start = snapshot(&params);
        let warm = vec![StagePlan {
            spec: StageSpec { name: "warm".into(), steps: 2, lr: 1e-3, freeze_prefixes: vec![] },
            batch: 2,
            mixes: vec![(1.0, corpus.clone())],
        }];
        let reports = run_schedule(&p, &mut params, &warm, &mut rng).unwrap();
        assert!(reports[0].last_loss.is_finite());
        let enc_warm = snapshot(&params);
        assert_ne!(enc_start, enc_warm, "unfrozen stage should move encoder weights");
        let frozen = vec![StagePlan {
            spec: StageSpec {
                name: "frozen-enc".into(),
                steps: 2,
                lr: 1e-3,
                freeze_prefixes: vec!["enc.".into()],
            },
            batch: 2,
            mixes: vec![(1.0, corpus)],
        }];
        let reports = run_schedule(&p, &mut params, &frozen, &mut rng).unwrap();
        assert!(reports[0].last_loss.is_finite());
        assert_eq!(enc_warm, snapshot(&params), "frozen stage must not touch encoder weights");
    }
}
