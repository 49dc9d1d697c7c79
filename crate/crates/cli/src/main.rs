//! doctok: command-line frontend for the document token pipeline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use doctok_core::compressor::{CompressorConfig, DocCompressor, MapTokens, Placement, VariantKind};
use doctok_core::config::{parse_str, RunConfig};
use doctok_core::cropper::slice_image;
use doctok_core::encoder::{FeatureVar, Provenance};
use doctok_core::error::{Error, Result};
use doctok_core::graph::Graph;
use doctok_core::image::{read_png, read_ppm, RawImage};
use doctok_core::params::ParamSet;
use doctok_core::pipeline::{run_schedule, Pipeline, StagePlan};
use doctok_core::reducer::HReducer;
use doctok_core::rng::Rng;
use doctok_core::sequencer::{budget, prefill_flops, DecoderShape};
use doctok_core::serial::{load_params_into, read_tensor, save_params, write_tensor};
use doctok_core::synthdoc::{gen_corpus, gen_sample, load_corpus, save_corpus, PageSpec, Sample, TaskKind};
use doctok_core::training::{evaluate, EvalOutcome, StageSpec};
use doctok_core::Tensor32;

#[derive(Parser)]
#[command(
    name = "doctok",
    about = "Shape-adaptive cropping, visual token compression, and toy document training",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the crop grid and sub-image rectangles for an image as CSV.
    CropPlan {
        /// Input image (.png, .ppm, .pgm).
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 12)]
        max_crops: usize,
        /// Crop side length in pixels.
        #[arg(long, default_value_t = 56)]
        base: usize,
    },
    /// Run cropping plus the visual encoder; write per-crop feature maps.
    Encode {
        /// Run configuration file; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        /// Directory of trained parameters (from train-toy); fresh seeded
        /// weights when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for feature maps and meta.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compress feature maps written by `encode` into one token sequence.
    Compress {
        /// Directory produced by `encode`.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = "group_att")]
        variant: String,
        #[arg(long, default_value = "after_reducer")]
        placement: String,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        /// Learned query count (resampler only).
        #[arg(long, default_value_t = 16)]
        query_count: usize,
        /// Width after the horizontal merger.
        #[arg(long, default_value_t = 8)]
        d_hat: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output tensor file; defaults to DIR/compressed.bin.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the token budget for a crop grid as CSV.
    Tokens {
        #[arg(long, default_value_t = 56)]
        base: usize,
        #[arg(long, default_value_t = 14)]
        patch: usize,
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        /// Number of images in the assembled sequence.
        #[arg(long, default_value_t = 1)]
        images: usize,
    },
    /// Time the visual pipeline and count decoder prefill flops per variant.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Bench image; a synthetic page when omitted.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic task corpus on disk.
    GenCorpus {
        /// single_parse | page_parse | two_page_parse | lookup
        #[arg(long)]
        kind: String,
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Pages per sample: a count ("3") or an inclusive range ("2-10").
        #[arg(long, default_value = "1")]
        pages: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        glyph_rows: usize,
        #[arg(long, default_value_t = 4)]
        glyph_cols: usize,
        #[arg(long, default_value_t = 1)]
        scale: usize,
        #[arg(long, default_value_t = 32)]
        canvas_h: usize,
        #[arg(long, default_value_t = 32)]
        canvas_w: usize,
        /// Text draws from the first N font characters (1..=36).
        #[arg(long, default_value_t = 36)]
        alphabet: usize,
    },
    /// Train the toy model per a staged plan file.
    TrainToy {
        /// Plan file: pipeline keys plus [corpus] and [stage] sections.
        #[arg(long)]
        plan: PathBuf,
        /// Overrides the plan seed (which DTC_SEED in turn overrides).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained model on a corpus; prints metrics CSV.
    EvalToy {
        /// train-toy output directory.
        #[arg(long)]
        model: PathBuf,
        /// Corpus directory (gen-corpus output or a train-toy corpus_* dir).
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every compressor variant on identical data; write comparison CSV.
    Ablate {
        /// Plan file shared by all rows.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds; one full comparison per seed.
        #[arg(long, default_value = "1")]
        seeds: String,
        /// Comma-separated variant names.
        #[arg(long, default_value = "group_att,complete_att,group_mean,resampler,adaptive_mean")]
        variants: String,
        /// Comma-separated placements.
        #[arg(long, default_value = "after_reducer")]
        placements: String,
        /// Held-out samples drawn from the first corpus spec.
        #[arg(long, default_value_t = 100)]
        eval_n: usize,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Argument(_) => ExitCode::from(2),
                Error::Numeric { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::CropPlan { image, max_crops, base } => cmd_crop_plan(&image, max_crops, base),
        Cmd::Encode { config, image, params, seed, out } => {
            cmd_encode(config.as_deref(), &image, params.as_deref(), seed, &out)
        }
        Cmd::Compress { dir, variant, placement, layers, heads, query_count, d_hat, seed, out } => {
            cmd_compress(&dir, &variant, &placement, layers, heads, query_count, d_hat, seed, out)
        }
        Cmd::Tokens { base, patch, rows, cols, images } => cmd_tokens(base, patch, rows, cols, images),
        Cmd::Bench { config, image, seed, out } => {
            cmd_bench(config.as_deref(), image.as_deref(), seed, out.as_deref())
        }
        Cmd::GenCorpus {
            kind,
            n,
            pages,
            seed,
            out,
            glyph_rows,
            glyph_cols,
            scale,
            canvas_h,
            canvas_w,
            alphabet,
        } => {
            let spec = PageSpec { glyph_rows, glyph_cols, scale, canvas_h, canvas_w, alphabet };
            cmd_gen_corpus(&kind, n, &pages, seed, &out, &spec)
        }
        Cmd::TrainToy { plan, seed, out } => cmd_train_toy(&plan, seed, &out),
        Cmd::EvalToy { model, corpus, max_new, out } => {
            cmd_eval_toy(&model, &corpus, max_new, out.as_deref())
        }
        Cmd::Ablate { config, out, seeds, variants, placements, eval_n, max_new } => {
            cmd_ablate(&config, &out, &seeds, &variants, &placements, eval_n, max_new)
        }
    }
}

fn load_image(path: &Path) -> Result<RawImage> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => read_png(path),
        Some("ppm") | Some("pgm") => read_ppm(path),
        other => Err(Error::Format(format!(
            "unsupported image extension {other:?} for {}; expected png, ppm, or pgm",
            path.display()
        ))),
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_str_checked(&fs::read_to_string(p)?),
        None => RunConfig::from_str_checked(""),
    }
}

fn cmd_crop_plan(image: &Path, max_crops: usize, base: usize) -> Result<()> {
    let img = load_image(image)?;
    let plan = doctok_core::cropper::plan_crops(&img, max_crops, base)?;
    println!("rows,cols,row,col,x,y,width,height");
    for r in &plan.sub_rects {
        println!(
            "{},{},{},{},{},{},{},{}",
            plan.rows, plan.cols, r.row, r.col, r.x, r.y, r.w, r.h
        );
    }
    Ok(())
}

fn cmd_tokens(base: usize, patch: usize, rows: usize, cols: usize, images: usize) -> Result<()> {
    if images == 0 {
        return Err(Error::Argument("tokens: --images must be at least 1".into()));
    }
    let b = budget(base, patch, rows, cols)?;
    println!(
        "base,patch,rows,cols,images,per_map,uncompressed,compressed,ratio,seq_uncompressed,seq_compressed"
    );
    println!(
        "{base},{patch},{rows},{cols},{images},{},{},{},{},{},{}",
        b.per_map,
        b.uncompressed,
        b.compressed,
        b.ratio(),
        images * b.uncompressed,
        images * b.compressed
    );
    Ok(())
}

fn cmd_encode(
    config: Option<&Path>,
    image: &Path,
    params_dir: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let rc = load_run_config(config)?;
    let pipeline = Pipeline::new(rc.pipeline)?;
    let mut params: ParamSet<f32> = pipeline.init_params(seed)?;
    if let Some(dir) = params_dir {
        load_params_into(dir, &mut params)?;
    }
    let img = load_image(image)?;
    let plan = pipeline.plan(&img)?;
    let (global, subs) = slice_image(&img, &plan)?;
    fs::create_dir_all(out)?;
    let gm = pipeline.encoder.encode(&params, &global, Provenance::Global)?;
    write_tensor(&out.join("global.bin"), &gm.values)?;
    for (i, sub) in subs.iter().enumerate() {
        let prov = Provenance::Sub { row: i / plan.cols, col: i % plan.cols };
        let fm = pipeline.encoder.encode(&params, sub, prov)?;
        write_tensor(&out.join(format!("sub_{i:02}.bin")), &fm.values)?;
    }
    let side = pipeline.cfg.encoder.grid();
    fs::write(
        out.join("meta.txt"),
        format!(
            "rows = {}\ncols = {}\nh = {side}\nw = {side}\nd = {}\nbase = {}\npatch = {}\n",
            plan.rows, plan.cols, pipeline.cfg.encoder.d_model, pipeline.cfg.encoder.base,
            pipeline.cfg.encoder.patch
        ),
    )?;
    println!("rows,cols,maps,h,w,d");
    println!(
        "{},{},{},{side},{side},{}",
        plan.rows,
        plan.cols,
        1 + plan.cell_count(),
        pipeline.cfg.encoder.d_model
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_compress(
    dir: &Path,
    variant: &str,
    placement: &str,
    layers: usize,
    heads: usize,
    query_count: usize,
    d_hat: usize,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<()> {
    let kind = VariantKind::parse(variant)?;
    let placement = Placement::parse(placement)?;
    let meta = parse_str(&fs::read_to_string(dir.join("meta.txt"))?)?;
    let rows = meta.root.usize("rows")?;
    let cols = meta.root.usize("cols")?;
    let h = meta.root.usize("h")?;
    let w = meta.root.usize("w")?;
    let d = meta.root.usize("d")?;
    let base = meta.root.usize("base")?;
    let patch = meta.root.usize("patch")?;

    let global: Tensor32 = read_tensor(&dir.join("global.bin"))?;
    let mut subs: Vec<Tensor32> = Vec::with_capacity(rows * cols);
    for i in 0..rows * cols {
        subs.push(read_tensor(&dir.join(format!("sub_{i:02}.bin")))?);
    }
    for t in std::iter::once(&global).chain(subs.iter()) {
        if t.shape() != [h, w, d] {
            return Err(Error::Consistency(format!(
                "feature map shape {:?} does not match meta [h, w, d] = [{h}, {w}, {d}]",
                t.shape()
            )));
        }
    }

    if placement == Placement::AfterVit && kind == VariantKind::Resampler {
        return Err(Error::Config(
            "compressing before the merger requires grid-shaped output; the resampler has none"
                .into(),
        ));
    }
    let cmp_dim = match placement {
        Placement::AfterReducer => d_hat,
        Placement::AfterVit => d,
    };
    let reducer = HReducer::new(d, d_hat)?;
    let compressor = DocCompressor::new(CompressorConfig {
        kind,
        placement,
        dim: cmp_dim,
        heads,
        layers,
        query_count,
    })?;
    let mut ps: ParamSet<f32> = ParamSet::new();
    let mut rng = Rng::new(seed);
    reducer.register_params(&mut ps, &mut rng)?;
    compressor.register_params(&mut ps, &mut rng)?;

    let mut g: Graph<f32> = Graph::new();
    let bound = ps.bind_const(&mut g);
    let fv = |g: &mut Graph<f32>, t: &Tensor32, prov: Provenance| -> Result<FeatureVar> {
        Ok(FeatureVar {
            tokens: g.constant(t.reshaped(&[h * w, d])?),
            h,
            w,
            d,
            provenance: prov,
        })
    };
    let gfm = fv(&mut g, &global, Provenance::Global)?;
    let sfms = subs
        .iter()
        .enumerate()
        .map(|(i, t)| fv(&mut g, t, Provenance::Sub { row: i / cols, col: i % cols }))
        .collect::<Result<Vec<_>>>()?;
    let out_var = match placement {
        Placement::AfterReducer => {
            let gred = reducer.reduce_var(&mut g, &bound, &gfm)?;
            let sreds = sfms
                .iter()
                .map(|f| reducer.reduce_var(&mut g, &bound, f))
                .collect::<Result<Vec<_>>>()?;
            let global_map = MapTokens::from_reduced(&gred);
            let maps: Vec<MapTokens> = sreds.iter().map(MapTokens::from_reduced).collect();
            let reorg = doctok_core::compressor::reorganize_var(&mut g, &maps, rows, cols)?;
            compressor.compress_var(&mut g, &bound, &global_map, &reorg)?
        }
        Placement::AfterVit => {
            let global_map = MapTokens::from_feature(&gfm);
            let maps: Vec<MapTokens> = sfms.iter().map(MapTokens::from_feature).collect();
            let reorg = doctok_core::compressor::reorganize_var(&mut g, &maps, rows, cols)?;
            let compressed = compressor.compress_var(&mut g, &bound, &global_map, &reorg)?;
            let wrapped = FeatureVar {
                tokens: compressed,
                h,
                w,
                d,
                provenance: Provenance::Global,
            };
            reducer.reduce_var(&mut g, &bound, &wrapped)?.tokens
        }
    };
    let tokens = g.value(out_var).clone();
    let emitted = tokens.dim(0);
    let b = budget(base, patch, rows, cols)?;
    let expected = match (placement, kind) {
        (Placement::AfterReducer, VariantKind::Resampler) => query_count,
        _ => b.compressed,
    };
    if emitted != expected {
        return Err(Error::Consistency(format!(
            "emitted {emitted} tokens but the budget expects {expected}"
        )));
    }
    let out_path = out.unwrap_or_else(|| dir.join("compressed.bin"));
    write_tensor(&out_path, &tokens)?;
    println!("variant,placement,rows,cols,tokens,width,uncompressed,ratio");
    println!(
        "{},{},{rows},{cols},{emitted},{},{},{}",
        kind.name(),
        placement.name(),
        tokens.dim(1),
        b.uncompressed,
        b.ratio()
    );
    Ok(())
}

fn cmd_gen_corpus(
    kind: &str,
    n: usize,
    pages: &str,
    seed: u64,
    out: &Path,
    spec: &PageSpec,
) -> Result<()> {
    let kind = TaskKind::parse(kind)?;
    let (lo, hi) = parse_page_range(pages)?;
    spec.validate()?;
    let mut rng = Rng::new(seed);
    let samples = gen_corpus(&mut rng, kind, n, lo, hi, spec)?;
    save_corpus(out, &samples)?;
    println!("wrote {} samples ({} pages each) to {}", samples.len(), pages, out.display());
    Ok(())
}

/// "3" or an inclusive range "2-10".
fn parse_page_range(s: &str) -> Result<(usize, usize)> {
    let parse_one = |p: &str| -> Result<usize> {
        p.trim()
            .parse()
            .map_err(|_| Error::Argument(format!("bad page count \"{p}\" in \"{s}\"")))
    };
    match s.split_once('-') {
        Some((lo, hi)) => Ok((parse_one(lo)?, parse_one(hi)?)),
        None => {
            let n = parse_one(s)?;
            Ok((n, n))
        }
    }
}

/// Build the corpora named by the plan, in plan order, from one rng stream.
fn build_corpora(rc: &RunConfig, rng: &mut Rng) -> Result<Vec<(String, Vec<Sample>)>> {
    let mut out = Vec::with_capacity(rc.corpora.len());
    for c in &rc.corpora {
        let samples = gen_corpus(rng, c.task, c.samples, c.pages_lo, c.pages_hi, &c.page)?;
        out.push((c.name.clone(), samples));
    }
    Ok(out)
}

fn stage_plans(rc: &RunConfig, corpora: &[(String, Vec<Sample>)]) -> Vec<StagePlan> {
    rc.stages
        .iter()
        .map(|st| StagePlan {
            spec: StageSpec {
                name: st.name.clone(),
                steps: st.steps,
                lr: st.lr,
                freeze_prefixes: st.freeze.clone(),
            },
            batch: st.batch,
            mixes: st
                .mix
                .iter()
                .map(|(name, w)| {
                    let corpus =
                        corpora.iter().find(|(n, _)| n == name).expect("mix validated at load");
                    (*w, corpus.1.clone())
                })
                .collect(),
        })
        .collect()
}

fn cmd_train_toy(plan_file: &Path, seed_flag: Option<u64>, out: &Path) -> Result<()> {
    let text = fs::read_to_string(plan_file)?;
    let mut rc = RunConfig::from_str_checked(&text)?;
    if let Some(s) = seed_flag {
        rc.seed = s;
    }
    if rc.corpora.is_empty() || rc.stages.is_empty() {
        return Err(Error::Config(
            "training plan needs at least one [corpus] and one [stage] section".into(),
        ));
    }
    let pipeline = Pipeline::new(rc.pipeline)?;
    let mut rng = Rng::new(rc.seed);
    let mut params: ParamSet<f32> = ParamSet::new();
    pipeline.register_params(&mut params, &mut rng)?;
    let corpora = build_corpora(&rc, &mut rng)?;
    fs::create_dir_all(out)?;
    for (name, samples) in &corpora {
        save_corpus(&out.join(format!("corpus_{name}")), samples)?;
    }
    let plans = stage_plans(&rc, &corpora);
    let t0 = Instant::now();
    let reports = run_schedule(&pipeline, &mut params, &plans, &mut rng)?;
    let wall_ms = t0.elapsed().as_millis();
    save_params(&out.join("params"), &params)?;
    fs::write(out.join("plan.txt"), &text)?;
    fs::write(out.join("run.txt"), format!("seed = {}\nwall_ms = {wall_ms}\n", rc.seed))?;
    let mut stages_csv = String::from("stage,steps,lr,first_loss,last_loss,tail_mean\n");
    let mut losses_csv = String::from("stage,step,loss\n");
    for (report, stage) in reports.iter().zip(&rc.stages) {
        stages_csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            report.name, report.steps, stage.lr, report.first_loss, report.last_loss,
            report.tail_mean
        ));
        for (i, loss) in report.losses.iter().enumerate() {
            losses_csv.push_str(&format!("{},{},{:.6}\n", report.name, i, loss));
        }
    }
    fs::write(out.join("stages.csv"), &stages_csv)?;
    fs::write(out.join("losses.csv"), &losses_csv)?;
    print!("{stages_csv}");
    println!("trained in {wall_ms} ms; artifacts in {}", out.display());
    Ok(())
}

fn outcome_csv(o: &EvalOutcome) -> String {
    let chance = o.chance.map(|c| format!("{c:.4}")).unwrap_or_default();
    let mut s = String::from("scope,n,exact,exact_rate,char_acc,chance\n");
    s.push_str(&format!(
        "all,{},{},{:.4},{:.4},{}\n",
        o.n,
        o.exact,
        o.exact_rate(),
        o.char_acc,
        chance
    ));
    for (pages, (n, exact)) in &o.by_pages {
        let rate = if *n == 0 { 0.0 } else { *exact as f64 / *n as f64 };
        s.push_str(&format!("pages={pages},{n},{exact},{rate:.4},,\n"));
    }
    s
}

fn cmd_eval_toy(model: &Path, corpus: &Path, max_new: usize, out: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(model.join("plan.txt"))?;
    let rc = RunConfig::from_str_checked(&text)?;
    let pipeline = Pipeline::new(rc.pipeline)?;
    let mut params: ParamSet<f32> = pipeline.init_params(0)?;
    load_params_into(&model.join("params"), &mut params)?;
    let samples = load_corpus(corpus)?;
    let outcome = evaluate(&samples, |s| pipeline.predict(&params, s, max_new))?;
    let csv = outcome_csv(&outcome);
    if let Some(p) = out {
        fs::write(p, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn cmd_bench(
    config: Option<&Path>,
    image: Option<&Path>,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let rc = load_run_config(config)?;
    let img = match image {
        Some(p) => load_image(p)?,
        None => {
            // Synthetic wide page: forces a multi-crop plan at the default base.
            let spec = PageSpec {
                glyph_rows: 2,
                glyph_cols: 12,
                scale: 1,
                canvas_h: rc.pipeline.encoder.base,
                canvas_w: 2 * rc.pipeline.encoder.base,
                alphabet: 36,
            };
            let mut rng = Rng::new(seed);
            gen_sample(&mut rng, TaskKind::SingleParse, 1, &spec)?.pages.remove(0).image
        }
    };
    let mut csv = String::new();
    csv.push_str(
        "# formula: prefill_flops(len) = depth*(24*len*d^2 + 2*d*len*(len+1) + 3*len*(len+1)/2) + 2*d*vocab\n",
    );
    csv.push_str("# len = 1 + tokens (one image ordinal plus the page's visual tokens)\n");
    csv.push_str("variant,crops,base,tokens,flops,wall_ms\n");
    for kind in [
        VariantKind::GroupAtt,
        VariantKind::CompleteAtt,
        VariantKind::GroupMean,
        VariantKind::Resampler,
        VariantKind::AdaptiveMean,
    ] {
        let mut cfg = rc.pipeline;
        cfg.compressor.kind = kind;
        let pipeline = match Pipeline::new(cfg) {
            Ok(p) => p,
            Err(Error::Config(why)) => {
                eprintln!("skipping {}: {why}", kind.name());
                continue;
            }
            Err(e) => return Err(e),
        };
        let params: ParamSet<f32> = pipeline.init_params(seed)?;
        let t0 = Instant::now();
        let tokens = pipeline.encode_page(&params, &img)?;
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        let plan = pipeline.plan(&img)?;
        let shape = DecoderShape {
            depth: cfg.decoder.depth,
            d_model: cfg.d_hat,
            vocab: pipeline.vocab.size(),
        };
        let len = 1 + tokens.dim(0);
        let flops = prefill_flops(shape, len);
        csv.push_str(&format!(
            "{},{},{},{},{flops},{wall_ms:.2}\n",
            kind.name(),
            plan.cell_count(),
            cfg.encoder.base,
            tokens.dim(0)
        ));
    }
    if let Some(p) = out {
        fs::write(p, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    config: &Path,
    out: &Path,
    seeds: &str,
    variants: &str,
    placements: &str,
    eval_n: usize,
    max_new: usize,
) -> Result<()> {
    let text = fs::read_to_string(config)?;
    let rc = RunConfig::from_str_checked(&text)?;
    if rc.corpora.is_empty() || rc.stages.is_empty() {
        return Err(Error::Config(
            "ablation plan needs at least one [corpus] and one [stage] section".into(),
        ));
    }
    let seeds = seeds
        .split(',')
        .map(|s| {
            s.trim().parse::<u64>().map_err(|_| Error::Argument(format!("bad seed \"{s}\"")))
        })
        .collect::<Result<Vec<_>>>()?;
    let kinds = variants
        .split(',')
        .map(|v| VariantKind::parse(v.trim()))
        .collect::<Result<Vec<_>>>()?;
    let placements = placements
        .split(',')
        .map(|p| Placement::parse(p.trim()))
        .collect::<Result<Vec<_>>>()?;
    if eval_n == 0 {
        return Err(Error::Argument("ablate: --eval-n must be at least 1".into()));
    }

    fs::create_dir_all(out)?;
    let mut csv =
        String::from("variant,placement,seed,tokens,exact_rate,char_acc,chance,prefill_flops,wall_ms\n");
    for &seed in &seeds {
        // Same data for every row of this seed: corpora and the held-out set
        // come from one stream that no row's training touches.
        let mut data_rng = Rng::new(seed);
        let corpora = build_corpora(&rc, &mut data_rng)?;
        let first = &rc.corpora[0];
        let held_out =
            gen_corpus(&mut data_rng, first.task, eval_n, first.pages_lo, first.pages_hi, &first.page)?;
        for &placement in &placements {
            for &kind in &kinds {
                let mut cfg = rc.pipeline;
                cfg.compressor.kind = kind;
                cfg.compressor.placement = placement;
                let pipeline = match Pipeline::new(cfg) {
                    Ok(p) => p,
                    Err(Error::Config(why)) => {
                        eprintln!("skipping {}/{}: {why}", kind.name(), placement.name());
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let mut params: ParamSet<f32> = pipeline.init_params(seed)?;
                // Identical batch schedule across rows: the draw sequence
                // depends only on this fresh stream and the shared plan.
                let mut train_rng = Rng::new(seed ^ 0x5EED_0F_ABA1E);
                let plans = stage_plans(&rc, &corpora);
                let t0 = Instant::now();
                run_schedule(&pipeline, &mut params, &plans, &mut train_rng)?;
                let wall_ms = t0.elapsed().as_millis();
                let outcome =
                    evaluate(&held_out, |s| pipeline.predict(&params, s, max_new))?;
                let probe = pipeline.encode_page(&params, &held_out[0].pages[0].image)?;
                let tokens = probe.dim(0);
                // Prefill length of the first held-out prompt: per page one
                // ordinal plus its visual tokens, then the instruction.
                let instr = pipeline.vocab.encode_text(&held_out[0].instruction).len();
                let len = held_out[0].pages.len() * (1 + tokens) + instr;
                let shape = DecoderShape {
                    depth: rc.pipeline.decoder.depth,
                    d_model: rc.pipeline.d_hat,
                    vocab: pipeline.vocab.size(),
                };
                let flops = prefill_flops(shape, len);
                let chance = outcome.chance.map(|c| format!("{c:.4}")).unwrap_or_default();
                let row_dir = out.join(format!("{}_{}_s{seed}", kind.name(), placement.name()));
                fs::create_dir_all(&row_dir)?;
                save_params(&row_dir.join("params"), &params)?;
                fs::write(row_dir.join("eval.csv"), outcome_csv(&outcome))?;
                csv.push_str(&format!(
                    "{},{},{seed},{tokens},{:.4},{:.4},{chance},{flops},{wall_ms}\n",
                    kind.name(),
                    placement.name(),
                    outcome.exact_rate(),
                    outcome.char_acc
                ));
            }
        }
    }
    fs::write(out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
