//! Plain-text run configuration: `key = value` lines, `#` comments, and
//! `[section]` headers. Repeated sections accumulate in file order, so a file
//! may declare several `[corpus]` and `[stage]` blocks. Unknown keys are
//! rejected to catch typos early.

use std::collections::HashSet;

use crate::compressor::{Placement, VariantKind};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::pipeline::{CompressorSettings, DecoderSettings, PipelineConfig};
use crate::synthdoc::{PageSpec, TaskKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub entries: Vec<(String, String)>,
}

impl Section {
    fn new(name: &str) -> Section {
        Section { name: name.to_string(), entries: Vec::new() }
    }

    fn label(&self) -> String {
        if self.name.is_empty() { "top level".to_string() } else { format!("[{}]", self.name) }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn req(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("{}: missing key \"{key}\"", self.label())))
    }

    fn parse_with<T, F: Fn(&str) -> Option<T>>(&self, key: &str, what: &str, f: F) -> Result<T> {
        let raw = self.req(key)?;
        f(raw).ok_or_else(|| {
            Error::Config(format!("{}: key \"{key}\": expected {what}, got \"{raw}\"", self.label()))
        })
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse_with(key, "a non-negative integer", |s| s.parse().ok())
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        if self.get(key).is_none() { Ok(default) } else { self.usize(key) }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        if self.get(key).is_none() {
            Ok(default)
        } else {
            self.parse_with(key, "a non-negative integer", |s| s.parse().ok())
        }
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parse_with(key, "a number", |s| s.parse().ok())
    }

    /// Errors if the section holds keys outside `allowed`.
    pub fn expect_keys(&self, allowed: &[&str]) -> Result<()> {
        let stray: Vec<&str> = self
            .entries
            .iter()
            .map(|(k, _)| k.as_str())
            .filter(|k| !allowed.contains(k))
            .collect();
        if stray.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{}: unknown keys {:?}; allowed keys are {:?}",
                self.label(),
                stray,
                allowed
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigDoc {
    pub root: Section,
    pub sections: Vec<Section>,
}

impl ConfigDoc {
    pub fn sections_named(&self, name: &str) -> Vec<&Section> {
        self.sections.iter().filter(|s| s.name == name).collect()
    }
}

pub fn parse_str(text: &str) -> Result<ConfigDoc> {
    let mut root = Section::new("");
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = i + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[') {
            let name = inner.strip_suffix(']').ok_or_else(|| {
                Error::Config(format!("line {lineno}: section header missing \"]\": {line}"))
            })?;
            let name = name.trim();
            if name.is_empty() {
                return Err(Error::Config(format!("line {lineno}: empty section name")));
            }
            sections.push(Section::new(name));
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {lineno}: expected \"key = value\", got: {line}"))
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {lineno}: empty key")));
        }
        let section = sections.last_mut().unwrap_or(&mut root);
        if section.get(key).is_some() {
            return Err(Error::Config(format!(
                "line {lineno}: duplicate key \"{key}\" in {}",
                section.label()
            )));
        }
        section.entries.push((key.to_string(), value.to_string()));
    }
    Ok(ConfigDoc { root, sections })
}

/// One synthetic corpus to generate for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub name: String,
    pub task: TaskKind,
    pub samples: usize,
    pub pages_lo: usize,
    pub pages_hi: usize,
    pub page: PageSpec,
}

/// One training stage: optimizer settings plus a corpus mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCfg {
    pub name: String,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub freeze: Vec<String>,
    /// (corpus name, mixture weight)
    pub mix: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub corpora: Vec<CorpusSpec>,
    pub stages: Vec<StageCfg>,
}

const ROOT_KEYS: &[&str] = &[
    "seed", "max_crops", "base", "patch", "enc_depth", "enc_dim", "enc_heads", "d_hat", "variant",
    "placement", "cmp_heads", "cmp_layers", "query_count", "dec_depth", "dec_heads", "max_seq",
    "max_images",
];
const CORPUS_KEYS: &[&str] = &[
    "name", "task", "samples", "pages_lo", "pages_hi", "glyph_rows", "glyph_cols", "scale",
    "canvas_h", "canvas_w", "alphabet",
];
const STAGE_KEYS: &[&str] = &["name", "steps", "lr", "batch", "freeze", "mix"];

fn parse_list(raw: &str) -> Vec<&str> {
    raw.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

impl RunConfig {
    /// Seed precedence: the `DTC_SEED` environment variable beats the file.
    pub fn from_doc(doc: &ConfigDoc) -> Result<RunConfig> {
        doc.root.expect_keys(ROOT_KEYS)?;
        for s in &doc.sections {
            match s.name.as_str() {
                "corpus" => s.expect_keys(CORPUS_KEYS)?,
                "stage" => s.expect_keys(STAGE_KEYS)?,
                other => {
                    return Err(Error::Config(format!(
                        "unknown section [{other}]; expected [corpus] or [stage]"
                    )))
                }
            }
        }
        let root = &doc.root;
        let mut seed = root.u64_or("seed", 0)?;
        if let Ok(env_seed) = std::env::var("DTC_SEED") {
            seed = env_seed.parse().map_err(|_| {
                Error::Config(format!("DTC_SEED must be a non-negative integer, got \"{env_seed}\""))
            })?;
        }
        let variant_raw = root.get("variant").unwrap_or("group_att");
        let variant = VariantKind::parse(variant_raw)?;
        let placement_raw = root.get("placement").unwrap_or("after_reducer");
        let placement = Placement::parse(placement_raw)?;
        let pipeline = PipelineConfig {
            max_crops: root.usize_or("max_crops", 12)?,
            encoder: EncoderConfig {
                base: root.usize_or("base", 56)?,
                patch: root.usize_or("patch", 14)?,
                depth: root.usize_or("enc_depth", 2)?,
                d_model: root.usize_or("enc_dim", 16)?,
                heads: root.usize_or("enc_heads", 2)?,
            },
            d_hat: root.usize_or("d_hat", 16)?,
            compressor: CompressorSettings {
                kind: variant,
                placement,
                heads: root.usize_or("cmp_heads", 2)?,
                layers: root.usize_or("cmp_layers", 2)?,
                query_count: root.usize_or("query_count", 16)?,
            },
            decoder: DecoderSettings {
                depth: root.usize_or("dec_depth", 2)?,
                heads: root.usize_or("dec_heads", 2)?,
                max_seq: root.usize_or("max_seq", 256)?,
            },
            max_images: root.usize_or("max_images", 10)?,
        };

        let mut corpora = Vec::new();
        let mut corpus_names = HashSet::new();
        for s in doc.sections_named("corpus") {
            let name = s.req("name")?.to_string();
            if !corpus_names.insert(name.clone()) {
                return Err(Error::Config(format!("duplicate corpus name \"{name}\"")));
            }
            let task = TaskKind::parse(s.req("task")?)?;
            let pages_lo = s.usize_or("pages_lo", task.min_pages())?;
            let pages_hi = s.usize_or("pages_hi", pages_lo)?;
            if pages_lo < task.min_pages() {
                return Err(Error::Config(format!(
                    "corpus \"{name}\": task {} needs at least {} pages, pages_lo is {pages_lo}",
                    task.name(),
                    task.min_pages()
                )));
            }
            if pages_hi < pages_lo {
                return Err(Error::Config(format!(
                    "corpus \"{name}\": pages_hi {pages_hi} below pages_lo {pages_lo}"
                )));
            }
            let page = PageSpec {
                glyph_rows: s.usize_or("glyph_rows", 1)?,
                glyph_cols: s.usize_or("glyph_cols", 4)?,
                scale: s.usize_or("scale", 1)?,
                canvas_h: s.usize_or("canvas_h", 32)?,
                canvas_w: s.usize_or("canvas_w", 32)?,
                alphabet: s.usize_or("alphabet", 36)?,
            };
            page.validate()?;
            corpora.push(CorpusSpec {
                name,
                task,
                samples: s.usize("samples")?,
                pages_lo,
                pages_hi,
                page,
            });
        }

        let mut stages = Vec::new();
        let mut stage_names = HashSet::new();
        for s in doc.sections_named("stage") {
            let name = s.req("name")?.to_string();
            if !stage_names.insert(name.clone()) {
                return Err(Error::Config(format!("duplicate stage name \"{name}\"")));
            }
            let freeze =
                parse_list(s.get("freeze").unwrap_or("")).iter().map(|p| p.to_string()).collect();
            let mut mix = Vec::new();
            for part in parse_list(s.req("mix")?) {
                let (cname, w) = part.split_once(':').ok_or_else(|| {
                    Error::Config(format!(
                        "stage \"{name}\": mix entry \"{part}\" should be corpus:weight"
                    ))
                })?;
                let cname = cname.trim();
                if !corpus_names.contains(cname) {
                    return Err(Error::Config(format!(
                        "stage \"{name}\": mix references undeclared corpus \"{cname}\""
                    )));
                }
                let w: f64 = w.trim().parse().map_err(|_| {
                    Error::Config(format!("stage \"{name}\": bad mix weight in \"{part}\""))
                })?;
                if !(w.is_finite() && w > 0.0) {
                    return Err(Error::Config(format!(
                        "stage \"{name}\": mix weight must be positive, got {w}"
                    )));
                }
                mix.push((cname.to_string(), w));
            }
            if mix.is_empty() {
                return Err(Error::Config(format!("stage \"{name}\": empty mix")));
            }
            let lr = s.f64("lr")?;
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("stage \"{name}\": lr must be positive")));
            }
            stages.push(StageCfg {
                name,
                steps: s.usize("steps")?,
                lr,
                batch: s.usize_or("batch", 1)?,
                freeze,
                mix,
            });
        }
        Ok(RunConfig { seed, pipeline, corpora, stages })
    }

    pub fn from_str_checked(text: &str) -> Result<RunConfig> {
        RunConfig::from_doc(&parse_str(text)?)
    }
}
