//! Synthetic page generator for optical text-reading tasks.
//!
//! Pages are grayscale rasters (white 1.0 background, black 0.0 ink) of
//! glyphs from a fixed 5x7 bitmap font, laid out on a character grid with a
//! one-pixel margin per cell (cells are 7x9 at scale 1) and integer upscaling.
//! Rendering is exact, so a read-back oracle can reconstruct the text from
//! pixels with no tolerance; tests use that to prove the generator and the
//! raster format are lossless.
//!
//! On top of pages sit four task templates: read the single page, read a
//! named page of several, read two named pages, and find which page carries
//! a quoted text.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{read_ppm, write_ppm, RawImage};
use crate::rng::Rng;

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;
/// Cell footprint at scale 1: glyph plus a one-pixel margin on every side.
pub const CELL_W: usize = GLYPH_W + 2;
pub const CELL_H: usize = GLYPH_H + 2;

pub const ALPHABET: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

/// 5x7 bitmaps, one row per byte, bit 4 = leftmost column.
pub const GLYPHS: [(char, [u8; 7]); 36] = [
    ('A', [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001]),
    ('B', [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110]),
    ('C', [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110]),
    ('D', [0b11100, 0b10010, 0b10001, 0b10001, 0b10001, 0b10010, 0b11100]),
    ('E', [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111]),
    ('F', [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000]),
    ('G', [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111]),
    ('H', [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001]),
    ('I', [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110]),
    ('J', [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100]),
    ('K', [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001]),
    ('L', [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111]),
    ('M', [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001]),
    ('N', [0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001, 0b10001]),
    ('O', [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110]),
    ('P', [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000]),
    ('Q', [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101]),
    ('R', [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001]),
    ('S', [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110]),
    ('T', [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100]),
    ('U', [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110]),
    ('V', [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100]),
    ('W', [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b11011, 0b10001]),
    ('X', [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001]),
    ('Y', [0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b00100]),
    ('Z', [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111]),
    ('0', [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110]),
    ('1', [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110]),
    ('2', [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111]),
    ('3', [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110]),
    ('4', [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010]),
    ('5', [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110]),
    ('6', [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110]),
    ('7', [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000]),
    ('8', [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110]),
    ('9', [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100]),
];

pub fn glyph_bitmap(ch: char) -> Option<&'static [u8; 7]> {
    GLYPHS.iter().find(|(c, _)| *c == ch).map(|(_, rows)| rows)
}

/// Raster geometry for generated pages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageSpec {
    /// Character grid carried by each page.
    pub glyph_rows: usize,
    pub glyph_cols: usize,
    /// Integer upscale factor for the font.
    pub scale: usize,
    pub canvas_h: usize,
    pub canvas_w: usize,
    /// Random text draws from the first `alphabet` characters of the font;
    /// a difficulty dial from 1 (trivial) to the full 36.
    pub alphabet: usize,
}

impl PageSpec {
    pub fn grid_h(&self) -> usize {
        self.glyph_rows * CELL_H * self.scale
    }
    pub fn grid_w(&self) -> usize {
        self.glyph_cols * CELL_W * self.scale
    }

    pub fn validate(&self) -> Result<()> {
        if self.glyph_rows == 0 || self.glyph_cols == 0 || self.scale == 0 {
            return Err(Error::Config("page spec: grid and scale must be positive".into()));
        }
        if self.alphabet == 0 || self.alphabet > ALPHABET.len() {
            return Err(Error::Config(format!(
                "page spec: alphabet must be 1..={}, got {}",
                ALPHABET.len(),
                self.alphabet
            )));
        }
        if self.grid_h() > self.canvas_h || self.grid_w() > self.canvas_w {
            return Err(Error::Config(format!(
                "page spec: {}x{} glyph grid at scale {} needs {}x{} pixels, canvas is {}x{}",
                self.glyph_rows,
                self.glyph_cols,
                self.scale,
                self.grid_h(),
                self.grid_w(),
                self.canvas_h,
                self.canvas_w
            )));
        }
        Ok(())
    }

    /// Largest top-left offsets that keep the grid on the canvas.
    pub fn max_offset(&self) -> (usize, usize) {
        (self.canvas_h - self.grid_h(), self.canvas_w - self.grid_w())
    }
}

/// Render `lines` onto a fresh white canvas with the grid's top-left corner
/// at (`off_y`, `off_x`). Spaces leave cells blank.
pub fn gen_page(spec: &PageSpec, lines: &[String], off_y: usize, off_x: usize) -> Result<RawImage> {
    spec.validate()?;
    if lines.len() > spec.glyph_rows {
        return Err(Error::Argument(format!(
            "gen_page: {} lines exceed grid height {}",
            lines.len(),
            spec.glyph_rows
        )));
    }
    let (max_y, max_x) = spec.max_offset();
    if off_y > max_y || off_x > max_x {
        return Err(Error::Argument(format!(
            "gen_page: offset ({off_y}, {off_x}) pushes grid off canvas (max {max_y}, {max_x})"
        )));
    }
    let mut img = RawImage::constant(spec.canvas_h, spec.canvas_w, 1, 1.0)?;
    let s = spec.scale;
    for (i, line) in lines.iter().enumerate() {
        if line.chars().count() > spec.glyph_cols {
            return Err(Error::Argument(format!(
                "gen_page: line {i} has {} chars, grid width is {}",
                line.chars().count(),
                spec.glyph_cols
            )));
        }
        for (j, ch) in line.chars().enumerate() {
            if ch == ' ' {
                continue;
            }
            let rows = glyph_bitmap(ch)
                .ok_or_else(|| Error::Argument(format!("gen_page: {ch:?} not in the font")))?;
            let cell_y = off_y + i * CELL_H * s;
            let cell_x = off_x + j * CELL_W * s;
            for (fr, bits) in rows.iter().enumerate() {
                for fc in 0..GLYPH_W {
                    if bits >> (GLYPH_W - 1 - fc) & 1 == 1 {
                        let py = cell_y + (1 + fr) * s;
                        let px = cell_x + (1 + fc) * s;
                        for dy in 0..s {
                            for dx in 0..s {
                                img.set(py + dy, px + dx, 0, 0.0);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Reconstruct the rendered text from pixels. Exact inverse of [`gen_page`]
/// for in-font input; unknown ink patterns are a consistency error.
pub fn read_back(img: &RawImage, spec: &PageSpec, off_y: usize, off_x: usize) -> Result<Vec<String>> {
    spec.validate()?;
    let s = spec.scale;
    let mut lines = Vec::new();
    for i in 0..spec.glyph_rows {
        let mut line = String::new();
        for j in 0..spec.glyph_cols {
            let cell_y = off_y + i * CELL_H * s;
            let cell_x = off_x + j * CELL_W * s;
            let mut pattern = [0u8; 7];
            for (fr, row) in pattern.iter_mut().enumerate() {
                for fc in 0..GLYPH_W {
                    let py = cell_y + (1 + fr) * s;
                    let px = cell_x + (1 + fc) * s;
                    if img.get(py, px, 0) < 0.5 {
                        *row |= 1 << (GLYPH_W - 1 - fc);
                    }
                }
            }
            if pattern == [0u8; 7] {
                line.push(' ');
            } else {
                let ch = GLYPHS
                    .iter()
                    .find(|(_, rows)| *rows == pattern)
                    .map(|(c, _)| *c)
                    .ok_or_else(|| {
                        Error::Consistency(format!("read_back: unknown ink pattern at cell ({i}, {j})"))
                    })?;
                line.push(ch);
            }
        }
        lines.push(line.trim_end().to_string());
    }
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    Ok(lines)
}

/// Uniform random text of exactly `len` characters from the first
/// `alphabet` font characters.
pub fn random_text(rng: &mut Rng, len: usize, alphabet: usize) -> String {
    let chars: Vec<char> = ALPHABET.chars().take(alphabet.clamp(1, ALPHABET.len())).collect();
    (0..len).map(|_| chars[rng.below(chars.len())]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// One page; read all of it.
    SingleParse,
    /// Several pages; read the named one.
    PageParse,
    /// Several pages; read two named ones in order.
    TwoPageParse,
    /// Several pages; answer which page carries a quoted text.
    Lookup,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SingleParse => "single_parse",
            TaskKind::PageParse => "page_parse",
            TaskKind::TwoPageParse => "two_page_parse",
            TaskKind::Lookup => "lookup",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "single_parse" => TaskKind::SingleParse,
            "page_parse" => TaskKind::PageParse,
            "two_page_parse" => TaskKind::TwoPageParse,
            "lookup" => TaskKind::Lookup,
            other => return Err(Error::Config(format!("unknown task kind {other:?}"))),
        })
    }

    pub fn min_pages(self) -> usize {
        match self {
            TaskKind::SingleParse => 1,
            TaskKind::PageParse | TaskKind::Lookup => 1,
            TaskKind::TwoPageParse => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Page {
    pub lines: Vec<String>,
    pub image: RawImage,
}

impl Page {
    pub fn text(&self) -> String {
        self.lines.join("\n")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub kind: TaskKind,
    pub pages: Vec<Page>,
    pub instruction: String,
    pub target: String,
}

impl Sample {
    /// For answer-by-chance baselines: how many distinct answers the task
    /// admits a priori (lookup chooses among pages; parses are open-ended).
    pub fn chance_candidates(&self) -> Option<usize> {
        match self.kind {
            TaskKind::Lookup => Some(self.pages.len()),
            _ => None,
        }
    }
}

/// Draw `n` pages with pairwise-distinct texts, each page a full glyph grid
/// of random characters placed at a random offset.
fn gen_pages(rng: &mut Rng, spec: &PageSpec, n: usize) -> Result<Vec<Page>> {
    let mut seen = HashSet::new();
    let mut pages = Vec::with_capacity(n);
    for _ in 0..n {
        let mut attempts = 0;
        let lines = loop {
            let lines: Vec<String> = (0..spec.glyph_rows)
                .map(|_| random_text(rng, spec.glyph_cols, spec.alphabet))
                .collect();
            if seen.insert(lines.join("\n")) {
                break lines;
            }
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::Argument(
                    "gen_pages: cannot draw distinct texts; grid too small for page count".into(),
                ));
            }
        };
        let (max_y, max_x) = spec.max_offset();
        let off_y = rng.below(max_y + 1);
        let off_x = rng.below(max_x + 1);
        let image = gen_page(spec, &lines, off_y, off_x)?;
        pages.push(Page { lines, image });
    }
    Ok(pages)
}

/// One task instance with `n_pages` freshly drawn pages.
pub fn gen_sample(rng: &mut Rng, kind: TaskKind, n_pages: usize, spec: &PageSpec) -> Result<Sample> {
    if n_pages < kind.min_pages() {
        return Err(Error::Argument(format!(
            "{} needs at least {} pages, got {n_pages}",
            kind.name(),
            kind.min_pages()
        )));
    }
    let pages = gen_pages(rng, spec, n_pages)?;
    let (instruction, target) = match kind {
        TaskKind::SingleParse => {
            ("Recognize texts in the image.".to_string(), pages[0].text())
        }
        TaskKind::PageParse => {
            let a = 1 + rng.below(n_pages);
            (format!("Recognize texts in image {a}."), pages[a - 1].text())
        }
        TaskKind::TwoPageParse => {
            let picks = rng.distinct_below(n_pages, 2);
            let (a, b) = (picks[0] as usize + 1, picks[1] as usize + 1);
            (
                format!("Recognize texts in image {a} and image {b}."),
                format!("{}\n{}", pages[a - 1].text(), pages[b - 1].text()),
            )
        }
        TaskKind::Lookup => {
            let a = 1 + rng.below(n_pages);
            (
                format!("Looking for the image with text <doc> {}</doc>.", pages[a - 1].text()),
                format!("image {a}"),
            )
        }
    };
    Ok(Sample { kind, pages, instruction, target })
}

/// A batch of samples; page counts drawn uniformly from `pages_lo..=pages_hi`.
pub fn gen_corpus(
    rng: &mut Rng,
    kind: TaskKind,
    n_samples: usize,
    pages_lo: usize,
    pages_hi: usize,
    spec: &PageSpec,
) -> Result<Vec<Sample>> {
    if pages_lo > pages_hi || pages_lo < kind.min_pages() {
        return Err(Error::Argument(format!(
            "gen_corpus: page range {pages_lo}..={pages_hi} invalid for {}",
            kind.name()
        )));
    }
    (0..n_samples)
        .map(|_| {
            let n = pages_lo + rng.below(pages_hi - pages_lo + 1);
            gen_sample(rng, kind, n, spec)
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            other => {
                return Err(Error::Format(format!("bad escape \\{:?} in manifest", other)));
            }
        }
    }
    Ok(out)
}

/// Write samples as `sample_00000/page_0.ppm...` plus a manifest per sample.
pub fn save_corpus(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, sample) in samples.iter().enumerate() {
        let sdir = dir.join(format!("sample_{i:05}"));
        fs::create_dir_all(&sdir)?;
        let mut manifest = String::new();
        manifest.push_str(&format!("kind = {}\n", sample.kind.name()));
        manifest.push_str(&format!("instruction = {}\n", escape(&sample.instruction)));
        manifest.push_str(&format!("target = {}\n", escape(&sample.target)));
        manifest.push_str(&format!("pages = {}\n", sample.pages.len()));
        for (p, page) in sample.pages.iter().enumerate() {
            write_ppm(&sdir.join(format!("page_{p}.ppm")), &page.image)?;
            manifest.push_str(&format!("page_{p}_text = {}\n", escape(&page.text())));
        }
        fs::write(sdir.join("manifest.txt"), manifest)?;
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Vec<Sample>> {
    let mut sample_dirs: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("sample_"))
        })
        .collect();
    sample_dirs.sort();
    let mut samples = Vec::with_capacity(sample_dirs.len());
    for sdir in sample_dirs {
        let manifest = fs::read_to_string(sdir.join("manifest.txt"))?;
        let mut kind = None;
        let mut instruction = None;
        let mut target = None;
        let mut n_pages = None;
        let mut texts: Vec<(usize, String)> = Vec::new();
        for line in manifest.lines() {
            let Some((key, value)) = line.split_once(" = ") else {
                return Err(Error::Format(format!("bad manifest line {line:?} in {sdir:?}")));
            };
            match key {
                "kind" => kind = Some(TaskKind::parse(value)?),
                "instruction" => instruction = Some(unescape(value)?),
                "target" => target = Some(unescape(value)?),
                "pages" => {
                    n_pages = Some(value.parse::<usize>().map_err(|_| {
                        Error::Format(format!("bad page count {value:?} in {sdir:?}"))
                    })?)
                }
                k if k.starts_with("page_") && k.ends_with("_text") => {
                    let idx: usize = k["page_".len()..k.len() - "_text".len()]
                        .parse()
                        .map_err(|_| Error::Format(format!("bad manifest key {k:?}")))?;
                    texts.push((idx, unescape(value)?));
                }
                other => return Err(Error::Format(format!("unknown manifest key {other:?}"))),
            }
        }
        let kind = kind.ok_or_else(|| Error::Format(format!("{sdir:?}: manifest lacks kind")))?;
        let instruction =
            instruction.ok_or_else(|| Error::Format(format!("{sdir:?}: manifest lacks instruction")))?;
        let target = target.ok_or_else(|| Error::Format(format!("{sdir:?}: manifest lacks target")))?;
        let n_pages = n_pages.ok_or_else(|| Error::Format(format!("{sdir:?}: manifest lacks pages")))?;
        texts.sort();
        if texts.len() != n_pages || texts.iter().enumerate().any(|(i, (idx, _))| i != *idx) {
            return Err(Error::Format(format!("{sdir:?}: page texts do not match page count")));
        }
        let mut pages = Vec::with_capacity(n_pages);
        for (p, (_, text)) in texts.into_iter().enumerate() {
            let image = read_ppm(&sdir.join(format!("page_{p}.ppm")))?;
            pages.push(Page { lines: text.split('\n').map(str::to_string).collect(), image });
        }
        samples.push(Sample { kind, pages, instruction, target });
    }
    Ok(samples)
}
