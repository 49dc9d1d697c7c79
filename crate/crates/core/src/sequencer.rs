//! Multi-page sequence assembly, token budgets, and prefill cost estimates.
//!
//! A multi-page input to the text decoder is laid out as
//! `<img 1> tokens(page 1) <img 2> tokens(page 2) ... instruction`,
//! where `<img k>` is a dedicated ordinal token and `tokens(page k)` are that
//! page's compressed visual tokens. Page numbering is 1-based and strictly
//! ascending in presentation order.

use crate::error::{Error, Result};
use crate::graph::Var;

/// Token id space: bytes 0..=255, then EOS, then SEP, then one ordinal id
/// per possible page number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub max_images: usize,
}

pub const EOS: usize = 256;
pub const SEP: usize = 257;
const FIRST_ORDINAL: usize = 258;

impl Vocab {
    pub fn new(max_images: usize) -> Result<Vocab> {
        if max_images == 0 {
            return Err(Error::Config("vocab needs max_images >= 1".into()));
        }
        Ok(Vocab { max_images })
    }

    pub fn size(&self) -> usize {
        FIRST_ORDINAL + self.max_images
    }

    pub fn eos(&self) -> usize {
        EOS
    }

    pub fn sep(&self) -> usize {
        SEP
    }

    /// Token id of the 1-based page marker `<img k>`.
    pub fn ordinal(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.max_images {
            return Err(Error::Argument(format!(
                "page ordinal {k} outside 1..={}",
                self.max_images
            )));
        }
        Ok(FIRST_ORDINAL + k - 1)
    }

    /// Bytes of `text` as token ids.
    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        text.bytes().map(|b| b as usize).collect()
    }

    /// Renders ids back to text, stopping at the first EOS. Non-byte ids
    /// render as readable markers.
    pub fn decode_text(&self, ids: &[usize]) -> String {
        let mut bytes = Vec::new();
        let mut out = String::new();
        let flush = |bytes: &mut Vec<u8>, out: &mut String| {
            if !bytes.is_empty() {
                out.push_str(&String::from_utf8_lossy(bytes));
                bytes.clear();
            }
        };
        for &id in ids {
            if id < 256 {
                bytes.push(id as u8);
            } else if id == EOS {
                break;
            } else if id == SEP {
                flush(&mut bytes, &mut out);
                out.push_str("<sep>");
            } else {
                flush(&mut bytes, &mut out);
                out.push_str(&format!("<img {}>", id - FIRST_ORDINAL + 1));
            }
        }
        flush(&mut bytes, &mut out);
        out
    }
}

/// One element of an assembled decoder prompt.
#[derive(Debug, Clone)]
pub enum SeqItem {
    /// Page marker `<img k>`, 1-based.
    Ordinal(usize),
    /// A page's compressed visual tokens.
    ImageTokens { var: Var, len: usize },
    /// Plain token ids (the instruction).
    Text(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct AssembledSequence {
    pub items: Vec<SeqItem>,
    /// Total positions the prompt occupies: sum of (1 + len_i) over pages
    /// plus the instruction length.
    pub prefix_len: usize,
}

/// Interleave page markers with page tokens and append the instruction.
pub fn assemble(images: &[(Var, usize)], instruction: &[usize], vocab: &Vocab) -> Result<AssembledSequence> {
    if images.is_empty() {
        return Err(Error::Argument("assemble: no images given".into()));
    }
    if images.len() > vocab.max_images {
        return Err(Error::Argument(format!(
            "assemble: {} images exceed vocab capacity {}",
            images.len(),
            vocab.max_images
        )));
    }
    let mut items = Vec::with_capacity(2 * images.len() + 1);
    let mut prefix_len = 0;
    for (idx, &(var, len)) in images.iter().enumerate() {
        vocab.ordinal(idx + 1)?;
        items.push(SeqItem::Ordinal(idx + 1));
        items.push(SeqItem::ImageTokens { var, len });
        prefix_len += 1 + len;
    }
    prefix_len += instruction.len();
    items.push(SeqItem::Text(instruction.to_vec()));
    Ok(AssembledSequence { items, prefix_len })
}

/// Visual-token counts for one page under a given crop grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenBudget {
    pub rows: usize,
    pub cols: usize,
    /// Tokens per map after horizontal merging: (base/patch) * (base/patch/4).
    pub per_map: usize,
    /// Global map + every sub-image map, unreduced by compression.
    pub uncompressed: usize,
    /// After compression to the global grid.
    pub compressed: usize,
}

impl TokenBudget {
    /// uncompressed / compressed; exact by construction.
    pub fn ratio(&self) -> usize {
        self.rows * self.cols + 1
    }
}

/// Per-page token arithmetic: a base-resolution map is (base/patch) rows by
/// (base/patch)/4 columns after merging; a page contributes one global map
/// plus rows*cols sub-image maps uncompressed, and exactly one map's worth
/// after compression.
pub fn budget(base: usize, patch: usize, rows: usize, cols: usize) -> Result<TokenBudget> {
    if patch == 0 || base % patch != 0 {
        return Err(Error::Config(format!("budget: base {base} not a multiple of patch {patch}")));
    }
    let side = base / patch;
    if side % 4 != 0 {
        return Err(Error::Config(format!(
            "budget: {side} patch columns not divisible by the merge width 4"
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Config("budget: crop grid must be at least 1x1".into()));
    }
    let per_map = side * (side / 4);
    Ok(TokenBudget {
        rows,
        cols,
        per_map,
        uncompressed: (rows * cols + 1) * per_map,
        compressed: per_map,
    })
}

/// Decoder shape used for cost estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderShape {
    pub depth: usize,
    pub d_model: usize,
    pub vocab: usize,
}

/// Estimated flops to prefill a causal decoder over `len` positions and emit
/// one next-token distribution. Counting one multiply-add as 2 flops:
///   - projections: 4 attention matmuls (q,k,v,out) + 2 mlp matmuls at 4x
///     width = (8 + 16) * len * d^2 per layer;
///   - causal attention: scores and weighted sums cost 2*d*i at position i,
///     totalling 2 * d * len * (len+1) per layer;
///   - softmax: ~3 flops per scored pair, 3/2 * len * (len+1) per layer;
///   - one unembedding: 2 * d * vocab.
pub fn prefill_flops(shape: DecoderShape, len: usize) -> u128 {
    let (d, l) = (shape.d_model as u128, len as u128);
    let per_layer = 24 * l * d * d + 2 * d * l * (l + 1) + 3 * l * (l + 1) / 2;
    shape.depth as u128 * per_layer + 2 * d * shape.vocab as u128
}
