//! Report tokenisation, image pyramids and the two-term input embeddings.
//!
//! Both modalities are embedded as `Norm(content) + Norm(position)`: text ids are
//! looked up in a learned table and their scalar index goes through a learned
//! linear map; image patches are flattened `B x B` blocks whose positional input
//! is the patch box `[x0, y0, x1, y1]`, extended with `[sx, sy]` in multi-scale
//! mode.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::data::{check_pyramid_geometry, Raster, REPORT_WORDS};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const NUM_RESERVED: u32 = 2;
pub const DEFAULT_MAX_TEXT_LEN: usize = 150;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary with ids 0/1 reserved for padding and unknown words.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab {
            words: vec!["[pad]".into(), "[unk]".into()],
            index: HashMap::new(),
        };
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !v.index.contains_key(&w) && !v.words.contains(&w) {
                v.index.insert(w.clone(), v.words.len() as u32);
                v.words.push(w);
            }
        }
        v
    }

    /// The closed vocabulary of the synthetic report grammar.
    pub fn synthetic() -> Self {
        Vocab::from_words(REPORT_WORDS)
    }

    /// One word per line, line number = id. The first two lines are the reserved
    /// pad/unknown entries and are never matched against report words.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < NUM_RESERVED as usize {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lines.len() + 1,
                message: "vocabulary must start with the pad and unknown entries".into(),
            });
        }
        let mut v = Vocab {
            words: lines[..2].iter().map(|s| s.to_string()).collect(),
            index: HashMap::new(),
        };
        for (i, w) in lines.iter().enumerate().skip(2) {
            let w = w.trim().to_lowercase();
            if w.is_empty() || v.index.contains_key(&w) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("empty or duplicate vocabulary entry '{w}'"),
                });
            }
            v.index.insert(w.clone(), i as u32);
            v.words.push(w);
        }
        Ok(v)
    }

    /// Rebuilds a vocabulary from its full word list, reserved entries first.
    pub fn from_list(words: &[String]) -> Result<Self> {
        if words.len() < NUM_RESERVED as usize {
            return Err(Error::Validation("vocabulary lacks the reserved entries".into()));
        }
        let mut v = Vocab {
            words: words[..2].to_vec(),
            index: HashMap::new(),
        };
        for w in &words[2..] {
            if v.index.insert(w.clone(), v.words.len() as u32).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary entry '{w}'")));
            }
            v.words.push(w.clone());
        }
        Ok(v)
    }

    /// Every entry in id order, reserved entries included.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.words.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= NUM_RESERVED as usize
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(&word.to_lowercase()).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    /// `true` marks padding.
    pub pad_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unpadded_len(&self) -> usize {
        self.pad_mask.iter().filter(|&&p| !p).count()
    }

    /// Appends pad tokens up to `len` positions.
    pub fn pad_to(&self, len: usize) -> TokenSequence {
        let mut out = self.clone();
        for p in self.len()..len {
            out.tokens.push(PAD_ID);
            out.positions.push(p);
            out.pad_mask.push(true);
        }
        out
    }
}

/// Whitespace-splits, lowercases, truncates to `max_len` and maps through `vocab`.
pub fn tokenize<S: AsRef<str>>(report: &[S], vocab: &Vocab, max_len: usize) -> TokenSequence {
    let tokens: Vec<u32> = report
        .iter()
        .flat_map(|w| w.as_ref().split_whitespace())
        .take(max_len)
        .map(|w| vocab.id(w))
        .collect();
    let n = tokens.len();
    TokenSequence {
        tokens,
        positions: (0..n).collect(),
        pad_mask: vec![false; n],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Up,
    Mid,
    Down,
}

impl Level {
    pub fn scale(self) -> f64 {
        match self {
            Level::Up => 0.25,
            Level::Mid => 0.5,
            Level::Down => 1.0,
        }
    }
}

/// Non-overlapping `B x B` patches of one image (or pyramid level), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    /// One flattened patch per row, intensities in `[0, 1]`.
    pub patches: Mat,
    pub boxes: Vec<[f64; 4]>,
    pub scale: f64,
    pub level: Level,
    pub block: usize,
    pub grid_cols: usize,
    pub grid_rows: usize,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.patches.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.rows() == 0
    }

    /// Positional inputs: boxes, plus `(scale, scale)` when `with_scale`.
    pub fn positional_features(&self, with_scale: bool) -> Mat {
        let width = if with_scale { 6 } else { 4 };
        let mut m = Mat::zeros(self.len(), width);
        for (i, b) in self.boxes.iter().enumerate() {
            let row = m.row_mut(i);
            row[..4].copy_from_slice(b);
            if with_scale {
                row[4] = self.scale;
                row[5] = self.scale;
            }
        }
        m
    }

    pub fn validate_boxes(&self) -> Result<()> {
        for (i, b) in self.boxes.iter().enumerate() {
            let in_unit = b.iter().all(|v| (0.0..=1.0).contains(v));
            if !in_unit || b[0] >= b[2] || b[1] >= b[3] {
                return Err(Error::Validation(format!("patch {i} has invalid box {b:?}")));
            }
        }
        Ok(())
    }

    /// Writes patch rows back into a `width x height` plane at their boxes.
    pub fn assemble(&self, rows: &Mat) -> Vec<f64> {
        let b = self.block;
        let (w, h) = (self.grid_cols * b, self.grid_rows * b);
        let mut out = vec![0.0; w * h];
        for p in 0..rows.rows() {
            let (gx, gy) = (p % self.grid_cols, p / self.grid_cols);
            for y in 0..b {
                for x in 0..b {
                    out[(gy * b + y) * w + gx * b + x] = rows.get(p, y * b + x);
                }
            }
        }
        out
    }
}

/// Cuts a `width x height` plane into `block x block` patches.
pub fn patchify(values: &[f64], width: usize, height: usize, block: usize, level: Level) -> Result<PatchSequence> {
    if block == 0 || !width.is_multiple_of(block) || !height.is_multiple_of(block) {
        return Err(Error::Geometry(format!(
            "{width}x{height} plane is not divisible into {block}x{block} blocks"
        )));
    }
    let (gc, gr) = (width / block, height / block);
    let mut patches = Mat::zeros(gc * gr, block * block);
    let mut boxes = Vec::with_capacity(gc * gr);
    for gy in 0..gr {
        for gx in 0..gc {
            let row = patches.row_mut(gy * gc + gx);
            for y in 0..block {
                for x in 0..block {
                    row[y * block + x] = values[(gy * block + y) * width + gx * block + x];
                }
            }
            boxes.push([
                (gx * block) as f64 / width as f64,
                (gy * block) as f64 / height as f64,
                ((gx + 1) * block) as f64 / width as f64,
                ((gy + 1) * block) as f64 / height as f64,
            ]);
        }
    }
    Ok(PatchSequence {
        patches,
        boxes,
        scale: level.scale(),
        level,
        block,
        grid_cols: gc,
        grid_rows: gr,
    })
}

/// 2x2 mean pooling.
pub fn downsample(values: &[f64], width: usize, height: usize) -> Vec<f64> {
    let (w2, h2) = (width / 2, height / 2);
    let mut out = vec![0.0; w2 * h2];
    for y in 0..h2 {
        for x in 0..w2 {
            let s = values[2 * y * width + 2 * x]
                + values[2 * y * width + 2 * x + 1]
                + values[(2 * y + 1) * width + 2 * x]
                + values[(2 * y + 1) * width + 2 * x + 1];
            out[y * w2 + x] = s / 4.0;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub up: PatchSequence,
    pub mid: PatchSequence,
    pub down: PatchSequence,
}

impl Pyramid {
    pub fn total_patches(&self) -> usize {
        self.up.len() + self.mid.len() + self.down.len()
    }

    pub fn levels(&self) -> [&PatchSequence; 3] {
        [&self.up, &self.mid, &self.down]
    }
}

pub fn build_pyramid(image: &Raster, block: usize) -> Result<Pyramid> {
    let (w, h) = (image.width(), image.height());
    check_pyramid_geometry(w, h, block)?;
    let down = image.to_unit();
    let mid = downsample(&down, w, h);
    let up = downsample(&mid, w / 2, h / 2);
    Ok(Pyramid {
        up: patchify(&up, w / 4, h / 4, block, Level::Up)?,
        mid: patchify(&mid, w / 2, h / 2, block, Level::Mid)?,
        down: patchify(&down, w, h, block, Level::Down)?,
    })
}

/// Single-scale patches of the full-resolution image.
pub fn single_scale_patches(image: &Raster, block: usize) -> Result<PatchSequence> {
    patchify(&image.to_unit(), image.width(), image.height(), block, Level::Down)
}

/// Patch counts per level `(down, mid, up)` for a `size x size` image.
pub fn pyramid_counts(size: usize, block: usize) -> (usize, usize, usize) {
    let per = |s: usize| (s / block) * (s / block);
    (per(size), per(size / 2), per(size / 4))
}

#[derive(Clone, Debug)]
pub struct NormedLinear {
    pub w: ParamId,
    pub b: ParamId,
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormedLinear {
    fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, fan_in: usize, hidden: usize, bound: f64, rng: &mut R) -> Result<Self> {
        Ok(NormedLinear {
            w: store.uniform(&format!("{prefix}.w"), fan_in, hidden, bound, rng)?,
            b: store.constant(&format!("{prefix}.b"), 1, hidden, 0.0)?,
            gain: store.constant(&format!("{prefix}.ln_g"), 1, hidden, 1.0)?,
            bias: store.constant(&format!("{prefix}.ln_b"), 1, hidden, 0.0)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b, self.gain, self.bias]
    }

    fn norm(&self, g: &mut Graph, store: &ParamStore, pre: Var) -> Var {
        let b = g.param(store, self.b);
        let z = g.add_row(pre, b);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(z, gain, bias)
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let xw = g.matmul(x, w);
        self.norm(g, store, xw)
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingParams {
    /// `vocab x C` word table (one-hot times `W_x^t`).
    pub word: NormedLinear,
    /// `1 x C` map of the scalar token index.
    pub text_pos: NormedLinear,
    /// `B*B x C` patch content map.
    pub patch: NormedLinear,
    /// `6 x C` (multi-scale) or `4 x C` positional map.
    pub patch_pos: NormedLinear,
    pub hidden: usize,
    pub multiscale: bool,
    /// Token indices are divided by this before the positional map.
    pub text_span: usize,
}

impl EmbeddingParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab_size: usize,
        block: usize,
        hidden: usize,
        multiscale: bool,
        text_span: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let xavier = |i: usize, o: usize| (6.0 / (i + o) as f64).sqrt();
        let pos_width = if multiscale { 6 } else { 4 };
        let word = NormedLinear::init(store, "emb.word", vocab_size, hidden, xavier(vocab_size, hidden), rng)?;
        // Norm is scale-invariant, so with a zero offset every index > 0 would
        // embed identically; a random offset makes the map position-dependent.
        let text_pos = NormedLinear::init(store, "emb.text_pos", 1, hidden, xavier(1, hidden), rng)?;
        *store.get_mut(text_pos.b) = Mat::uniform(1, hidden, xavier(1, hidden), rng).map(|v| v as f32 as f64);
        Ok(EmbeddingParams {
            word,
            text_pos,
            patch: NormedLinear::init(store, "emb.patch", block * block, hidden, xavier(block * block, hidden), rng)?,
            patch_pos: NormedLinear::init(store, "emb.patch_pos", pos_width, hidden, xavier(pos_width, hidden), rng)?,
            hidden,
            multiscale,
            text_span: text_span.max(1),
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [&self.word, &self.text_pos, &self.patch, &self.patch_pos]
            .iter()
            .flat_map(|p| p.ids())
            .collect()
    }
}

/// `Norm(W_x onehot(x) + b_x) + Norm(W_p p / span + b_p)` for every token.
pub fn embed_text(g: &mut Graph, store: &ParamStore, params: &EmbeddingParams, seq: &TokenSequence) -> Result<Var> {
    let vocab = store.get(params.word.w).rows();
    if let Some(&bad) = seq.tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Validation(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    if seq.is_empty() {
        return Err(Error::Validation("empty token sequence".into()));
    }
    let table = g.param(store, params.word.w);
    let index: Vec<usize> = seq.tokens.iter().map(|&t| t as usize).collect();
    let rows = g.gather_rows(table, &index);
    let content = params.word.norm(g, store, rows);
    let span = params.text_span as f64;
    let pos = Mat::from_vec(seq.len(), 1, seq.positions.iter().map(|&p| p as f64 / span).collect());
    let pos = g.constant(pos);
    let pos = params.text_pos.forward(g, store, pos);
    Ok(g.add(content, pos))
}

/// Two-term embedding of patch rows and their positional features.
pub fn embed_patch_rows(g: &mut Graph, store: &ParamStore, params: &EmbeddingParams, patches: Var, positions: Var) -> Var {
    let content = params.patch.forward(g, store, patches);
    let pos = params.patch_pos.forward(g, store, positions);
    g.add(content, pos)
}

pub fn embed_patches(g: &mut Graph, store: &ParamStore, params: &EmbeddingParams, seq: &PatchSequence) -> Result<Var> {
    seq.validate_boxes()?;
    let expect = store.get(params.patch.w).rows();
    if seq.patches.cols() != expect {
        return Err(Error::Shape(format!(
            "patch vectors have length {}, embedding expects {expect}",
            seq.patches.cols()
        )));
    }
    let patches = g.constant(seq.patches.clone());
    let pos = g.constant(seq.positional_features(params.multiscale));
    Ok(embed_patch_rows(g, store, params, patches, pos))
}
