//! Fine-tuning heads: multi-label classification and 64-bit hashing.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::bce_with_logit;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

pub const HASH_BITS: usize = 64;
pub const DEFAULT_HASH_GAMMA: f64 = 32.0;
pub const DEFAULT_QUANT_WEIGHT: f64 = 0.1;
const DIST_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub w: ParamId,
    pub b: ParamId,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, hidden: usize, classes: usize, rng: &mut R) -> Result<Self> {
        let bound = (6.0 / (hidden + classes) as f64).sqrt();
        Ok(ClassifierHead {
            w: store.uniform("head.cls.w", hidden, classes, bound, rng)?,
            b: store.constant("head.cls.b", 1, classes, 0.0)?,
            classes,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

#[derive(Clone, Debug)]
pub struct HashHead {
    pub w: ParamId,
    pub b: ParamId,
}

impl HashHead {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, hidden: usize, rng: &mut R) -> Result<Self> {
        let bound = (6.0 / (hidden + HASH_BITS) as f64).sqrt();
        Ok(HashHead {
            w: store.uniform("head.hash.w", hidden, HASH_BITS, bound, rng)?,
            b: store.constant("head.hash.b", 1, HASH_BITS, 0.0)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

/// Mean over unpadded rows (`true` in `pad_mask` marks padding).
pub fn pool(g: &mut Graph, f: Var, pad_mask: Option<&[bool]>) -> Result<Var> {
    match pad_mask {
        Some(mask) => {
            if mask.len() != g.shape(f).0 {
                return Err(Error::Shape(format!(
                    "pad mask has {} entries for {} rows",
                    mask.len(),
                    g.shape(f).0
                )));
            }
            if mask.iter().all(|&m| m) {
                return Err(Error::Validation("pooling an all-pad sequence".into()));
            }
            let keep: Vec<bool> = mask.iter().map(|&m| !m).collect();
            Ok(g.mean_rows_masked(f, &keep))
        }
        None => Ok(g.mean_rows(f)),
    }
}

/// Class logits (`1 x K`) of a pooled feature.
pub fn class_logits(g: &mut Graph, store: &ParamStore, head: &ClassifierHead, pooled: Var) -> Var {
    let (w, b) = (g.param(store, head.w), g.param(store, head.b));
    g.linear(pooled, w, b)
}

/// Per-class probabilities after masked average pooling.
pub fn classify(g: &mut Graph, store: &ParamStore, head: &ClassifierHead, f: Var, pad_mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let pooled = pool(g, f, pad_mask)?;
    let logits = class_logits(g, store, head, pooled);
    Ok(g.value(logits).data().iter().map(|&z| sigmoid(z)).collect())
}

/// Mean binary cross-entropy of a logit table against multi-hot targets.
pub fn multilabel_bce(g: &mut Graph, logits: Var, targets: &[Vec<u8>]) -> Var {
    let value = g.value(logits);
    let (n, k) = value.shape();
    assert_eq!(n, targets.len());
    let denom = (n * k) as f64;
    let mut grad = Mat::zeros(n, k);
    let mut total = 0.0;
    for i in 0..n {
        for c in 0..k {
            let (l, d) = bce_with_logit(value.get(i, c), targets[i][c] as f64);
            total += l;
            grad.set(i, c, d / denom);
        }
    }
    g.scalar_fn(logits, total / denom, grad)
}

/// Continuous code in `(-1, 1)` for a pooled feature.
pub fn hash_continuous(g: &mut Graph, store: &ParamStore, head: &HashHead, pooled: Var) -> Var {
    let (w, b) = (g.param(store, head.w), g.param(store, head.b));
    let z = g.linear(pooled, w, b);
    g.tanh(z)
}

pub fn hash_encode(
    g: &mut Graph,
    store: &ParamStore,
    head: &HashHead,
    f: Var,
    pad_mask: Option<&[bool]>,
) -> Result<(Vec<f64>, HashCode)> {
    let pooled = pool(g, f, pad_mask)?;
    let code = hash_continuous(g, store, head, pooled);
    let values = g.value(code).data().to_vec();
    let bits = HashCode::from_continuous(&values);
    Ok((values, bits))
}

/// 64 sign bits; component `i` is stored in bit `63 - i` so the hex form reads
/// in component order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HashCode(pub u64);

impl HashCode {
    /// Sign binarisation; zero maps to a set bit.
    pub fn from_continuous(values: &[f64]) -> Self {
        assert_eq!(values.len(), HASH_BITS);
        let mut bits = 0u64;
        for (i, &v) in values.iter().enumerate() {
            if v >= 0.0 {
                bits |= 1 << (63 - i);
            }
        }
        HashCode(bits)
    }

    pub fn bit(self, i: usize) -> bool {
        self.0 >> (63 - i) & 1 == 1
    }

    pub fn hamming(self, other: HashCode) -> u32 {
        (self.0 ^ other.0).count_ones()
    }
}

impl fmt::Display for HashCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for HashCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.len() != 16 {
            return Err(Error::Validation(format!("hash code '{s}' is not 16 hex digits")));
        }
        u64::from_str_radix(s, 16)
            .map(HashCode)
            .map_err(|e| Error::Validation(format!("hash code '{s}': {e}")))
    }
}

/// Cauchy distance `d = K/2 (1 - cos)` between two codes, in `[0, K]`.
pub fn cauchy_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    a.len() as f64 / 2.0 * (1.0 - dot / (na * nb))
}

/// Pair term `-[s ln p + (1 - s) ln(1 - p)]` with `p = gamma / (gamma + d)`.
pub fn cauchy_pair_term(d: f64, similar: bool, gamma: f64) -> f64 {
    if similar {
        ((gamma + d) / gamma).ln()
    } else {
        (gamma + d).ln() - d.max(DIST_FLOOR).ln()
    }
}

/// Exact multi-hot equality.
pub fn label_similarity(labels: &[Vec<u8>]) -> Vec<Vec<bool>> {
    labels
        .iter()
        .map(|a| labels.iter().map(|b| a == b).collect())
        .collect()
}

/// Cauchy hashing loss over an `n x 64` batch of continuous codes: mean pair
/// term over `i < j` plus `quant_weight` times the mean of `ln(1 + q_i / gamma)`,
/// where `q_i` is the Cauchy distance between a code and its sign vector.
pub fn cauchy_hash_loss(g: &mut Graph, codes: Var, similar: &[Vec<bool>], gamma: f64, quant_weight: f64) -> Result<Var> {
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("hash gamma {gamma} must be positive")));
    }
    let h = g.value(codes).clone();
    let (n, k) = h.shape();
    if n < 2 {
        return Err(Error::Validation("hash loss needs at least two codes".into()));
    }
    let half = k as f64 / 2.0;
    let norms: Vec<f64> = (0..n)
        .map(|i| h.row(i).iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12))
        .collect();
    let mut grad = Mat::zeros(n, k);
    let pairs = (n * (n - 1) / 2) as f64;
    let mut pair_total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let (hi, hj) = (h.row(i), h.row(j));
            let cos = hi.iter().zip(hj).map(|(a, b)| a * b).sum::<f64>() / (norms[i] * norms[j]);
            let d = half * (1.0 - cos);
            let s = similar[i][j];
            pair_total += cauchy_pair_term(d, s, gamma);
            let mut df = 1.0 / (gamma + d);
            if !s && d > DIST_FLOOR {
                df -= 1.0 / d;
            }
            // dd/dh = -K/2 dcos/dh
            let c = -half * df / pairs;
            let inv = 1.0 / (norms[i] * norms[j]);
            for t in 0..k {
                let gi = hj[t] * inv - cos * hi[t] / (norms[i] * norms[i]);
                let gj = hi[t] * inv - cos * hj[t] / (norms[j] * norms[j]);
                grad.row_mut(i)[t] += c * gi;
                grad.row_mut(j)[t] += c * gj;
            }
        }
    }
    let mut quant_total = 0.0;
    let root_k = (k as f64).sqrt();
    for i in 0..n {
        let hi = h.row(i);
        let a: f64 = hi.iter().map(|x| x.abs()).sum();
        let nrm = norms[i];
        let q = half * (1.0 - a / (nrm * root_k));
        quant_total += (1.0 + q / gamma).ln();
        let c = quant_weight / n as f64 / (gamma + q) * (-half / root_k);
        for t in 0..k {
            let sgn = if hi[t] >= 0.0 { 1.0 } else { -1.0 };
            grad.row_mut(i)[t] += c * (sgn / nrm - a * hi[t] / (nrm * nrm * nrm));
        }
    }
    let value = pair_total / pairs + quant_weight * quant_total / n as f64;
    Ok(g.scalar_fn(codes, value, grad))
}

/// Gallery indices by ascending Hamming distance, ties broken by id.
pub fn retrieve(query: HashCode, gallery: &[GalleryEntry]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| {
        let (ga, gb) = (&gallery[a], &gallery[b]);
        query
            .hamming(ga.code)
            .cmp(&query.hamming(gb.code))
            .then_with(|| ga.id.cmp(&gb.id))
    });
    order
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GalleryEntry {
    pub id: String,
    pub code: HashCode,
    pub labels: Vec<u8>,
}

/// One entry per line: `id code labels`, with labels as a 0/1 string.
pub fn write_gallery(entries: &[GalleryEntry], path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        let labels: String = e.labels.iter().map(|&l| if l == 1 { '1' } else { '0' }).collect();
        out.push_str(&format!("{} {} {}\n", e.id, e.code, labels));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_gallery(path: &Path) -> Result<Vec<GalleryEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(n + 1, format!("expected 3 fields, found {}", fields.len())));
        }
        let code = fields[1].parse().map_err(|e: Error| parse_err(n + 1, e.to_string()))?;
        let labels = fields[2]
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                _ => Err(parse_err(n + 1, format!("bad label character '{c}'"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        entries.push(GalleryEntry {
            id: fields[0].to_string(),
            code,
            labels,
        });
    }
    Ok(entries)
}
