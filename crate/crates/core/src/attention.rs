//! Multi-head self-attention module (SAM) and the shared encoder stack.
//!
//! A SAM is post-norm: `x1 = LN(Q + MHA(Q, K, V))`, `out = LN(x1 + FFN(x1))`
//! with a `C -> 4C -> C` GELU feed-forward block.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug)]
pub struct SamParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub heads: usize,
    pub hidden: usize,
}

impl SamParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        hidden: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !hidden.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "hidden size {hidden} is not divisible by {heads} heads"
            )));
        }
        let inner = 4 * hidden;
        let sq = (6.0 / (2 * hidden) as f64).sqrt();
        let ff = (6.0 / (hidden + inner) as f64).sqrt();
        let mut u = |name: &str, r: usize, c: usize, bound: f64| store.uniform(&format!("{prefix}.{name}"), r, c, bound, rng);
        let wq = u("wq", hidden, hidden, sq)?;
        let wk = u("wk", hidden, hidden, sq)?;
        let wv = u("wv", hidden, hidden, sq)?;
        let wo = u("wo", hidden, hidden, sq)?;
        let ff1_w = u("ff1_w", hidden, inner, ff)?;
        let ff2_w = u("ff2_w", inner, hidden, ff)?;
        let mut c = |name: &str, cols: usize, v: f64| store.constant(&format!("{prefix}.{name}"), 1, cols, v);
        Ok(SamParams {
            wq,
            bq: c("bq", hidden, 0.0)?,
            wk,
            bk: c("bk", hidden, 0.0)?,
            wv,
            bv: c("bv", hidden, 0.0)?,
            wo,
            bo: c("bo", hidden, 0.0)?,
            ln1_g: c("ln1_g", hidden, 1.0)?,
            ln1_b: c("ln1_b", hidden, 0.0)?,
            ff1_w,
            ff1_b: c("ff1_b", inner, 0.0)?,
            ff2_w,
            ff2_b: c("ff2_b", hidden, 0.0)?,
            ln2_g: c("ln2_g", hidden, 1.0)?,
            ln2_b: c("ln2_b", hidden, 0.0)?,
            heads,
            hidden,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo, self.ln1_g,
            self.ln1_b, self.ff1_w, self.ff1_b, self.ff2_w, self.ff2_b, self.ln2_g, self.ln2_b,
        ]
    }
}

pub struct SamOutput {
    pub out: Var,
    /// Attention weights per head, `queries x keys`.
    pub attention: Vec<Var>,
}

/// `SAM(Q, K, V)`; keys flagged in `key_pad_mask` receive zero attention weight.
pub fn sam_forward(
    g: &mut Graph,
    store: &ParamStore,
    p: &SamParams,
    q: Var,
    k: Var,
    v: Var,
    key_pad_mask: Option<&[bool]>,
) -> Result<SamOutput> {
    let (_, qc) = g.shape(q);
    let (kr, kc) = g.shape(k);
    let (vr, vc) = g.shape(v);
    if qc != p.hidden || kc != p.hidden || vc != p.hidden {
        return Err(Error::Shape(format!(
            "SAM of width {} given inputs of width {qc}/{kc}/{vc}",
            p.hidden
        )));
    }
    if kr != vr {
        return Err(Error::Shape(format!("keys have {kr} rows but values have {vr}")));
    }
    if kr == 0 {
        return Err(Error::Shape("attention over zero keys".into()));
    }
    if let Some(mask) = key_pad_mask {
        if mask.len() != kr {
            return Err(Error::Shape(format!(
                "key mask has {} entries for {kr} keys",
                mask.len()
            )));
        }
        if mask.iter().all(|&m| m) {
            return Err(Error::Validation("every key position is padding".into()));
        }
    }
    let mask = key_pad_mask.filter(|m| m.iter().any(|&x| x));

    let lin = |g: &mut Graph, x: Var, w: ParamId, b: ParamId| {
        let w = g.param(store, w);
        let b = g.param(store, b);
        g.linear(x, w, b)
    };
    let qp = lin(g, q, p.wq, p.bq);
    let kp = lin(g, k, p.wk, p.bk);
    let vp = lin(g, v, p.wv, p.bv);

    let d = p.hidden / p.heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    let mut attention = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (qp, kp, vp)
        } else {
            (
                g.slice_cols(qp, h * d, d),
                g.slice_cols(kp, h * d, d),
                g.slice_cols(vp, h * d, d),
            )
        };
        let scores = g.matmul_t(qh, kh);
        let scores = g.scale(scores, scale);
        let weights = g.softmax(scores, mask);
        attention.push(weights);
        heads.push(g.matmul(weights, vh));
    }
    let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
    let attn_out = lin(g, merged, p.wo, p.bo);

    let res1 = g.add(q, attn_out);
    let (g1, b1) = (g.param(store, p.ln1_g), g.param(store, p.ln1_b));
    let x1 = g.layer_norm(res1, g1, b1);

    let hidden = lin(g, x1, p.ff1_w, p.ff1_b);
    let hidden = g.gelu(hidden);
    let ff = lin(g, hidden, p.ff2_w, p.ff2_b);
    let res2 = g.add(x1, ff);
    let (g2, b2) = (g.param(store, p.ln2_g), g.param(store, p.ln2_b));
    let out = g.layer_norm(res2, g2, b2);
    Ok(SamOutput { out, attention })
}

/// `N_e` SAMs applied in order; one instance serves both modalities.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub layers: Vec<SamParams>,
}

impl EncoderStack {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        depth: usize,
        hidden: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|l| SamParams::init(store, &format!("enc.{l}"), hidden, heads, rng))
            .collect::<Result<_>>()?;
        Ok(EncoderStack { layers })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(SamParams::ids).collect()
    }
}

/// Self-attention (`Q = K = V`) composed over the stack.
pub fn encode(g: &mut Graph, store: &ParamStore, stack: &EncoderStack, x: Var, pad_mask: Option<&[bool]>) -> Result<Var> {
    let mut h = x;
    for layer in &stack.layers {
        h = sam_forward(g, store, layer, h, h, h, pad_mask)?.out;
    }
    Ok(h)
}

/// Encodes pyramid levels independently and concatenates them in the given
/// (up, mid, down) order.
pub fn encode_levels(g: &mut Graph, store: &ParamStore, stack: &EncoderStack, levels: &[Var]) -> Result<Var> {
    let encoded = levels
        .iter()
        .map(|&x| encode(g, store, stack, x, None))
        .collect::<Result<Vec<_>>>()?;
    Ok(if encoded.len() == 1 {
        encoded[0]
    } else {
        g.concat_rows(&encoded)
    })
}

/// Row-wise layer norm with unit gain and zero bias, for reference checks.
pub fn plain_layer_norm(x: &Mat) -> Mat {
    let mut out = x.clone();
    let n = x.cols() as f64;
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + crate::autograd::LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
    }
    out
}
