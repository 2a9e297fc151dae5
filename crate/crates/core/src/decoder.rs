//! Top-down multi-scale decoder and the patch predictor.
//!
//! The cascade runs a single shared SAM three times, up to down, then a final
//! pass with the down-level features as queries so every down-level patch gets
//! its own output row.

use rand::Rng;

use crate::attention::{sam_forward, SamParams};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Two-layer perceptron `C -> C -> B*B` with a GELU hidden layer and a
/// logistic output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let xavier = |i: usize, o: usize| (6.0 / (i + o) as f64).sqrt();
        Ok(Mlp {
            w1: store.uniform(&format!("{prefix}.w1"), input, hidden, xavier(input, hidden), rng)?,
            b1: store.constant(&format!("{prefix}.b1"), 1, hidden, 0.0)?,
            w2: store.uniform(&format!("{prefix}.w2"), hidden, output, xavier(hidden, output), rng)?,
            b2: store.constant(&format!("{prefix}.b2"), 1, output, 0.0)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let (w1, b1) = (g.param(store, self.w1), g.param(store, self.b1));
        let h = g.linear(x, w1, b1);
        let h = g.gelu(h);
        let (w2, b2) = (g.param(store, self.w2), g.param(store, self.b2));
        let out = g.linear(h, w2, b2);
        g.sigmoid(out)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    /// Shared by every cascade step and the final refinement.
    pub sam: SamParams,
    pub mlp: Mlp,
    pub block: usize,
}

impl DecoderParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        hidden: usize,
        heads: usize,
        block: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(DecoderParams {
            sam: SamParams::init(store, "dec.sam", hidden, heads, rng)?,
            mlp: Mlp::init(store, "dec.mlp", hidden, hidden, block * block, rng)?,
            block,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.sam.ids();
        ids.extend(self.mlp.ids());
        ids
    }
}

/// Per-level features in `(up, mid, down)` order.
#[derive(Clone, Copy, Debug)]
pub struct LevelFeatures {
    pub up: Var,
    pub mid: Var,
    pub down: Var,
}

/// Splits a row-concatenated `(up, mid, down)` feature matrix by level sizes.
pub fn split_levels(g: &mut Graph, features: Var, counts: (usize, usize, usize)) -> Result<LevelFeatures> {
    let (up, mid, down) = counts;
    let rows = g.shape(features).0;
    if rows != up + mid + down || up == 0 || mid == 0 || down == 0 {
        return Err(Error::Shape(format!(
            "{rows} feature rows cannot be split into levels of {up}/{mid}/{down}"
        )));
    }
    Ok(LevelFeatures {
        up: g.slice_rows(features, 0, up),
        mid: g.slice_rows(features, up, mid),
        down: g.slice_rows(features, up + mid, down),
    })
}

/// `D_up = SAM_d(F_up, F_up, F_up)`, `D_mid = SAM_d(D_up, F_mid, F_mid)`,
/// `D_down = SAM_d(D_mid, F_down, F_down)`.
pub fn decode_cascade(g: &mut Graph, store: &ParamStore, params: &DecoderParams, f: LevelFeatures) -> Result<Var> {
    let sam = &params.sam;
    let d_up = sam_forward(g, store, sam, f.up, f.up, f.up, None)?.out;
    let d_mid = sam_forward(g, store, sam, d_up, f.mid, f.mid, None)?.out;
    sam_forward(g, store, sam, d_mid, f.down, f.down, None).map(|o| o.out)
}

/// Cascade plus the refinement `SAM_d(F_down, D_down, D_down)`; one row per
/// down-level patch.
pub fn decode_multiscale(g: &mut Graph, store: &ParamStore, params: &DecoderParams, f: LevelFeatures) -> Result<Var> {
    let d_down = decode_cascade(g, store, params, f)?;
    sam_forward(g, store, &params.sam, f.down, d_down, d_down, None).map(|o| o.out)
}

/// Patch intensities in `[0, 1]`, one row per input row.
pub fn predict_patches(g: &mut Graph, store: &ParamStore, params: &DecoderParams, rows: Var) -> Var {
    params.mlp.forward(g, store, rows)
}
