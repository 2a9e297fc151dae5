//! Image-text correlation: UNIT cross-fusion, UWOX shared encoding and the
//! pair-matching head built on the text-image correlation matrix.

use rand::Rng;

use crate::attention::{sam_forward, SamParams};
use crate::autograd::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

/// Pair-matching map from the pooled correlation features to one logit.
///
/// Its input width is `max_text_len + image_rows`, so both are fixed when the
/// model is built.
#[derive(Clone, Debug)]
pub struct PairMatchParams {
    /// `(image_rows + max_text_len) x 1`.
    pub w: ParamId,
    pub b: ParamId,
    pub max_text_len: usize,
    pub image_rows: usize,
}

impl PairMatchParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        max_text_len: usize,
        image_rows: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let width = max_text_len + image_rows;
        Ok(PairMatchParams {
            w: store.uniform("pair.w", width, 1, (6.0 / (width + 1) as f64).sqrt(), rng)?,
            b: store.constant("pair.b", 1, 1, 0.0)?,
            max_text_len,
            image_rows,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    /// `SAM_unit` or `SAM_uwox` depending on the mode.
    pub sam: SamParams,
    pub pair: Option<PairMatchParams>,
}

impl FusionParams {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.sam.ids();
        if let Some(p) = &self.pair {
            ids.extend(p.ids());
        }
        ids
    }
}

/// Outputs of a fusion step, named as in the fusion equations.
#[derive(Clone, Copy, Debug)]
pub struct FusedFeatures {
    /// UNIT: image-row queries attending over text; UWOX: text self-attention.
    pub f_txt: Var,
    /// UNIT: text-row queries attending over image; UWOX: image self-attention.
    pub f_img: Var,
    pub pair_logit: Option<Var>,
}

/// A text encoding together with its pad mask (`true` = padding).
#[derive(Clone, Copy, Debug)]
pub struct TextEncoding<'a> {
    pub rows: Var,
    pub pad_mask: &'a [bool],
}

/// `F_txt = SAM(E_img, E_txt, E_txt)`, `F_img = SAM(E_txt, E_img, E_img)`.
///
/// `F_txt` therefore has one row per image patch and `F_img` one per token.
pub fn unit_fuse(
    g: &mut Graph,
    store: &ParamStore,
    params: &FusionParams,
    text: Option<TextEncoding<'_>>,
    e_img: Option<Var>,
) -> Result<FusedFeatures> {
    let (Some(text), Some(e_img)) = (text, e_img) else {
        return Err(Error::Mode(
            "UNIT fusion needs both image and text; use UWOX for single-modality input".into(),
        ));
    };
    let f_txt = sam_forward(g, store, &params.sam, e_img, text.rows, text.rows, Some(text.pad_mask))?.out;
    let f_img = sam_forward(g, store, &params.sam, text.rows, e_img, e_img, None)?.out;
    Ok(FusedFeatures {
        f_txt,
        f_img,
        pair_logit: None,
    })
}

/// Shared `SAM_uwox` self-attention over one modality's encoding.
pub fn uwox_forward(
    g: &mut Graph,
    store: &ParamStore,
    params: &FusionParams,
    encoding: Var,
    pad_mask: Option<&[bool]>,
) -> Result<Var> {
    Ok(sam_forward(g, store, &params.sam, encoding, encoding, encoding, pad_mask)?.out)
}

pub struct PairMatch {
    pub logit: Var,
    /// Text-axis average of the correlation matrix, one entry per image row.
    pub co_txt: Var,
    /// Image-axis average, one entry per text slot, zero-filled to `max_text_len`.
    pub co_img: Var,
}

impl PairMatch {
    pub fn probability(&self, g: &Graph) -> f64 {
        sigmoid(g.value(self.logit).item())
    }
}

/// Correlation-matrix pair matching on encoder outputs.
pub fn pair_match(
    g: &mut Graph,
    store: &ParamStore,
    params: &PairMatchParams,
    text: TextEncoding<'_>,
    e_img: Var,
) -> Result<PairMatch> {
    let (v, _) = g.shape(text.rows);
    let (u, _) = g.shape(e_img);
    if text.pad_mask.len() != v {
        return Err(Error::Shape(format!("pad mask has {} entries for {v} tokens", text.pad_mask.len())));
    }
    if v > params.max_text_len {
        return Err(Error::Shape(format!(
            "{v} text rows exceed the pair-matching width of {}",
            params.max_text_len
        )));
    }
    if u != params.image_rows {
        return Err(Error::Shape(format!(
            "{u} image rows but pair matching was built for {}",
            params.image_rows
        )));
    }
    let keep: Vec<bool> = text.pad_mask.iter().map(|&p| !p).collect();
    if !keep.iter().any(|&k| k) {
        return Err(Error::Validation("pair matching on all-pad text".into()));
    }
    let comat = g.matmul_t(text.rows, e_img); // v x u
    let co_txt = g.mean_rows_masked(comat, &keep); // 1 x u
    let per_token = g.mean_cols(comat); // v x 1
    let per_token = g.mask_rows(per_token, &keep);
    let per_token = g.transpose(per_token);
    let co_img = g.pad_cols(per_token, params.max_text_len);
    let joined = g.concat_cols(&[co_txt, co_img]);
    let w = g.param(store, params.w);
    let b = g.param(store, params.b);
    let logit = g.linear(joined, w, b);
    Ok(PairMatch { logit, co_txt, co_img })
}

/// Numerically stable binary cross-entropy on a logit, with its derivative.
pub fn bce_with_logit(logit: f64, target: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - target)
}

pub fn pair_match_loss(g: &mut Graph, logit: Var, i_pair: bool) -> Var {
    let z = g.value(logit).item();
    let (loss, grad) = bce_with_logit(z, if i_pair { 1.0 } else { 0.0 });
    g.scalar_fn(logit, loss, Mat::scalar(grad))
}
