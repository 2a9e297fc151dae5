//! Full model: embeddings, shared encoder, fusion, decoders and optional heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{encode, encode_levels, EncoderStack};
use crate::autograd::{sigmoid, Graph, Var};
use crate::config::{Mode, QueryType, TrainConfig};
use crate::data::Raster;
use crate::decoder::{decode_multiscale, predict_patches, split_levels, DecoderParams};
use crate::error::{Error, Result};
use crate::fusion::{pair_match, pair_match_loss, unit_fuse, uwox_forward, FusionParams, PairMatchParams, TextEncoding};
use crate::heads::{pool, ClassifierHead, HashHead};
use crate::objectives::{loss_img, loss_txt, MaskPlan};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;
use crate::attention::SamParams;
use crate::tokenize::{
    build_pyramid, embed_patches, embed_text, pyramid_counts, single_scale_patches, tokenize, EmbeddingParams,
    PatchSequence, TokenSequence, Vocab,
};

/// Linear map from text features to vocabulary logits.
#[derive(Clone, Debug)]
pub struct TextHead {
    pub w: ParamId,
    pub b: ParamId,
}

/// Patch sequences of one image: `[up, mid, down]` when multi-scale, `[down]`
/// otherwise. The last level is always the prediction target.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInput {
    pub levels: Vec<PatchSequence>,
}

impl ImageInput {
    pub fn down(&self) -> &PatchSequence {
        self.levels.last().expect("at least one level")
    }

    /// Copy with the down level replaced.
    pub fn with_down(&self, down: PatchSequence) -> ImageInput {
        let mut levels = self.levels.clone();
        *levels.last_mut().expect("at least one level") = down;
        ImageInput { levels }
    }
}

/// Per-sample loss nodes; absent components are `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct SampleLosses {
    pub txt: Option<Var>,
    pub img: Option<Var>,
    pub co: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub emb: EmbeddingParams,
    pub encoder: EncoderStack,
    pub fusion: FusionParams,
    pub decoder: Option<DecoderParams>,
    pub text_head: Option<TextHead>,
    pub cls: Option<ClassifierHead>,
    pub hash: Option<HashHead>,
}

/// Rng stream used for parameter initialisation.
const INIT_STREAM: u64 = 7;
const HEAD_STREAM: u64 = 8;

impl Model {
    /// Fresh parameters for `config`; initialisation depends only on the seed.
    pub fn new(config: &TrainConfig, vocab: Vocab) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(INIT_STREAM);
        let mut store = ParamStore::new();
        let c = config.hidden;
        let emb = EmbeddingParams::init(&mut store, vocab.len(), config.block_size, c, config.multiscale, config.max_text_len, &mut rng)?;
        let encoder = EncoderStack::init(&mut store, config.layers, c, config.heads, &mut rng)?;
        let sam = SamParams::init(&mut store, "fuse", c, config.heads, &mut rng)?;
        let pair = if config.mode.uses_pair_matching() {
            Some(PairMatchParams::init(&mut store, config.max_text_len, image_rows(config), &mut rng)?)
        } else {
            None
        };
        let decoder = if config.mode.uses_image() {
            Some(DecoderParams::init(&mut store, c, config.heads, config.block_size, &mut rng)?)
        } else {
            None
        };
        let text_head = if config.mode.uses_text() {
            let bound = (6.0 / (c + vocab.len()) as f64).sqrt();
            Some(TextHead {
                w: store.uniform("txt.w", c, vocab.len(), bound, &mut rng)?,
                b: store.constant("txt.b", 1, vocab.len(), 0.0)?,
            })
        } else {
            None
        };
        Ok(Model {
            config: config.clone(),
            vocab,
            store,
            emb,
            encoder,
            fusion: FusionParams { sam, pair },
            decoder,
            text_head,
            cls: None,
            hash: None,
        })
    }

    pub fn attach_classifier(&mut self) -> Result<()> {
        if self.cls.is_none() {
            let mut rng = self.head_rng();
            self.cls = Some(ClassifierHead::init(&mut self.store, self.config.hidden, self.config.num_classes, &mut rng)?);
        }
        Ok(())
    }

    pub fn attach_hash(&mut self) -> Result<()> {
        if self.hash.is_none() {
            let mut rng = self.head_rng();
            rng.set_word_pos(1 << 20);
            self.hash = Some(HashHead::init(&mut self.store, self.config.hidden, &mut rng)?);
        }
        Ok(())
    }

    fn head_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(HEAD_STREAM);
        rng
    }

    /// Copies named blocks into this model. Every block whose name exists here
    /// must have the same shape; unknown names are ignored. With `strict`, every
    /// model block must be supplied.
    pub fn load_blocks<'a>(&mut self, blocks: impl IntoIterator<Item = (&'a str, &'a Mat)>, strict: bool) -> Result<()> {
        let mut seen = vec![false; self.store.len()];
        for (name, value) in blocks {
            if let Some(id) = self.store.id(name) {
                let have = self.store.get(id).shape();
                if have != value.shape() {
                    return Err(Error::Config(format!(
                        "parameter block '{name}' has shape {:?} in the checkpoint but {:?} in this configuration",
                        value.shape(),
                        have
                    )));
                }
                *self.store.get_mut(id) = value.clone();
                seen[id.index()] = true;
            }
        }
        if strict {
            if let Some(i) = seen.iter().position(|s| !s) {
                let name = self.store.iter().nth(i).map(|(_, n, _)| n.to_string()).unwrap_or_default();
                return Err(Error::Checkpoint(format!("missing parameter block '{name}'")));
            }
        }
        Ok(())
    }

    pub fn image_rows(&self) -> usize {
        image_rows(&self.config)
    }

    /// Checks the raster size and cuts it into the configured patch levels.
    pub fn prepare_image(&self, image: &Raster) -> Result<ImageInput> {
        let s = self.config.image_size;
        if image.width() != s || image.height() != s {
            return Err(Error::Config(format!(
                "image is {}x{} but the model was built for {s}x{s}",
                image.width(),
                image.height()
            )));
        }
        let b = self.config.block_size;
        let levels = if self.config.multiscale {
            let p = build_pyramid(image, b)?;
            vec![p.up, p.mid, p.down]
        } else {
            vec![single_scale_patches(image, b)?]
        };
        Ok(ImageInput { levels })
    }

    /// Unpadded token ids, truncated to `max_text_len`.
    pub fn prepare_text<S: AsRef<str>>(&self, report: &[S]) -> Result<TokenSequence> {
        let seq = tokenize(report, &self.vocab, self.config.max_text_len);
        if seq.is_empty() {
            return Err(Error::Validation("report has no tokens".into()));
        }
        Ok(seq)
    }

    pub fn encode_text(&self, g: &mut Graph, seq: &TokenSequence) -> Result<Var> {
        let x = embed_text(g, &self.store, &self.emb, seq)?;
        encode(g, &self.store, &self.encoder, x, None)
    }

    pub fn encode_image(&self, g: &mut Graph, image: &ImageInput) -> Result<Var> {
        let levels = image
            .levels
            .iter()
            .map(|l| embed_patches(g, &self.store, &self.emb, l))
            .collect::<Result<Vec<_>>>()?;
        encode_levels(g, &self.store, &self.encoder, &levels)
    }

    /// Fused image-side rows (one per patch) and text-side rows (one per
    /// token). UNIT uses the cross-fusion outputs whose query rows match each
    /// modality; the other modes use the shared self-attention per modality.
    pub fn fuse(&self, g: &mut Graph, e_txt: Option<Var>, e_img: Option<Var>) -> Result<(Option<Var>, Option<Var>)> {
        if self.config.mode == Mode::Unit {
            let pad = e_txt.map(|t| vec![false; g.shape(t).0]).unwrap_or_default();
            let text = e_txt.map(|rows| TextEncoding { rows, pad_mask: &pad });
            let f = unit_fuse(g, &self.store, &self.fusion, text, e_img)?;
            return Ok((Some(f.f_txt), Some(f.f_img)));
        }
        let img = e_img.map(|e| uwox_forward(g, &self.store, &self.fusion, e, None)).transpose()?;
        let txt = e_txt.map(|e| uwox_forward(g, &self.store, &self.fusion, e, None)).transpose()?;
        Ok((img, txt))
    }

    /// Predicted down-level patches from fused image rows.
    pub fn decode_image(&self, g: &mut Graph, img_rows: Var) -> Result<Var> {
        let dec = self
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Mode(format!("{} models have no image decoder", self.config.mode)))?;
        let rows = if self.config.multiscale {
            let (down, mid, up) = pyramid_counts(self.config.image_size, self.config.block_size);
            let f = split_levels(g, img_rows, (up, mid, down))?;
            decode_multiscale(g, &self.store, dec, f)?
        } else {
            img_rows
        };
        Ok(predict_patches(g, &self.store, dec, rows))
    }

    pub fn text_logits(&self, g: &mut Graph, txt_rows: Var) -> Result<Var> {
        let head = self
            .text_head
            .as_ref()
            .ok_or_else(|| Error::Mode(format!("{} models have no text predictor", self.config.mode)))?;
        let (w, b) = (g.param(&self.store, head.w), g.param(&self.store, head.b));
        Ok(g.linear(txt_rows, w, b))
    }

    /// Pair-matching logit on encoder outputs.
    pub fn pair_logit(&self, g: &mut Graph, e_txt: Var, e_img: Var) -> Result<Var> {
        let params = self
            .fusion
            .pair
            .as_ref()
            .ok_or_else(|| Error::Mode(format!("{} models have no pair-matching head", self.config.mode)))?;
        let pad = vec![false; g.shape(e_txt).0];
        let text = TextEncoding { rows: e_txt, pad_mask: &pad };
        Ok(pair_match(g, &self.store, params, text, e_img)?.logit)
    }

    /// Masked-modelling losses for one (already corrupted) sample.
    pub fn pretrain_forward(
        &self,
        g: &mut Graph,
        text: Option<(&TokenSequence, &MaskPlan<u32>)>,
        image: Option<(&ImageInput, &MaskPlan<Vec<f64>>)>,
        i_pair: bool,
    ) -> Result<SampleLosses> {
        let mode = self.config.mode;
        let text = if mode.uses_text() { text } else { None };
        let image = if mode.uses_image() { image } else { None };
        let e_txt = text.map(|(seq, _)| self.encode_text(g, seq)).transpose()?;
        let e_img = image.map(|(img, _)| self.encode_image(g, img)).transpose()?;
        let (img_rows, txt_rows) = self.fuse(g, e_txt, e_img)?;

        let mut out = SampleLosses::default();
        if let (Some((_, plan)), Some(rows)) = (text, txt_rows) {
            let picked = g.gather_rows(rows, &plan.positions);
            let logits = self.text_logits(g, picked)?;
            out.txt = Some(loss_txt(g, Some(logits), &plan.originals));
        }
        if let (Some((_, plan)), Some(rows)) = (image, img_rows) {
            let pred = self.decode_image(g, rows)?;
            let picked = g.gather_rows(pred, &plan.positions);
            let target = Mat::from_rows(&plan.originals);
            out.img = Some(loss_img(g, Some(picked), &target)?);
        }
        if mode.uses_pair_matching() {
            if let (Some(t), Some(i)) = (e_txt, e_img) {
                let logit = self.pair_logit(g, t, i)?;
                out.co = Some(pair_match_loss(g, logit, i_pair));
            }
        }
        Ok(out)
    }

    /// Pooled `1 x C` feature for a fine-tuning head.
    pub fn pooled_feature(
        &self,
        g: &mut Graph,
        text: Option<&TokenSequence>,
        image: Option<&ImageInput>,
        query: QueryType,
    ) -> Result<Var> {
        let want_img = matches!(query, QueryType::Image | QueryType::ImageText);
        let want_txt = matches!(query, QueryType::Text | QueryType::ImageText);
        let unit = self.config.mode == Mode::Unit;
        let image = if want_img || unit { image } else { None };
        let text = if want_txt || unit { text } else { None };
        if want_img && image.is_none() {
            return Err(Error::Validation("image query without an image".into()));
        }
        if want_txt && text.is_none() {
            return Err(Error::Validation("text query without a report".into()));
        }
        let e_img = image.map(|i| self.encode_image(g, i)).transpose()?;
        let e_txt = text.map(|t| self.encode_text(g, t)).transpose()?;
        let (img_rows, txt_rows) = self.fuse(g, e_txt, e_img)?;
        let pi = if want_img { img_rows.map(|r| pool(g, r, None)).transpose()? } else { None };
        let pt = if want_txt { txt_rows.map(|r| pool(g, r, None)).transpose()? } else { None };
        Ok(match (pi, pt) {
            (Some(a), Some(b)) => {
                let s = g.add(a, b);
                g.scale(s, 0.5)
            }
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => unreachable!("query selects at least one modality"),
        })
    }

    /// Probability that an image and report belong to the same study.
    pub fn pair_probability(&self, text: &TokenSequence, image: &ImageInput) -> Result<f64> {
        let mut g = Graph::new();
        let t = self.encode_text(&mut g, text)?;
        let i = self.encode_image(&mut g, image)?;
        let z = self.pair_logit(&mut g, t, i)?;
        Ok(sigmoid(g.value(z).item()))
    }

    /// Fused image rows computed from the image alone (no text anywhere).
    pub fn image_features(&self, g: &mut Graph, image: &ImageInput) -> Result<Var> {
        let e = self.encode_image(g, image)?;
        match self.fuse(g, None, Some(e))? {
            (Some(rows), _) => Ok(rows),
            _ => unreachable!("image rows requested"),
        }
    }
}

/// Image rows entering the fusion step: all pyramid levels, or the down level.
pub fn image_rows(config: &TrainConfig) -> usize {
    let (down, mid, up) = pyramid_counts(config.image_size, config.block_size);
    if config.multiscale {
        down + mid + up
    } else {
        down
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_corpus;
    use crate::objectives::{mask_patches, mask_tokens};

    fn small(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            hidden: 16,
            heads: 2,
            layers: 1,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn structure_follows_mode() {
        let v = Vocab::synthetic();
        let m = Model::new(&small(Mode::Uwox), v.clone()).unwrap();
        assert!(m.fusion.pair.is_some() && m.decoder.is_some() && m.text_head.is_some());
        assert_eq!(m.image_rows(), 21);
        let m = Model::new(&small(Mode::ImgOnly), v.clone()).unwrap();
        assert!(m.fusion.pair.is_none() && m.text_head.is_none());
        let m = Model::new(&small(Mode::TxtOnly), v).unwrap();
        assert!(m.decoder.is_none());
    }

    #[test]
    fn initialisation_is_seeded() {
        let v = Vocab::synthetic();
        let a = Model::new(&small(Mode::Uwox), v.clone()).unwrap();
        let b = Model::new(&small(Mode::Uwox), v.clone()).unwrap();
        assert_eq!(a.store, b.store);
        let c = Model::new(&TrainConfig { seed: 1, ..small(Mode::Uwox) }, v).unwrap();
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn every_mode_produces_its_loss_components() {
        let rec = &generate_corpus(1, 32, 4, 3).unwrap()[0];
        for mode in Mode::ALL {
            let m = Model::new(&small(mode), Vocab::synthetic()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let seq = m.prepare_text(&rec.report).unwrap();
            let img = m.prepare_image(&rec.image).unwrap();
            let (ct, tp) = mask_tokens(&seq, 0.15, m.vocab.len(), &mut rng).unwrap();
            let (cd, ip) = mask_patches(img.down(), 0.15, &mut rng, &img.down().patches).unwrap();
            let ci = img.with_down(cd);
            let mut g = Graph::new();
            let l = m.pretrain_forward(&mut g, Some((&ct, &tp)), Some((&ci, &ip)), true).unwrap();
            assert_eq!(l.txt.is_some(), mode.uses_text(), "{mode}");
            assert_eq!(l.img.is_some(), mode.uses_image(), "{mode}");
            assert_eq!(l.co.is_some(), mode.uses_pair_matching(), "{mode}");
        }
    }

    #[test]
    fn wrong_image_size_is_a_configuration_error() {
        let m = Model::new(&small(Mode::Uwox), Vocab::synthetic()).unwrap();
        assert!(matches!(m.prepare_image(&Raster::filled(64, 64, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn unit_features_need_both_modalities() {
        let rec = &generate_corpus(1, 32, 4, 3).unwrap()[0];
        let m = Model::new(&small(Mode::Unit), Vocab::synthetic()).unwrap();
        let img = m.prepare_image(&rec.image).unwrap();
        let mut g = Graph::new();
        assert!(matches!(
            m.pooled_feature(&mut g, None, Some(&img), QueryType::Image),
            Err(Error::Mode(_))
        ));
        assert!(matches!(m.image_features(&mut g, &img), Err(Error::Mode(_))));
        let seq = m.prepare_text(&rec.report).unwrap();
        let f = m.pooled_feature(&mut g, Some(&seq), Some(&img), QueryType::Image).unwrap();
        assert_eq!(g.shape(f), (1, 16));
    }

    #[test]
    fn load_blocks_names_mismatched_block() {
        let a = Model::new(&small(Mode::Uwox), Vocab::synthetic()).unwrap();
        let mut b = Model::new(&TrainConfig { block_size: 4, ..small(Mode::Uwox) }, Vocab::synthetic()).unwrap();
        let blocks: Vec<(String, Mat)> = a.store.iter().map(|(_, n, m)| (n.to_string(), m.clone())).collect();
        let err = b
            .load_blocks(blocks.iter().map(|(n, m)| (n.as_str(), m)), false)
            .unwrap_err()
            .to_string();
        assert!(err.contains("emb.patch.w"), "{err}");
    }
}
