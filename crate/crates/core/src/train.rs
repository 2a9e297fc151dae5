//! Training loops, evaluation pipelines and the scenario suite.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{Mode, TrainConfig};
use crate::data::{assemble_scenario, Raster, Scenario, ScenarioConfig, StudyRecord, TrainingTuple};
use crate::error::{Error, Result};
use crate::heads::{
    cauchy_hash_loss, class_logits, hash_continuous, label_similarity, multilabel_bce, retrieve, write_gallery,
    GalleryEntry, HashCode,
};
use crate::metrics::{image_quality, macro_auc, precision_at_k, ImageScore, MetricReport, PrecisionAtK, Quality};
use crate::model::{ImageInput, Model};
use crate::objectives::{mask_patches, mask_patches_at, mask_tokens, total_loss_var};
use crate::optim::Adam;
use crate::params::GradStore;
use crate::tensor::Mat;
use crate::tokenize::{TokenSequence, Vocab};

const MASK_STREAM: u64 = 9;
const SHUFFLE_SALT: u64 = 0x005e_ed0f_ba7c;
const PAIR_EVAL_STREAM: u64 = 11;
const REGEN_STREAM: u64 = 12;
pub const P_AT_K: [usize; 4] = [1, 5, 10, 50];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneTask {
    Cls,
    Hash,
}

impl FromStr for FinetuneTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(FinetuneTask::Cls),
            "hash" => Ok(FinetuneTask::Hash),
            _ => Err(Error::Config(format!("unknown fine-tuning task '{s}' (cls, hash)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTask {
    Cls,
    Retrieval,
    Regen,
    PairMatch,
}

impl EvalTask {
    pub fn name(self) -> &'static str {
        match self {
            EvalTask::Cls => "cls",
            EvalTask::Retrieval => "retrieval",
            EvalTask::Regen => "regen",
            EvalTask::PairMatch => "pairmatch",
        }
    }
}

impl fmt::Display for EvalTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [EvalTask::Cls, EvalTask::Retrieval, EvalTask::Regen, EvalTask::PairMatch]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown evaluation task '{s}' (cls, retrieval, regen, pairmatch)")))
    }
}

// ---------------------------------------------------------------------------
// Loss logging

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub txt: Option<f64>,
    pub img: Option<f64>,
    pub co: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<LossRow>,
}

impl LossLog {
    pub const HEADER: &'static str = "step,l_txt,l_img,l_co,total";

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{:.6}\n", r.step, f(r.txt), f(r.img), f(r.co), r.total));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// Prepared inputs

#[derive(Clone, Debug)]
pub struct PretrainSample {
    pub image: ImageInput,
    pub text: TokenSequence,
    pub i_pair: bool,
}

#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub id: String,
    pub image: ImageInput,
    pub text: Option<TokenSequence>,
    pub labels: Vec<u8>,
}

/// Tuples carry no labels, so nothing label-derived can reach pre-training.
pub fn prepare_pretrain(model: &Model, tuples: &[TrainingTuple]) -> Result<Vec<PretrainSample>> {
    tuples
        .iter()
        .map(|t| {
            Ok(PretrainSample {
                image: model.prepare_image(&t.image)?,
                text: model.prepare_text(&t.report)?,
                i_pair: t.i_pair,
            })
        })
        .collect()
}

pub fn prepare_labeled(model: &Model, records: &[StudyRecord]) -> Result<Vec<LabeledSample>> {
    records
        .iter()
        .map(|r| {
            if r.labels.len() != model.config.num_classes {
                return Err(Error::Validation(format!(
                    "record '{}' has {} labels, model expects {}",
                    r.id,
                    r.labels.len(),
                    model.config.num_classes
                )));
            }
            let text = if r.has_report { model.prepare_text(&r.report).ok() } else { None };
            Ok(LabeledSample {
                id: r.id.clone(),
                image: model.prepare_image(&r.image)?,
                text,
                labels: r.labels.clone(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Trainer

/// Owns the parameters, optimiser state and masking rng.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: &TrainConfig, vocab: Vocab) -> Result<Self> {
        let model = Model::new(config, vocab)?;
        Ok(Self::with_model(model))
    }

    fn with_model(model: Model) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
        rng.set_stream(MASK_STREAM);
        Trainer {
            adam: Adam::new(&model.store, model.config.learning_rate),
            model,
            step: 0,
            rng,
        }
    }

    /// Restores a run exactly as saved, heads and optimiser state included.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let vocab = Vocab::from_list(&ck.vocab)?;
        let mut model = Model::new(&ck.config, vocab)?;
        if ck.block("head.cls.w").is_some() {
            model.attach_classifier()?;
        }
        if ck.block("head.hash.w").is_some() {
            model.attach_hash()?;
        }
        model.load_blocks(ck.blocks.iter().map(|(n, m)| (n.as_str(), m)), true)?;
        let lr = if model.cls.is_some() || model.hash.is_some() {
            model.config.finetune_learning_rate
        } else {
            model.config.learning_rate
        };
        let mut adam = Adam::new(&model.store, lr);
        for (id, name, _) in model.store.iter() {
            let get = |prefix: &str| {
                let key = format!("{prefix}/{name}");
                ck.block(&key)
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimiser block '{key}'")))
            };
            adam.m[id.index()] = get("adam.m")?;
            adam.v[id.index()] = get("adam.v")?;
        }
        adam.t = ck.step;
        Ok(Trainer {
            model,
            adam,
            step: ck.step,
            rng: ck.rng.restore(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut blocks: Vec<(String, Mat)> = self
            .model
            .store
            .iter()
            .map(|(_, n, m)| (n.to_string(), m.clone()))
            .collect();
        for (prefix, moments) in [("adam.m", &self.adam.m), ("adam.v", &self.adam.v)] {
            for ((_, n, _), m) in self.model.store.iter().zip(moments) {
                blocks.push((format!("{prefix}/{n}"), m.clone()));
            }
        }
        Checkpoint {
            config: self.model.config.clone(),
            vocab: self.model.vocab.words().to_vec(),
            step: self.step,
            rng: RngState::capture(&self.rng),
            blocks,
        }
    }

    /// Indices of the batch for `step`; each epoch is a fresh permutation
    /// derived from the seed and epoch number alone.
    pub fn batch_indices(&self, n: usize, step: u64) -> Vec<usize> {
        let cfg = &self.model.config;
        let per_epoch = cfg.steps_per_epoch(n);
        let (epoch, b) = (step / per_epoch, (step % per_epoch) as usize);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let start = b * cfg.batch_size;
        order[start..(start + cfg.batch_size).min(n)].to_vec()
    }

    fn apply(&mut self, g: &Graph, loss: crate::autograd::Var) -> Result<()> {
        let grads = g.backward(loss);
        let mut store = GradStore::zeros_like(&self.model.store);
        g.accumulate_param_grads(&grads, &mut store);
        if !store.all_finite() {
            return Err(Error::Validation(format!("non-finite gradient at step {}", self.step)));
        }
        self.adam.step(&mut self.model.store, &store);
        self.step += 1;
        Ok(())
    }

    /// One masked-modelling update.
    pub fn pretrain_step(&mut self, data: &[PretrainSample]) -> Result<LossRow> {
        let idx = self.batch_indices(data.len(), self.step);
        let model = &self.model;
        let mode = model.config.mode;
        let rate = model.config.mask_rate;
        let donors = if mode.uses_image() {
            let rows: Vec<Vec<f64>> = idx
                .iter()
                .flat_map(|&i| {
                    let d = &data[i].image.down().patches;
                    (0..d.rows()).map(move |r| d.row(r).to_vec())
                })
                .collect();
            Mat::from_rows(&rows)
        } else {
            Mat::zeros(0, 0)
        };

        let mut g = Graph::new();
        let mut parts = Vec::with_capacity(idx.len());
        let mut sums = [0.0f64; 3];
        for &i in &idx {
            let s = &data[i];
            let text = if mode.uses_text() {
                Some(mask_tokens(&s.text, rate, model.vocab.len(), &mut self.rng)?)
            } else {
                None
            };
            let image = if mode.uses_image() {
                let (down, plan) = mask_patches(s.image.down(), rate, &mut self.rng, &donors)?;
                Some((s.image.with_down(down), plan))
            } else {
                None
            };
            let l = model.pretrain_forward(
                &mut g,
                text.as_ref().map(|(t, p)| (t, p)),
                image.as_ref().map(|(im, p)| (im, p)),
                s.i_pair,
            )?;
            for (k, v) in [l.txt, l.img, l.co].into_iter().enumerate() {
                if let Some(v) = v {
                    sums[k] += g.value(v).item();
                }
            }
            parts.push(total_loss_var(&mut g, l.txt, l.img, l.co, mode));
        }
        let n = idx.len() as f64;
        let sum = g.sum_scalars(&parts);
        let loss = g.scale(sum, 1.0 / n);
        let total = g.value(loss).item();
        let step = self.step;
        self.apply(&g, loss)?;
        let (t, i, c) = crate::objectives::mode_components(mode);
        Ok(LossRow {
            step,
            txt: t.then_some(sums[0] / n),
            img: i.then_some(sums[1] / n),
            co: c.then_some(sums[2] / n),
            total,
        })
    }

    /// Runs pre-training updates until `target` steps have been taken.
    pub fn pretrain_until(&mut self, data: &[PretrainSample], target: u64, log: &mut LossLog) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Config("empty pre-training set".into()));
        }
        while self.step < target {
            log.rows.push(self.pretrain_step(data)?);
        }
        Ok(())
    }

    /// One fine-tuning update; returns the batch loss.
    pub fn finetune_step(&mut self, data: &[LabeledSample], task: FinetuneTask) -> Result<f64> {
        let mut idx = self.batch_indices(data.len(), self.step);
        if task == FinetuneTask::Hash && idx.len() < 2 {
            // A lone leftover record has no pairs; borrow the epoch's first one.
            let first = self.batch_indices(data.len(), self.step - self.step % self.model.config.steps_per_epoch(data.len()));
            if let Some(extra) = first.into_iter().find(|i| !idx.contains(i)) {
                idx.push(extra);
            }
        }
        let model = &self.model;
        let query = model.config.query;
        let mut g = Graph::new();
        let pooled = idx
            .iter()
            .map(|&i| model.pooled_feature(&mut g, data[i].text.as_ref(), Some(&data[i].image), query))
            .collect::<Result<Vec<_>>>()?;
        let rows = g.concat_rows(&pooled);
        let labels: Vec<Vec<u8>> = idx.iter().map(|&i| data[i].labels.clone()).collect();
        let loss = match task {
            FinetuneTask::Cls => {
                let head = model.cls.as_ref().ok_or_else(|| Error::Config("no classification head".into()))?;
                let logits = class_logits(&mut g, &model.store, head, rows);
                multilabel_bce(&mut g, logits, &labels)
            }
            FinetuneTask::Hash => {
                let head = model.hash.as_ref().ok_or_else(|| Error::Config("no hash head".into()))?;
                let codes = hash_continuous(&mut g, &model.store, head, rows);
                let sim = label_similarity(&labels);
                cauchy_hash_loss(&mut g, codes, &sim, model.config.hash_gamma, model.config.hash_quant_weight)?
            }
        };
        let value = g.value(loss).item();
        self.apply(&g, loss)?;
        Ok(value)
    }
}

/// Pre-trains a fresh model on `tuples`; fails for the no-pre-training scenario.
pub fn pretrain(config: &TrainConfig, vocab: Vocab, tuples: &[TrainingTuple]) -> Result<(Trainer, LossLog)> {
    if config.scenario.scenario == Scenario::Baseline1 {
        return Err(Error::Config("baseline1 trains from scratch; there is nothing to pre-train".into()));
    }
    if tuples.is_empty() {
        return Err(Error::Config("empty pre-training set".into()));
    }
    let mut trainer = Trainer::new(config, vocab)?;
    let data = prepare_pretrain(&trainer.model, tuples)?;
    let mut log = LossLog::default();
    let target = config.total_steps(data.len());
    trainer.pretrain_until(&data, target, &mut log)?;
    Ok((trainer, log))
}

/// Builds a model for `config`, copies compatible weights from `base`, attaches
/// a fresh head and trains every parameter on `records`.
pub fn finetune(
    base: Option<&Checkpoint>,
    config: &TrainConfig,
    vocab: Vocab,
    task: FinetuneTask,
    records: &[StudyRecord],
) -> Result<Trainer> {
    let vocab = match base {
        Some(ck) => Vocab::from_list(&ck.vocab)?,
        None => vocab,
    };
    let mut model = Model::new(config, vocab)?;
    if let Some(ck) = base {
        model.load_blocks(ck.blocks.iter().map(|(n, m)| (n.as_str(), m)), false)?;
    }
    match task {
        FinetuneTask::Cls => model.attach_classifier()?,
        FinetuneTask::Hash => model.attach_hash()?,
    }
    if records.is_empty() || (task == FinetuneTask::Hash && records.len() < 2) {
        return Err(Error::Config("fine-tuning set is too small".into()));
    }
    let mut trainer = Trainer::with_model(model);
    trainer.adam.lr = config.finetune_learning_rate;
    let data = prepare_labeled(&trainer.model, records)?;
    let steps = config.finetune_steps(data.len());
    while trainer.step < steps {
        trainer.finetune_step(&data, task)?;
    }
    Ok(trainer)
}

// ---------------------------------------------------------------------------
// Evaluation

/// Per-class probabilities for each record.
pub fn class_scores(model: &Model, data: &[LabeledSample]) -> Result<Vec<Vec<f64>>> {
    let head = model
        .cls
        .as_ref()
        .ok_or_else(|| Error::Config("model has no classification head; fine-tune with task cls first".into()))?;
    data.iter()
        .map(|s| {
            let mut g = Graph::new();
            let f = model.pooled_feature(&mut g, s.text.as_ref(), Some(&s.image), model.config.query)?;
            let z = class_logits(&mut g, &model.store, head, f);
            Ok(g.value(z).data().iter().map(|&v| crate::autograd::sigmoid(v)).collect())
        })
        .collect()
}

pub fn hash_codes(model: &Model, data: &[LabeledSample]) -> Result<Vec<HashCode>> {
    let head = model
        .hash
        .as_ref()
        .ok_or_else(|| Error::Config("model has no hash head; fine-tune with task hash first".into()))?;
    data.iter()
        .map(|s| {
            let mut g = Graph::new();
            let f = model.pooled_feature(&mut g, s.text.as_ref(), Some(&s.image), model.config.query)?;
            let c = hash_continuous(&mut g, &model.store, head, f);
            Ok(HashCode::from_continuous(g.value(c).data()))
        })
        .collect()
}

/// Reconstructs every down-level patch: `ceil(1 / rate)` passes, pass `j`
/// corrupting the patches whose index is `j` modulo the pass count, each
/// prediction kept from the pass that masked it.
pub fn regenerate_image(
    model: &Model,
    image: &Raster,
    report: Option<&[String]>,
    rng: &mut ChaCha8Rng,
) -> Result<(Raster, Quality)> {
    let mode = model.config.mode;
    if !mode.uses_image() {
        return Err(Error::Mode(format!("{mode} models cannot regenerate images")));
    }
    let input = model.prepare_image(image)?;
    let text = match (mode, report) {
        (Mode::Unit, Some(r)) => Some(model.prepare_text(r)?),
        (Mode::Unit, None) => {
            return Err(Error::Mode("UNIT regeneration needs the paired report".into()));
        }
        _ => None,
    };
    let down = input.down();
    let n = down.len();
    let passes = ((1.0 / model.config.mask_rate).ceil() as usize).clamp(1, n);
    let mut out = Mat::zeros(n, down.patches.cols());
    for pass in 0..passes {
        let positions: Vec<usize> = (0..n).filter(|p| p % passes == pass).collect();
        let (corrupt, _) = mask_patches_at(down, positions.clone(), rng, &down.patches)?;
        let masked = input.with_down(corrupt);
        let mut g = Graph::new();
        let e_img = model.encode_image(&mut g, &masked)?;
        let e_txt = text.as_ref().map(|t| model.encode_text(&mut g, t)).transpose()?;
        let (rows, _) = model.fuse(&mut g, e_txt, Some(e_img))?;
        let pred = model.decode_image(&mut g, rows.expect("image rows"))?;
        for &p in &positions {
            out.row_mut(p).copy_from_slice(g.value(pred).row(p));
        }
    }
    let plane = down.assemble(&out);
    let recon = Raster::from_unit(image.width(), image.height(), &plane);
    let q = image_quality(image, &recon)?;
    Ok((recon, q))
}

/// Each record once with its own report and once with another record's report.
pub fn pair_eval_tuples(records: &[StudyRecord], seed: u64) -> Result<Vec<TrainingTuple>> {
    let with_report: Vec<&StudyRecord> = records.iter().filter(|r| r.has_report).collect();
    if with_report.len() < 2 {
        return Err(Error::Config("pair evaluation needs at least two records with reports".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PAIR_EVAL_STREAM);
    let mut out = Vec::with_capacity(2 * with_report.len());
    for r in &with_report {
        let other = loop {
            let o = with_report[rng.gen_range(0..with_report.len())];
            if o.id != r.id {
                break o;
            }
        };
        for (donor, paired) in [(*r, true), (other, false)] {
            out.push(TrainingTuple {
                image: r.image.clone(),
                report: donor.report.clone(),
                i_pair: paired,
                image_id: r.id.clone(),
                report_id: donor.id.clone(),
                image_institute: r.institute,
            });
        }
    }
    Ok(out)
}

/// Accuracy at threshold 0.5 and mean probabilities per population.
pub fn evaluate_pairs(model: &Model, tuples: &[TrainingTuple]) -> Result<MetricReport> {
    let mut report = MetricReport::new(EvalTask::PairMatch.name(), tuples.len());
    let (mut correct, mut pos, mut neg, mut npos, mut nneg) = (0usize, 0.0, 0.0, 0usize, 0usize);
    for t in tuples {
        let p = model.pair_probability(&model.prepare_text(&t.report)?, &model.prepare_image(&t.image)?)?;
        if (p > 0.5) == t.i_pair {
            correct += 1;
        }
        if t.i_pair {
            pos += p;
            npos += 1;
        } else {
            neg += p;
            nneg += 1;
        }
    }
    report.pair_accuracy = Some(correct as f64 / tuples.len().max(1) as f64);
    report.mean_pair_prob_paired = (npos > 0).then(|| pos / npos as f64);
    report.mean_pair_prob_unpaired = (nneg > 0).then(|| neg / nneg as f64);
    Ok(report)
}

/// Runs one evaluation pipeline. Writes the gallery index (retrieval) and
/// regenerated images (regen) under `out_dir` when given.
pub fn evaluate(model: &Model, task: EvalTask, records: &[StudyRecord], out_dir: Option<&Path>) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    match task {
        EvalTask::Cls => {
            let data = prepare_labeled(model, records)?;
            let scores = class_scores(model, &data)?;
            let labels: Vec<Vec<u8>> = data.iter().map(|s| s.labels.clone()).collect();
            let (per, mean) = macro_auc(&scores, &labels);
            let mut r = MetricReport::new(task.name(), data.len());
            r.class_auc = Some(per);
            r.macro_auc = mean;
            Ok(r)
        }
        EvalTask::Retrieval => {
            let data = prepare_labeled(model, records)?;
            if data.len() < 2 {
                return Err(Error::Config("retrieval needs at least two records".into()));
            }
            let codes = hash_codes(model, &data)?;
            let entries: Vec<GalleryEntry> = data
                .iter()
                .zip(&codes)
                .map(|(s, &code)| GalleryEntry {
                    id: s.id.clone(),
                    code,
                    labels: s.labels.clone(),
                })
                .collect();
            if let Some(dir) = out_dir {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_gallery(&entries, &dir.join("gallery.txt"))?;
            }
            Ok(retrieval_report(&entries))
        }
        EvalTask::Regen => {
            let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
            rng.set_stream(REGEN_STREAM);
            let img_dir = out_dir.map(|d| d.join("regen"));
            if let Some(d) = &img_dir {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            let mut scores = Vec::with_capacity(records.len());
            for r in records {
                let report = (r.has_report).then_some(r.report.as_slice());
                let (recon, q) = regenerate_image(model, &r.image, report, &mut rng)?;
                if let Some(d) = &img_dir {
                    recon.write_pgm(&d.join(format!("{}.pgm", r.id)))?;
                }
                scores.push(ImageScore {
                    id: r.id.clone(),
                    mse: q.mse,
                    psnr: q.psnr,
                    ssim: q.ssim,
                });
            }
            let mut rep = MetricReport::new(task.name(), records.len());
            rep.set_images(scores);
            Ok(rep)
        }
        EvalTask::PairMatch => {
            let tuples = pair_eval_tuples(records, model.config.seed)?;
            evaluate_pairs(model, &tuples)
        }
    }
}

/// Leave-one-out retrieval over a gallery: P@K, label-frequency chance at K=1
/// and mean intra/inter-class Hamming distances.
pub fn retrieval_report(entries: &[GalleryEntry]) -> MetricReport {
    let n = entries.len();
    let mut sums = [0.0; P_AT_K.len()];
    let mut chance = 0.0;
    let (mut intra, mut inter, mut n_intra, mut n_inter) = (0.0, 0.0, 0usize, 0usize);
    for q in 0..n {
        let others: Vec<GalleryEntry> = entries
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != q)
            .map(|(_, e)| e.clone())
            .collect();
        let labels: Vec<Vec<u8>> = others.iter().map(|e| e.labels.clone()).collect();
        let ranked = retrieve(entries[q].code, &others);
        for (k, s) in P_AT_K.iter().zip(sums.iter_mut()) {
            *s += precision_at_k(&ranked, &entries[q].labels, &labels, *k).expect("non-empty gallery");
        }
        chance += labels.iter().filter(|l| **l == entries[q].labels).count() as f64 / labels.len() as f64;
        for (i, e) in entries.iter().enumerate().skip(q + 1) {
            let d = entries[q].code.hamming(e.code) as f64;
            if entries[i].labels == entries[q].labels {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    let mut r = MetricReport::new(EvalTask::Retrieval.name(), n);
    r.precision_at_k = Some(
        P_AT_K
            .iter()
            .zip(sums)
            .map(|(&k, s)| PrecisionAtK { k, value: s / n as f64 })
            .collect(),
    );
    r.chance_p_at_1 = Some(chance / n as f64);
    r.mean_intra_hamming = (n_intra > 0).then(|| intra / n_intra as f64);
    r.mean_inter_hamming = (n_inter > 0).then(|| inter / n_inter as f64);
    r
}

// ---------------------------------------------------------------------------
// Scenario suite

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteCell {
    pub scenario: Scenario,
    pub paired_fraction: f64,
    pub pretrain_tuples: usize,
    pub finetune_records: usize,
    pub finetune_ids: Vec<String>,
    pub macro_auc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteTable {
    pub cells: Vec<SuiteCell>,
}

impl SuiteTable {
    pub fn get(&self, scenario: Scenario, fraction: f64) -> Option<&SuiteCell> {
        self.cells
            .iter()
            .find(|c| c.scenario == scenario && c.paired_fraction == fraction)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("table serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("suite table: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Pre-train (unless baseline1), fine-tune a classifier on the paired subset
/// and evaluate macro AUC on the shared `eval` split, for every cell.
pub fn run_scenario_suite(
    base: &TrainConfig,
    vocab: &Vocab,
    corpus_a: &[StudyRecord],
    corpus_b: &[StudyRecord],
    eval: &[StudyRecord],
    scenarios: &[Scenario],
    fractions: &[f64],
) -> Result<SuiteTable> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::Config(format!("paired fraction {f} outside (0, 1]")));
    }
    let mut table = SuiteTable::default();
    for &fraction in fractions {
        for &scenario in scenarios {
            let mut cfg = base.clone();
            cfg.scenario = ScenarioConfig {
                scenario,
                paired_fraction: fraction,
                ..base.scenario.clone()
            };
            let sets = assemble_scenario(corpus_a, corpus_b, &cfg.scenario)?;
            let pretrained = if scenario == Scenario::Baseline1 {
                None
            } else {
                Some(pretrain(&cfg, vocab.clone(), &sets.pretrain)?.0.checkpoint())
            };
            let tuned = finetune(pretrained.as_ref(), &cfg, vocab.clone(), FinetuneTask::Cls, &sets.finetune)?;
            let report = evaluate(&tuned.model, EvalTask::Cls, eval, None)?;
            table.cells.push(SuiteCell {
                scenario,
                paired_fraction: fraction,
                pretrain_tuples: sets.pretrain.len(),
                finetune_records: sets.finetune.len(),
                finetune_ids: sets.finetune.iter().map(|r| r.id.clone()).collect(),
                macro_auc: report.macro_auc,
            });
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_corpus;

    fn tiny(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            hidden: 16,
            heads: 2,
            layers: 1,
            batch_size: 4,
            max_steps: Some(3),
            finetune_max_steps: Some(3),
            ..TrainConfig::desk()
        }
    }

    fn tuples(n: usize) -> Vec<TrainingTuple> {
        let corpus = generate_corpus(n, 32, 4, 1).unwrap();
        assemble_scenario(&corpus, &[], &ScenarioConfig { paired_fraction: 0.5, ..Default::default() })
            .unwrap()
            .pretrain
    }

    #[test]
    fn loss_log_columns_follow_mode() {
        let t = tuples(8);
        let (_, log) = pretrain(&tiny(Mode::Uwox), Vocab::synthetic(), &t).unwrap();
        assert_eq!(log.rows.len(), 3);
        assert!(log.rows.iter().all(|r| r.txt.is_some() && r.img.is_some() && r.co.is_some()));
        let (_, log) = pretrain(&tiny(Mode::Unit), Vocab::synthetic(), &t).unwrap();
        assert!(log.rows.iter().all(|r| r.co.is_none()));
        let csv = log.to_csv();
        assert!(csv.starts_with("step,l_txt,l_img,l_co,total\n0,"));
        assert!(csv.lines().nth(1).unwrap().split(',').nth(3).unwrap().is_empty());
    }

    #[test]
    fn baseline1_cannot_pretrain() {
        let mut cfg = tiny(Mode::Uwox);
        cfg.scenario.scenario = Scenario::Baseline1;
        assert!(matches!(pretrain(&cfg, Vocab::synthetic(), &tuples(4)), Err(Error::Config(_))));
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let tr = Trainer::new(&tiny(Mode::Uwox), Vocab::synthetic()).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|s| tr.batch_indices(10, s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_ne!(tr.batch_indices(10, 0), tr.batch_indices(10, 3));
    }

    #[test]
    fn checkpoint_restores_trainer_state() {
        let (tr, _) = pretrain(&tiny(Mode::Uwox), Vocab::synthetic(), &tuples(8)).unwrap();
        let ck = tr.checkpoint();
        let back = Trainer::from_checkpoint(&ck).unwrap();
        assert_eq!(back.checkpoint().to_bytes(), ck.to_bytes());
        assert_eq!(back.step, 3);
    }

    #[test]
    fn task_head_mismatch_is_reported() {
        let corpus = generate_corpus(6, 32, 4, 2).unwrap();
        let tr = finetune(None, &tiny(Mode::Uwox), Vocab::synthetic(), FinetuneTask::Cls, &corpus).unwrap();
        assert_eq!(tr.model.store.scalar_count(&tr.model.cls.as_ref().unwrap().ids()), 16 * 4 + 4);
        assert!(matches!(evaluate(&tr.model, EvalTask::Retrieval, &corpus, None), Err(Error::Config(_))));
        let r = evaluate(&tr.model, EvalTask::Cls, &corpus, None).unwrap();
        assert!(r.macro_auc.is_some());
    }

    #[test]
    fn regeneration_covers_every_patch_once() {
        let corpus = generate_corpus(1, 32, 4, 2).unwrap();
        let tr = Trainer::new(&tiny(Mode::ImgOnly), Vocab::synthetic()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (recon, q) = regenerate_image(&tr.model, &corpus[0].image, None, &mut rng).unwrap();
        assert_eq!((recon.width(), recon.height()), (32, 32));
        assert!(q.mse > 0.0 && q.ssim <= 1.0);
        let txt = Trainer::new(&tiny(Mode::TxtOnly), Vocab::synthetic()).unwrap();
        assert!(matches!(
            regenerate_image(&txt.model, &corpus[0].image, None, &mut rng),
            Err(Error::Mode(_))
        ));
    }

    #[test]
    fn saturated_retrieval_gallery() {
        let entries: Vec<GalleryEntry> = (0..6)
            .map(|i| GalleryEntry {
                id: format!("r{i}"),
                code: HashCode(i as u64 * 77),
                labels: vec![1, 0, 1, 0],
            })
            .collect();
        let r = retrieval_report(&entries);
        assert!(r.precision_at_k.unwrap().iter().all(|p| p.value == 1.0));
        assert_eq!(r.chance_p_at_1, Some(1.0));
    }

    #[test]
    fn suite_table_round_trips() {
        let t = SuiteTable {
            cells: vec![SuiteCell {
                scenario: Scenario::Mixup1,
                paired_fraction: 0.05,
                pretrain_tuples: 100,
                finetune_records: 5,
                finetune_ids: vec!["a00001".into()],
                macro_auc: Some(0.75),
            }],
        };
        let back = SuiteTable::from_json(&t.to_json()).unwrap();
        assert_eq!(back, t);
        assert!(back.get(Scenario::Mixup1, 0.05).is_some());
    }
}
