//! Masking procedures and reconstruction losses.
//!
//! Corruption is always random substitution: masked words become random
//! vocabulary words and masked patches become patches drawn from a donor pool.
//! Losses are computed on masked positions only.

use rand::seq::index;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::Mode;
use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::tokenize::{PatchSequence, TokenSequence, NUM_RESERVED};

pub const DEFAULT_MASK_RATE: f64 = 0.15;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan<T> {
    /// Ascending, unique, never a pad position.
    pub positions: Vec<usize>,
    pub replacements: Vec<T>,
    pub originals: Vec<T>,
}

impl<T> MaskPlan<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// `round(rate * len)` with ties to even, but at least one position for a
/// non-empty sequence.
pub fn mask_count(len: usize, rate: f64) -> usize {
    if len == 0 {
        return 0;
    }
    ((rate * len as f64).round_ties_even() as usize).clamp(1, len)
}

fn sample_positions<R: Rng + ?Sized>(candidates: &[usize], rate: f64, rng: &mut R) -> Vec<usize> {
    let k = mask_count(candidates.len(), rate);
    let mut picked: Vec<usize> = index::sample(rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picked.sort_unstable();
    picked
}

pub fn mask_tokens<R: Rng + ?Sized>(
    seq: &TokenSequence,
    rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<(TokenSequence, MaskPlan<u32>)> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Config(format!("mask rate {rate} outside (0, 1)")));
    }
    if vocab_size <= NUM_RESERVED as usize {
        return Err(Error::Config("vocabulary has no replaceable words".into()));
    }
    let live: Vec<usize> = (0..seq.len()).filter(|&i| !seq.pad_mask[i]).collect();
    if live.is_empty() {
        return Err(Error::Validation("cannot mask an all-pad sequence".into()));
    }
    let positions = sample_positions(&live, rate, rng);
    let mut corrupted = seq.clone();
    let mut replacements = Vec::with_capacity(positions.len());
    let mut originals = Vec::with_capacity(positions.len());
    for &p in &positions {
        let r = rng.gen_range(NUM_RESERVED..vocab_size as u32);
        originals.push(seq.tokens[p]);
        replacements.push(r);
        corrupted.tokens[p] = r;
    }
    Ok((
        corrupted,
        MaskPlan {
            positions,
            replacements,
            originals,
        },
    ))
}

/// Replaces a random subset of patches with rows drawn from `donors`.
pub fn mask_patches<R: Rng + ?Sized>(
    seq: &PatchSequence,
    rate: f64,
    rng: &mut R,
    donors: &Mat,
) -> Result<(PatchSequence, MaskPlan<Vec<f64>>)> {
    let all: Vec<usize> = (0..seq.len()).collect();
    let positions = sample_positions(&all, rate, rng);
    mask_patches_at(seq, positions, rng, donors)
}

/// Corrupts exactly `positions` (ascending, unique) with donor patches.
pub fn mask_patches_at<R: Rng + ?Sized>(
    seq: &PatchSequence,
    positions: Vec<usize>,
    rng: &mut R,
    donors: &Mat,
) -> Result<(PatchSequence, MaskPlan<Vec<f64>>)> {
    if donors.rows() == 0 {
        return Err(Error::Validation("empty donor pool".into()));
    }
    if donors.cols() != seq.patches.cols() {
        return Err(Error::Shape(format!(
            "donor patches have {} values, sequence patches {}",
            donors.cols(),
            seq.patches.cols()
        )));
    }
    let mut corrupted = seq.clone();
    let mut replacements = Vec::with_capacity(positions.len());
    let mut originals = Vec::with_capacity(positions.len());
    for &p in &positions {
        let d = donors.row(rng.gen_range(0..donors.rows())).to_vec();
        originals.push(seq.patches.row(p).to_vec());
        corrupted.patches.row_mut(p).copy_from_slice(&d);
        replacements.push(d);
    }
    Ok((
        corrupted,
        MaskPlan {
            positions,
            replacements,
            originals,
        },
    ))
}

/// Mean cross-entropy of each row of `logits` against its target class, and the
/// gradient with respect to `logits`.
pub fn cross_entropy(logits: &Mat, targets: &[u32]) -> (f64, Mat) {
    let (m, n) = logits.shape();
    assert_eq!(m, targets.len());
    let mut grad = Mat::zeros(m, n);
    let mut total = 0.0;
    for i in 0..m {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let t = targets[i] as usize;
        total += z.ln() + max - row[t];
        let gr = grad.row_mut(i);
        for j in 0..n {
            gr[j] = (row[j] - max).exp() / z / m as f64;
        }
        gr[t] -= 1.0 / m as f64;
    }
    (total / m as f64, grad)
}

/// `L_txt`: mean cross-entropy over masked positions; 0 for an empty mask set.
pub fn loss_txt(g: &mut Graph, logits: Option<Var>, originals: &[u32]) -> Var {
    match logits {
        Some(l) if !originals.is_empty() => {
            let (value, grad) = cross_entropy(g.value(l), originals);
            g.scalar_fn(l, value, grad)
        }
        _ => g.constant(Mat::scalar(0.0)),
    }
}

/// Mean absolute difference and its subgradient (0 at ties).
pub fn l1_mean(pred: &Mat, target: &Mat) -> (f64, Mat) {
    assert_eq!(pred.shape(), target.shape());
    let n = pred.len() as f64;
    let mut grad = Mat::zeros(pred.rows(), pred.cols());
    let mut total = 0.0;
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        total += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    (total / n, grad)
}

/// `L_img`: mean absolute intensity error over masked patches; 0 when none.
pub fn loss_img(g: &mut Graph, pred: Option<Var>, originals: &Mat) -> Result<Var> {
    match pred {
        Some(p) if originals.rows() > 0 => {
            if g.shape(p) != originals.shape() {
                return Err(Error::Shape(format!(
                    "predicted patches {:?} vs originals {:?}",
                    g.shape(p),
                    originals.shape()
                )));
            }
            let (value, grad) = l1_mean(g.value(p), originals);
            Ok(g.scalar_fn(p, value, grad))
        }
        _ => Ok(g.constant(Mat::scalar(0.0))),
    }
}

/// Loss components of one example or batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub txt: Option<f64>,
    pub img: Option<f64>,
    pub co: Option<f64>,
}

/// Components a mode contributes to the total.
pub fn mode_components(mode: Mode) -> (bool, bool, bool) {
    match mode {
        Mode::Unit => (true, true, false),
        Mode::Uwox => (true, true, true),
        Mode::ImgOnly => (false, true, false),
        Mode::TxtOnly => (true, false, false),
    }
}

/// Unweighted sum of the components present in `mode`.
pub fn total_loss(l: &LossValues, mode: Mode) -> f64 {
    let (t, i, c) = mode_components(mode);
    let pick = |on: bool, v: Option<f64>| if on { v.unwrap_or(0.0) } else { 0.0 };
    pick(t, l.txt) + pick(i, l.img) + pick(c, l.co)
}

/// Graph version of [`total_loss`].
pub fn total_loss_var(g: &mut Graph, txt: Option<Var>, img: Option<Var>, co: Option<Var>, mode: Mode) -> Var {
    let (t, i, c) = mode_components(mode);
    let parts: Vec<Var> = [(t, txt), (i, img), (c, co)]
        .into_iter()
        .filter_map(|(on, v)| if on { v } else { None })
        .collect();
    if parts.is_empty() {
        g.constant(Mat::scalar(0.0))
    } else {
        g.sum_scalars(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Raster;
    use crate::gradcheck::check_inputs;
    use crate::tokenize::{build_pyramid, PAD_ID};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(n: usize) -> TokenSequence {
        TokenSequence {
            tokens: (0..n).map(|i| 2 + (i % 10) as u32).collect(),
            positions: (0..n).collect(),
            pad_mask: vec![false; n],
        }
    }

    #[test]
    fn full_length_text_masks_22_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (corrupt, plan) = mask_tokens(&seq(150), 0.15, 20, &mut rng).unwrap();
        assert_eq!(plan.len(), 22);
        for (k, &p) in plan.positions.iter().enumerate() {
            assert_eq!(corrupt.tokens[p], plan.replacements[k]);
            assert!(plan.replacements[k] >= NUM_RESERVED);
        }
    }

    #[test]
    fn tiny_sequences_still_mask_one_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, plan) = mask_tokens(&seq(2), 0.15, 20, &mut rng).unwrap();
        assert_eq!(plan.len(), 1);
    }

    #[test]
    fn pads_are_never_masked_and_plans_are_reproducible() {
        let s = seq(6).pad_to(30);
        for seed in 0..50 {
            let (_, plan) = mask_tokens(&s, 0.5, 20, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(plan.len(), 3);
            assert!(plan.positions.iter().all(|&p| p < 6));
            let (_, again) = mask_tokens(&s, 0.5, 20, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(plan, again);
        }
        assert_eq!(s.tokens[10], PAD_ID);
    }

    #[test]
    fn patch_masking_counts_and_constant_images() {
        let img = Raster::filled(256, 256, 90);
        let pyr = build_pyramid(&img, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (corrupt, plan) = mask_patches(&pyr.down, 0.15, &mut rng, &pyr.down.patches).unwrap();
        assert_eq!(plan.len(), 38);
        assert_eq!(corrupt, pyr.down);
        let mut sorted = plan.positions.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), plan.len());
        assert!(matches!(
            mask_patches(&pyr.down, 0.15, &mut rng, &Mat::zeros(0, 256)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut g = Graph::new();
        let l = g.variable(Mat::zeros(3, 64));
        let loss = loss_txt(&mut g, Some(l), &[5, 6, 7]);
        assert!((g.value(loss).item() - 64f64.ln()).abs() < 1e-12);

        let mut perfect = Mat::zeros(2, 64);
        perfect.set(0, 3, 50.0);
        perfect.set(1, 9, 50.0);
        let (v, _) = cross_entropy(&perfect, &[3, 9]);
        assert!(v < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Mat::uniform(3, 7, 2.0, &mut rng);
        let err = check_inputs(&[logits], |g, v| loss_txt(g, Some(v[0]), &[1, 6, 0]));
        assert!(err < 1e-4, "{err}");

        let mut g = Graph::new();
        let empty = loss_txt(&mut g, None, &[]);
        assert_eq!(g.value(empty).item(), 0.0);
    }

    #[test]
    fn l1_reference_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let target = Mat::uniform(3, 4, 0.4, &mut rng).map(|v| v + 0.5);
        let (same, grad) = l1_mean(&target, &target);
        assert_eq!(same, 0.0);
        assert!(grad.data().iter().all(|&v| v == 0.0));
        let (off, _) = l1_mean(&target.map(|v| v + 0.1), &target);
        assert!((off - 0.1).abs() < 1e-12);

        // Away from kinks the subgradient is the gradient.
        let pred = target.map(|v| v + 0.05).clone();
        let mut pred = pred;
        pred.set(1, 1, target.get(1, 1) - 0.2);
        let err = check_inputs(&[pred], |g, v| loss_img(g, Some(v[0]), &target).unwrap());
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn unmasked_predictions_do_not_affect_losses() {
        // Losses only see rows gathered at masked positions.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let full = Mat::uniform(6, 4, 1.0, &mut rng);
        let masked = [1usize, 4];
        let targets = Mat::uniform(2, 4, 1.0, &mut rng);
        let eval = |m: &Mat| {
            let mut g = Graph::new();
            let v = g.constant(m.clone());
            let rows = g.gather_rows(v, &masked);
            let l = loss_img(&mut g, Some(rows), &targets).unwrap();
            g.value(l).item()
        };
        let mut perturbed = full.clone();
        perturbed.row_mut(0).fill(9.0);
        perturbed.row_mut(5).fill(-3.0);
        assert_eq!(eval(&full), eval(&perturbed));
    }

    #[test]
    fn total_loss_selects_components() {
        let l = LossValues {
            txt: Some(1.0),
            img: Some(2.0),
            co: Some(0.5),
        };
        assert_eq!(total_loss(&l, Mode::Uwox), 3.5);
        assert_eq!(total_loss(&LossValues { co: None, ..l }, Mode::Unit), 3.0);
        assert_eq!(total_loss(&l, Mode::Unit), 3.0);
        assert_eq!(total_loss(&l, Mode::ImgOnly), 2.0);
        assert_eq!(total_loss(&l, Mode::TxtOnly), 1.0);
    }

    #[test]
    fn masked_fraction_converges_to_rate() {
        let s = seq(150);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut hits = 0usize;
        let draws = 1000;
        for _ in 0..draws {
            hits += mask_tokens(&s, 0.15, 20, &mut rng).unwrap().1.len();
        }
        let frac = hits as f64 / (draws * 150) as f64;
        assert!((frac - 0.15).abs() <= 0.02, "{frac}");
    }
}
