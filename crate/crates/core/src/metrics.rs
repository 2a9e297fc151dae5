//! Evaluation metrics: ROC AUC, exact-match precision at K and image quality.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Raster;
use crate::error::{Error, Result};

/// Rank-based (Mann-Whitney) AUC with half credit for ties; `None` unless both
/// classes are present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks over tie groups, 1-based.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Per-class AUCs of a `records x classes` score table, and their mean over the
/// defined classes.
pub fn macro_auc(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> (Vec<Option<f64>>, Option<f64>) {
    let k = labels.first().map_or(0, Vec::len);
    let per: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let l: Vec<bool> = labels.iter().map(|r| r[c] == 1).collect();
            auc(&s, &l)
        })
        .collect();
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    (per, mean)
}

/// Fraction of the first `k` ranked gallery items whose label set equals the
/// query's; the denominator shrinks to the gallery size when it is below `k`.
pub fn precision_at_k(ranked: &[usize], query: &[u8], gallery: &[Vec<u8>], k: usize) -> Result<f64> {
    if gallery.is_empty() || ranked.is_empty() {
        return Err(Error::Validation("precision at K over an empty gallery".into()));
    }
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let take = k.min(ranked.len());
    let hits = ranked[..take].iter().filter(|&&i| gallery[i] == query).count();
    Ok(hits as f64 / take as f64)
}

pub const PSNR_CAP: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn mse(a: &Raster, b: &Raster) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.pixels().len() as f64;
    Ok(a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-12 {
        PSNR_CAP
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    }
}

fn same_dims(a: &Raster, b: &Raster) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Shape(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW * SSIM_WINDOW)
        .map(|i| {
            let (x, y) = ((i % SSIM_WINDOW) as f64 - r, (i / SSIM_WINDOW) as f64 - r);
            (-(x * x + y * y) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean SSIM over every fully contained 11x11 window (Gaussian weighted,
/// sigma 1.5, k1 = 0.01, k2 = 0.03, L = 255). Images smaller than the window
/// use a single window covering the whole image with uniform weights.
pub fn ssim(a: &Raster, b: &Raster) -> Result<f64> {
    same_dims(a, b)?;
    let (w, h) = (a.width(), a.height());
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let pa: Vec<f64> = a.pixels().iter().map(|&v| v as f64).collect();
    let pb: Vec<f64> = b.pixels().iter().map(|&v| v as f64).collect();
    let local = |x0: usize, y0: usize, ww: usize, wh: usize, weights: &[f64]| {
        let (mut ma, mut mb) = (0.0, 0.0);
        for y in 0..wh {
            for x in 0..ww {
                let k = weights[y * ww + x];
                ma += k * pa[(y0 + y) * w + x0 + x];
                mb += k * pb[(y0 + y) * w + x0 + x];
            }
        }
        let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
        for y in 0..wh {
            for x in 0..ww {
                let k = weights[y * ww + x];
                let da = pa[(y0 + y) * w + x0 + x] - ma;
                let db = pb[(y0 + y) * w + x0 + x] - mb;
                va += k * da * da;
                vb += k * db * db;
                cov += k * da * db;
            }
        }
        ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    };
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        let uniform = vec![1.0 / (w * h) as f64; w * h];
        return Ok(local(0, 0, w, h, &uniform));
    }
    let weights = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            total += local(x0, y0, SSIM_WINDOW, SSIM_WINDOW, &weights);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn image_quality(reference: &Raster, candidate: &Raster) -> Result<Quality> {
    let m = mse(reference, candidate)?;
    Ok(Quality {
        mse: m,
        psnr: psnr_from_mse(m),
        ssim: ssim(reference, candidate)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionAtK {
    pub k: usize,
    pub value: f64,
}

/// One evaluation run. Absent sections are omitted from the serialised form.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub records: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_auc: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision_at_k: Option<Vec<PrecisionAtK>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chance_p_at_1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_intra_hamming: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_inter_hamming: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<Vec<ImageScore>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_psnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_ssim: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_pair_prob_paired: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_pair_prob_unpaired: Option<f64>,
}

impl MetricReport {
    pub fn new(task: &str, records: usize) -> Self {
        MetricReport {
            task: task.to_string(),
            records,
            ..Default::default()
        }
    }

    /// Fills per-image scores and their averages.
    pub fn set_images(&mut self, images: Vec<ImageScore>) {
        let n = images.len().max(1) as f64;
        self.mean_mse = Some(images.iter().map(|s| s.mse).sum::<f64>() / n);
        self.mean_psnr = Some(images.iter().map(|s| s.psnr).sum::<f64>() / n);
        self.mean_ssim = Some(images.iter().map(|s| s.ssim).sum::<f64>() / n);
        self.images = Some(images);
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("metric report: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
