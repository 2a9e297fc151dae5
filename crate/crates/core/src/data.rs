//! Study records, the synthetic shape corpus, scenario assembly and manifests.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit grayscale raster, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl fmt::Debug for Raster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Raster({}x{})", self.width, self.height)
    }
}

impl Raster {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height, "raster buffer size");
        Raster {
            width,
            height,
            pixels,
        }
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Raster::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Intensities scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }

    /// Quantises `[0, 1]` intensities back to 8 bits.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Self {
        let pixels = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Raster::new(width, height, pixels)
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        Ok(Raster::new(w as usize, h as usize, gray.into_raw()))
    }

    /// Writes a binary portable graymap (P5, maxval 255).
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend_from_slice(&self.pixels);
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Checks the pyramid constraint: both sides divisible by `4 * block`.
pub fn check_pyramid_geometry(width: usize, height: usize, block: usize) -> Result<()> {
    let unit = 4 * block;
    if block == 0 || width == 0 || height == 0 || !width.is_multiple_of(unit) || !height.is_multiple_of(unit) {
        return Err(Error::Geometry(format!(
            "{width}x{height} image is not divisible by 4*B = {unit}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Institute {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StudyRecord {
    pub id: String,
    pub image: Raster,
    pub report: Vec<String>,
    pub labels: Vec<u8>,
    pub institute: Institute,
    pub has_report: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Baseline1,
    Baseline2,
    Mixup1,
    Mixup2,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Baseline1,
        Scenario::Baseline2,
        Scenario::Mixup1,
        Scenario::Mixup2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Baseline1 => "baseline1",
            Scenario::Baseline2 => "baseline2",
            Scenario::Mixup1 => "mixup1",
            Scenario::Mixup2 => "mixup2",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub paired_fraction: f64,
    pub seed: u64,
    pub institutes: Vec<Institute>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario: Scenario::Mixup1,
            paired_fraction: 0.1,
            seed: 0,
            institutes: vec![Institute::A],
        }
    }
}

/// One pre-training input. Labels are deliberately absent.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTuple {
    pub image: Raster,
    pub report: Vec<String>,
    pub i_pair: bool,
    pub image_id: String,
    pub report_id: String,
    pub image_institute: Institute,
}

#[derive(Clone, Debug)]
pub struct ScenarioSets {
    pub pretrain: Vec<TrainingTuple>,
    pub finetune: Vec<StudyRecord>,
}

// ---------------------------------------------------------------------------
// Synthetic corpus

pub const SHAPES: [&str; 4] = ["circle", "square", "cross", "bar"];
const QUADRANTS: [(&str, &str); 4] = [
    ("upper", "left"),
    ("upper", "right"),
    ("lower", "left"),
    ("lower", "right"),
];
pub const CLASS_RATE: f64 = 0.5;

/// Every word the synthetic report grammar can emit.
pub const REPORT_WORDS: [&str; 18] = [
    "findings",
    ":",
    ",",
    ".",
    "no",
    "abnormality",
    "seen",
    "in",
    "upper",
    "lower",
    "left",
    "right",
    "bright",
    "faint",
    "circle",
    "square",
    "cross",
    "bar",
];

#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub n: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub institute: Institute,
    /// Largest patch size the corpus must support.
    pub max_block: usize,
}

impl CorpusSpec {
    pub fn new(n: usize, image_size: usize, num_classes: usize, seed: u64) -> Self {
        CorpusSpec {
            n,
            image_size,
            num_classes,
            seed,
            institute: Institute::A,
            max_block: 8,
        }
    }

    pub fn institute(mut self, institute: Institute) -> Self {
        self.institute = institute;
        self
    }

    pub fn max_block(mut self, max_block: usize) -> Self {
        self.max_block = max_block;
        self
    }
}

/// Institute-A corpus with the default block bound.
pub fn generate_corpus(n: usize, image_size: usize, num_classes: usize, seed: u64) -> Result<Vec<StudyRecord>> {
    generate(&CorpusSpec::new(n, image_size, num_classes, seed))
}

pub fn generate(spec: &CorpusSpec) -> Result<Vec<StudyRecord>> {
    if spec.n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    if spec.num_classes == 0 || spec.num_classes > SHAPES.len() {
        return Err(Error::Config(format!(
            "synthetic corpus supports 1..={} classes, got {}",
            SHAPES.len(),
            spec.num_classes
        )));
    }
    check_pyramid_geometry(spec.image_size, spec.image_size, spec.max_block)
        .map_err(|e| Error::Config(format!("invalid image_size: {e}")))?;
    let prefix = match spec.institute {
        Institute::A => "a",
        Institute::B => "b",
    };
    Ok((0..spec.n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + if spec.institute == Institute::B { 1 << 40 } else { 0 });
            synth_record(format!("{prefix}{i:05}"), spec, &mut rng)
        })
        .collect())
}

fn synth_record(id: String, spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> StudyRecord {
    let s = spec.image_size;
    let (bg_mean, bg_sd) = match spec.institute {
        Institute::A => (40.0, 12.0),
        Institute::B => (85.0, 12.0),
    };
    let mut canvas: Vec<f64> = (0..s * s)
        .map(|_| bg_mean + bg_sd * (rng.gen::<f64>() + rng.gen::<f64>() + rng.gen::<f64>() - 1.5) * 2.0)
        .collect();

    let labels: Vec<u8> = (0..spec.num_classes)
        .map(|_| u8::from(rng.gen_bool(CLASS_RATE)))
        .collect();
    let mut quadrants = [0usize, 1, 2, 3];
    quadrants.shuffle(rng);

    let mut phrases: Vec<Vec<String>> = Vec::new();
    for (class, _) in labels.iter().enumerate().filter(|(_, &l)| l == 1) {
        let quad = quadrants[class];
        let bright = rng.gen_bool(0.5);
        let intensity = if bright {
            rng.gen_range(210.0..=250.0)
        } else {
            rng.gen_range(130.0..=165.0)
        };
        let q = s as f64 / 2.0;
        let cx = (quad % 2) as f64 * q + q / 2.0 + rng.gen_range(-q / 10.0..=q / 10.0);
        let cy = (quad / 2) as f64 * q + q / 2.0 + rng.gen_range(-q / 10.0..=q / 10.0);
        let r = q * rng.gen_range(0.28..=0.38);
        draw_shape(&mut canvas, s, class, cx, cy, r, intensity);
        let (vert, horiz) = QUADRANTS[quad];
        phrases.push(
            [
                if bright { "bright" } else { "faint" },
                SHAPES[class],
                "in",
                vert,
                horiz,
            ]
            .iter()
            .map(|w| w.to_string())
            .collect(),
        );
    }

    let mut report: Vec<String> = vec!["findings".into(), ":".into()];
    if phrases.is_empty() {
        report.extend(["no", "abnormality", "seen"].iter().map(|w| w.to_string()));
    } else {
        for (i, p) in phrases.into_iter().enumerate() {
            if i > 0 {
                report.push(",".into());
            }
            report.extend(p);
        }
    }
    report.push(".".into());

    let pixels = canvas.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    StudyRecord {
        id,
        image: Raster::new(s, s, pixels),
        report,
        labels,
        institute: spec.institute,
        has_report: true,
    }
}

fn draw_shape(canvas: &mut [f64], s: usize, class: usize, cx: f64, cy: f64, r: f64, intensity: f64) {
    for y in 0..s {
        for x in 0..s {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let inside = match class {
                0 => dx * dx + dy * dy <= r * r,
                1 => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
                2 => {
                    (dx.abs() <= r && dy.abs() <= r / 3.0) || (dy.abs() <= r && dx.abs() <= r / 3.0)
                }
                _ => dx.abs() <= r && dy.abs() <= r / 3.0,
            };
            if inside {
                canvas[y * s + x] = intensity;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Scenario assembly

/// Number of paired records for a fraction of `n`.
pub fn paired_count(n: usize, fraction: f64) -> usize {
    (fraction * n as f64).round() as usize
}

/// Index order used to pick the paired subset; depends only on the seed and size,
/// so every scenario at a given fraction shares the same subset, and smaller
/// fractions are nested in larger ones.
fn paired_order(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub fn assemble_scenario(
    corpus_a: &[StudyRecord],
    corpus_b: &[StudyRecord],
    cfg: &ScenarioConfig,
) -> Result<ScenarioSets> {
    if !(cfg.paired_fraction > 0.0 && cfg.paired_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "paired_fraction {} is outside (0, 1]",
            cfg.paired_fraction
        )));
    }
    if corpus_a.len() < 2 {
        return Err(Error::Config("corpus A needs at least 2 records".into()));
    }
    let n_paired = paired_count(corpus_a.len(), cfg.paired_fraction);
    if n_paired == 0 {
        return Err(Error::Config(format!(
            "paired fraction {} of {} records selects no pairs",
            cfg.paired_fraction,
            corpus_a.len()
        )));
    }
    if cfg.scenario == Scenario::Mixup2 {
        if corpus_b.is_empty() {
            return Err(Error::Config("mixup2 requires a non-empty corpus B".into()));
        }
        if !corpus_b.iter().any(|r| r.institute == Institute::B) {
            return Err(Error::Config("mixup2 requires at least one institute-B record".into()));
        }
    }

    let order = paired_order(corpus_a.len(), cfg.seed);
    let mut paired_idx: Vec<usize> = order[..n_paired].to_vec();
    paired_idx.sort_unstable();
    let paired_set: BTreeSet<usize> = paired_idx.iter().copied().collect();
    let finetune: Vec<StudyRecord> = paired_idx.iter().map(|&i| corpus_a[i].clone()).collect();

    if cfg.scenario == Scenario::Baseline1 {
        return Ok(ScenarioSets {
            pretrain: Vec::new(),
            finetune,
        });
    }

    let mut pretrain = Vec::new();
    for &i in &paired_idx {
        let r = &corpus_a[i];
        if !r.has_report {
            return Err(Error::Config(format!("paired record '{}' has no report", r.id)));
        }
        pretrain.push(TrainingTuple {
            image: r.image.clone(),
            report: r.report.clone(),
            i_pair: true,
            image_id: r.id.clone(),
            report_id: r.id.clone(),
            image_institute: r.institute,
        });
    }

    let donors: Vec<usize> = (0..corpus_a.len()).filter(|&i| corpus_a[i].has_report).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let couple = |image: &StudyRecord, rng: &mut ChaCha8Rng| -> Result<TrainingTuple> {
        let candidates = donors.iter().filter(|&&d| corpus_a[d].id != image.id).count();
        if candidates == 0 {
            return Err(Error::Config(format!("no report available to couple with '{}'", image.id)));
        }
        let donor = loop {
            let d = donors[rng.gen_range(0..donors.len())];
            if corpus_a[d].id != image.id {
                break &corpus_a[d];
            }
        };
        Ok(TrainingTuple {
            image: image.image.clone(),
            report: donor.report.clone(),
            i_pair: false,
            image_id: image.id.clone(),
            report_id: donor.id.clone(),
            image_institute: image.institute,
        })
    };

    match cfg.scenario {
        Scenario::Baseline1 | Scenario::Baseline2 => {}
        Scenario::Mixup1 => {
            for (i, r) in corpus_a.iter().enumerate() {
                if !paired_set.contains(&i) {
                    pretrain.push(couple(r, &mut rng)?);
                }
            }
        }
        Scenario::Mixup2 => {
            for r in corpus_b {
                pretrain.push(couple(r, &mut rng)?);
            }
        }
    }
    Ok(ScenarioSets { pretrain, finetune })
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    image_path: String,
    #[serde(default)]
    report: Option<String>,
    labels: Vec<u8>,
    institute: Institute,
}

/// Writes `records` as `<dir>/manifest.jsonl` with images under `<dir>/images/`.
pub fn write_manifest(records: &[StudyRecord], dir: &Path) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let path = dir.join("manifest.jsonl");
    let mut out = Vec::new();
    for r in records {
        let rel = format!("images/{}.pgm", r.id);
        r.image.write_pgm(&dir.join(&rel))?;
        let line = ManifestLine {
            id: r.id.clone(),
            image_path: rel,
            report: r.has_report.then(|| r.report.join(" ")),
            labels: r.labels.clone(),
            institute: r.institute,
        };
        serde_json::to_writer(&mut out, &line).expect("manifest line serialises");
        out.push(b'\n');
    }
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&out).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a manifest; image paths are resolved relative to the manifest's directory.
pub fn load_manifest(path: &Path, block: usize) -> Result<Vec<StudyRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    let mut num_classes = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let entry: ManifestLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if entry.labels.iter().any(|&l| l > 1) {
            return Err(parse_err(format!("record '{}' has labels outside {{0,1}}", entry.id)));
        }
        match num_classes {
            None => num_classes = Some(entry.labels.len()),
            Some(k) if k != entry.labels.len() => {
                return Err(parse_err(format!(
                    "record '{}' has {} labels, expected {k}",
                    entry.id,
                    entry.labels.len()
                )))
            }
            _ => {}
        }
        let image = Raster::read_pgm(&base.join(&entry.image_path))?;
        check_pyramid_geometry(image.width(), image.height(), block)
            .map_err(|e| Error::Validation(format!("record '{}': {e}", entry.id)))?;
        let (report, has_report) = match entry.report {
            Some(text) => (text.split_whitespace().map(str::to_string).collect(), true),
            None => (Vec::new(), false),
        };
        records.push(StudyRecord {
            id: entry.id,
            image,
            report,
            labels: entry.labels,
            institute: entry.institute,
            has_report,
        });
    }
    Ok(records)
}
