//! Synthetic stand-in for the clinical dataset: layered retina-like OCT
//! images with an elliptical hole, and clinical features drawn to match the
//! training-set baseline statistics.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StatNormal};

use crate::dataset::{
    split_dataset, ClinicalFeatures, DatasetManifest, DatasetProvenance, PatientRecord, Split, View,
    DEFAULT_SPLIT_FRACTIONS, GAIN_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::fsutil::{write_atomic, write_json};
use crate::image::{encode_png, ImageBuffer};
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const GROUND_TRUTH_MODEL_FILE: &str = "ground_truth.json";
pub const CONFIG_FILE: &str = "synthetic_config.json";
pub const IMAGE_DIR: &str = "images";

/// Mean and standard deviation of a real feature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
}

/// Weights of the ground-truth outcome model on standardized inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutcomeWeights {
    pub age: f64,
    pub mh_duration: f64,
    pub elevated_edge: f64,
    pub pseudophakic: f64,
    pub baseline_va: f64,
    pub aperture: f64,
}

impl Default for OutcomeWeights {
    fn default() -> Self {
        Self {
            age: -0.6,
            mh_duration: -0.9,
            elevated_edge: -0.6,
            pseudophakic: 0.6,
            baseline_va: -0.8,
            aperture: -1.0,
        }
    }
}

impl OutcomeWeights {
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.age,
            self.mh_duration,
            self.elevated_edge,
            self.pseudophakic,
            self.baseline_va,
            self.aperture,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    /// Side of the square PNGs.
    pub image_size: usize,
    pub split_fractions: [f64; 3],
    pub age: Moments,
    /// Drawn from a gamma distribution with these moments.
    pub mh_duration: Moments,
    pub elevated_edge_prob: f64,
    pub pseudophakic_prob: f64,
    /// Mean and sd of baseline VA after truncation to `baseline_va_range`.
    pub baseline_va: Moments,
    pub baseline_va_range: [f64; 2],
    /// Minimum hole aperture in micrometres, clamped to `aperture_range`.
    pub aperture_um: Moments,
    pub aperture_range: [f64; 2],
    /// Scan width in micrometres that maps onto the image width.
    pub scan_width_um: f64,
    /// Target share of positive labels; the intercept is solved for it.
    pub prevalence: f64,
    pub weights: OutcomeWeights,
    /// Sd of the additive speckle noise, in gray levels.
    pub noise_sd: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 121,
            image_size: 64,
            split_fractions: DEFAULT_SPLIT_FRACTIONS,
            age: Moments { mean: 66.57, sd: 7.60 },
            mh_duration: Moments { mean: 11.48, sd: 10.55 },
            elevated_edge_prob: 74.0 / 83.0,
            pseudophakic_prob: 14.0 / 83.0,
            baseline_va: Moments { mean: 50.43, sd: 15.51 },
            baseline_va_range: [0.0, 85.0],
            aperture_um: Moments { mean: 450.0, sd: 150.0 },
            aperture_range: [100.0, 900.0],
            scan_width_um: 1500.0,
            prevalence: 41.0 / 83.0,
            weights: OutcomeWeights::default(),
            noise_sd: 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticPreset {
    /// Clinical statistics of the training split, mixed image and tabular signal.
    Table2,
    /// Outcome driven almost entirely by the visible hole size.
    Separable,
}

impl SyntheticPreset {
    pub fn config(self) -> SyntheticConfig {
        match self {
            SyntheticPreset::Table2 => SyntheticConfig::default(),
            SyntheticPreset::Separable => SyntheticConfig {
                n: 200,
                weights: OutcomeWeights {
                    age: 0.0,
                    mh_duration: 0.0,
                    elevated_edge: 0.0,
                    pseudophakic: 0.0,
                    baseline_va: 0.0,
                    aperture: -6.0,
                },
                ..SyntheticConfig::default()
            },
        }
    }
}

impl std::str::FromStr for SyntheticPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "table2" => Ok(Self::Table2),
            "separable" => Ok(Self::Separable),
            _ => Err(Error::Config(format!("unknown synthetic preset {s:?} (table2, separable)"))),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

fn probability(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be in [0, 1], got {v}")))
    }
}

fn range(name: &str, r: [f64; 2]) -> Result<()> {
    if r[0].is_finite() && r[1].is_finite() && r[0] < r[1] {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} {r:?} must satisfy lo < hi")))
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size {} below 16", self.image_size)));
        }
        positive("age.mean", self.age.mean)?;
        positive("age.sd", self.age.sd)?;
        positive("mh_duration.mean", self.mh_duration.mean)?;
        positive("mh_duration.sd", self.mh_duration.sd)?;
        positive("baseline_va.sd", self.baseline_va.sd)?;
        positive("aperture_um.sd", self.aperture_um.sd)?;
        positive("scan_width_um", self.scan_width_um)?;
        probability("elevated_edge_prob", self.elevated_edge_prob)?;
        probability("pseudophakic_prob", self.pseudophakic_prob)?;
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(Error::Config(format!("prevalence {} must be in (0, 1)", self.prevalence)));
        }
        range("baseline_va_range", self.baseline_va_range)?;
        range("aperture_range", self.aperture_range)?;
        let [lo, hi] = self.baseline_va_range;
        if lo < 0.0 || hi > (100 - GAIN_THRESHOLD) as f64 {
            return Err(Error::Config(format!(
                "baseline_va_range {:?} must lie within [0, {}] so any patient can gain {GAIN_THRESHOLD} letters",
                self.baseline_va_range,
                100 - GAIN_THRESHOLD
            )));
        }
        if !(lo < self.baseline_va.mean && self.baseline_va.mean < hi) {
            return Err(Error::Config("baseline_va.mean must lie inside baseline_va_range".into()));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Config(format!("noise_sd {} must be >= 0", self.noise_sd)));
        }
        if self.weights.to_array().iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("outcome weights must be finite".into()));
        }
        crate::dataset::split_sizes(self.n, self.split_fractions)?;
        Ok(())
    }

    /// Hex digest of the config and seed, stored as dataset provenance.
    pub fn digest(&self, seed: u64) -> String {
        let json = serde_json::to_vec(&(self, seed)).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Location of a normal that has the wanted mean after truncation to `[lo, hi]`.
pub fn truncated_normal_location(target_mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    let unit = StatNormal::new(0.0, 1.0).expect("unit normal");
    let mean_of = |mu: f64| {
        let (a, b) = ((lo - mu) / sd, (hi - mu) / sd);
        let mass = unit.cdf(b) - unit.cdf(a);
        mu + sd * (unit.pdf(a) - unit.pdf(b)) / mass
    };
    // the truncated mean is increasing in the location
    let (mut a, mut b) = (lo - 5.0 * sd, hi + 5.0 * sd);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mean_of(mid) < target_mean {
            a = mid;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Intercept `b` with `mean(sigmoid(eta + b)) == prevalence`.
pub fn calibrate_intercept(etas: &[f64], prevalence: f64) -> f64 {
    if etas.is_empty() {
        return (prevalence / (1.0 - prevalence)).ln();
    }
    let mean_p = |b: f64| etas.iter().map(|e| sigmoid(e + b)).sum::<f64>() / etas.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < prevalence {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Everything drawn for one patient before the outcome.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentPatient {
    pub clinical: ClinicalFeatures,
    pub aperture_um: f64,
}

fn draw_latent(cfg: &SyntheticConfig, va_location: f64, seed: u64, index: usize) -> LatentPatient {
    let mut r = rng::substream(seed, &[rng::SYNTH, 0, index as u64]);
    let age = Normal::new(cfg.age.mean, cfg.age.sd).expect("validated").sample(&mut r).max(18.0);
    let shape = (cfg.mh_duration.mean / cfg.mh_duration.sd).powi(2);
    let scale = cfg.mh_duration.sd.powi(2) / cfg.mh_duration.mean;
    let duration = Gamma::new(shape, scale).expect("validated").sample(&mut r);
    let edge = Bernoulli::new(cfg.elevated_edge_prob).expect("validated").sample(&mut r);
    let pseudo = Bernoulli::new(cfg.pseudophakic_prob).expect("validated").sample(&mut r);
    let [lo, hi] = cfg.baseline_va_range;
    let va_dist = Normal::new(va_location, cfg.baseline_va.sd).expect("validated");
    let va = loop {
        let v = va_dist.sample(&mut r);
        if (lo..=hi).contains(&v) {
            break v;
        }
    };
    let [alo, ahi] = cfg.aperture_range;
    let aperture = Normal::new(cfg.aperture_um.mean, cfg.aperture_um.sd)
        .expect("validated")
        .sample(&mut r)
        .clamp(alo, ahi);
    LatentPatient {
        clinical: ClinicalFeatures {
            age: (age * 100.0).round() / 100.0,
            mh_duration: (duration * 100.0).round() / 100.0,
            elevated_edge: edge,
            pseudophakic: pseudo,
            baseline_va: va.round() as i32,
        },
        aperture_um: (aperture * 10.0).round() / 10.0,
    }
}

/// Standardized inputs of the outcome model, using the configured moments.
pub fn standardized_inputs(cfg: &SyntheticConfig, p: &LatentPatient) -> [f64; 6] {
    let bern = |x: bool, q: f64| {
        let sd = (q * (1.0 - q)).sqrt();
        if sd > 0.0 {
            (x as u8 as f64 - q) / sd
        } else {
            0.0
        }
    };
    let c = &p.clinical;
    [
        (c.age - cfg.age.mean) / cfg.age.sd,
        (c.mh_duration - cfg.mh_duration.mean) / cfg.mh_duration.sd,
        bern(c.elevated_edge, cfg.elevated_edge_prob),
        bern(c.pseudophakic, cfg.pseudophakic_prob),
        (c.baseline_va as f64 - cfg.baseline_va.mean) / cfg.baseline_va.sd,
        (p.aperture_um - cfg.aperture_um.mean) / cfg.aperture_um.sd,
    ]
}

/// The known outcome model, in both standardized and raw feature units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthModel {
    pub feature_names: Vec<String>,
    pub standardized_weights: Vec<f64>,
    /// Weights per raw unit (years, weeks, 0/1, letters, micrometres).
    pub raw_weights: Vec<f64>,
    pub intercept: f64,
}

impl GroundTruthModel {
    fn new(cfg: &SyntheticConfig, intercept: f64) -> Self {
        let w = cfg.weights.to_array();
        let sds = [
            cfg.age.sd,
            cfg.mh_duration.sd,
            (cfg.elevated_edge_prob * (1.0 - cfg.elevated_edge_prob)).sqrt(),
            (cfg.pseudophakic_prob * (1.0 - cfg.pseudophakic_prob)).sqrt(),
            cfg.baseline_va.sd,
            cfg.aperture_um.sd,
        ];
        Self {
            feature_names: [
                "age",
                "mh_duration",
                "elevated_edge",
                "pseudophakic",
                "baseline_va",
                "aperture_um",
            ]
            .map(String::from)
            .to_vec(),
            standardized_weights: w.to_vec(),
            raw_weights: w.iter().zip(sds).map(|(w, s)| if s > 0.0 { w / s } else { 0.0 }).collect(),
            intercept,
        }
    }
}

/// One generated patient with its hidden variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub patient_id: String,
    pub aperture_um: f64,
    pub logit: f64,
    pub probability: f64,
    pub label: bool,
}

/// A generated dataset held in memory; [`SyntheticDataset::write`] puts it on disk.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub seed: u64,
    pub manifest: DatasetManifest,
    pub ground_truth: Vec<GroundTruthRow>,
    pub model: GroundTruthModel,
    /// Horizontal and vertical image per record.
    pub images: Vec<(ImageBuffer, ImageBuffer)>,
}

pub fn patient_id(index: usize) -> String {
    format!("P{index:04}")
}

/// Draws features, outcomes, splits and images. Pure given `(config, seed)`.
pub fn simulate(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let [lo, hi] = cfg.baseline_va_range;
    let va_location = truncated_normal_location(cfg.baseline_va.mean, cfg.baseline_va.sd, lo, hi);
    let latents = octmh_tensor::par::map_indexed(cfg.n, |i| draw_latent(cfg, va_location, seed, i));
    let w = cfg.weights.to_array();
    let etas: Vec<f64> = latents
        .iter()
        .map(|p| standardized_inputs(cfg, p).iter().zip(&w).map(|(z, w)| z * w).sum())
        .collect();
    let intercept = calibrate_intercept(&etas, cfg.prevalence);

    let mut records = Vec::with_capacity(cfg.n);
    let mut ground_truth = Vec::with_capacity(cfg.n);
    for (i, (p, eta)) in latents.iter().zip(&etas).enumerate() {
        let mut r = rng::substream(seed, &[rng::SYNTH, 1, i as u64]);
        let logit = eta + intercept;
        let prob = sigmoid(logit);
        let label = r.random::<f64>() < prob;
        let base = p.clinical.baseline_va;
        let gain = if label {
            r.random_range(GAIN_THRESHOLD..=(100 - base).min(40))
        } else {
            r.random_range((-base).max(-10)..GAIN_THRESHOLD)
        };
        let id = patient_id(i);
        records.push(PatientRecord {
            oct_h: PathBuf::from(format!("{IMAGE_DIR}/{id}_h.png")),
            oct_v: PathBuf::from(format!("{IMAGE_DIR}/{id}_v.png")),
            clinical: p.clinical,
            va_6mo: base + gain,
            split: Split::Train,
            patient_id: id.clone(),
        });
        ground_truth.push(GroundTruthRow {
            patient_id: id,
            aperture_um: p.aperture_um,
            logit,
            probability: prob,
            label,
        });
    }
    if cfg.n >= 3 {
        records = split_dataset(records, cfg.split_fractions, seed)?;
    }
    let images = octmh_tensor::par::map_indexed(cfg.n, |i| {
        let p = &latents[i];
        (
            render_oct(cfg, p, View::Horizontal, seed, i),
            render_oct(cfg, p, View::Vertical, seed, i),
        )
    });
    Ok(SyntheticDataset {
        config: cfg.clone(),
        seed,
        manifest: DatasetManifest {
            records,
            provenance: DatasetProvenance::Synthetic {
                config_sha256: cfg.digest(seed),
            },
        },
        ground_truth,
        model: GroundTruthModel::new(cfg, intercept),
        images,
    })
}

impl SyntheticDataset {
    /// Writes images, manifest, ground truth and the resolved config under `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let img_dir = dir.join(IMAGE_DIR);
        std::fs::create_dir_all(&img_dir).map_err(Error::io(&img_dir))?;
        let written = octmh_tensor::par::map_indexed(self.images.len(), |i| {
            let r = &self.manifest.records[i];
            let (h, v) = &self.images[i];
            write_atomic(&dir.join(&r.oct_h), &encode_png(h)?)?;
            write_atomic(&dir.join(&r.oct_v), &encode_png(v)?)
        });
        written.into_iter().collect::<Result<Vec<_>>>()?;

        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.ground_truth {
            w.serialize(row)?;
        }
        if self.ground_truth.is_empty() {
            w.write_record(["patient_id", "aperture_um", "logit", "probability", "label"])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Dataset(e.to_string()))?;
        write_atomic(&dir.join(GROUND_TRUTH_FILE), &bytes)?;
        write_json(&dir.join(GROUND_TRUTH_MODEL_FILE), &self.model)?;
        write_json(&dir.join(CONFIG_FILE), &(&self.config, self.seed))?;
        let manifest = dir.join(MANIFEST_FILE);
        self.manifest.write(&manifest)?;
        Ok(manifest)
    }
}

/// Generates a dataset under `dir` and returns the manifest path.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64, dir: &Path) -> Result<PathBuf> {
    simulate(cfg, seed)?.write(dir)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthRow>> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    let mut rd = csv::Reader::from_reader(bytes.as_slice());
    Ok(rd.deserialize().collect::<std::result::Result<Vec<GroundTruthRow>, _>>()?)
}

// Retina layer profile as (fraction of thickness where the layer ends, gray level).
const LAYERS: [(f64, f64); 8] = [
    (0.08, 205.0),
    (0.22, 125.0),
    (0.34, 165.0),
    (0.46, 95.0),
    (0.56, 150.0),
    (0.80, 70.0),
    (0.88, 225.0),
    (1.00, 200.0),
];

/// Renders one cut. The hole is an ellipse whose width at its narrowest
/// (the retinal surface) is the patient's aperture.
pub fn render_oct(cfg: &SyntheticConfig, p: &LatentPatient, view: View, seed: u64, index: usize) -> ImageBuffer {
    let v = match view {
        View::Horizontal => 0,
        View::Vertical => 1,
    };
    let mut r = rng::substream(seed, &[rng::SYNTH, 2, index as u64, v]);
    let s = cfg.image_size as f64;
    let n = cfg.image_size;
    let tilt: f64 = r.random_range(-0.06..0.06);
    let top0 = s * r.random_range(0.30..0.38);
    let thick = s * r.random_range(0.28..0.34);
    let cx = s * (0.5 + r.random_range(-0.04..0.04));
    // the two cuts of one eye see slightly different apertures
    let aperture_px = p.aperture_um * r.random_range(0.93..1.07) / cfg.scan_width_um * s;
    let ax = (aperture_px / 2.0).max(0.5);
    let hole_top_depth = 0.05 * thick;
    let by = 0.75 * thick;
    let edge_lift = if p.clinical.elevated_edge { 0.10 * thick } else { 0.0 };
    let noise = Normal::new(0.0, cfg.noise_sd.max(1e-12)).expect("finite sd");

    let mut data = vec![0u8; n * n];
    for x in 0..n {
        let xf = x as f64 + 0.5;
        let dx = (xf - cx) / s;
        let pit = 0.06 * s * (-(dx / 0.10).powi(2)).exp();
        let lift = edge_lift * (-((dx.abs() * s - ax - 0.04 * s) / (0.05 * s)).powi(2)).exp();
        let top = top0 + tilt * (xf - cx) + pit - lift;
        let hole_cy = top0 + tilt * (xf - cx) + hole_top_depth + by;
        for y in 0..n {
            let yf = y as f64 + 0.5;
            let depth = (yf - top) / thick;
            let mut g = if depth < 0.0 {
                12.0
            } else if depth <= 1.0 {
                LAYERS.iter().find(|(end, _)| depth <= *end).map_or(200.0, |l| l.1)
            } else {
                (60.0 * (-(depth - 1.0) * 3.0).exp()).max(15.0)
            };
            let ex = (xf - cx) / ax;
            let ey = (yf - hole_cy) / by;
            if ex * ex + ey * ey <= 1.0 && (-0.1..=1.0 - 0.15).contains(&depth) {
                g = 18.0;
            }
            let value = g + if cfg.noise_sd > 0.0 { noise.sample(&mut r) } else { 0.0 };
            data[y * n + x] = value.round().clamp(0.0, 255.0) as u8;
        }
    }
    ImageBuffer::gray(n, n, data).expect("square buffer")
}

/// Unlabeled images for self-supervised pretraining, written as PNGs into `dir`.
pub fn generate_corpus(cfg: &SyntheticConfig, count: usize, seed: u64, dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let [lo, hi] = cfg.baseline_va_range;
    let va_location = truncated_normal_location(cfg.baseline_va.mean, cfg.baseline_va.sd, lo, hi);
    // distinct from the labeled patients generated with the same seed
    let seed = seed ^ rng::tag("corpus");
    let paths = octmh_tensor::par::map_indexed(count, |i| {
        let p = draw_latent(cfg, va_location, seed, i);
        let view = if i % 2 == 0 { View::Horizontal } else { View::Vertical };
        let img = render_oct(cfg, &p, view, seed, i);
        let path = dir.join(format!("img_{i:05}.png"));
        write_atomic(&path, &encode_png(&img)?)?;
        Ok(path)
    });
    paths.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_location_hits_target_mean() {
        let mu = truncated_normal_location(50.43, 15.51, 0.0, 85.0);
        assert!(mu > 50.43 && mu < 52.0, "{mu}");
    }

    #[test]
    fn intercept_calibration() {
        let etas: Vec<f64> = (0..100).map(|i| (i as f64 - 50.0) / 10.0).collect();
        let b = calibrate_intercept(&etas, 0.3);
        let m = etas.iter().map(|e| sigmoid(e + b)).sum::<f64>() / 100.0;
        assert!((m - 0.3).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset() {
        let cfg = SyntheticConfig { n: 0, ..Default::default() };
        let d = simulate(&cfg, 1).unwrap();
        assert!(d.manifest.records.is_empty() && d.images.is_empty());
    }

    #[test]
    fn bigger_aperture_means_wider_dark_region() {
        let cfg = SyntheticConfig {
            noise_sd: 0.0,
            image_size: 64,
            ..Default::default()
        };
        let mut p = draw_latent(&cfg, 50.0, 3, 0);
        let dark = |img: &ImageBuffer| img.data().iter().filter(|&&v| v < 30).count();
        p.aperture_um = 200.0;
        let small = dark(&render_oct(&cfg, &p, View::Horizontal, 3, 0));
        p.aperture_um = 800.0;
        let large = dark(&render_oct(&cfg, &p, View::Horizontal, 3, 0));
        assert!(large > small + 100, "{small} {large}");
    }

    #[test]
    fn config_rejects_bad_values() {
        let c = SyntheticConfig {
            prevalence: 1.0,
            ..SyntheticConfig::default()
        };
        assert!(c.validate().is_err());
        let c = SyntheticConfig {
            baseline_va_range: [0.0, 95.0],
            ..SyntheticConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(serde_json::from_str::<SyntheticConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
