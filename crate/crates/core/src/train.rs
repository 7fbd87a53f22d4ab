//! Supervised training: batching, Adam, periodic patient-level validation
//! and best-checkpoint retention.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use octmh_tensor::{par, AdamConfig, Graph, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureName, ArchitectureSpec};
use crate::augment::{augment_into, preprocess_eval_into, AugmentDraws, AugmentationConfig};
use crate::dataset::{duplicate_per_oct, LoadedDataset, PatientImages, Split};
use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_json};
use crate::metrics::{auroc, evaluate_scores, MetricSet};
use crate::model::{FreezePolicy, Mode, Model};
use crate::optim::Optimizer;
use crate::rng;
use crate::weights::ModelWeights;

/// Images per forward pass at evaluation time.
const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitSource {
    Random,
    /// Weight file; a missing head is initialized randomly.
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub freeze: FreezePolicy,
    pub init: InitSource,
    /// Network input side; 224 at full scale.
    pub input_size: usize,
    /// Defaults to the standard chain scaled to `input_size`.
    pub augmentation: Option<AugmentationConfig>,
    /// Shuffle labels across all patients (null-signal control).
    pub permute_labels: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-4,
            max_steps: 1000,
            eval_every: 50,
            seed: 0,
            freeze: FreezePolicy::default(),
            init: InitSource::Random,
            input_size: crate::arch::DEFAULT_INPUT_SIZE,
            augmentation: None,
            permute_labels: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size, max_steps and eval_every must be positive".into()));
        }
        if !self.max_steps.is_multiple_of(self.eval_every) {
            return Err(Error::Config(format!(
                "eval_every {} does not divide max_steps {}",
                self.eval_every, self.max_steps
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        let aug = self.augmentation_config();
        aug.validate()?;
        if aug.final_size != self.input_size {
            return Err(Error::Config(format!(
                "augmentation final_size {} differs from input_size {}",
                aug.final_size, self.input_size
            )));
        }
        Ok(())
    }

    pub fn augmentation_config(&self) -> AugmentationConfig {
        self.augmentation
            .clone()
            .unwrap_or_else(|| AugmentationConfig::at_size(self.input_size))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// The nine vision configurations compared in the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VisionPreset {
    #[serde(rename = "rn-rand")]
    RnRand,
    #[serde(rename = "rn-in")]
    RnIn,
    #[serde(rename = "rn-in-frozen")]
    RnInFrozen,
    #[serde(rename = "rn-by")]
    RnBy,
    #[serde(rename = "rn-by-frozen")]
    RnByFrozen,
    #[serde(rename = "cbr-tiny")]
    CbrTiny,
    #[serde(rename = "cbr-small")]
    CbrSmall,
    #[serde(rename = "cbr-wide")]
    CbrWide,
    #[serde(rename = "cbr-tall")]
    CbrTall,
}

impl VisionPreset {
    pub const ALL: [VisionPreset; 9] = [
        VisionPreset::RnRand,
        VisionPreset::RnIn,
        VisionPreset::RnInFrozen,
        VisionPreset::RnBy,
        VisionPreset::RnByFrozen,
        VisionPreset::CbrTiny,
        VisionPreset::CbrSmall,
        VisionPreset::CbrWide,
        VisionPreset::CbrTall,
    ];

    /// Command-line name.
    pub fn key(self) -> &'static str {
        match self {
            VisionPreset::RnRand => "rn-rand",
            VisionPreset::RnIn => "rn-in",
            VisionPreset::RnInFrozen => "rn-in-frozen",
            VisionPreset::RnBy => "rn-by",
            VisionPreset::RnByFrozen => "rn-by-frozen",
            VisionPreset::CbrTiny => "cbr-tiny",
            VisionPreset::CbrSmall => "cbr-small",
            VisionPreset::CbrWide => "cbr-wide",
            VisionPreset::CbrTall => "cbr-tall",
        }
    }

    /// Display label; a dagger marks a frozen backbone.
    pub fn label(self) -> &'static str {
        match self {
            VisionPreset::RnRand => "RN-Rand",
            VisionPreset::RnIn => "RN-IN",
            VisionPreset::RnInFrozen => "RN-IN\u{2020}",
            VisionPreset::RnBy => "RN-BY",
            VisionPreset::RnByFrozen => "RN-BY\u{2020}",
            VisionPreset::CbrTiny => "CBR-Tiny",
            VisionPreset::CbrSmall => "CBR-Small",
            VisionPreset::CbrWide => "CBR-Wide",
            VisionPreset::CbrTall => "CBR-Tall",
        }
    }

    pub fn architecture(self) -> ArchitectureName {
        match self {
            VisionPreset::RnRand
            | VisionPreset::RnIn
            | VisionPreset::RnInFrozen
            | VisionPreset::RnBy
            | VisionPreset::RnByFrozen => ArchitectureName::ResNet50,
            VisionPreset::CbrTiny => ArchitectureName::CbrTiny,
            VisionPreset::CbrSmall => ArchitectureName::CbrSmall,
            VisionPreset::CbrWide => ArchitectureName::CbrWide,
            VisionPreset::CbrTall => ArchitectureName::CbrTall,
        }
    }

    pub fn frozen(self) -> bool {
        matches!(self, VisionPreset::RnInFrozen | VisionPreset::RnByFrozen)
    }

    /// Whether the preset starts from a weight file.
    pub fn needs_weights(self) -> bool {
        matches!(
            self,
            VisionPreset::RnIn | VisionPreset::RnInFrozen | VisionPreset::RnBy | VisionPreset::RnByFrozen
        )
    }

    /// Applies the preset's freeze policy and checks the init source.
    pub fn apply(self, cfg: &mut TrainConfig) -> Result<()> {
        cfg.freeze = FreezePolicy { frozen: self.frozen() };
        match (&cfg.init, self.needs_weights()) {
            (InitSource::Random, true) => Err(Error::Config(format!(
                "preset {} needs an init weight file (init: {{\"kind\": \"file\", \"path\": ...}})",
                self.key()
            ))),
            (InitSource::File { .. }, false) => Err(Error::Config(format!(
                "preset {} trains from random initialization; drop the init file",
                self.key()
            ))),
            _ => Ok(()),
        }
    }
}

impl FromStr for VisionPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('\u{2020}', "-frozen").replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|p| p.key() == norm || p.label().to_ascii_lowercase() == norm)
            .ok_or_else(|| {
                let known: Vec<_> = Self::ALL.iter().map(|p| p.key()).collect();
                Error::Config(format!("unknown preset {s:?}; known: {}", known.join(", ")))
            })
    }
}

/// Index of the highest value; ties go to the earliest entry.
pub fn select_best(curve: &[CurvePoint]) -> Result<usize> {
    let mut best: Option<&CurvePoint> = None;
    for p in curve {
        if best.is_none_or(|b| p.auroc > b.auroc) {
            best = Some(p);
        }
    }
    best.map(|b| b.step)
        .ok_or_else(|| Error::Training("empty validation curve".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub auroc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub probability: f64,
    pub label: bool,
}

/// Everything about a run except the weights, stored as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub architecture: String,
    pub preset: Option<VisionPreset>,
    pub seed: u64,
    pub config: TrainConfig,
    pub val_auroc_curve: Vec<CurvePoint>,
    pub best_step: usize,
    pub best_val_auroc: f64,
    /// Training loss per step.
    pub loss_curve: Vec<f64>,
    /// None when the test split lacks one of the classes.
    pub test_metrics: Option<MetricSet>,
    pub test_predictions: Vec<PatientPrediction>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub summary: RunSummary,
    pub best_weights: ModelWeights,
}

impl RunResult {
    /// Writes `<stem>.json` and `<stem>.opwt` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.best_weights.save(&dir.join(format!("{stem}.opwt")))?;
        write_json(&dir.join(format!("{stem}.json")), &self.summary)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        Ok(Self {
            summary: read_json(&dir.join(format!("{stem}.json")))?,
            best_weights: ModelWeights::load(&dir.join(format!("{stem}.opwt")))?,
        })
    }
}

/// Builds the initial model for a config.
pub fn initial_model(spec: ArchitectureSpec, cfg: &TrainConfig) -> Result<Model> {
    let model = match &cfg.init {
        InitSource::Random => Model::random(spec, cfg.seed),
        InitSource::File { path } => Model::with_backbone(spec, path, cfg.seed)?,
    };
    Ok(if cfg.freeze.frozen { model.freeze_backbone() } else { model })
}

fn check_images(data: &LoadedDataset, indices: &[usize]) -> Result<()> {
    for &i in indices {
        let imgs = &data.images[i];
        if imgs.horizontal.is_empty() || imgs.vertical.is_empty() {
            return Err(Error::Dataset(format!(
                "patient {} has an empty image",
                data.records()[i].patient_id
            )));
        }
    }
    Ok(())
}

/// Probability `(sigmoid(l_h) + sigmoid(l_v)) / 2` per patient, in the
/// order of `patients`.
pub fn predict_patients(model: &Model, patients: &[&PatientImages], aug: &AugmentationConfig) -> Result<Vec<f64>> {
    let views: Vec<_> = patients
        .iter()
        .flat_map(|p| [&p.horizontal, &p.vertical])
        .collect();
    let len = aug.output_len();
    let side = aug.final_size;
    let mut logits = Vec::with_capacity(views.len());
    for chunk in views.chunks(EVAL_BATCH) {
        let mut buf = vec![0f32; chunk.len() * len];
        let failures = par::map_indexed(chunk.len(), |i| chunk[i].is_empty());
        if failures.iter().any(|&f| f) {
            return Err(Error::Image("empty image".into()));
        }
        par::for_each_chunk_mut(&mut buf, len, |i, out| {
            preprocess_eval_into(chunk[i], aug, out).expect("non-empty image");
        });
        let batch = Tensor::new(vec![chunk.len(), 3, side, side], buf)?;
        logits.extend(model.logits(batch)?);
    }
    Ok(logits
        .chunks(2)
        .map(|l| (sigmoid(l[0] as f64) + sigmoid(l[1] as f64)) / 2.0)
        .collect())
}

/// Two-view probability for one patient.
pub fn predict_patient(model: &Model, images: &PatientImages, aug: &AugmentationConfig) -> Result<f64> {
    Ok(predict_patients(model, &[images], aug)?[0])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Patient-level AUROC over a split.
fn split_auroc(model: &Model, data: &LoadedDataset, idx: &[usize], labels: &[bool], aug: &AugmentationConfig) -> Result<f64> {
    let imgs: Vec<_> = idx.iter().map(|&i| &data.images[i]).collect();
    let scores = predict_patients(model, &imgs, aug)?;
    let y: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
    Ok(auroc(&scores, &y)?)
}

/// Labels by record index; the permutation control shuffles them across
/// all patients, so training, validation and test all see labels with no
/// relation to the images.
fn run_labels(data: &LoadedDataset, cfg: &TrainConfig) -> Vec<bool> {
    let mut labels: Vec<bool> = data.records().iter().map(|r| r.label()).collect();
    if cfg.permute_labels {
        labels.shuffle(&mut rng::substream(cfg.seed, &[rng::PERMUTE]));
    }
    labels
}

/// Runs the full protocol for one seed.
pub fn train_run(model: Model, data: &LoadedDataset, cfg: &TrainConfig, preset: Option<VisionPreset>) -> Result<RunResult> {
    cfg.validate()?;
    if model.spec().input_size != cfg.input_size {
        return Err(Error::Config(format!(
            "model input size {} differs from input_size {}",
            model.spec().input_size,
            cfg.input_size
        )));
    }
    let train = data.manifest.indices(Split::Train);
    let val = data.manifest.indices(Split::Val);
    let test = data.manifest.indices(Split::Test);
    for (name, idx) in [("train", &train), ("val", &val)] {
        if idx.is_empty() {
            return Err(Error::Dataset(format!("{name} split is empty")));
        }
    }
    check_images(data, &train)?;
    let labels = run_labels(data, cfg);
    let mut samples = duplicate_per_oct(data.records(), &train);
    for s in &mut samples {
        s.label = labels[s.record];
    }
    let aug = cfg.augmentation_config();
    let len = aug.output_len();
    let side = aug.final_size;

    let mut model = model;
    let mut opt = Optimizer::new(cfg.adam(), model.trainable_paths(), &model.weights().tensors)?;
    let mut order: Vec<usize> = Vec::new();
    let (mut cursor, mut epoch) = (0usize, 0u64);
    let mut loss_curve = Vec::with_capacity(cfg.max_steps);
    let mut curve = Vec::new();
    let mut best: Option<(f64, ModelWeights)> = None;

    for step in 1..=cfg.max_steps {
        if cursor >= order.len() {
            order = (0..samples.len()).collect();
            order.shuffle(&mut rng::substream(cfg.seed, &[rng::SHUFFLE, epoch]));
            epoch += 1;
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch = &order[cursor..end];
        cursor = end;

        let mut buf = vec![0f32; batch.len() * len];
        par::for_each_chunk_mut(&mut buf, len, |i, out| {
            let s = &samples[batch[i]];
            let img = data.images[s.record].view(s.view);
            let mut r = rng::substream(cfg.seed, &[rng::AUGMENT, step as u64, i as u64]);
            let d = AugmentDraws::sample(&aug, &mut r);
            augment_into(img, &aug, &d, out).expect("images checked non-empty");
        });
        let targets: Vec<f32> = batch.iter().map(|&k| samples[k].label as u8 as f32).collect();

        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![batch.len(), 3, side, side], buf)?);
        let fp = model.forward(&mut g, x, Mode::Train)?;
        let loss = g.bce_with_logits(fp.output, &targets)?;
        let loss_value = g.data(loss)[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::Training(format!("non-finite loss at step {step}")));
        }
        loss_curve.push(loss_value);
        g.backward(loss)?;
        let grads = opt
            .paths()
            .iter()
            .map(|p| {
                fp.params
                    .iter()
                    .find(|(q, _)| q == p)
                    .and_then(|(_, v)| g.grad(*v))
                    .ok_or_else(|| Error::Training(format!("no gradient for {p}")))
            })
            .collect::<Result<Vec<_>>>()?;
        opt.step(&mut model.weights_mut().tensors, &grads)?;
        model.update_running_stats(&fp.bn_stats)?;

        if step % cfg.eval_every == 0 {
            let a = split_auroc(&model, data, &val, &labels, &aug)?;
            curve.push(CurvePoint { step, auroc: a });
            if best.as_ref().is_none_or(|(b, _)| a > *b) {
                best = Some((a, model.weights().clone()));
            }
        }
    }

    let best_step = select_best(&curve)?;
    let (best_val_auroc, best_weights) = best.expect("max_steps >= eval_every");
    model.set_weights(best_weights.clone())?;
    let test_imgs: Vec<_> = test.iter().map(|&i| &data.images[i]).collect();
    let test_scores = predict_patients(&model, &test_imgs, &aug)?;
    let test_labels: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
    let test_metrics = evaluate_scores(&test_scores, &test_labels).ok();
    let test_predictions = test
        .iter()
        .zip(&test_scores)
        .zip(&test_labels)
        .map(|((&i, &p), &l)| PatientPrediction {
            patient_id: data.records()[i].patient_id.clone(),
            probability: p,
            label: l,
        })
        .collect();
    Ok(RunResult {
        summary: RunSummary {
            architecture: model.spec().name.to_string(),
            preset,
            seed: cfg.seed,
            config: cfg.clone(),
            val_auroc_curve: curve,
            best_step,
            best_val_auroc,
            loss_curve,
            test_metrics,
            test_predictions,
        },
        best_weights,
    })
}

/// Probability of every record under `model`, for late fusion.
pub fn predict_all(model: &Model, data: &LoadedDataset, aug: &AugmentationConfig) -> Result<Vec<f64>> {
    check_images(data, &(0..data.images.len()).collect::<Vec<_>>())?;
    let imgs: Vec<_> = data.images.iter().collect();
    predict_patients(model, &imgs, aug)
}

/// Re-evaluates validation AUROC for stored weights.
pub fn validation_auroc(model: &Model, data: &LoadedDataset, aug: &AugmentationConfig) -> Result<f64> {
    let labels: Vec<bool> = data.records().iter().map(|r| r.label()).collect();
    split_auroc(model, data, &data.manifest.indices(Split::Val), &labels, aug)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(usize, f64)]) -> Vec<CurvePoint> {
        v.iter().map(|&(step, auroc)| CurvePoint { step, auroc }).collect()
    }

    #[test]
    fn select_best_examples() {
        assert_eq!(select_best(&pts(&[(50, 0.6), (100, 0.8), (150, 0.7)])).unwrap(), 100);
        assert_eq!(select_best(&pts(&[(50, 0.7), (100, 0.7)])).unwrap(), 50);
        assert!(select_best(&[]).is_err());
    }

    #[test]
    fn presets_parse_and_check_init() {
        for p in VisionPreset::ALL {
            assert_eq!(p.key().parse::<VisionPreset>().unwrap(), p);
            assert_eq!(p.label().parse::<VisionPreset>().unwrap(), p);
        }
        assert!("rn-xx".parse::<VisionPreset>().is_err());
        let mut cfg = TrainConfig::default();
        assert!(VisionPreset::RnIn.apply(&mut cfg).is_err());
        VisionPreset::CbrTiny.apply(&mut cfg).unwrap();
        cfg.init = InitSource::File { path: "w.opwt".into() };
        VisionPreset::RnByFrozen.apply(&mut cfg).unwrap();
        assert!(cfg.freeze.frozen);
    }

    #[test]
    fn config_checks_divisibility_and_sizes() {
        let mut c = TrainConfig {
            eval_every: 30,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.eval_every = 50;
        c.validate().unwrap();
        c.input_size = 64;
        c.validate().unwrap();
        c.augmentation = Some(AugmentationConfig::default());
        assert!(c.validate().is_err());
    }
}
