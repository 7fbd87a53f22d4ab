//! BYOL self-supervised pretraining of an encoder.
//!
//! The online network is encoder, projector and predictor; the target is an
//! encoder and projector that only ever moves by exponential averaging of
//! the online weights.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use octmh_tensor::{par, AdamConfig, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::arch::ArchitectureSpec;
use crate::augment::{augment_into, AugmentDraws, AugmentationConfig};
use crate::error::{Error, Result};
use crate::image::{load_png, ImageBuffer};
use crate::model::{Mode, Model, Trainable};
use crate::optim::Optimizer;
use crate::rng;
use crate::weights::{ModelWeights, Provenance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ByolConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Micro-batches summed into one optimizer step.
    pub accumulation: usize,
    pub tau: f64,
    pub projector_dim: usize,
    /// Hidden width of both the projector and the predictor.
    pub predictor_hidden: usize,
    pub lr: f64,
    pub input_size: usize,
    pub augmentation: Option<AugmentationConfig>,
}

impl Default for ByolConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            accumulation: 8,
            tau: 0.996,
            projector_dim: 64,
            predictor_hidden: 128,
            lr: 1e-4,
            input_size: crate::arch::DEFAULT_INPUT_SIZE,
            augmentation: None,
        }
    }
}

impl ByolConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accumulation
    }

    pub fn augmentation_config(&self) -> AugmentationConfig {
        self.augmentation
            .clone()
            .unwrap_or_else(|| AugmentationConfig::at_size(self.input_size))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.accumulation == 0 {
            return Err(Error::Config("epochs, batch_size and accumulation must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch statistics".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.projector_dim == 0 || self.predictor_hidden == 0 {
            return Err(Error::Config("projector_dim and predictor_hidden must be positive".into()));
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
}

/// `2 - 2 cos(p, z)` for one pair of vectors.
pub fn byol_loss(p: &[f64], z: &[f64]) -> Result<f64> {
    if p.len() != z.len() || p.is_empty() {
        return Err(Error::Training(format!("byol_loss: lengths {} and {}", p.len(), z.len())));
    }
    Ok(octmh_tensor::ops::loss::cosine_loss(p, z, 1, p.len())?)
}

/// `target <- tau * target + (1 - tau) * online` for every target tensor.
pub fn ema_update(
    target: &mut BTreeMap<String, Tensor<f32>>,
    online: &BTreeMap<String, Tensor<f32>>,
    tau: f64,
) -> Result<()> {
    for (path, t) in target.iter() {
        match online.get(path) {
            Some(o) if o.shape() == t.shape() => {}
            Some(o) => {
                return Err(Error::Training(format!(
                    "ema: {path} has shape {:?} online and {:?} target",
                    o.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Training(format!("ema: {path} missing from online network"))),
        }
    }
    for (path, t) in target.iter_mut() {
        let o = &online[path];
        for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
            *a = (tau * *a as f64 + (1.0 - tau) * b as f64) as f32;
        }
    }
    Ok(())
}

/// Two-layer MLP `dense -> relu -> dense` stored under `prefix`.
fn mlp_params(prefix: &str, dims: [usize; 3], seed: u64) -> BTreeMap<String, Tensor<f32>> {
    use rand::Rng;
    let mut out = BTreeMap::new();
    for (k, (fan_in, fan_out)) in [(dims[0], dims[1]), (dims[1], dims[2])].into_iter().enumerate() {
        let path = format!("{prefix}.fc{}", k + 1);
        let mut r = rng::substream(seed, &[rng::INIT, rng::tag(&path)]);
        let a = (6.0 / fan_in as f64).sqrt();
        let w = Tensor::from_fn(vec![fan_out, fan_in], |_| r.random_range(-a..a) as f32);
        out.insert(format!("{path}.weight"), w);
        out.insert(format!("{path}.bias"), Tensor::zeros(vec![fan_out]));
    }
    out
}

fn mlp_forward(g: &mut Graph<f32>, x: Var, prefix: &str, params: &BTreeMap<String, Var>) -> Result<Var> {
    let p = |name: &str| params[&format!("{prefix}.{name}")];
    let h = g.dense(x, p("fc1.weight"), Some(p("fc1.bias")))?;
    let h = g.relu(h);
    Ok(g.dense(h, p("fc2.weight"), Some(p("fc2.bias")))?)
}

/// Online and target networks with their optimizer state.
pub struct ByolTrainer {
    config: ByolConfig,
    seed: u64,
    online_encoder: Model,
    /// Projector and predictor weights of the online network.
    online_heads: BTreeMap<String, Tensor<f32>>,
    target_encoder: Model,
    target_projector: BTreeMap<String, Tensor<f32>>,
    encoder_opt: Optimizer,
    heads_opt: Optimizer,
    /// Summed gradients of the pending micro-batches, by optimizer.
    pending: Option<(Vec<Vec<f32>>, Vec<Vec<f32>>)>,
    pending_count: usize,
}

impl ByolTrainer {
    pub fn new(spec: ArchitectureSpec, config: ByolConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if spec.input_size != config.input_size {
            return Err(Error::Config(format!(
                "encoder input size {} differs from input_size {}",
                spec.input_size, config.input_size
            )));
        }
        let feat = spec.feature_dim();
        let online_encoder = Model::random(spec, seed);
        let mut online_heads = mlp_params("projector", [feat, config.predictor_hidden, config.projector_dim], seed);
        online_heads.extend(mlp_params(
            "predictor",
            [config.projector_dim, config.predictor_hidden, config.projector_dim],
            seed,
        ));
        let target_projector = online_heads
            .iter()
            .filter(|(k, _)| k.starts_with("projector."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let adam = AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        };
        let enc_paths = encoder_paths(&online_encoder);
        let encoder_opt = Optimizer::new(adam, enc_paths, &online_encoder.weights().tensors)?;
        let heads_opt = Optimizer::new(adam, online_heads.keys().cloned().collect(), &online_heads)?;
        Ok(Self {
            target_encoder: online_encoder.clone(),
            online_encoder,
            online_heads,
            target_projector,
            encoder_opt,
            heads_opt,
            pending: None,
            pending_count: 0,
            config,
            seed,
        })
    }

    pub fn config(&self) -> &ByolConfig {
        &self.config
    }

    pub fn online_encoder(&self) -> &Model {
        &self.online_encoder
    }

    pub fn target_encoder(&self) -> &Model {
        &self.target_encoder
    }

    pub fn online_heads(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.online_heads
    }

    pub fn target_projector(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.target_projector
    }

    /// Optimizer steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.encoder_opt.step_count()
    }

    fn target_projections(&self, x: Tensor<f32>) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let f = self
            .target_encoder
            .forward_with(&mut g, xv, Mode::Train, Trainable::Nothing, false)?;
        let params = self
            .target_projector
            .iter()
            .map(|(k, t)| (k.clone(), g.constant(t.clone())))
            .collect();
        let z = mlp_forward(&mut g, f.output, "projector", &params)?;
        Ok(g.data(z).to_vec())
    }

    /// Forward and backward on `2B` stacked views (first half view one,
    /// second half view two). Accumulates gradients and steps the optimizer
    /// once `accumulation` micro-batches are pending. Returns the loss.
    pub fn micro_batch(&mut self, views: Tensor<f32>) -> Result<f64> {
        let rows = views.shape()[0];
        if rows < 4 || !rows.is_multiple_of(2) {
            return Err(Error::Training(format!("micro-batch needs an even number >= 4 of views, got {rows}")));
        }
        let half = rows / 2;
        let z = self.target_projections(views.clone())?;
        let d = self.config.projector_dim;
        // view one predicts the target of view two and the other way round
        let mut swapped = Vec::with_capacity(z.len());
        swapped.extend_from_slice(&z[half * d..]);
        swapped.extend_from_slice(&z[..half * d]);

        let mut g = Graph::new();
        let xv = g.constant(views);
        let f = self
            .online_encoder
            .forward_with(&mut g, xv, Mode::Train, Trainable::All, false)?;
        let head_vars: BTreeMap<String, Var> = self
            .online_heads
            .iter()
            .map(|(k, t)| (k.clone(), g.param(t.clone())))
            .collect();
        let proj = mlp_forward(&mut g, f.output, "projector", &head_vars)?;
        let pred = mlp_forward(&mut g, proj, "predictor", &head_vars)?;
        let loss = g.cosine_loss(pred, &swapped)?;
        let value = g.data(loss)[0] as f64;
        if !value.is_finite() {
            return Err(Error::Training("non-finite BYOL loss".into()));
        }
        g.backward(loss)?;

        let grab = |var: Option<Var>, path: &str| -> Result<Vec<f32>> {
            var.and_then(|v| g.grad(v))
                .map(<[f32]>::to_vec)
                .ok_or_else(|| Error::Training(format!("no gradient for {path}")))
        };
        let enc: Vec<Vec<f32>> = self
            .encoder_opt
            .paths()
            .iter()
            .map(|p| grab(f.params.iter().find(|(q, _)| q == p).map(|x| x.1), p))
            .collect::<Result<_>>()?;
        let heads: Vec<Vec<f32>> = self
            .heads_opt
            .paths()
            .iter()
            .map(|p| grab(head_vars.get(p).copied(), p))
            .collect::<Result<_>>()?;
        self.online_encoder.update_running_stats(&f.bn_stats)?;

        match &mut self.pending {
            None => self.pending = Some((enc, heads)),
            Some((pe, ph)) => {
                for (acc, gr) in pe.iter_mut().chain(ph.iter_mut()).zip(enc.iter().chain(&heads)) {
                    for (a, b) in acc.iter_mut().zip(gr) {
                        *a += b;
                    }
                }
            }
        }
        self.pending_count += 1;
        if self.pending_count == self.config.accumulation {
            self.apply_pending()?;
        }
        Ok(value)
    }

    fn apply_pending(&mut self) -> Result<()> {
        let (mut enc, mut heads) = self.pending.take().expect("pending gradients");
        let scale = 1.0 / self.pending_count as f32;
        for g in enc.iter_mut().chain(heads.iter_mut()) {
            g.iter_mut().for_each(|v| *v *= scale);
        }
        self.pending_count = 0;
        let enc_refs: Vec<&[f32]> = enc.iter().map(Vec::as_slice).collect();
        let head_refs: Vec<&[f32]> = heads.iter().map(Vec::as_slice).collect();
        self.encoder_opt
            .step(&mut self.online_encoder.weights_mut().tensors, &enc_refs)?;
        self.heads_opt.step(&mut self.online_heads, &head_refs)?;
        let tau = self.config.tau;
        ema_update(
            &mut self.target_encoder.weights_mut().tensors,
            &self.online_encoder.weights().tensors,
            tau,
        )?;
        ema_update(&mut self.target_projector, &self.online_heads, tau)
    }

    /// Two augmented views of each image, stacked as `[view one; view two]`.
    pub fn views(&self, images: &[&ImageBuffer], epoch: usize, first_index: usize) -> Result<Tensor<f32>> {
        let aug = self.config.augmentation_config();
        if images.iter().any(|i| i.is_empty()) {
            return Err(Error::Image("empty image in corpus".into()));
        }
        let len = aug.output_len();
        let b = images.len();
        let mut buf = vec![0f32; 2 * b * len];
        let seed = self.seed;
        par::for_each_chunk_mut(&mut buf, len, |k, out| {
            let (view, i) = (k / b, k % b);
            let mut r = rng::substream(
                seed,
                &[rng::AUGMENT, epoch as u64, (first_index + i) as u64, view as u64],
            );
            let d = AugmentDraws::sample(&aug, &mut r);
            augment_into(images[i], &aug, &d, out).expect("checked non-empty");
        });
        Ok(Tensor::new(vec![2 * b, 3, aug.final_size, aug.final_size], buf)?)
    }

    /// One pass over the corpus; returns the mean micro-batch loss.
    pub fn epoch(&mut self, corpus: &[ImageBuffer], epoch: usize) -> Result<f64> {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng::substream(self.seed, &[rng::SHUFFLE, epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(self.config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let imgs: Vec<&ImageBuffer> = chunk.iter().map(|&i| &corpus[i]).collect();
            let views = self.views(&imgs, epoch, bi * self.config.batch_size)?;
            total += self.micro_batch(views)?;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::Training("corpus too small for one micro-batch".into()));
        }
        Ok(total / batches as f64)
    }

    /// Online encoder weights without the classification head.
    pub fn encoder_weights(&self) -> ModelWeights {
        let spec = self.online_encoder.spec();
        let mut w = self.online_encoder.weights().clone();
        w.tensors.retain(|k, _| !spec.is_head_path(k));
        w.provenance = Provenance::Byol;
        w
    }
}

fn encoder_paths(model: &Model) -> Vec<String> {
    model
        .trainable_paths()
        .into_iter()
        .filter(|p| !model.spec().is_head_path(p))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ByolSummary {
    pub architecture: String,
    pub seed: u64,
    pub config: ByolConfig,
    pub corpus_size: usize,
    pub epoch_losses: Vec<f64>,
    pub optimizer_steps: u64,
}

/// Full pretraining; returns encoder weights and the loss trajectory.
pub fn pretrain(
    spec: ArchitectureSpec,
    corpus: &[ImageBuffer],
    config: &ByolConfig,
    seed: u64,
) -> Result<(ModelWeights, ByolSummary)> {
    if corpus.is_empty() {
        return Err(Error::Dataset("BYOL corpus is empty".into()));
    }
    let architecture = spec.name.to_string();
    let mut t = ByolTrainer::new(spec, config.clone(), seed)?;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for e in 0..config.epochs {
        epoch_losses.push(t.epoch(corpus, e)?);
    }
    Ok((
        t.encoder_weights(),
        ByolSummary {
            architecture,
            seed,
            config: config.clone(),
            corpus_size: corpus.len(),
            epoch_losses,
            optimizer_steps: t.step_count(),
        },
    ))
}

/// PNG files of a directory, sorted by name.
pub fn corpus_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_corpus(dir: &Path) -> Result<Vec<ImageBuffer>> {
    let files = corpus_files(dir)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("no PNG files in {}", dir.display())));
    }
    par::map_indexed(files.len(), |i| load_png(&files[i])).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert!(byol_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-12);
        assert!((byol_loss(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() - 4.0).abs() < 1e-12);
        assert!((byol_loss(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!(byol_loss(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn ema_examples() {
        let mk = |v: f32| BTreeMap::from([("a".to_string(), Tensor::scalar(v))]);
        let mut t = mk(1.0);
        ema_update(&mut t, &mk(0.0), 1.0).unwrap();
        assert_eq!(t["a"].data(), &[1.0]);
        ema_update(&mut t, &mk(0.25), 0.0).unwrap();
        assert_eq!(t["a"].data(), &[0.25]);
        let mut t = mk(1.0);
        for _ in 0..2 {
            ema_update(&mut t, &mk(0.0), 0.996).unwrap();
        }
        assert!((t["a"].data()[0] as f64 - 0.992016).abs() < 1e-6);
        let other = BTreeMap::from([("b".to_string(), Tensor::scalar(0.0f32))]);
        assert!(ema_update(&mut t, &other, 0.5).is_err());
    }

    #[test]
    fn effective_batch() {
        assert_eq!(ByolConfig::default().effective_batch(), 256);
    }
}
