//! Building models from weights and running them on the autodiff graph.

use std::path::Path;

use octmh_tensor::{BatchNormMode, BatchStats, Graph, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureSpec, Layout};
use crate::error::Result;
use crate::weights::{ModelWeights, Provenance};

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub frozen: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which tensors are registered as trainable graph parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    HeadOnly,
    Nothing,
}

#[derive(Clone, Debug)]
pub enum Init<'a> {
    Random { seed: u64 },
    File(&'a Path),
    Weights(ModelWeights),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ArchitectureSpec,
    weights: ModelWeights,
    freeze: FreezePolicy,
}

/// Result of one forward pass.
pub struct ForwardPass {
    /// `N x 1` logits, or `N x F` pooled features when the head is skipped.
    pub output: Var,
    /// Trainable tensors registered in the graph, by path.
    pub params: Vec<(String, Var)>,
    /// Batch statistics of every training-mode batch norm, keyed by its
    /// path prefix (e.g. `block1.bn`).
    pub bn_stats: Vec<(String, BatchStats<f32>)>,
}

impl Model {
    pub fn build(spec: ArchitectureSpec, init: Init<'_>) -> Result<Self> {
        let weights = match init {
            Init::Random { seed } => ModelWeights::random(&spec, seed),
            Init::File(path) => ModelWeights::load(path)?,
            Init::Weights(w) => w,
        };
        weights.validate(&spec)?;
        Ok(Self {
            spec,
            weights,
            freeze: FreezePolicy::default(),
        })
    }

    pub fn random(spec: ArchitectureSpec, seed: u64) -> Self {
        Self::build(spec, Init::Random { seed }).expect("random weights always fit their spec")
    }

    /// Loads a backbone from an encoder file and keeps a fresh random head.
    /// Files that already contain a head are used as they are.
    pub fn with_backbone(spec: ArchitectureSpec, path: &Path, seed: u64) -> Result<Self> {
        let mut loaded = ModelWeights::load(path)?;
        let fresh = ModelWeights::random(&spec, seed);
        for (p, t) in &fresh.tensors {
            if spec.is_head_path(p) && !loaded.tensors.contains_key(p) {
                loaded.tensors.insert(p.clone(), t.clone());
            }
        }
        if loaded.provenance == Provenance::Random {
            loaded.provenance = Provenance::ExternalFile;
        }
        Self::build(spec, Init::Weights(loaded))
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn into_weights(self) -> ModelWeights {
        self.weights
    }

    pub fn freeze_policy(&self) -> FreezePolicy {
        self.freeze
    }

    pub fn freeze_backbone(mut self) -> Self {
        self.freeze.frozen = true;
        self
    }

    pub fn set_freeze(&mut self, policy: FreezePolicy) {
        self.freeze = policy;
    }

    /// Replaces the weights after checking them against the spec.
    pub fn set_weights(&mut self, weights: ModelWeights) -> Result<()> {
        weights.validate(&self.spec)?;
        self.weights = weights;
        Ok(())
    }

    pub fn zero_head(&mut self) {
        let head = self.spec.head_prefix();
        for (p, t) in self.weights.tensors.iter_mut() {
            if self.spec.is_head_path(p) {
                debug_assert!(p.starts_with(head));
                t.data_mut().fill(0.0);
            }
        }
    }

    /// Paths the optimizer updates under the current freeze policy.
    pub fn trainable_paths(&self) -> Vec<String> {
        self.spec
            .params()
            .into_iter()
            .filter(|p| p.kind.trainable() && (!self.freeze.frozen || self.spec.is_head_path(&p.path)))
            .map(|p| p.path)
            .collect()
    }

    pub fn trainable(&self) -> Trainable {
        if self.freeze.frozen {
            Trainable::HeadOnly
        } else {
            Trainable::All
        }
    }

    /// Forward pass honouring the freeze policy. A frozen backbone runs its
    /// batch norms on running statistics even in training mode, so it is
    /// left exactly as initialized.
    pub fn forward(&self, g: &mut Graph<f32>, input: Var, mode: Mode) -> Result<ForwardPass> {
        self.forward_with(g, input, mode, self.trainable(), true)
    }

    pub fn forward_with(
        &self,
        g: &mut Graph<f32>,
        input: Var,
        mode: Mode,
        trainable: Trainable,
        with_head: bool,
    ) -> Result<ForwardPass> {
        let backbone_mode = if self.freeze.frozen { Mode::Eval } else { mode };
        self.check_input(g.shape(input))?;
        let mut b = Builder {
            g,
            spec: &self.spec,
            weights: &self.weights,
            trainable,
            mode: backbone_mode,
            params: Vec::new(),
            stats: Vec::new(),
        };
        let features = b.backbone(input)?;
        let output = if with_head {
            let head = self.spec.head_prefix();
            let w = b.tensor(&format!("{head}.weight"))?;
            let bias = b.tensor(&format!("{head}.bias"))?;
            b.g.dense(features, w, Some(bias))?
        } else {
            features
        };
        Ok(ForwardPass {
            output,
            params: b.params,
            bn_stats: b.stats,
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(TensorError::Rank {
                op: "forward",
                expected: 4,
                shape: shape.to_vec(),
            }
            .into());
        }
        if shape[1] != self.spec.in_channels {
            return Err(TensorError::dim("forward", "input channels (dim 1)", self.spec.in_channels, shape[1]).into());
        }
        for (d, name) in [(2, "input height (dim 2)"), (3, "input width (dim 3)")] {
            if shape[d] != self.spec.input_size {
                return Err(TensorError::dim("forward", name, self.spec.input_size, shape[d]).into());
            }
        }
        Ok(())
    }

    /// Eval-mode logits for an `N x 3 x S x S` batch.
    pub fn logits(&self, batch: Tensor<f32>) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let x = g.constant(batch);
        let f = self.forward_with(&mut g, x, Mode::Eval, Trainable::Nothing, true)?;
        Ok(g.data(f.output).to_vec())
    }

    /// Folds observed batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<f32>)]) -> Result<()> {
        for (prefix, s) in stats {
            let m = BN_MOMENTUM;
            let rm = self.weights.get_mut(&format!("{prefix}.running_mean"))?;
            for (r, &b) in rm.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            let rv = self.weights.get_mut(&format!("{prefix}.running_var"))?;
            for (r, &b) in rv.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
        Ok(())
    }

    pub fn weights_mut(&mut self) -> &mut ModelWeights {
        &mut self.weights
    }
}

struct Builder<'a, 'g> {
    g: &'g mut Graph<f32>,
    spec: &'a ArchitectureSpec,
    weights: &'a ModelWeights,
    trainable: Trainable,
    mode: Mode,
    params: Vec<(String, Var)>,
    stats: Vec<(String, BatchStats<f32>)>,
}

impl Builder<'_, '_> {
    fn is_trainable(&self, path: &str) -> bool {
        match self.trainable {
            Trainable::All => true,
            Trainable::HeadOnly => self.spec.is_head_path(path),
            Trainable::Nothing => false,
        }
    }

    fn tensor(&mut self, path: &str) -> Result<Var> {
        let t = self.weights.get(path)?.clone();
        if self.is_trainable(path) {
            let v = self.g.param(t);
            self.params.push((path.to_string(), v));
            Ok(v)
        } else {
            Ok(self.g.constant(t))
        }
    }

    fn conv(&mut self, x: Var, prefix: &str, stride: usize, padding: usize) -> Result<Var> {
        let w = self.tensor(&format!("{prefix}.weight"))?;
        Ok(self.g.conv2d(x, w, None, stride, padding)?)
    }

    fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.tensor(&format!("{prefix}.weight"))?;
        let beta = self.tensor(&format!("{prefix}.bias"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.g.batchnorm2d(x, gamma, beta, BatchNormMode::Train { eps: BN_EPS })?;
                if let Some(s) = stats {
                    self.stats.push((prefix.to_string(), s));
                }
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.weights.get(&format!("{prefix}.running_mean"))?;
                let rv = self.weights.get(&format!("{prefix}.running_var"))?;
                let (y, _) = self.g.batchnorm2d(
                    x,
                    gamma,
                    beta,
                    BatchNormMode::Eval {
                        running_mean: rm.data(),
                        running_var: rv.data(),
                        eps: BN_EPS,
                    },
                )?;
                Ok(y)
            }
        }
    }

    fn backbone(&mut self, input: Var) -> Result<Var> {
        match &self.spec.layout {
            Layout::Cbr(blocks) => {
                let mut x = input;
                for (i, b) in blocks.iter().enumerate() {
                    let p = format!("block{}", i + 1);
                    x = self.conv(x, &format!("{p}.conv"), b.stride, b.kernel / 2)?;
                    x = self.bn(x, &format!("{p}.bn"))?;
                    x = self.g.relu(x);
                    if b.pool {
                        x = self.g.max_pool2d(x, 2, 2, 0)?;
                    }
                }
                Ok(self.g.global_avg_pool(x)?)
            }
            Layout::ResNet { stages, .. } => {
                let mut x = self.conv(input, "conv1", 2, 3)?;
                x = self.bn(x, "bn1")?;
                x = self.g.relu(x);
                x = self.g.max_pool2d(x, 3, 2, 1)?;
                for (si, stage) in stages.iter().enumerate() {
                    for (bi, b) in stage.iter().enumerate() {
                        let p = format!("layer{}.{}", si + 1, bi);
                        let mut y = self.conv(x, &format!("{p}.conv1"), 1, 0)?;
                        y = self.bn(y, &format!("{p}.bn1"))?;
                        y = self.g.relu(y);
                        y = self.conv(y, &format!("{p}.conv2"), b.stride, 1)?;
                        y = self.bn(y, &format!("{p}.bn2"))?;
                        y = self.g.relu(y);
                        y = self.conv(y, &format!("{p}.conv3"), 1, 0)?;
                        y = self.bn(y, &format!("{p}.bn3"))?;
                        let shortcut = if b.downsample {
                            let s = self.conv(x, &format!("{p}.downsample.0"), b.stride, 0)?;
                            self.bn(s, &format!("{p}.downsample.1"))?
                        } else {
                            x
                        };
                        let sum = self.g.add(y, shortcut)?;
                        x = self.g.relu(sum);
                    }
                }
                Ok(self.g.global_avg_pool(x)?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchitectureName;

    fn tiny(size: usize) -> ArchitectureSpec {
        ArchitectureSpec::new(ArchitectureName::CbrTiny).with_input_size(size)
    }

    #[test]
    fn wrong_spatial_size_rejected() {
        let m = Model::random(tiny(32), 0);
        let err = m.logits(Tensor::zeros(vec![1, 3, 16, 16])).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }

    #[test]
    fn zero_head_gives_zero_logit() {
        let mut m = Model::random(tiny(32), 0);
        m.zero_head();
        let out = m.logits(Tensor::zeros(vec![2, 3, 32, 32])).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn frozen_registers_head_only() {
        let m = Model::random(tiny(16), 0).freeze_backbone();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![2, 3, 16, 16]));
        let f = m.forward(&mut g, x, Mode::Train).unwrap();
        let names: Vec<_> = f.params.iter().map(|(p, _)| p.as_str()).collect();
        assert_eq!(names, ["head.weight", "head.bias"]);
        assert!(f.bn_stats.is_empty());
        assert_eq!(m.trainable_paths(), ["head.weight", "head.bias"]);
    }

    #[test]
    fn running_stats_momentum() {
        let mut m = Model::random(tiny(16), 0);
        let stats = vec![(
            "block1.bn".to_string(),
            BatchStats {
                mean: vec![1.0; 16],
                var: vec![3.0; 16],
            },
        )];
        m.update_running_stats(&stats).unwrap();
        let rm = m.weights().get("block1.bn.running_mean").unwrap().data()[0];
        let rv = m.weights().get("block1.bn.running_var").unwrap().data()[0];
        assert!((rm - 0.1).abs() < 1e-7);
        assert!((rv - 1.2).abs() < 1e-6);
    }
}
