//! Adam over named tensors of a weight map.

use std::collections::{BTreeMap, HashMap};

use octmh_tensor::{AdamConfig, AdamState, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Optimizer {
    paths: Vec<String>,
    adam: AdamState<f32>,
}

impl Optimizer {
    /// Tracks `paths`, sized from `tensors`.
    pub fn new(config: AdamConfig, paths: Vec<String>, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        let sizes = paths
            .iter()
            .map(|p| {
                tensors
                    .get(p)
                    .map(Tensor::numel)
                    .ok_or_else(|| Error::Training(format!("optimizer: no tensor {p}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            adam: AdamState::new(config, &sizes),
            paths,
        })
    }

    pub fn paths(&self) -> &[String] {
        &self.paths
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step_count()
    }

    /// One Adam step; `grads[i]` belongs to `paths()[i]`.
    pub fn step(&mut self, tensors: &mut BTreeMap<String, Tensor<f32>>, grads: &[&[f32]]) -> Result<()> {
        let mut by_path: HashMap<&str, &mut [f32]> =
            tensors.iter_mut().map(|(k, t)| (k.as_str(), t.data_mut())).collect();
        let mut params = Vec::with_capacity(self.paths.len());
        for p in &self.paths {
            params.push(
                by_path
                    .remove(p.as_str())
                    .ok_or_else(|| Error::Training(format!("optimizer: no tensor {p}")))?,
            );
        }
        let grads: Vec<Option<&[f32]>> = grads.iter().map(|g| Some(*g)).collect();
        self.adam.step(&mut params, &grads)?;
        Ok(())
    }
}
