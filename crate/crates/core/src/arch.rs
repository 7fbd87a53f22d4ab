//! Architecture descriptions and their parameter layouts.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArchitectureName {
    #[serde(rename = "CBR-Tiny")]
    CbrTiny,
    #[serde(rename = "CBR-Small")]
    CbrSmall,
    #[serde(rename = "CBR-Wide")]
    CbrWide,
    #[serde(rename = "CBR-Tall")]
    CbrTall,
    #[serde(rename = "ResNet-50")]
    ResNet50,
}

impl ArchitectureName {
    pub const ALL: [ArchitectureName; 5] = [
        ArchitectureName::CbrTiny,
        ArchitectureName::CbrSmall,
        ArchitectureName::CbrWide,
        ArchitectureName::CbrTall,
        ArchitectureName::ResNet50,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchitectureName::CbrTiny => "CBR-Tiny",
            ArchitectureName::CbrSmall => "CBR-Small",
            ArchitectureName::CbrWide => "CBR-Wide",
            ArchitectureName::CbrTall => "CBR-Tall",
            ArchitectureName::ResNet50 => "ResNet-50",
        }
    }
}

impl fmt::Display for ArchitectureName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchitectureName {
    type Err = Error;

    /// Case-insensitive; `CBR-LargeW` and `CBR-LargeT` are accepted as the
    /// wide and tall variants.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match key.as_str() {
            "cbrtiny" => ArchitectureName::CbrTiny,
            "cbrsmall" => ArchitectureName::CbrSmall,
            "cbrwide" | "cbrlargew" => ArchitectureName::CbrWide,
            "cbrtall" | "cbrlarget" => ArchitectureName::CbrTall,
            "resnet50" => ArchitectureName::ResNet50,
            _ => return Err(Error::Config(format!("unknown architecture {s:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CbrBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bottleneck {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    /// Applied on the 3x3 convolution.
    pub stride: usize,
    pub downsample: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layout {
    Cbr(Vec<CbrBlock>),
    /// Bottleneck residual network; `stages[i]` is a list of blocks.
    ResNet { stem_channels: usize, stages: Vec<Vec<Bottleneck>> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight { fan_in: usize },
    DenseWeight { fan_in: usize },
    DenseBias,
    BnWeight,
    BnBias,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub name: ArchitectureName,
    pub layout: Layout,
    pub in_channels: usize,
    /// Side of the square input the model accepts.
    pub input_size: usize,
}

pub const DEFAULT_INPUT_SIZE: usize = 224;

fn cbr(channels: &[usize], pooled: &[bool]) -> Layout {
    Layout::Cbr(
        channels
            .iter()
            .zip(pooled)
            .map(|(&c, &pool)| CbrBlock {
                out_channels: c,
                kernel: 3,
                stride: 1,
                pool,
            })
            .collect(),
    )
}

fn resnet50() -> Layout {
    let mut stages = Vec::new();
    let mut in_c = 64;
    for (i, &(blocks, mid)) in [(3, 64), (4, 128), (6, 256), (3, 512)].iter().enumerate() {
        let out = mid * 4;
        let mut stage = Vec::new();
        for b in 0..blocks {
            let stride = if b == 0 && i > 0 { 2 } else { 1 };
            stage.push(Bottleneck {
                in_channels: in_c,
                mid_channels: mid,
                out_channels: out,
                stride,
                downsample: b == 0,
            });
            in_c = out;
        }
        stages.push(stage);
    }
    Layout::ResNet {
        stem_channels: 64,
        stages,
    }
}

impl ArchitectureSpec {
    pub fn new(name: ArchitectureName) -> Self {
        let layout = match name {
            ArchitectureName::CbrTiny => cbr(&[16, 32, 64, 128], &[true; 4]),
            ArchitectureName::CbrSmall => cbr(&[32, 64, 128, 256], &[true; 4]),
            ArchitectureName::CbrWide => cbr(&[64, 128, 256, 512], &[true; 4]),
            ArchitectureName::CbrTall => cbr(
                &[32, 64, 128, 128, 256, 256],
                &[true, true, true, false, true, false],
            ),
            ArchitectureName::ResNet50 => resnet50(),
        };
        Self {
            name,
            layout,
            in_channels: 3,
            input_size: DEFAULT_INPUT_SIZE,
        }
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    /// Name prefix of the prediction head parameters.
    pub fn head_prefix(&self) -> &'static str {
        match self.layout {
            Layout::Cbr(_) => "head",
            Layout::ResNet { .. } => "fc",
        }
    }

    pub fn is_head_path(&self, path: &str) -> bool {
        path.strip_prefix(self.head_prefix())
            .is_some_and(|rest| rest.starts_with('.'))
    }

    /// Width of the pooled feature vector feeding the head.
    pub fn feature_dim(&self) -> usize {
        match &self.layout {
            Layout::Cbr(blocks) => blocks.last().map_or(self.in_channels, |b| b.out_channels),
            Layout::ResNet { stages, stem_channels } => stages
                .last()
                .and_then(|s| s.last())
                .map_or(*stem_channels, |b| b.out_channels),
        }
    }

    /// Every parameter and buffer in a fixed traversal order.
    pub fn params(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        match &self.layout {
            Layout::Cbr(blocks) => {
                let mut in_c = self.in_channels;
                for (i, b) in blocks.iter().enumerate() {
                    let p = format!("block{}", i + 1);
                    push_conv(&mut out, &format!("{p}.conv"), b.out_channels, in_c, b.kernel);
                    push_bn(&mut out, &format!("{p}.bn"), b.out_channels);
                    in_c = b.out_channels;
                }
            }
            Layout::ResNet { stem_channels, stages } => {
                push_conv(&mut out, "conv1", *stem_channels, self.in_channels, 7);
                push_bn(&mut out, "bn1", *stem_channels);
                for (si, stage) in stages.iter().enumerate() {
                    for (bi, b) in stage.iter().enumerate() {
                        let p = format!("layer{}.{}", si + 1, bi);
                        push_conv(&mut out, &format!("{p}.conv1"), b.mid_channels, b.in_channels, 1);
                        push_bn(&mut out, &format!("{p}.bn1"), b.mid_channels);
                        push_conv(&mut out, &format!("{p}.conv2"), b.mid_channels, b.mid_channels, 3);
                        push_bn(&mut out, &format!("{p}.bn2"), b.mid_channels);
                        push_conv(&mut out, &format!("{p}.conv3"), b.out_channels, b.mid_channels, 1);
                        push_bn(&mut out, &format!("{p}.bn3"), b.out_channels);
                        if b.downsample {
                            push_conv(
                                &mut out,
                                &format!("{p}.downsample.0"),
                                b.out_channels,
                                b.in_channels,
                                1,
                            );
                            push_bn(&mut out, &format!("{p}.downsample.1"), b.out_channels);
                        }
                    }
                }
            }
        }
        let head = self.head_prefix();
        let f = self.feature_dim();
        out.push(ParamSpec {
            path: format!("{head}.weight"),
            shape: vec![1, f],
            kind: ParamKind::DenseWeight { fan_in: f },
        });
        out.push(ParamSpec {
            path: format!("{head}.bias"),
            shape: vec![1],
            kind: ParamKind::DenseBias,
        });
        out
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.kind.trainable())
            .map(ParamSpec::numel)
            .sum()
    }
}

fn push_conv(out: &mut Vec<ParamSpec>, prefix: &str, out_c: usize, in_c: usize, k: usize) {
    out.push(ParamSpec {
        path: format!("{prefix}.weight"),
        shape: vec![out_c, in_c, k, k],
        kind: ParamKind::ConvWeight { fan_in: in_c * k * k },
    });
}

fn push_bn(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    for (name, kind) in [
        ("weight", ParamKind::BnWeight),
        ("bias", ParamKind::BnBias),
        ("running_mean", ParamKind::RunningMean),
        ("running_var", ParamKind::RunningVar),
    ] {
        out.push(ParamSpec {
            path: format!("{prefix}.{name}"),
            shape: vec![c],
            kind,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse_with_aliases() {
        assert_eq!("CBR-LargeW".parse::<ArchitectureName>().unwrap(), ArchitectureName::CbrWide);
        assert_eq!("cbr_large_t".parse::<ArchitectureName>().unwrap(), ArchitectureName::CbrTall);
        assert_eq!("resnet-50".parse::<ArchitectureName>().unwrap(), ArchitectureName::ResNet50);
        assert!("vgg".parse::<ArchitectureName>().is_err());
        for n in ArchitectureName::ALL {
            assert_eq!(n.as_str().parse::<ArchitectureName>().unwrap(), n);
        }
    }

    #[test]
    fn cbr_tiny_count_by_hand() {
        // conv 3x3 without bias, bn scale + shift, head 128 -> 1
        let blocks = [(3, 16), (16, 32), (32, 64), (64, 128)];
        let mut n = 0;
        for (i, o) in blocks {
            n += o * i * 9 + 2 * o;
        }
        n += 128 + 1;
        assert_eq!(ArchitectureSpec::new(ArchitectureName::CbrTiny).param_count(), n);
        assert_eq!(n, 97_809);
    }

    #[test]
    fn paths_are_unique() {
        for n in ArchitectureName::ALL {
            let params = ArchitectureSpec::new(n).params();
            let mut paths: Vec<_> = params.iter().map(|p| p.path.as_str()).collect();
            paths.sort_unstable();
            paths.dedup();
            assert_eq!(paths.len(), params.len(), "{n}");
        }
    }

    #[test]
    fn head_detection() {
        let s = ArchitectureSpec::new(ArchitectureName::ResNet50);
        assert!(s.is_head_path("fc.weight"));
        assert!(!s.is_head_path("fcx.weight"));
        assert!(!s.is_head_path("layer1.0.conv1.weight"));
    }
}
