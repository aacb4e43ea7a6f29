//! Frozen multi-level feature extractor and the trainable level alignment.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array4, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{self as ag, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Exec};
use crate::nn::{Bound, Conv2d, ParamStore};

/// Stage widths of the desk backbone.
pub const DESK_STAGE_CHANNELS: [usize; 4] = [16, 32, 64, 128];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneKind {
    /// Four 3×3 stride-2 conv+ReLU stages with seeded He-normal weights.
    Desk { seed: u64 },
    /// Stages read from a JSON file (see [`Backbone::load_external`]).
    External { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Target channel count C of the aligned features.
    pub target_channels: usize,
    /// Square input side length.
    pub input_size: usize,
    /// Active levels, ascending, subset of {0,1,2,3}.
    pub levels: Vec<usize>,
}

impl BackboneConfig {
    pub fn desk(seed: u64, input_size: usize) -> Self {
        BackboneConfig {
            kind: BackboneKind::Desk { seed },
            target_channels: 128,
            input_size,
            levels: vec![1, 2, 3],
        }
    }

    /// Full-size widths: C = 512.
    pub fn full_scale(seed: u64, input_size: usize) -> Self {
        BackboneConfig {
            target_channels: 512,
            ..Self::desk(seed, input_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("active level subset must be nonempty".into()));
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1]) || self.levels.iter().any(|&l| l > 3) {
            return Err(Error::Config(format!(
                "levels must be strictly increasing values in 0..=3, got {:?}",
                self.levels
            )));
        }
        if self.target_channels == 0 {
            return Err(Error::Config(
                "target channel count must be positive".into(),
            ));
        }
        if self.input_size < 16 || !self.input_size.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "input size must be a positive multiple of 16, got {}",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// One frozen stage: conv then ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    /// O×C×k×k.
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

impl Stage {
    fn forward(&self, x: ArrayView4<f64>) -> Array4<f64> {
        let geom = ConvGeom {
            stride: self.stride,
            pad: self.pad,
        };
        let mut y = kernels::conv2d(Exec::default(), x, self.weight.view(), geom);
        for (mut ch, &b) in y.axis_iter_mut(Axis(1)).zip(&self.bias) {
            ch.mapv_inplace(|v| (v + b).max(0.0));
        }
        y
    }
}

#[derive(Serialize, Deserialize)]
struct ExternalFile {
    stages: Vec<Stage>,
}

/// Frozen staged CNN. Holds plain arrays, never graph leaves, so no
/// gradient can reach its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let stages = match &config.kind {
            BackboneKind::Desk { seed } => desk_stages(*seed),
            BackboneKind::External { path } => Self::load_external(path)?,
        };
        if stages.len() != 4 {
            return Err(Error::Config(format!(
                "backbone needs 4 stages, found {}",
                stages.len()
            )));
        }
        let mut c = 3;
        for (i, st) in stages.iter().enumerate() {
            let sh = st.weight.shape();
            if sh[1] != c || st.bias.len() != sh[0] || sh[2] != sh[3] {
                return Err(Error::Shape(format!(
                    "backbone stage {i} has inconsistent shape {sh:?}"
                )));
            }
            c = sh[0];
        }
        Ok(Backbone { config, stages })
    }

    /// Reads `{"stages": [{"weight": ..., "bias": ..., "stride": 2, "pad": 1}, ...]}`
    /// with ndarray's serde layout for the arrays.
    pub fn load_external(path: &Path) -> Result<Vec<Stage>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ExternalFile = serde_json::from_str(&text)?;
        Ok(file.stages)
    }

    pub fn save_external(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&ExternalFile {
            stages: self.stages.clone(),
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Channel count of each active level.
    pub fn level_channels(&self) -> Vec<usize> {
        self.config
            .levels
            .iter()
            .map(|&l| self.stages[l].weight.shape()[0])
            .collect()
    }

    /// Spatial side of every stage output for the configured input.
    pub fn stage_sizes(&self) -> Vec<usize> {
        let mut n = self.config.input_size;
        self.stages
            .iter()
            .map(|st| {
                n = ConvGeom {
                    stride: st.stride,
                    pad: st.pad,
                }
                .out_size(n, st.weight.shape()[2]);
                n
            })
            .collect()
    }

    /// Side of the alignment grid: the highest active level's size.
    pub fn grid_size(&self) -> usize {
        self.stage_sizes()[*self.config.levels.last().unwrap()]
    }

    /// Active-level feature maps for a batch of N×3×H×W images.
    pub fn extract(&self, images: ArrayView4<f64>) -> Result<Vec<Array4<f64>>> {
        let sh = images.shape();
        let n = self.config.input_size;
        if sh[1] != 3 || sh[2] != n || sh[3] != n {
            return Err(Error::Shape(format!(
                "backbone expects N×3×{n}×{n} images, got {sh:?}"
            )));
        }
        let top = *self.config.levels.last().unwrap();
        let mut out = Vec::with_capacity(self.config.levels.len());
        let mut x = images.to_owned();
        for (l, st) in self.stages.iter().enumerate().take(top + 1) {
            x = st.forward(x.view());
            if self.config.levels.contains(&l) {
                out.push(x.clone());
            }
        }
        Ok(out)
    }

    /// Active levels pooled to the alignment grid: DS(f_k) per level.
    /// Large batches are processed in chunks.
    pub fn pooled_levels(&self, images: ArrayView4<f64>) -> Result<Vec<Array4<f64>>> {
        let g = self.grid_size();
        let chunk = 64;
        let total = images.shape()[0];
        let mut parts: Vec<Vec<Array4<f64>>> = Vec::new();
        let mut start = 0;
        while start < total {
            let end = (start + chunk).min(total);
            let feats = self.extract(images.slice(s![start..end, .., .., ..]))?;
            parts.push(
                feats
                    .iter()
                    .map(|f| kernels::adaptive_avg_pool(f.view(), g, g))
                    .collect(),
            );
            start = end;
        }
        let levels = self.config.levels.len();
        Ok((0..levels)
            .map(|k| {
                let views: Vec<_> = parts.iter().map(|p| p[k].view()).collect();
                if views.is_empty() {
                    let c = self.level_channels()[k];
                    Array4::zeros((0, c, g, g))
                } else {
                    ndarray::concatenate(Axis(0), &views).unwrap()
                }
            })
            .collect())
    }
}

fn desk_stages(seed: u64) -> Vec<Stage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb4c0_b0e5);
    let mut c_in = 3;
    DESK_STAGE_CHANNELS
        .iter()
        .map(|&c_out| {
            let fan_in = c_in * 9;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            let weight =
                Array4::from_shape_simple_fn((c_out, c_in, 3, 3), || normal.sample(&mut rng));
            c_in = c_out;
            Stage {
                weight,
                bias: Array1::zeros(c_out),
                stride: 2,
                pad: 1,
            }
        })
        .collect()
}

/// One trainable 1×1 convolution per active level, C_k → C.
#[derive(Clone, Debug)]
pub struct Align {
    pub convs: Vec<Conv2d>,
    pub channels: usize,
    pub grid: usize,
}

impl Align {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        level_channels: &[usize],
        channels: usize,
        grid: usize,
    ) -> Self {
        let convs = level_channels
            .iter()
            .enumerate()
            .map(|(k, &ck)| Conv2d::new(store, rng, &format!("align.{k}"), ck, channels, 1, 1, 0))
            .collect();
        Align {
            convs,
            channels,
            grid,
        }
    }

    /// f̂: N×N_f×(C·H·W), rows flattened channel-major.
    pub fn forward(&self, p: &Bound, pooled: &[Var]) -> Result<Var> {
        if pooled.len() != self.convs.len() {
            return Err(Error::Shape(format!(
                "expected {} feature levels, got {}",
                self.convs.len(),
                pooled.len()
            )));
        }
        let d = self.channels * self.grid * self.grid;
        let rows: Vec<Var> = self
            .convs
            .iter()
            .zip(pooled)
            .map(|(conv, f)| {
                let n = f.shape()[0];
                ag::reshape(&conv.forward(p, f), &[n, 1, d])
            })
            .collect();
        Ok(ag::concat(&rows, 1))
    }
}
