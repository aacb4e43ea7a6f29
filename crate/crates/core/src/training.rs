//! Objective, optimizer, schedule, checkpoints and the training loop.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::IxDyn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{self as ag, Tensor, Var};
use crate::backbone::{Backbone, BackboneConfig, BackboneKind};
use crate::data::{EmbeddingSource, LabelSpace, SemanticEmbeddings};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, EvalReport, SweepMode};
use crate::focus::{attention_map, focused_loss};
use crate::heads::{BranchScores, FuseMode};
use crate::mfa::{AggregationStrategy, DrawKey};
use crate::model::{Batch, FeatureBank, Model, ModelConfig, ATTR, COMP, OBJ};
use crate::nn::{Mode, ParamStore, StatUpdate};
use crate::pooling::PoolingKind;
use crate::splitmix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CZSLCKPT";
pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// lr_e = lr/2·(1 + cos(π e / E)), one cycle, no restarts.
    Cosine,
    Constant,
}

/// Flat training configuration; every field is a key of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub strategy: AggregationStrategy,
    pub pooling: PoolingKind,
    pub focus: bool,
    pub detach_maps: bool,
    pub levels: Vec<usize>,
    pub channels: usize,
    pub emb_dim: usize,
    pub gcn_layers: usize,
    pub gcn_hidden: usize,
    pub head_hidden: usize,
    pub predictor_channels: Vec<usize>,
    pub attn_heads: usize,
    pub freeze_node_init: bool,
    pub fuse: FuseMode,
    /// Desk backbone seed; `backbone_path` selects an external backbone.
    pub backbone_seed: u64,
    pub backbone_path: Option<PathBuf>,
    /// Word-vector file; seeded vectors when absent.
    pub embeddings: Option<PathBuf>,
    pub eval_batch_size: usize,
    /// 0 for the exact sweep, otherwise the grid size.
    pub grid: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 3.0,
            tau: 16.0,
            lr: 5e-5,
            weight_decay: 5e-5,
            epochs: 30,
            batch_size: 64,
            seed: 0,
            schedule: Schedule::Cosine,
            strategy: AggregationStrategy::Learned,
            pooling: PoolingKind::Attention,
            focus: true,
            detach_maps: false,
            levels: vec![1, 2, 3],
            channels: 128,
            emb_dim: 300,
            gcn_layers: 2,
            gcn_hidden: 0,
            head_hidden: 0,
            predictor_channels: vec![16, 32, 64],
            attn_heads: 1,
            freeze_node_init: false,
            fuse: FuseMode::Sum,
            backbone_seed: 0,
            backbone_path: None,
            embeddings: None,
            eval_batch_size: 256,
            grid: 0,
        }
    }
}

fn parse_list(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("bad list entry `{s}`: {e}")))
        })
        .collect()
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("expected a boolean, got `{other}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| Error::Config(format!("{key}: {e}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 27] = [
        "alpha",
        "tau",
        "lr",
        "weight_decay",
        "epochs",
        "batch_size",
        "seed",
        "schedule",
        "strategy",
        "pooling",
        "focus",
        "detach_maps",
        "levels",
        "channels",
        "emb_dim",
        "gcn_layers",
        "gcn_hidden",
        "head_hidden",
        "predictor_channels",
        "attn_heads",
        "freeze_node_init",
        "fuse",
        "backbone_seed",
        "backbone_path",
        "embeddings",
        "eval_batch_size",
        "grid",
    ];

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "alpha" => self.alpha = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "schedule" => {
                self.schedule = match v {
                    "cosine" => Schedule::Cosine,
                    "constant" => Schedule::Constant,
                    other => return Err(Error::Config(format!("unknown schedule `{other}`"))),
                }
            }
            "strategy" => self.strategy = v.parse()?,
            "pooling" => self.pooling = v.parse()?,
            "focus" => self.focus = parse_bool(v)?,
            "detach_maps" => self.detach_maps = parse_bool(v)?,
            "levels" => self.levels = parse_list(v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "emb_dim" => self.emb_dim = parse_num(key, v)?,
            "gcn_layers" => self.gcn_layers = parse_num(key, v)?,
            "gcn_hidden" => self.gcn_hidden = parse_num(key, v)?,
            "head_hidden" => self.head_hidden = parse_num(key, v)?,
            "predictor_channels" => self.predictor_channels = parse_list(v)?,
            "attn_heads" => self.attn_heads = parse_num(key, v)?,
            "freeze_node_init" => self.freeze_node_init = parse_bool(v)?,
            "fuse" => self.fuse = v.parse()?,
            "backbone_seed" => self.backbone_seed = parse_num(key, v)?,
            "backbone_path" => self.backbone_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "embeddings" => self.embeddings = (!v.is_empty()).then(|| PathBuf::from(v)),
            "eval_batch_size" => self.eval_batch_size = parse_num(key, v)?,
            "grid" => self.grid = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key = value", i + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Key-value text that [`TrainConfig::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        let list = |xs: &[usize]| {
            xs.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("alpha", self.alpha.to_string());
        kv("tau", self.tau.to_string());
        kv("lr", self.lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv(
            "schedule",
            match self.schedule {
                Schedule::Cosine => "cosine".into(),
                Schedule::Constant => "constant".into(),
            },
        );
        kv("strategy", self.strategy.to_string());
        kv("pooling", self.pooling.to_string());
        kv("focus", self.focus.to_string());
        kv("detach_maps", self.detach_maps.to_string());
        kv("levels", list(&self.levels));
        kv("channels", self.channels.to_string());
        kv("emb_dim", self.emb_dim.to_string());
        kv("gcn_layers", self.gcn_layers.to_string());
        kv("gcn_hidden", self.gcn_hidden.to_string());
        kv("head_hidden", self.head_hidden.to_string());
        kv("predictor_channels", list(&self.predictor_channels));
        kv("attn_heads", self.attn_heads.to_string());
        kv("freeze_node_init", self.freeze_node_init.to_string());
        kv("fuse", self.fuse.to_string());
        kv("backbone_seed", self.backbone_seed.to_string());
        kv("backbone_path", path(&self.backbone_path));
        kv("embeddings", path(&self.embeddings));
        kv("eval_batch_size", self.eval_batch_size.to_string());
        kv("grid", self.grid.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be ≥ 0, got {}",
                self.alpha
            )));
        }
        crate::mfa::check_tau(self.tau)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be ≥ 0".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn sweep_mode(&self) -> SweepMode {
        if self.grid == 0 {
            SweepMode::Exact
        } else {
            SweepMode::Grid(self.grid)
        }
    }

    pub fn embedding_source(&self) -> EmbeddingSource {
        match &self.embeddings {
            Some(p) => EmbeddingSource::File(p.clone()),
            None => EmbeddingSource::Seeded(self.seed),
        }
    }

    pub fn model_config(&self, input_size: usize) -> ModelConfig {
        let kind = match &self.backbone_path {
            Some(path) => BackboneKind::External { path: path.clone() },
            None => BackboneKind::Desk {
                seed: self.backbone_seed,
            },
        };
        ModelConfig {
            backbone: BackboneConfig {
                kind,
                target_channels: self.channels,
                input_size,
                levels: self.levels.clone(),
            },
            predictor_channels: self.predictor_channels.clone(),
            strategy: self.strategy,
            pooling: self.pooling,
            attn_heads: self.attn_heads,
            tau: self.tau,
            emb_dim: self.emb_dim,
            gcn_layers: self.gcn_layers,
            gcn_hidden: self.gcn_hidden,
            head_hidden: self.head_hidden,
            freeze_node_init: self.freeze_node_init,
            fuse: self.fuse,
            seed: self.seed,
        }
    }

    /// Learning rate for epoch `e` (0-based).
    pub fn lr_at(&self, e: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let ep = self.epochs.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * e as f64 / ep).cos())
            }
        }
    }
}

/// Loss terms of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub epoch: usize,
    pub step: u64,
    pub cls_attr: f64,
    pub cls_obj: f64,
    pub cls_comp: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub focus: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

/// Mean softmax cross-entropy of N×K logits.
pub fn cross_entropy(logits: &Var, labels: &[usize]) -> Result<Var> {
    let k = logits.shape()[1];
    if labels.len() != logits.shape()[0] {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            logits.shape()[0]
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Validation(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(ag::neg(&ag::mean_all(&ag::pick(
        &ag::log_softmax(logits, 1),
        labels,
    ))))
}

/// (CE_a, CE_o, CE_c), composition CE over all closed-world compositions.
pub fn classification_loss(scores: &BranchScores, batch: &Batch) -> Result<[Var; 3]> {
    Ok([
        cross_entropy(&scores.attr, &batch.attrs)?,
        cross_entropy(&scores.obj, &batch.objs)?,
        cross_entropy(&scores.comp, &batch.comps)?,
    ])
}

/// Options of the training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub alpha: f64,
    pub focus: bool,
    pub detach_maps: bool,
}

impl From<&TrainConfig> for Objective {
    fn from(c: &TrainConfig) -> Self {
        Objective {
            alpha: c.alpha,
            focus: c.focus,
            detach_maps: c.detach_maps,
        }
    }
}

/// Value and terms of L = ΣCE + α·L_f for one batch, in training mode.
pub struct ObjectiveValue {
    pub total: Var,
    pub terms: [f64; 3],
    pub focus: Option<f64>,
    pub stat_updates: Vec<StatUpdate>,
}

/// Builds the objective graph. Must run with gradients enabled when the
/// focus term is on, since its maps are gradients.
pub fn objective(
    model: &Model,
    p: &crate::nn::Bound,
    batch: &Batch,
    obj: Objective,
    key: DrawKey,
) -> Result<ObjectiveValue> {
    ag::with_grad_mode(true, || {
        let fw = model.forward(p, batch, Mode::Train, key)?;
        let [ca, co, cc] = classification_loss(&fw.scores, batch)?;
        let terms = [ca.item(), co.item(), cc.item()];
        let mut total = ag::add(&ag::add(&ca, &co), &cc);
        let mut focus = None;
        if obj.focus {
            let create = !obj.detach_maps;
            let m_a = attention_map(&fw.scores.attr, &batch.attrs, &fw.features[ATTR], create)?;
            let m_o = attention_map(&fw.scores.obj, &batch.objs, &fw.features[OBJ], create)?;
            let m_c = attention_map(&fw.scores.comp, &batch.comps, &fw.features[COMP], create)?;
            let lf = focused_loss(&m_a, &m_o, &m_c)?;
            focus = Some(lf.item());
            total = ag::add(&total, &ag::scale(&lf, obj.alpha));
        }
        Ok(ObjectiveValue {
            total,
            terms,
            focus,
            stat_updates: fw.stat_updates,
        })
    })
}

/// Gradients of the objective for every parameter (None for frozen ones).
pub fn objective_gradients(
    model: &Model,
    batch: &Batch,
    obj: Objective,
    key: DrawKey,
) -> Result<(ObjectiveValue, Vec<Option<Tensor>>)> {
    let p = model.store.bind();
    let value = objective(model, &p, batch, obj, key)?;
    let trainable: Vec<(usize, &Var)> = p
        .vars()
        .iter()
        .enumerate()
        .filter(|(_, v)| v.requires_grad())
        .collect();
    let refs: Vec<&Var> = trainable.iter().map(|(_, v)| *v).collect();
    let grads = ag::with_grad_mode(true, || ag::grad(&value.total, &refs, false));
    let mut out = vec![None; p.vars().len()];
    for ((i, v), g) in trainable.into_iter().zip(grads) {
        out[i] = Some(
            g.map(|g| g.value().clone())
                .unwrap_or_else(|| Tensor::zeros(v.value().raw_dim())),
        );
    }
    Ok((value, out))
}

/// Adam with L2 weight decay added to the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.raw_dim()))
                .collect::<Vec<_>>()
        };
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        for (i, param) in store.params_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if !param.trainable {
                continue;
            }
            let decay = if param.decay { wd } else { 0.0 };
            ndarray::Zip::from(&mut param.value)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g + decay * *p;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
    }
}

/// Serialized training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub label_space: LabelSpace,
    pub epoch: usize,
    pub backbone_digest: String,
    pub store: ParamStore,
    pub optimizer: Option<Adam>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    decay: bool,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u32,
    epoch: usize,
    train_config: TrainConfig,
    model_config: ModelConfig,
    label_space: LabelSpace,
    backbone_digest: String,
    params: Vec<ParamHeader>,
    optimizer: Option<OptimizerHeader>,
}

/// SHA-256 over the backbone stage tensors.
pub fn backbone_digest(bb: &Backbone) -> String {
    let mut h = Sha256::new();
    for st in &bb.stages {
        for v in st.weight.iter().chain(st.bias.iter()) {
            h.update(v.to_le_bytes());
        }
        h.update((st.stride as u64).to_le_bytes());
        h.update((st.pad as u64).to_le_bytes());
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

impl Checkpoint {
    pub fn capture(
        model: &Model,
        train_config: &TrainConfig,
        epoch: usize,
        optimizer: Option<&Adam>,
    ) -> Self {
        Checkpoint {
            train_config: train_config.clone(),
            model_config: model.config.clone(),
            label_space: model.label_space.clone(),
            epoch,
            backbone_digest: backbone_digest(&model.backbone),
            store: model.store.clone(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Magic, schema version, header length, JSON header, then raw
    /// little-endian f64 parameter data followed by optimizer moments.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            schema_version: CHECKPOINT_SCHEMA,
            epoch: self.epoch,
            train_config: self.train_config.clone(),
            model_config: self.model_config.clone(),
            label_space: self.label_space.clone(),
            backbone_digest: self.backbone_digest.clone(),
            params: self
                .store
                .params()
                .iter()
                .map(|p| ParamHeader {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    trainable: p.trainable,
                    decay: p.decay,
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                step: o.step,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_SCHEMA.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |t: &Tensor| {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        self.store.params().iter().for_each(|p| put(&p.value));
        if let Some(o) = &self.optimizer {
            o.m.iter().for_each(&mut put);
            o.v.iter().for_each(&mut put);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_SCHEMA {
            return Err(Error::SchemaVersion {
                found: version,
                expected: CHECKPOINT_SCHEMA,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let mut data = bytes[20 + hlen..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let v: Vec<f64> = data.by_ref().take(n).collect();
            if v.len() != n {
                return Err(bad("truncated parameter data"));
            }
            Ok(Tensor::from_shape_vec(IxDyn(shape), v).unwrap())
        };
        let mut store = ParamStore::new();
        for ph in &header.params {
            let value = take(&ph.shape)?;
            store.add(ph.name.clone(), value, ph.trainable, ph.decay);
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(o) => {
                let shapes: Vec<Vec<usize>> =
                    header.params.iter().map(|p| p.shape.clone()).collect();
                let m = shapes.iter().map(|s| take(s)).collect::<Result<Vec<_>>>()?;
                let v = shapes.iter().map(|s| take(s)).collect::<Result<Vec<_>>>()?;
                Some(Adam {
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    weight_decay: o.weight_decay,
                    step: o.step,
                    m,
                    v,
                })
            }
        };
        if data.next().is_some() {
            return Err(bad("trailing data after parameters"));
        }
        Ok(Checkpoint {
            train_config: header.train_config,
            model_config: header.model_config,
            label_space: header.label_space,
            epoch: header.epoch,
            backbone_digest: header.backbone_digest,
            store,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model and installs the stored parameters.
    pub fn to_model(&self) -> Result<Model> {
        let emb = Model::placeholder_embeddings(&self.label_space, self.model_config.emb_dim);
        let mut model = Model::new(self.model_config.clone(), &self.label_space, &emb)?;
        if backbone_digest(&model.backbone) != self.backbone_digest {
            return Err(Error::Checkpoint(
                "backbone weights differ from the ones the checkpoint was trained with".into(),
            ));
        }
        if model.store.len() != self.store.len() {
            return Err(Error::Checkpoint(
                "parameter layout differs from the model configuration".into(),
            ));
        }
        for (dst, src) in model.store.params_mut().iter_mut().zip(self.store.params()) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch at `{}`",
                    src.name
                )));
            }
            dst.value = src.value.clone();
            dst.trainable = src.trainable;
        }
        Ok(model)
    }
}

/// One line of the per-epoch metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub cls_attr: f64,
    pub cls_obj: f64,
    pub cls_comp: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub focus: Option<f64>,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val: Option<ValMetrics>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "U")]
    pub u: f64,
    #[serde(rename = "AUC")]
    pub auc: f64,
    #[serde(rename = "HM")]
    pub hm: f64,
}

impl From<&EvalReport> for ValMetrics {
    fn from(r: &EvalReport) -> Self {
        ValMetrics {
            s: r.s,
            u: r.u,
            auc: r.auc,
            hm: r.hm,
        }
    }
}

/// Training inputs: train features and optional validation features.
pub struct TrainData<'a> {
    pub train: &'a FeatureBank,
    pub val: Option<&'a FeatureBank>,
}

pub struct TrainOutcome {
    pub model: Model,
    /// Model state with the best validation HM (final model without validation).
    pub best: Checkpoint,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<LossBreakdown>,
}

/// Sample order of an epoch, fixed by seed and epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(0xe90c_0000 + epoch as u64)));
    idx.shuffle(&mut rng);
    idx
}

fn jsonl_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn write_line<T: Serialize>(w: &mut BufWriter<File>, path: &Path, v: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))
}

/// Builds the model for `cfg` over `ls`, drawing embeddings from the
/// configured source.
pub fn build_model(cfg: &TrainConfig, ls: &LabelSpace, input_size: usize) -> Result<Model> {
    cfg.validate()?;
    let emb: SemanticEmbeddings =
        crate::data::init_semantic_embeddings(ls, cfg.emb_dim, &cfg.embedding_source())?;
    Model::new(cfg.model_config(input_size), ls, &emb)
}

/// Trains `model` in place. With `out_dir`, writes `steps.jsonl`,
/// `metrics.jsonl`, `epoch_<N>.ckpt` for every epoch and `best.ckpt`.
pub fn train(
    mut model: Model,
    cfg: &TrainConfig,
    data: TrainData<'_>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let obj = Objective::from(cfg);
    let mut adam = Adam::new(&model.store, cfg.weight_decay);
    let mut logs = match out_dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let sp = d.join("steps.jsonl");
            let mp = d.join("metrics.jsonl");
            Some(((jsonl_writer(&sp)?, sp), (jsonl_writer(&mp)?, mp)))
        }
        None => None,
    };
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let order = epoch_order(cfg.seed, epoch, data.train.len());
        let mut sums = [0.0f64; 5];
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.train.batch(chunk);
            let key = DrawKey {
                seed: cfg.seed,
                pass: step,
            };
            let (value, grads) = objective_gradients(&model, &batch, obj, key)?;
            let rec = LossBreakdown {
                epoch: epoch + 1,
                step,
                cls_attr: value.terms[0],
                cls_obj: value.terms[1],
                cls_comp: value.terms[2],
                focus: value.focus,
                total: value.total.item(),
                lr,
            };
            if !rec.total.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    breakdown: serde_json::to_string(&rec)?,
                });
            }
            adam.update(&mut model.store, &grads, lr);
            model.apply_stat_updates(value.stat_updates);
            sums[0] += rec.cls_attr;
            sums[1] += rec.cls_obj;
            sums[2] += rec.cls_comp;
            sums[3] += rec.focus.unwrap_or(0.0);
            sums[4] += rec.total;
            count += 1;
            if let Some(((w, p), _)) = logs.as_mut() {
                write_line(w, p, &rec)?;
            }
            steps.push(rec);
            step += 1;
        }
        let mean = |i: usize| sums[i] / count as f64;
        let val = match data.val {
            Some(bank) if !bank.is_empty() => {
                let ev = evaluate_model(
                    &model,
                    bank,
                    cfg.sweep_mode(),
                    cfg.eval_batch_size,
                    cfg.alpha,
                )?;
                Some(ValMetrics::from(&ev.fused))
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            cls_attr: mean(0),
            cls_obj: mean(1),
            cls_comp: mean(2),
            focus: cfg.focus.then(|| mean(3)),
            total: mean(4),
            val,
        };
        let ckpt = Checkpoint::capture(&model, cfg, epoch + 1, Some(&adam));
        let score = val.map(|v| v.hm).unwrap_or(f64::NEG_INFINITY);
        let improved = best
            .as_ref()
            .is_none_or(|(b, _)| score > *b || val.is_none());
        if let Some((_, (w, p))) = logs.as_mut() {
            write_line(w, p, &record)?;
            w.flush().map_err(|e| Error::io(p.as_path(), e))?;
        }
        if let Some(d) = out_dir {
            ckpt.save(&d.join(format!("epoch_{}.ckpt", epoch + 1)))?;
            if improved {
                ckpt.save(&d.join("best.ckpt"))?;
            }
        }
        if improved {
            best = Some((score, ckpt));
        }
        epochs.push(record);
    }
    if let Some(((w, p), _)) = logs.as_mut() {
        w.flush().map_err(|e| Error::io(p.as_path(), e))?;
    }
    let best = match best {
        Some((_, c)) => c,
        None => Checkpoint::capture(&model, cfg, 0, Some(&adam)),
    };
    Ok(TrainOutcome {
        model,
        best,
        epochs,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{tiny_bank, tiny_model};

    #[test]
    fn uniform_logits_cost_ln_k() {
        let l = Var::constant(Tensor::zeros(IxDyn(&[3, 5])));
        let ce = cross_entropy(&l, &[0, 4, 2]).unwrap();
        assert!((ce.item() - 5f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&l, &[0, 5, 2]).is_err());
    }

    #[test]
    fn large_margin_cross_entropy_vanishes() {
        let l = Var::constant(crate::autograd::from_vec(&[1, 3], vec![50.0, 0.0, 0.0]));
        assert!(cross_entropy(&l, &[0]).unwrap().item() < 1e-20);
    }

    #[test]
    fn cosine_schedule_is_non_increasing() {
        let cfg = TrainConfig {
            epochs: 7,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..7).map(|e| cfg.lr_at(e)).collect();
        assert_eq!(lrs[0], 1e-3);
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs[6] > 0.0);
    }

    #[test]
    fn config_text_round_trip_and_errors() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(
            "alpha = 1.5\n# comment\nlevels = 0,1,2,3\nbackbone_path = /tmp/b.json\nfocus = off\n",
        )
        .unwrap();
        assert_eq!(cfg.alpha, 1.5);
        assert_eq!(cfg.levels, vec![0, 1, 2, 3]);
        assert!(!cfg.focus);
        let mut back = TrainConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert!(TrainConfig::default().apply_text("bogus = 1").is_err());
        assert!(TrainConfig::default().apply_text("alpha 1").is_err());
        assert_eq!(TrainConfig::KEYS.len(), cfg.to_text().lines().count());
        let bad = TrainConfig {
            tau: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add(
            "w",
            crate::autograd::from_vec(&[2], vec![1.0, -1.0]),
            true,
            false,
        );
        let mut adam = Adam::new(&store, 0.0);
        let g = vec![Some(crate::autograd::from_vec(&[2], vec![0.3, -2.0]))];
        adam.update(&mut store, &g, 0.1);
        let w = store.get(id);
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let m = tiny_model(2);
        let cfg = TrainConfig::default();
        let adam = Adam::new(&m.store, 1e-4);
        let c = Checkpoint::capture(&m, &cfg, 3, Some(&adam));
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let rebuilt = back.to_model().unwrap();
        assert_eq!(rebuilt.store, m.store);
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&wrong),
            Err(Error::SchemaVersion { found: 9, .. })
        ));
    }

    #[test]
    fn focus_off_total_is_sum_of_cross_entropies() {
        let m = tiny_model(4);
        let bank = tiny_bank(&m, 4, 1);
        let b = bank.batch(&[0, 1, 2, 3]);
        let p = m.store.bind();
        let obj = Objective {
            alpha: 3.0,
            focus: false,
            detach_maps: false,
        };
        let v = objective(&m, &p, &b, obj, DrawKey::default()).unwrap();
        assert!(v.focus.is_none());
        assert_eq!(v.total.item(), v.terms[0] + v.terms[1] + v.terms[2]);
        let on = objective(
            &m,
            &p,
            &b,
            Objective { focus: true, ..obj },
            DrawKey::default(),
        )
        .unwrap();
        let lf = on.focus.unwrap();
        assert!((-1.0..=1.0).contains(&lf));
        assert!((on.total.item() - (on.terms.iter().sum::<f64>() + 3.0 * lf)).abs() < 1e-6);
    }
}
