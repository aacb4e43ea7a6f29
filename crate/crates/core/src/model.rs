//! The three-branch model: frozen backbone, level alignment, aggregation,
//! per-branch pooling, primitive classifiers and the composition GCN.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self as ag, Tensor, Var};
use crate::backbone::{Align, Backbone, BackboneConfig};
use crate::data::{LabelSpace, Sample, SemanticEmbeddings};
use crate::error::{Error, Result};
use crate::graph::{build_graph, composition_scores, init_node_embeddings, Gcn};
use crate::heads::{fuse_scores, BranchScores, FuseMode, MlpClassifier};
use crate::mfa::{
    aggregate, predict_weights, split_branches, AggregationStrategy, DrawKey, Predictor, N_BRANCHES,
};
use crate::nn::{Bound, Mode, ParamStore, StatUpdate};
use crate::pooling::{Pooling, PoolingKind};
use crate::splitmix;

/// Branch positions in weight rows and feature triples.
pub const ATTR: usize = 0;
pub const COMP: usize = 1;
pub const OBJ: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub predictor_channels: Vec<usize>,
    pub strategy: AggregationStrategy,
    pub pooling: PoolingKind,
    pub attn_heads: usize,
    pub tau: f64,
    pub emb_dim: usize,
    pub gcn_layers: usize,
    /// 0 selects 2·emb_dim.
    pub gcn_hidden: usize,
    /// 0 selects 2·C.
    pub head_hidden: usize,
    pub freeze_node_init: bool,
    pub fuse: FuseMode,
    /// Seeds parameter initialization and the random strategies.
    pub seed: u64,
}

impl ModelConfig {
    pub fn desk(seed: u64, input_size: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::desk(seed, input_size),
            predictor_channels: vec![16, 32, 64],
            strategy: AggregationStrategy::Learned,
            pooling: PoolingKind::Attention,
            attn_heads: 1,
            tau: 16.0,
            emb_dim: 300,
            gcn_layers: 2,
            gcn_hidden: 0,
            head_hidden: 0,
            freeze_node_init: false,
            fuse: FuseMode::Sum,
            seed,
        }
    }

    pub fn channels(&self) -> usize {
        self.backbone.target_channels
    }

    fn gcn_dims(&self) -> Result<Vec<usize>> {
        if self.gcn_layers == 0 {
            return Err(Error::Config("gcn_layers must be at least 1".into()));
        }
        let hidden = if self.gcn_hidden == 0 {
            2 * self.emb_dim
        } else {
            self.gcn_hidden
        };
        let mut dims = vec![self.emb_dim];
        dims.extend(std::iter::repeat_n(hidden, self.gcn_layers - 1));
        dims.push(self.channels());
        Ok(dims)
    }
}

/// Inputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Batch {
    /// N×3×H×W.
    pub images: Tensor,
    /// Per active level, N×C_k×g×g: backbone features pooled to the grid.
    pub levels: Vec<Tensor>,
    /// Stable sample identifiers (seed the random strategies).
    pub ids: Vec<u64>,
    pub attrs: Vec<usize>,
    pub objs: Vec<usize>,
    pub comps: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Decoded images and their frozen-backbone features for one split,
/// computed once because the backbone never changes.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    pub images: Array4<f64>,
    pub levels: Vec<Array4<f64>>,
    pub attrs: Vec<usize>,
    pub objs: Vec<usize>,
    pub comps: Vec<usize>,
}

impl FeatureBank {
    pub fn build(backbone: &Backbone, samples: &[Sample]) -> Result<Self> {
        let n = backbone.config.input_size;
        let mut images = Array4::zeros((samples.len(), 3, n, n));
        for (i, s) in samples.iter().enumerate() {
            if s.image.dim() != (3, n, n) {
                return Err(Error::Shape(format!(
                    "image {i} is {:?}, model expects 3×{n}×{n}",
                    s.image.dim()
                )));
            }
            images.index_axis_mut(Axis(0), i).assign(&s.image);
        }
        Self::from_images(
            backbone,
            images,
            samples
                .iter()
                .map(|s| (s.attribute, s.object, s.composition))
                .collect(),
        )
    }

    pub fn from_images(
        backbone: &Backbone,
        images: Array4<f64>,
        labels: Vec<(usize, usize, usize)>,
    ) -> Result<Self> {
        let levels = backbone.pooled_levels(images.view())?;
        Ok(FeatureBank {
            images,
            levels,
            attrs: labels.iter().map(|l| l.0).collect(),
            objs: labels.iter().map(|l| l.1).collect(),
            comps: labels.iter().map(|l| l.2).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            images: self.images.select(Axis(0), indices).into_dyn(),
            levels: self
                .levels
                .iter()
                .map(|l| l.select(Axis(0), indices).into_dyn())
                .collect(),
            ids: indices.iter().map(|&i| i as u64).collect(),
            attrs: indices.iter().map(|&i| self.attrs[i]).collect(),
            objs: indices.iter().map(|&i| self.objs[i]).collect(),
            comps: indices.iter().map(|&i| self.comps[i]).collect(),
        }
    }
}

/// Everything a forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub scores: BranchScores,
    /// f′ per branch, N×C×g×g, ordered [attribute, composition, object].
    pub features: [Var; N_BRANCHES],
    /// N×N_b×N_f.
    pub weights: Var,
    pub stat_updates: Vec<StatUpdate>,
}

/// Evaluation-mode outputs for a whole split.
#[derive(Clone, Debug)]
pub struct EvalOutputs {
    /// N×|Y| fused scores.
    pub fused: Array2<f64>,
    /// N×|Y| composition-branch scores.
    pub comp: Array2<f64>,
    /// N×N_b×N_f.
    pub weights: Array3<f64>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub label_space: LabelSpace,
    pub backbone: Backbone,
    pub store: ParamStore,
    pub align: Align,
    pub predictor: Predictor,
    /// [attribute, composition, object].
    pub pools: [Pooling; N_BRANCHES],
    pub gcn: Gcn,
    pub attr_head: MlpClassifier,
    pub obj_head: MlpClassifier,
}

impl Model {
    pub fn new(config: ModelConfig, ls: &LabelSpace, emb: &SemanticEmbeddings) -> Result<Self> {
        crate::mfa::check_tau(config.tau)?;
        if emb.dim() != config.emb_dim {
            return Err(Error::Config(format!(
                "embedding dim {} differs from configured {}",
                emb.dim(),
                config.emb_dim
            )));
        }
        let backbone = Backbone::new(config.backbone.clone())?;
        let c = config.channels();
        let grid = backbone.grid_size();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(config.seed ^ 0x1417));
        let mut store = ParamStore::new();
        let align = Align::new(&mut store, &mut rng, &backbone.level_channels(), c, grid);
        let predictor = Predictor::new(
            &mut store,
            &mut rng,
            &config.predictor_channels,
            config.backbone.levels.len(),
        )?;
        let names = ["pool.attr", "pool.comp", "pool.obj"];
        let mut pools = Vec::with_capacity(N_BRANCHES);
        for name in names {
            pools.push(Pooling::new(
                config.pooling,
                &mut store,
                &mut rng,
                name,
                c,
                grid,
                config.attn_heads,
            )?);
        }
        let pools: [Pooling; N_BRANCHES] = pools.try_into().unwrap();
        let graph = build_graph(ls);
        let h0 = init_node_embeddings(ls, emb)?;
        let gcn = Gcn::new(
            &mut store,
            &mut rng,
            &graph,
            h0,
            &config.gcn_dims()?,
            config.freeze_node_init,
        )?;
        let hidden = if config.head_hidden == 0 {
            2 * c
        } else {
            config.head_hidden
        };
        let attr_head =
            MlpClassifier::new(&mut store, &mut rng, "head.attr", c, hidden, ls.n_attrs());
        let obj_head = MlpClassifier::new(&mut store, &mut rng, "head.obj", c, hidden, ls.n_objs());
        Ok(Model {
            config,
            label_space: ls.clone(),
            backbone,
            store,
            align,
            predictor,
            pools,
            gcn,
            attr_head,
            obj_head,
        })
    }

    pub fn grid(&self) -> usize {
        self.align.grid
    }

    /// f̂ for a batch, N×N_f×(C·g·g).
    pub fn aligned(&self, p: &Bound, batch: &Batch) -> Result<Var> {
        let levels: Vec<Var> = batch
            .levels
            .iter()
            .map(|l| Var::constant(l.clone()))
            .collect();
        self.align.forward(p, &levels)
    }

    pub fn weights(&self, p: &Bound, batch: &Batch, key: DrawKey) -> Result<Var> {
        predict_weights(
            p,
            &self.predictor,
            &Var::constant(batch.images.clone()),
            self.config.strategy,
            self.config.tau,
            &batch.ids,
            key,
        )
    }

    /// Branch features f′ and the weights that produced them.
    pub fn branch_features(
        &self,
        p: &Bound,
        batch: &Batch,
        key: DrawKey,
    ) -> Result<([Var; N_BRANCHES], Var)> {
        let w = self.weights(p, batch, key)?;
        let f_prime = aggregate(&w, &self.aligned(p, batch)?)?;
        Ok((
            split_branches(&f_prime, self.config.channels(), self.grid()),
            w,
        ))
    }

    /// Scores from given branch features.
    pub fn scores(
        &self,
        p: &Bound,
        features: &[Var; N_BRANCHES],
        mode: Mode,
        updates: &mut Vec<StatUpdate>,
    ) -> Result<BranchScores> {
        let pooled_a = self.pools[ATTR].forward(p, &features[ATTR])?;
        let pooled_c = self.pools[COMP].forward(p, &features[COMP])?;
        let pooled_o = self.pools[OBJ].forward(p, &features[OBJ])?;
        Ok(BranchScores {
            attr: self.attr_head.forward(p, &pooled_a, mode, updates),
            obj: self.obj_head.forward(p, &pooled_o, mode, updates),
            comp: composition_scores(&pooled_c, &self.gcn.forward(p))?,
        })
    }

    pub fn forward(
        &self,
        p: &Bound,
        batch: &Batch,
        mode: Mode,
        key: DrawKey,
    ) -> Result<ForwardOutput> {
        let (features, weights) = self.branch_features(p, batch, key)?;
        let mut stat_updates = Vec::new();
        let scores = self.scores(p, &features, mode, &mut stat_updates)?;
        Ok(ForwardOutput {
            scores,
            features,
            weights,
            stat_updates,
        })
    }

    pub fn fuse(&self, scores: &BranchScores) -> Var {
        fuse_scores(scores, &self.label_space, self.config.fuse)
    }

    /// Evaluation-mode scores and weights for every sample of `bank`.
    pub fn evaluate_bank(
        &self,
        bank: &FeatureBank,
        batch_size: usize,
        key: DrawKey,
    ) -> Result<EvalOutputs> {
        let n = bank.len();
        let ny = self.label_space.n_comps();
        let nf = self.config.backbone.levels.len();
        let mut out = EvalOutputs {
            fused: Array2::zeros((n, ny)),
            comp: Array2::zeros((n, ny)),
            weights: Array3::zeros((n, N_BRANCHES, nf)),
        };
        let p = self.store.bind();
        ag::no_grad(|| -> Result<()> {
            let mut start = 0;
            while start < n {
                let end = (start + batch_size.max(1)).min(n);
                let idx: Vec<usize> = (start..end).collect();
                let fw = self.forward(&p, &bank.batch(&idx), Mode::Eval, key)?;
                let as2 = |t: &Tensor| {
                    t.view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap()
                        .to_owned()
                };
                out.fused
                    .slice_mut(s![start..end, ..])
                    .assign(&as2(self.fuse(&fw.scores).value()));
                out.comp
                    .slice_mut(s![start..end, ..])
                    .assign(&as2(fw.scores.comp.value()));
                out.weights.slice_mut(s![start..end, .., ..]).assign(
                    &fw.weights
                        .value()
                        .view()
                        .into_dimensionality::<ndarray::Ix3>()
                        .unwrap(),
                );
                start = end;
            }
            Ok(())
        })?;
        Ok(out)
    }

    /// Applies running-statistic updates from a training pass.
    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate>) {
        for u in updates {
            *self.store.get_mut(u.id) = u.value;
        }
    }

    /// Zero-filled embedding table of the right shape, for rebuilding a
    /// model whose parameters are loaded afterwards.
    pub fn placeholder_embeddings(ls: &LabelSpace, dim: usize) -> SemanticEmbeddings {
        SemanticEmbeddings {
            attributes: Array2::zeros((ls.n_attrs(), dim)),
            objects: Array2::zeros((ls.n_objs(), dim)),
        }
    }
}
