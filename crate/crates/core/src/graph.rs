//! Composition graph over attribute, object and composition nodes, and the
//! GCN producing composition embeddings.

use ndarray::{s, Array2};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{self as ag, Var};
use crate::data::{LabelSpace, SemanticEmbeddings};
use crate::error::{Error, Result};
use crate::nn::{scaled_uniform, Bound, ParamId, ParamStore};

/// Nodes laid out as [attributes | objects | compositions].
#[derive(Clone, Debug, PartialEq)]
pub struct CompositionGraph {
    pub n_attrs: usize,
    pub n_objs: usize,
    pub n_comps: usize,
    /// Binary symmetric adjacency with zero diagonal.
    pub adjacency: Array2<f64>,
}

impl CompositionGraph {
    pub fn n_nodes(&self) -> usize {
        self.n_attrs + self.n_objs + self.n_comps
    }

    /// Â = A + I.
    pub fn with_self_loops(&self) -> Array2<f64> {
        &self.adjacency + &Array2::<f64>::eye(self.n_nodes())
    }

    /// Row sums of Â.
    pub fn degrees(&self) -> Vec<f64> {
        self.with_self_loops()
            .rows()
            .into_iter()
            .map(|r| r.sum())
            .collect()
    }

    /// D⁻¹Â.
    pub fn normalized(&self) -> Array2<f64> {
        let mut a = self.with_self_loops();
        for mut row in a.rows_mut() {
            let d = row.sum();
            row.mapv_inplace(|v| v / d);
        }
        a
    }

    pub fn composition_nodes(&self) -> std::ops::Range<usize> {
        let start = self.n_attrs + self.n_objs;
        start..start + self.n_comps
    }
}

/// Connects every pair within each (attribute, object, composition) triple,
/// over all closed-world compositions.
pub fn build_graph(ls: &LabelSpace) -> CompositionGraph {
    let (na, no, nc) = (ls.n_attrs(), ls.n_objs(), ls.n_comps());
    let n = na + no + nc;
    let mut adj = Array2::zeros((n, n));
    let mut link = |i: usize, j: usize| {
        adj[[i, j]] = 1.0;
        adj[[j, i]] = 1.0;
    };
    for (y, &(a, o)) in ls.compositions.iter().enumerate() {
        let (an, on, yn) = (a, na + o, na + no + y);
        link(yn, an);
        link(yn, on);
        link(an, on);
    }
    CompositionGraph {
        n_attrs: na,
        n_objs: no,
        n_comps: nc,
        adjacency: adj,
    }
}

/// H⁰: primitive rows copy their embeddings, composition rows average the
/// two primitive embeddings.
pub fn init_node_embeddings(ls: &LabelSpace, emb: &SemanticEmbeddings) -> Result<Array2<f64>> {
    if emb.attributes.nrows() != ls.n_attrs() || emb.objects.nrows() != ls.n_objs() {
        return Err(Error::Shape(format!(
            "embedding table has {}+{} rows for {}+{} primitives",
            emb.attributes.nrows(),
            emb.objects.nrows(),
            ls.n_attrs(),
            ls.n_objs()
        )));
    }
    let d = emb.dim();
    let (na, no) = (ls.n_attrs(), ls.n_objs());
    let mut h = Array2::zeros((na + no + ls.n_comps(), d));
    h.slice_mut(s![..na, ..]).assign(&emb.attributes);
    h.slice_mut(s![na..na + no, ..]).assign(&emb.objects);
    for (y, &(a, o)) in ls.compositions.iter().enumerate() {
        let row = (&emb.attributes.row(a) + &emb.objects.row(o)) * 0.5;
        h.row_mut(na + no + y).assign(&row);
    }
    Ok(h)
}

/// L-layer GCN, H^{l+1} = σ(D⁻¹ÂH^l W^l) with ReLU between layers and
/// none after the last.
#[derive(Clone, Debug)]
pub struct Gcn {
    pub nodes: ParamId,
    pub layers: Vec<ParamId>,
    pub propagation: Var,
    pub comp_nodes: Vec<usize>,
}

impl Gcn {
    /// `dims` is [d₀, hidden.., C]; node embeddings train unless `freeze_nodes`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        graph: &CompositionGraph,
        h0: Array2<f64>,
        dims: &[usize],
        freeze_nodes: bool,
    ) -> Result<Self> {
        if dims.len() < 2 || dims[0] != h0.ncols() {
            return Err(Error::Shape(format!(
                "GCN dims {dims:?} do not start at embedding dim {}",
                h0.ncols()
            )));
        }
        let nodes = store.add("gcn.nodes", h0.into_dyn(), !freeze_nodes, true);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                store.add(
                    format!("gcn.{l}.weight"),
                    scaled_uniform(rng, &[w[0], w[1]], w[0]),
                    true,
                    true,
                )
            })
            .collect();
        Ok(Gcn {
            nodes,
            layers,
            propagation: Var::constant(graph.normalized().into_dyn()),
            comp_nodes: graph.composition_nodes().collect(),
        })
    }

    /// Composition embeddings H_y, |Y|×C.
    pub fn forward(&self, p: &Bound) -> Var {
        propagate(
            &self.propagation,
            p.var(self.nodes),
            &self
                .layers
                .iter()
                .map(|&id| p.var(id).clone())
                .collect::<Vec<_>>(),
            true,
            &self.comp_nodes,
        )
    }
}

/// Runs the layers over all nodes and returns rows `keep`. With `relu`
/// false the propagation is linear.
pub fn propagate(norm_adj: &Var, h0: &Var, weights: &[Var], relu: bool, keep: &[usize]) -> Var {
    let mut h = h0.clone();
    for (l, w) in weights.iter().enumerate() {
        h = ag::matmul(&ag::matmul(norm_adj, &h), w);
        if relu && l + 1 < weights.len() {
            h = ag::relu(&h);
        }
    }
    ag::index_select(&h, 0, keep)
}

/// S_c = pooled·H_yᵀ, N×|Y|.
pub fn composition_scores(pooled: &Var, embeddings: &Var) -> Result<Var> {
    if pooled.shape()[1] != embeddings.shape()[1] {
        return Err(Error::Shape(format!(
            "pooled dim {} differs from embedding dim {}",
            pooled.shape()[1],
            embeddings.shape()[1]
        )));
    }
    Ok(ag::matmul(pooled, &ag::t(embeddings)))
}
