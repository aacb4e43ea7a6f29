use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::LabelSpace;
use crate::error::{Error, Result};

/// Where primitive word vectors come from.
#[derive(Clone, Debug, PartialEq)]
pub enum EmbeddingSource {
    /// Unit vectors derived from a hash of the name and the seed.
    Seeded(u64),
    /// Text file, one `name v1 ... v_dim` entry per line.
    File(PathBuf),
}

/// One row per attribute / object, in label-space order.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEmbeddings {
    pub attributes: Array2<f64>,
    pub objects: Array2<f64>,
}

impl SemanticEmbeddings {
    pub fn dim(&self) -> usize {
        self.attributes.ncols()
    }
}

/// Stable pseudo-random unit vector for `name`.
pub fn seeded_vector(name: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn parse_vector_file(text: &str, dim: usize) -> Result<HashMap<String, Vec<f64>>> {
    let mut table = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(name) = parts.next() else { continue };
        let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let values =
            values.map_err(|e| Error::Validation(format!("embedding line {}: {e}", i + 1)))?;
        if values.len() != dim {
            return Err(Error::Validation(format!(
                "embedding line {}: expected {dim} values, found {}",
                i + 1,
                values.len()
            )));
        }
        table.insert(name.to_string(), values);
    }
    Ok(table)
}

type Lookup = dyn Fn(&str) -> Option<Vec<f64>>;

/// Builds the primitive embedding table for `ls`.
pub fn init_semantic_embeddings(
    ls: &LabelSpace,
    dim: usize,
    source: &EmbeddingSource,
) -> Result<SemanticEmbeddings> {
    if dim < 2 {
        return Err(Error::Config("embedding dim must be at least 2".into()));
    }
    let lookup: Box<Lookup> = match source {
        EmbeddingSource::Seeded(seed) => {
            let seed = *seed;
            Box::new(move |n| Some(seeded_vector(n, dim, seed)))
        }
        EmbeddingSource::File(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let table = parse_vector_file(&text, dim)?;
            Box::new(move |n| table.get(n).cloned())
        }
    };
    let mut missing = Vec::new();
    let mut build = |names: &[String]| {
        let mut m = Array2::zeros((names.len(), dim));
        for (i, n) in names.iter().enumerate() {
            match lookup(n) {
                Some(v) => m.row_mut(i).assign(&ndarray::Array1::from(v)),
                None => missing.push(n.clone()),
            }
        }
        m
    };
    let attributes = build(&ls.attributes);
    let objects = build(&ls.objects);
    if !missing.is_empty() {
        return Err(Error::MissingEmbeddings(missing));
    }
    Ok(SemanticEmbeddings {
        attributes,
        objects,
    })
}
