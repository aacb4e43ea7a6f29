//! Label space, dataset manifests, synthetic data and semantic embeddings.

mod embeddings;
mod manifest;
mod synthetic;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use embeddings::{init_semantic_embeddings, EmbeddingSource, SemanticEmbeddings};
pub use manifest::{load_manifest, load_samples, DatasetManifest, Record, Sample};
pub use synthetic::{
    generate_synthetic, render_image, SyntheticConfig, ATTRIBUTE_STYLES, OBJECT_SHAPES,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split `{other}`"))),
        }
    }
}

/// Attributes, objects, the closed-world composition set and which
/// compositions were seen during training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub attributes: Vec<String>,
    pub objects: Vec<String>,
    /// (attribute index, object index) per composition.
    pub compositions: Vec<(usize, usize)>,
    pub seen: Vec<bool>,
}

impl LabelSpace {
    /// Builds and validates a label space.
    pub fn new(
        attributes: Vec<String>,
        objects: Vec<String>,
        compositions: Vec<(usize, usize)>,
        seen: Vec<bool>,
    ) -> Result<Self> {
        let ls = LabelSpace {
            attributes,
            objects,
            compositions,
            seen,
        };
        ls.validate()?;
        Ok(ls)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seen.len() != self.compositions.len() {
            return Err(Error::Validation(
                "seen mask length differs from composition count".into(),
            ));
        }
        let mut pairs = std::collections::HashSet::new();
        for &(a, o) in &self.compositions {
            if a >= self.attributes.len() || o >= self.objects.len() {
                return Err(Error::Validation(format!(
                    "composition ({a}, {o}) out of range"
                )));
            }
            if !pairs.insert((a, o)) {
                return Err(Error::Validation(format!(
                    "duplicate composition {} {}",
                    self.attributes[a], self.objects[o]
                )));
            }
        }
        let mut attr_seen = vec![false; self.attributes.len()];
        let mut obj_seen = vec![false; self.objects.len()];
        for (&(a, o), &s) in self.compositions.iter().zip(&self.seen) {
            if s {
                attr_seen[a] = true;
                obj_seen[o] = true;
            }
        }
        if let Some(i) = attr_seen.iter().position(|&s| !s) {
            return Err(Error::Validation(format!(
                "attribute `{}` does not occur in any seen composition",
                self.attributes[i]
            )));
        }
        if let Some(i) = obj_seen.iter().position(|&s| !s) {
            return Err(Error::Validation(format!(
                "object `{}` does not occur in any seen composition",
                self.objects[i]
            )));
        }
        Ok(())
    }

    pub fn n_attrs(&self) -> usize {
        self.attributes.len()
    }

    pub fn n_objs(&self) -> usize {
        self.objects.len()
    }

    pub fn n_comps(&self) -> usize {
        self.compositions.len()
    }

    pub fn n_seen(&self) -> usize {
        self.seen.iter().filter(|&&s| s).count()
    }

    pub fn n_unseen(&self) -> usize {
        self.n_comps() - self.n_seen()
    }

    pub fn composition_index(&self, attr: usize, obj: usize) -> Option<usize> {
        self.compositions.iter().position(|&p| p == (attr, obj))
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a == name)
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o == name)
    }

    pub fn composition_name(&self, c: usize) -> String {
        let (a, o) = self.compositions[c];
        format!("{} {}", self.attributes[a], self.objects[o])
    }

    /// Errors unless at least one unseen composition exists.
    pub fn require_unseen(&self) -> Result<()> {
        if self.n_unseen() == 0 {
            return Err(Error::Validation(
                "label space has no unseen compositions".into(),
            ));
        }
        Ok(())
    }

    /// Lookup from (attribute name, object name) to composition index.
    pub(crate) fn pair_lookup(&self) -> HashMap<(&str, &str), usize> {
        self.compositions
            .iter()
            .enumerate()
            .map(|(i, &(a, o))| ((self.attributes[a].as_str(), self.objects[o].as_str()), i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn rejects_primitive_only_in_unseen() {
        let err = LabelSpace::new(
            names(&["blue", "red"]),
            names(&["hat"]),
            vec![(0, 0), (1, 0)],
            vec![true, false],
        )
        .unwrap_err();
        assert!(err.to_string().contains("red"), "{err}");
    }

    #[test]
    fn rejects_duplicates_and_out_of_range() {
        assert!(LabelSpace::new(
            names(&["a"]),
            names(&["o"]),
            vec![(0, 0), (0, 0)],
            vec![true, true]
        )
        .is_err());
        assert!(LabelSpace::new(names(&["a"]), names(&["o"]), vec![(0, 1)], vec![true]).is_err());
    }

    #[test]
    fn counts() {
        let ls = LabelSpace::new(
            names(&["blue", "red"]),
            names(&["hat", "shoe"]),
            vec![(0, 0), (1, 0), (1, 1), (0, 1)],
            vec![true, true, true, false],
        )
        .unwrap();
        assert_eq!(ls.n_seen(), 3);
        assert_eq!(ls.n_unseen(), 1);
        assert_eq!(ls.composition_index(1, 1), Some(2));
        assert_eq!(ls.composition_name(3), "blue shoe");
        assert!(ls.require_unseen().is_ok());
    }
}
