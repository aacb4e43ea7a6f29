use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use super::{LabelSpace, Split};
use crate::error::{Error, Result};
use crate::kernels::{map_indexed, Exec};

pub const MANIFEST_HEADER: &str = "split\tattribute\tobject\timage";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub split: Split,
    pub attribute: String,
    pub object: String,
    /// Relative to the manifest's directory.
    pub image: PathBuf,
}

/// A list of labelled image records rooted at a directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.split,
                r.attribute,
                r.object,
                r.image.to_string_lossy().replace('\\', "/")
            ));
        }
        out
    }

    /// Parses TSV text; `root` is the directory image paths are relative to.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end_matches('\r') == MANIFEST_HEADER => {}
            _ => {
                return Err(Error::Validation(format!(
                    "manifest must start with header `{}`",
                    MANIFEST_HEADER.replace('\t', "\\t")
                )))
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 || fields.iter().any(|f| f.is_empty()) {
                return Err(Error::Validation(format!(
                    "malformed manifest line {}: expected 4 tab-separated fields",
                    i + 1
                )));
            }
            records.push(Record {
                split: fields[0]
                    .parse()
                    .map_err(|e| Error::Validation(format!("manifest line {}: {e}", i + 1)))?,
                attribute: fields[1].to_string(),
                object: fields[2].to_string(),
                image: PathBuf::from(fields[3]),
            });
        }
        Ok(DatasetManifest {
            root: root.into(),
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.records_in(split).next().is_some()
    }

    /// Label space implied by the records: compositions are all pairs in any
    /// split, seen pairs are those occurring in train, primitives are sorted
    /// lexicographically.
    pub fn label_space(&self) -> Result<LabelSpace> {
        let attrs: BTreeSet<&str> = self.records.iter().map(|r| r.attribute.as_str()).collect();
        let objs: BTreeSet<&str> = self.records.iter().map(|r| r.object.as_str()).collect();
        let attributes: Vec<String> = attrs.iter().map(|s| s.to_string()).collect();
        let objects: Vec<String> = objs.iter().map(|s| s.to_string()).collect();
        let a_idx = |n: &str| attributes.iter().position(|a| a == n).unwrap();
        let o_idx = |n: &str| objects.iter().position(|o| o == n).unwrap();

        let pairs: BTreeSet<(usize, usize)> = self
            .records
            .iter()
            .map(|r| (a_idx(&r.attribute), o_idx(&r.object)))
            .collect();
        let seen_pairs: BTreeSet<(usize, usize)> = self
            .records_in(Split::Train)
            .map(|r| (a_idx(&r.attribute), o_idx(&r.object)))
            .collect();
        let compositions: Vec<(usize, usize)> = pairs.into_iter().collect();
        let seen = compositions
            .iter()
            .map(|p| seen_pairs.contains(p))
            .collect();
        LabelSpace::new(attributes, objects, compositions, seen)
    }
}

/// Reads and validates a manifest, deriving its label space.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<(LabelSpace, DatasetManifest)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = DatasetManifest::parse(&text, root)?;
    for r in &manifest.records {
        let p = manifest.root.join(&r.image);
        if !p.is_file() {
            return Err(Error::Validation(format!(
                "missing image file {}",
                p.display()
            )));
        }
    }
    let ls = manifest.label_space()?;
    Ok((ls, manifest))
}

/// One decoded example.
#[derive(Clone, Debug)]
pub struct Sample {
    /// 3×H×W, values in [0, 1].
    pub image: Array3<f64>,
    pub attribute: usize,
    pub object: usize,
    pub composition: usize,
}

fn decode_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Decodes every record of `split`, in manifest order.
pub fn load_samples(
    manifest: &DatasetManifest,
    ls: &LabelSpace,
    split: Split,
) -> Result<Vec<Sample>> {
    let lookup = ls.pair_lookup();
    let records: Vec<&Record> = manifest.records_in(split).collect();
    let mut labels = Vec::with_capacity(records.len());
    for r in &records {
        let comp = *lookup
            .get(&(r.attribute.as_str(), r.object.as_str()))
            .ok_or_else(|| {
                Error::Validation(format!(
                    "pair {} {} not in label space",
                    r.attribute, r.object
                ))
            })?;
        labels.push(comp);
    }
    let decoded = map_indexed(Exec::default(), records.len(), |i| {
        decode_png(&manifest.root.join(&records[i].image))
    });
    let mut samples = Vec::with_capacity(records.len());
    let mut size = None;
    for (img, comp) in decoded.into_iter().zip(labels) {
        let image = img?;
        let dim = image.dim();
        if *size.get_or_insert(dim) != dim {
            return Err(Error::Shape(format!(
                "images in split {split} differ in size"
            )));
        }
        let (a, o) = ls.compositions[comp];
        samples.push(Sample {
            image,
            attribute: a,
            object: o,
            composition: comp,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(split: Split, a: &str, o: &str, img: &str) -> Record {
        Record {
            split,
            attribute: a.into(),
            object: o.into(),
            image: img.into(),
        }
    }

    #[test]
    fn three_line_manifest_label_space() {
        let text = "split\tattribute\tobject\timage\n\
                    train\tred\that\ta.png\n\
                    train\tblue\tshoe\tb.png\n\
                    test\tred\tshoe\tc.png\n";
        let m = DatasetManifest::parse(text, "/tmp").unwrap();
        let ls = m.label_space().unwrap();
        assert_eq!(ls.attributes, vec!["blue", "red"]);
        assert_eq!(ls.objects, vec!["hat", "shoe"]);
        // sorted pairs: (blue,shoe)=(0,1), (red,hat)=(1,0), (red,shoe)=(1,1)
        assert_eq!(ls.compositions, vec![(0, 1), (1, 0), (1, 1)]);
        assert_eq!(ls.seen, vec![true, true, false]);
        assert_eq!(ls.n_comps(), 3);
        assert_eq!(ls.n_seen(), 2);
    }

    #[test]
    fn test_only_attribute_is_rejected() {
        let m = DatasetManifest {
            root: "/tmp".into(),
            records: vec![
                rec(Split::Train, "red", "hat", "a.png"),
                rec(Split::Test, "green", "hat", "b.png"),
            ],
        };
        let err = m.label_space().unwrap_err();
        assert!(err.to_string().contains("green"), "{err}");
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(DatasetManifest::parse("nope\n", ".").is_err());
        let bad = "split\tattribute\tobject\timage\ntrain\tred\that\n";
        let err = DatasetManifest::parse(bad, ".").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let bad_split = "split\tattribute\tobject\timage\nholdout\tred\that\tx.png\n";
        assert!(DatasetManifest::parse(bad_split, ".").is_err());
    }

    #[test]
    fn missing_image_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        fs::write(
            &path,
            "split\tattribute\tobject\timage\ntrain\tred\that\tnothere.png\n",
        )
        .unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("nothere.png"), "{err}");
    }

    #[test]
    fn ut_zappos_shaped_manifest() {
        // 16 attributes x 12 objects; each attribute/object covered by train.
        let mut records = Vec::new();
        for a in 0..16 {
            for o in 0..12 {
                let split = if (a + o) % 3 == 0 {
                    Split::Test
                } else {
                    Split::Train
                };
                records.push(rec(
                    split,
                    &format!("attr{a:02}"),
                    &format!("obj{o:02}"),
                    "x.png",
                ));
            }
        }
        let m = DatasetManifest {
            root: ".".into(),
            records,
        };
        let ls = m.label_space().unwrap();
        assert_eq!((ls.n_attrs(), ls.n_objs(), ls.n_comps()), (16, 12, 192));
        assert_eq!(ls.n_unseen(), 64);
    }
}
