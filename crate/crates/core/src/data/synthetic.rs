//! Procedural attribute/object images: attributes are fill styles (solid
//! colours and black/white textures), objects are shapes.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Record, MANIFEST_HEADER};
use super::Split;
use crate::error::{Error, Result};
use crate::kernels::{map_indexed, Exec};
use crate::splitmix;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Fill {
    Solid([f64; 3]),
    HStripes,
    VStripes,
    Diagonal,
    Checker,
    Dots,
}

/// Attribute names in the order they are assigned.
pub const ATTRIBUTE_STYLES: [&str; 16] = [
    "red",
    "green",
    "blue",
    "striped",
    "yellow",
    "checkered",
    "magenta",
    "cyan",
    "dotted",
    "orange",
    "purple",
    "pinstriped",
    "white",
    "diagonal",
    "pink",
    "olive",
];

/// Object names in the order they are assigned.
pub const OBJECT_SHAPES: [&str; 12] = [
    "circle", "square", "triangle", "cross", "star", "ring", "diamond", "hexagon", "ellipse",
    "crescent", "heart", "arrow",
];

fn fill_for(name: &str, index: usize) -> Fill {
    match name {
        "red" => Fill::Solid([0.9, 0.1, 0.1]),
        "green" => Fill::Solid([0.1, 0.8, 0.2]),
        "blue" => Fill::Solid([0.15, 0.25, 0.95]),
        "yellow" => Fill::Solid([0.95, 0.9, 0.1]),
        "magenta" => Fill::Solid([0.9, 0.1, 0.85]),
        "cyan" => Fill::Solid([0.1, 0.9, 0.9]),
        "orange" => Fill::Solid([1.0, 0.55, 0.05]),
        "purple" => Fill::Solid([0.5, 0.15, 0.7]),
        "white" => Fill::Solid([0.97, 0.97, 0.97]),
        "pink" => Fill::Solid([1.0, 0.6, 0.75]),
        "olive" => Fill::Solid([0.5, 0.5, 0.1]),
        "striped" => Fill::HStripes,
        "pinstriped" => Fill::VStripes,
        "diagonal" => Fill::Diagonal,
        "checkered" => Fill::Checker,
        "dotted" => Fill::Dots,
        _ => {
            // Extra attributes: evenly spaced hues.
            let hue = (index as f64 * 0.381_966) % 1.0;
            Fill::Solid(hsv(hue, 0.85, 0.9))
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn attribute_name(i: usize) -> String {
    ATTRIBUTE_STYLES
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("hue{i:02}"))
}

fn object_name(i: usize) -> String {
    OBJECT_SHAPES
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("polygon{:02}", i - OBJECT_SHAPES.len() + 7))
}

fn in_polygon(u: f64, v: f64, pts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn regular(n: usize, r_outer: f64, r_inner: Option<f64>) -> Vec<(f64, f64)> {
    let steps = if r_inner.is_some() { 2 * n } else { n };
    (0..steps)
        .map(|k| {
            let a = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::TAU / steps as f64;
            let r = match r_inner {
                Some(ri) if k % 2 == 1 => ri,
                _ => r_outer,
            };
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

/// Whether the local point (u, v) ∈ [-1, 1]² lies inside shape `name`.
fn inside_shape(name: &str, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match name {
        "circle" => r2 <= 1.0,
        "square" => u.abs() <= 0.8 && v.abs() <= 0.8,
        "triangle" => v <= 0.8 && u.abs() <= (v + 0.95) / 1.75,
        "cross" => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        "star" => in_polygon(u, v, &regular(5, 1.0, Some(0.42))),
        "ring" => (0.3..=1.0).contains(&r2),
        "diamond" => u.abs() + v.abs() <= 1.0,
        "hexagon" => in_polygon(u, v, &regular(6, 1.0, None)),
        "ellipse" => u * u + (v / 0.5) * (v / 0.5) <= 1.0,
        "crescent" => r2 <= 1.0 && (u - 0.45).powi(2) + (v + 0.1).powi(2) > 0.7,
        "heart" => {
            let (x, y) = (u * 1.2, -v * 1.2 + 0.2);
            (x * x + y * y - 1.0).powi(3) - x * x * y.powi(3) <= 0.0
        }
        "arrow" => {
            let pts = [
                (-1.0, -0.25),
                (0.2, -0.25),
                (0.2, -0.7),
                (1.0, 0.0),
                (0.2, 0.7),
                (0.2, 0.25),
                (-1.0, 0.25),
            ];
            in_polygon(u, v, &pts)
        }
        other => {
            let n: usize = other.trim_start_matches("polygon").parse().unwrap_or(7);
            in_polygon(u, v, &regular(n, 1.0, None))
        }
    }
}

fn fill_color(fill: Fill, x: usize, y: usize, period: usize) -> [f64; 3] {
    const ON: [f64; 3] = [0.95, 0.95, 0.95];
    const OFF: [f64; 3] = [0.05, 0.05, 0.05];
    let half = (period / 2).max(1);
    let pick = |on: bool| if on { ON } else { OFF };
    match fill {
        Fill::Solid(c) => c,
        Fill::HStripes => pick((y / half).is_multiple_of(2)),
        Fill::VStripes => pick((x / half).is_multiple_of(2)),
        Fill::Diagonal => pick(((x + y) / half).is_multiple_of(2)),
        Fill::Checker => pick(((x / half) + (y / half)).is_multiple_of(2)),
        Fill::Dots => {
            let (cx, cy) = (x % period, y % period);
            let d = (cx as f64 - half as f64).powi(2) + (cy as f64 - half as f64).powi(2);
            pick(d <= (half as f64 * 0.6).powi(2))
        }
    }
}

/// Renders one image of `attribute` × `object` using `rng` for jitter and
/// noise.
pub fn render_image(
    attribute: &str,
    attr_index: usize,
    object: &str,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> RgbImage {
    let fill = fill_for(attribute, attr_index);
    let period = (size / 8).max(2);
    let s = size as f64;
    let radius = s * rng.random_range(0.26..0.38);
    let cx = s / 2.0 + s * rng.random_range(-0.12..0.12);
    let cy = s / 2.0 + s * rng.random_range(-0.12..0.12);
    let background: f64 = rng.random_range(0.2..0.4);
    let noise = Normal::new(0.0, 0.03).unwrap();

    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5 - cx) / radius;
            let v = (y as f64 + 0.5 - cy) / radius;
            let base = if inside_shape(object, u, v) {
                fill_color(fill, x, y, period)
            } else {
                [background; 3]
            };
            let mut px = [0u8; 3];
            for c in 0..3 {
                let val: f64 = base[c] + noise.sample(rng);
                px[c] = (val.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_attrs: usize,
    pub n_objs: usize,
    pub seen_fraction: f64,
    pub images_per_pair: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn n_seen(&self) -> usize {
        ((self.n_attrs * self.n_objs) as f64 * self.seen_fraction).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.n_attrs < 2 || self.n_objs < 2 {
            return Err(Error::Config(
                "need at least 2 attributes and 2 objects".into(),
            ));
        }
        if self.image_size < 32 {
            return Err(Error::Config("image_size must be at least 32".into()));
        }
        if !(self.seen_fraction > 0.0 && self.seen_fraction <= 1.0) {
            return Err(Error::Config("seen_fraction must lie in (0, 1]".into()));
        }
        if self.images_per_pair == 0 {
            return Err(Error::Config("images_per_pair must be positive".into()));
        }
        let total = self.n_attrs * self.n_objs;
        let n_seen = self.n_seen();
        if n_seen >= total {
            return Err(Error::Config(format!(
                "seen_fraction {} leaves no unseen pair out of {total}",
                self.seen_fraction
            )));
        }
        if n_seen < self.n_attrs.max(self.n_objs) {
            return Err(Error::Config(format!(
                "{n_seen} seen pairs cannot cover {} attributes and {} objects",
                self.n_attrs, self.n_objs
            )));
        }
        Ok(())
    }

    /// Test images per pair (seen and unseen alike).
    pub fn test_per_pair(&self) -> usize {
        self.images_per_pair.div_ceil(2)
    }

    /// Validation images per pair (seen and unseen alike).
    pub fn val_per_pair(&self) -> usize {
        self.images_per_pair.div_ceil(4)
    }
}

/// Chooses the seen pairs: a random subset of the requested size in which
/// every attribute and object occurs.
fn choose_seen(cfg: &SyntheticConfig) -> Result<Vec<bool>> {
    let total = cfg.n_attrs * cfg.n_objs;
    let n_seen = cfg.n_seen();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed));
    let mut order: Vec<usize> = (0..total).collect();
    for _ in 0..1000 {
        order.shuffle(&mut rng);
        let mut seen = vec![false; total];
        for &p in &order[..n_seen] {
            seen[p] = true;
        }
        let covered = (0..cfg.n_attrs).all(|a| (0..cfg.n_objs).any(|o| seen[a * cfg.n_objs + o]))
            && (0..cfg.n_objs).all(|o| (0..cfg.n_attrs).any(|a| seen[a * cfg.n_objs + o]));
        if covered {
            return Ok(seen);
        }
    }
    Err(Error::Config(format!(
        "no seen subset of size {n_seen} covering all primitives found in 1000 attempts"
    )))
}

/// Generates a synthetic dataset under `out_dir`: PNG images plus
/// `manifest.tsv`. Output is a pure function of `cfg`.
pub fn generate_synthetic(cfg: &SyntheticConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let seen = choose_seen(cfg)?;
    let attrs: Vec<String> = (0..cfg.n_attrs).map(attribute_name).collect();
    let objs: Vec<String> = (0..cfg.n_objs).map(object_name).collect();

    // (split, attr, obj)
    let mut plan: Vec<(Split, usize, usize)> = Vec::new();
    for (split, per_pair) in [
        (Split::Train, cfg.images_per_pair),
        (Split::Val, cfg.val_per_pair()),
        (Split::Test, cfg.test_per_pair()),
    ] {
        for a in 0..cfg.n_attrs {
            for o in 0..cfg.n_objs {
                if split == Split::Train && !seen[a * cfg.n_objs + o] {
                    continue;
                }
                plan.extend(std::iter::repeat_n((split, a, o), per_pair));
            }
        }
    }

    for split in [Split::Train, Split::Val, Split::Test] {
        let dir = out_dir.join("images").join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let rel_path = |i: usize| -> PathBuf {
        let (split, a, o) = plan[i];
        PathBuf::from(format!(
            "images/{}/{i:06}_{}_{}.png",
            split, attrs[a], objs[o]
        ))
    };

    let written = map_indexed(Exec::default(), plan.len(), |i| -> Result<()> {
        let (_, a, o) = plan[i];
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ splitmix(i as u64 + 1)));
        let img = render_image(&attrs[a], a, &objs[o], cfg.image_size, &mut rng);
        let path = out_dir.join(rel_path(i));
        img.save(&path)
            .map_err(|e| Error::Image { path, source: e })
    });
    written.into_iter().collect::<Result<()>>()?;

    let records = plan
        .iter()
        .enumerate()
        .map(|(i, &(split, a, o))| Record {
            split,
            attribute: attrs[a].clone(),
            object: objs[o].clone(),
            image: rel_path(i),
        })
        .collect();
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
    };
    debug_assert!(manifest.to_tsv().starts_with(MANIFEST_HEADER));
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
