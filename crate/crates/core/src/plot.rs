//! Minimal PNG plots. Every plot has a CSV with the plotted data next to
//! it, so nothing downstream depends on pixels.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::evaluation::WeightLog;
use crate::mfa::BRANCH_NAMES;

const SIZE: u32 = 480;
const MARGIN: u32 = 40;
const PALETTE: [[u8; 3]; 6] = [
    [214, 39, 40],
    [31, 119, 180],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

/// Axis-aligned plotting window in data coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Bounds {
    /// Smallest window holding all points, padded when degenerate.
    pub fn covering(points: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let (mut x, mut y) = (
            (f64::INFINITY, f64::NEG_INFINITY),
            (f64::INFINITY, f64::NEG_INFINITY),
        );
        for (px, py) in points {
            x = (x.0.min(px), x.1.max(px));
            y = (y.0.min(py), y.1.max(py));
        }
        let fix = |(lo, hi): (f64, f64)| {
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        Bounds {
            x: fix(x),
            y: fix(y),
        }
    }
}

struct Canvas {
    img: RgbImage,
    bounds: Bounds,
}

impl Canvas {
    fn new(bounds: Bounds) -> Self {
        let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
        let black = Rgb([0, 0, 0]);
        for t in MARGIN..=SIZE - MARGIN {
            img.put_pixel(t, SIZE - MARGIN, black);
            img.put_pixel(MARGIN, t, black);
        }
        Canvas { img, bounds }
    }

    fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        let span = (SIZE - 2 * MARGIN) as f64;
        let b = self.bounds;
        let px = MARGIN as f64 + (x - b.x.0) / (b.x.1 - b.x.0) * span;
        let py = (SIZE - MARGIN) as f64 - (y - b.y.0) / (b.y.1 - b.y.0) * span;
        (px, py)
    }

    fn dot(&mut self, px: f64, py: f64, r: i64, color: Rgb<u8>) {
        let (cx, cy) = (px.round() as i64, py.round() as i64);
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (cx + dx, cy + dy);
                if (0..SIZE as i64).contains(&x) && (0..SIZE as i64).contains(&y) {
                    self.img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
        let (pa, pb) = (self.to_px(a.0, a.1), self.to_px(b.0, b.1));
        let steps = ((pb.0 - pa.0).abs().max((pb.1 - pa.1).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            self.dot(pa.0 + t * (pb.0 - pa.0), pa.1 + t * (pb.1 - pa.1), 0, color);
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

fn color(i: usize) -> Rgb<u8> {
    Rgb(PALETTE[i % PALETTE.len()])
}

/// Scatter of (x, y, series) points.
pub fn scatter_png(points: &[(f64, f64, usize)], bounds: Bounds, path: &Path) -> Result<()> {
    let mut c = Canvas::new(bounds);
    for &(x, y, s) in points {
        let (px, py) = c.to_px(x, y);
        c.dot(px, py, 2, color(s));
    }
    c.save(path)
}

/// Polylines, one per series.
pub fn line_png(series: &[Vec<(f64, f64)>], path: &Path) -> Result<()> {
    let bounds = Bounds::covering(series.iter().flatten().copied());
    let mut c = Canvas::new(bounds);
    for (i, pts) in series.iter().enumerate() {
        for w in pts.windows(2) {
            c.segment(w[0], w[1], color(i));
        }
        for &(x, y) in pts {
            let (px, py) = c.to_px(x, y);
            c.dot(px, py, 2, color(i));
        }
    }
    c.save(path)
}

/// One scatter point per (sample, branch): weight of the lowest active
/// level against weight of the highest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightPoint {
    pub sample: usize,
    pub branch: usize,
    pub low: f64,
    pub high: f64,
}

pub fn weight_points(log: &WeightLog) -> Result<Vec<WeightPoint>> {
    let w = &log.weights;
    let (n, b, l) = w.dim();
    if n == 0 {
        return Err(Error::Validation("weight log is empty".into()));
    }
    Ok((0..n)
        .flat_map(|i| {
            (0..b).map(move |k| WeightPoint {
                sample: i,
                branch: k,
                low: w[[i, k, 0]],
                high: w[[i, k, l - 1]],
            })
        })
        .collect())
}

pub fn weight_points_csv(points: &[WeightPoint]) -> String {
    let mut out = String::from("sample,branch,low_level_weight,high_level_weight\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.sample, BRANCH_NAMES[p.branch], p.low, p.high
        ));
    }
    out
}

/// Writes `<stem>.png` and `<stem>.csv` for the weight scatter.
pub fn plot_weights(log: &WeightLog, dir: &Path, stem: &str) -> Result<Vec<WeightPoint>> {
    let pts = weight_points(log)?;
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv, weight_points_csv(&pts)).map_err(|e| Error::io(&csv, e))?;
    let xy: Vec<(f64, f64, usize)> = pts.iter().map(|p| (p.low, p.high, p.branch)).collect();
    let unit = Bounds {
        x: (0.0, 1.0),
        y: (0.0, 1.0),
    };
    scatter_png(&xy, unit, &dir.join(format!("{stem}.png")))?;
    Ok(pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn mean_log_points_sit_at_one_third() {
        let log = WeightLog {
            weights: Array3::from_elem((100, 3, 3), 1.0 / 3.0),
        };
        let pts = weight_points(&log).unwrap();
        assert_eq!(pts.len(), 300);
        assert!(pts
            .iter()
            .all(|p| p.low == 1.0 / 3.0 && p.high == 1.0 / 3.0));
        assert_eq!(weight_points_csv(&pts).lines().count(), 301);
    }

    #[test]
    fn empty_log_is_rejected() {
        let log = WeightLog {
            weights: Array3::zeros((0, 3, 3)),
        };
        assert!(weight_points(&log).is_err());
    }

    #[test]
    fn pngs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let log = WeightLog {
            weights: Array3::from_elem((4, 3, 2), 0.5),
        };
        plot_weights(&log, dir.path(), "w").unwrap();
        line_png(
            &[vec![(1.0, 0.2), (3.0, 0.4)], vec![(1.0, 0.1)]],
            &dir.path().join("l.png"),
        )
        .unwrap();
        let img = image::open(dir.path().join("w.png")).unwrap();
        assert_eq!(img.width(), SIZE);
        assert!(dir.path().join("l.png").exists());
    }

    #[test]
    fn degenerate_bounds_are_padded() {
        let b = Bounds::covering([(2.0, 5.0)]);
        assert_eq!(b.x, (1.5, 2.5));
        assert_eq!(Bounds::covering([]).y, (0.0, 1.0));
    }
}
