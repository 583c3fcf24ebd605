//! Seven-segment digit glyphs drawn over tiled backgrounds, one shade per
//! segment.
//!
//! Each image is a pure function of `(seed, split, index)`. Pixel values are
//! multiples of 1/255, so writing to an 8-bit format and reading back is
//! lossless.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_idx_images, write_idx_labels, Dataset, DatasetSplits};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::{Image, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlyphStyle {
    /// 28×28 single channel.
    Gray28,
    /// 32×32 RGB.
    Color32,
}

impl GlyphStyle {
    pub fn shape(self) -> Shape {
        match self {
            GlyphStyle::Gray28 => Shape::new(28, 28, 1),
            GlyphStyle::Color32 => Shape::new(32, 32, 3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub style: GlyphStyle,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            style: GlyphStyle::Gray28,
            train_count: 6000,
            test_count: 1000,
            seed: 0,
        }
    }
}

// a b c d e f g
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

fn q(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn color(rng: &mut ChaCha8Rng, channels: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..channels).map(|_| rng.random_range(lo..hi)).collect()
}

/// Sorted cut positions splitting `extent` into `parts` roughly equal spans.
fn cuts(rng: &mut ChaCha8Rng, extent: i64, parts: i64) -> Vec<i64> {
    (1..parts).map(|k| k * extent / parts + rng.random_range(-2..=2)).collect()
}

fn glyph(label: usize, style: GlyphStyle, rng: &mut ChaCha8Rng) -> Image {
    let shape = style.shape();
    let (h, w, ch) = (shape.height as i64, shape.width as i64, shape.channels);

    // background: a patchwork of dark tiles, each distinct from its left
    // and upper neighbours
    let (rows, cols) = (rng.random_range(3..=4), rng.random_range(3..=4));
    let (row_cuts, col_cuts) = (cuts(rng, h, rows), cuts(rng, w, cols));
    let mut tiles: Vec<Vec<f64>> = Vec::with_capacity((rows * cols) as usize);
    for r in 0..rows {
        for c in 0..cols {
            let neighbours: Vec<usize> = [(r > 0).then(|| ((r - 1) * cols + c) as usize), (c > 0).then(|| (r * cols + c - 1) as usize)]
                .into_iter()
                .flatten()
                .collect();
            let tile = loop {
                let t = color(rng, ch, 0.0, 0.4);
                let distinct = neighbours
                    .iter()
                    .all(|&n| tiles[n].iter().zip(&t).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) > 0.08);
                if distinct {
                    break t;
                }
            };
            tiles.push(tile);
        }
    }

    let gh = rng.random_range(h * 9 / 16..=h * 11 / 16);
    let gw = rng.random_range(w * 6 / 16..=w * 8 / 16);
    let t = rng.random_range(2..=3_i64);
    let top = rng.random_range(2..=h - gh - 2);
    let left = rng.random_range(2..=w - gw - 2);
    let ink = if ch == 1 {
        vec![1.0]
    } else {
        let mut c = color(rng, 3, 0.3, 0.7);
        c[rng.random_range(0..3)] = rng.random_range(0.85..1.0);
        c
    };
    // every segment gets its own brightness so segments are separate regions
    let mut levels: Vec<f64> = (0..7).map(|i| 0.7 + 0.05 * i as f64).collect();
    levels.shuffle(rng);
    let mid = top + gh / 2 - t / 2;
    let segs = SEGMENTS[label];
    // rectangles (y0, x0, y1, x1), half-open
    let rects = [
        (top, left, top + t, left + gw),
        (top, left + gw - t, mid + t, left + gw),
        (mid, left + gw - t, top + gh, left + gw),
        (top + gh - t, left, top + gh, left + gw),
        (mid, left, top + gh, left + t),
        (top, left, mid + t, left + t),
        (mid, left, mid + t, left + gw),
    ];
    let jitter: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(-0.006..0.006)).collect();
    Image::from_fn(shape, |y, x, c| {
        let (yi, xi) = (y as i64, x as i64);
        let seg = rects
            .iter()
            .zip(segs)
            .position(|(&(y0, x0, y1, x1), s)| s && yi >= y0 && yi < y1 && xi >= x0 && xi < x1);
        let base = match seg {
            Some(s) => ink[c] * levels[s],
            None => {
                let r = row_cuts.iter().filter(|k| yi >= **k).count();
                let k = col_cuts.iter().filter(|k| xi >= **k).count();
                tiles[r * cols as usize + k][c]
            }
        };
        q(base + jitter[(y * shape.width + x) * ch + c])
    })
}

fn split(cfg: &SyntheticConfig, name: &str, count: usize) -> Result<Dataset> {
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("glyph/{name}/{i}")));
        let label = rng.random_range(0..10);
        images.push(glyph(label, cfg.style, &mut rng));
        labels.push(label);
    }
    Dataset::new(cfg.style.shape(), 10, images, labels)
}

/// Generates train and test splits of ten-class digit glyphs.
pub fn synthetic_digits(cfg: &SyntheticConfig) -> Result<DatasetSplits> {
    Ok(DatasetSplits {
        train: split(cfg, "train", cfg.train_count)?,
        test: split(cfg, "test", cfg.test_count)?,
    })
}

/// Writes a grayscale synthetic dataset as the four idx files read by
/// [`crate::data::ingest_dataset`].
pub fn write_synthetic_idx(dir: &Path, cfg: &SyntheticConfig) -> Result<DatasetSplits> {
    if cfg.style != GlyphStyle::Gray28 {
        return Err(Error::Unsupported("idx output needs single-channel glyphs".into()));
    }
    let splits = synthetic_digits(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (prefix, d) in [("train", &splits.train), ("t10k", &splits.test)] {
        write_idx_images(&dir.join(format!("{prefix}-images-idx3-ubyte")), d.images())?;
        write_idx_labels(&dir.join(format!("{prefix}-labels-idx1-ubyte")), d.labels())?;
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ingest_dataset, DatasetFormat};

    #[test]
    fn reproducible_and_independent_of_count() {
        let a = synthetic_digits(&SyntheticConfig { train_count: 5, test_count: 2, ..Default::default() }).unwrap();
        let b = synthetic_digits(&SyntheticConfig { train_count: 9, test_count: 2, ..Default::default() }).unwrap();
        assert_eq!(a.train.images(), &b.train.images()[..5]);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn idx_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig { train_count: 12, test_count: 4, ..Default::default() };
        let written = write_synthetic_idx(dir.path(), &cfg).unwrap();
        let read = ingest_dataset(dir.path(), DatasetFormat::Idx).unwrap();
        assert_eq!(read.train.images(), written.train.images());
        assert_eq!(read.test.labels(), written.test.labels());
    }

    #[test]
    fn colour_variant_has_three_channels() {
        let cfg = SyntheticConfig { style: GlyphStyle::Color32, train_count: 3, test_count: 1, seed: 4 };
        let d = synthetic_digits(&cfg).unwrap();
        assert_eq!(d.train.shape(), Shape::new(32, 32, 3));
    }
}
