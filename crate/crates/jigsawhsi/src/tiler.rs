//! Tile extraction and dataset splitting: turns a reduced cube plus a
//! label raster into (S x S x c) training tiles centered on labeled
//! pixels, with stratified train/test partitioning and batch iteration.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::io::{HsiCube, LabelRaster};

#[derive(Debug, Error)]
pub enum TilerError {
    #[error("tile size must be odd, got {0}")]
    EvenTileSize(usize),
    #[error("no labeled pixels in raster")]
    NoLabeledPixels,
    #[error("cube is {ch}x{cw}, labels are {lh}x{lw}")]
    ShapeMismatch {
        ch: usize,
        cw: usize,
        lh: usize,
        lw: usize,
    },
    #[error("class {0} has no tiles")]
    EmptyClass(u16),
    #[error("train fraction must be in (0, 1), got {0}")]
    BadFraction(f64),
}

/// One (S x S x c) window, channels-last, centered on a labeled pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub data: Vec<f32>,
    pub center_row: usize,
    pub center_col: usize,
    pub label: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileSet {
    pub tiles: Vec<Tile>,
    pub tile_size: usize,
    pub channels: usize,
    pub num_classes: u16,
    /// Tile count per class; index 0 is unused (background never tiles).
    pub class_counts: Vec<usize>,
}

impl TileSet {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    fn from_tiles(
        tiles: Vec<Tile>,
        tile_size: usize,
        channels: usize,
        num_classes: u16,
    ) -> Self {
        let mut class_counts = vec![0usize; num_classes as usize + 1];
        for t in &tiles {
            class_counts[t.label as usize] += 1;
        }
        Self {
            tiles,
            tile_size,
            channels,
            num_classes,
            class_counts,
        }
    }
}

/// Copies the S x S window centered on (row, col) out of the cube,
/// channels-last, zero-filling cells that fall outside the raster.
pub fn extract_window(cube: &HsiCube, row: usize, col: usize, size: usize) -> Vec<f32> {
    let half = size / 2;
    let mut data = vec![0f32; size * size * cube.bands];
    for dy in 0..size {
        let src_row = row as isize + dy as isize - half as isize;
        if src_row < 0 || src_row >= cube.height as isize {
            continue;
        }
        for dx in 0..size {
            let src_col = col as isize + dx as isize - half as isize;
            if src_col < 0 || src_col >= cube.width as isize {
                continue;
            }
            let base = (dy * size + dx) * cube.bands;
            for b in 0..cube.bands {
                data[base + b] = cube.get(src_row as usize, src_col as usize, b);
            }
        }
    }
    data
}

/// One tile per labeled pixel, in row-major raster order.
pub fn build_dataset(
    cube: &HsiCube,
    labels: &LabelRaster,
    tile_size: usize,
) -> Result<TileSet, TilerError> {
    if tile_size % 2 == 0 {
        return Err(TilerError::EvenTileSize(tile_size));
    }
    if cube.height != labels.height || cube.width != labels.width {
        return Err(TilerError::ShapeMismatch {
            ch: cube.height,
            cw: cube.width,
            lh: labels.height,
            lw: labels.width,
        });
    }
    let mut tiles = Vec::new();
    for row in 0..cube.height {
        for col in 0..cube.width {
            let label = labels.get(row, col);
            if label == 0 {
                continue;
            }
            tiles.push(Tile {
                data: extract_window(cube, row, col, tile_size),
                center_row: row,
                center_col: col,
                label,
            });
        }
    }
    if tiles.is_empty() {
        return Err(TilerError::NoLabeledPixels);
    }
    Ok(TileSet::from_tiles(
        tiles,
        tile_size,
        cube.bands,
        labels.num_classes,
    ))
}

fn subset(ts: &TileSet, mut indices: Vec<usize>) -> TileSet {
    indices.sort_unstable();
    let tiles = indices.iter().map(|&i| ts.tiles[i].clone()).collect();
    TileSet::from_tiles(tiles, ts.tile_size, ts.channels, ts.num_classes)
}

/// Per class, ceil(train_frac * n_k) tiles drawn uniformly at random into
/// the train set; the remainder goes to test. Deterministic under seed.
pub fn stratified_split(
    ts: &TileSet,
    train_frac: f64,
    seed: u64,
) -> Result<(TileSet, TileSet), TilerError> {
    if !(0.0..1.0).contains(&train_frac) || train_frac == 0.0 {
        return Err(TilerError::BadFraction(train_frac));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class in 1..=ts.num_classes {
        let mut members: Vec<usize> = ts
            .tiles
            .iter()
            .enumerate()
            .filter(|(_, t)| t.label == class)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            return Err(TilerError::EmptyClass(class));
        }
        members.shuffle(&mut rng);
        let n_train = (train_frac * members.len() as f64).ceil() as usize;
        train_idx.extend_from_slice(&members[..n_train]);
        test_idx.extend_from_slice(&members[n_train..]);
    }
    Ok((subset(ts, train_idx), subset(ts, test_idx)))
}

/// Unstratified variant: one global shuffle, ceil(train_frac * n) to train.
pub fn random_split(
    ts: &TileSet,
    train_frac: f64,
    seed: u64,
) -> Result<(TileSet, TileSet), TilerError> {
    if !(0.0..1.0).contains(&train_frac) || train_frac == 0.0 {
        return Err(TilerError::BadFraction(train_frac));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..ts.len()).collect();
    indices.shuffle(&mut rng);
    let n_train = (train_frac * ts.len() as f64).ceil() as usize;
    Ok((
        subset(ts, indices[..n_train].to_vec()),
        subset(ts, indices[n_train..].to_vec()),
    ))
}

/// One-hot encoding of a 1-based label into a K-vector.
pub fn one_hot(label: u16, num_classes: u16) -> Vec<f32> {
    let mut v = vec![0f32; num_classes as usize];
    v[label as usize - 1] = 1.0;
    v
}

/// Deterministic per-(seed, epoch) shuffled batch index lists; the last
/// batch may be short.
pub fn batch_indices(count: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut indices: Vec<usize> = (0..count).collect();
    indices.shuffle(&mut rng);
    indices.chunks(batch_size).map(|c| c.to_vec()).collect()
}
