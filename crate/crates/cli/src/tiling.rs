//! Overlap-and-crop tiled inference.
//!
//! Tiles of side `T` are taken with stride `T − 2V`. Each tile contributes
//! only its centre, except along the image border where it also owns the
//! margin. When `V` is at least the model's receptive radius and tile
//! offsets stay aligned to the encoder's downsampling, the mosaic equals a
//! whole-image forward exactly.

use std::collections::BTreeMap;
use std::thread;

use cerberus::autodiff::Tensor;
use cerberus::model::ModelGraph;
use cerberus::{Error, Result};
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TileMode {
    Tiled,
    /// The tile did not fit, so the image went through in one piece.
    WholeImage,
}

/// One tile: its offset and the half-open output region it owns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TileSpan {
    pub offset: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TilePlan {
    pub mode: TileMode,
    pub tile: usize,
    pub overlap: usize,
    pub rows: Vec<TileSpan>,
    pub cols: Vec<TileSpan>,
    pub warnings: Vec<String>,
}

impl TilePlan {
    pub fn tile_count(&self) -> usize {
        self.rows.len() * self.cols.len()
    }
}

fn axis_spans(len: usize, tile: usize, overlap: usize) -> Vec<TileSpan> {
    let stride = tile - 2 * overlap;
    let mut offsets = Vec::new();
    let mut o = 0;
    while o + tile < len {
        offsets.push(o);
        o += stride;
    }
    offsets.push(len - tile);
    let last = offsets.len() - 1;
    let mut spans = Vec::with_capacity(offsets.len());
    let mut start = 0;
    for (i, &offset) in offsets.iter().enumerate() {
        let end = if i == last { len } else { offset + tile - overlap };
        spans.push(TileSpan { offset, start, end });
        start = end;
    }
    spans
}

/// Plans tiles over an `h×w` image. `align` is the factor every offset and
/// the tile side must be divisible by.
pub fn plan_tiles(h: usize, w: usize, tile: usize, overlap: usize, align: usize, receptive_radius: usize) -> Result<TilePlan> {
    if tile <= 2 * overlap {
        return Err(Error::InvalidArgument(format!("tile {tile} must exceed twice the overlap {overlap}")));
    }
    if h % align != 0 || w % align != 0 {
        return Err(Error::InvalidArgument(format!("image {h}x{w} is not a multiple of {align}")));
    }
    let mut warnings = Vec::new();
    if tile > h || tile > w {
        warnings.push(format!("tile {tile} exceeds image {h}x{w}; predicted the whole image at once"));
        return Ok(TilePlan {
            mode: TileMode::WholeImage,
            tile,
            overlap,
            rows: vec![TileSpan { offset: 0, start: 0, end: h }],
            cols: vec![TileSpan { offset: 0, start: 0, end: w }],
            warnings,
        });
    }
    let stride = tile - 2 * overlap;
    if tile % align != 0 || stride % align != 0 {
        return Err(Error::InvalidArgument(format!(
            "tile {tile} and stride {stride} must be multiples of {align}"
        )));
    }
    if overlap < receptive_radius {
        warnings.push(format!(
            "overlap {overlap} is below the receptive radius {receptive_radius}; predictions near tile seams may differ from a whole-image run"
        ));
    }
    Ok(TilePlan {
        mode: TileMode::Tiled,
        tile,
        overlap,
        rows: axis_spans(h, tile, overlap),
        cols: axis_spans(w, tile, overlap),
        warnings,
    })
}

fn crop(image: &Tensor<f32>, top: usize, left: usize, side: usize) -> Tensor<f32> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    let mut out = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        for r in top..top + side {
            let at = ch * h * w + r * w + left;
            out.extend_from_slice(&src[at..at + side]);
        }
    }
    Tensor::new(vec![1, c, side, side], out).expect("crop shape")
}

/// Worker count: `CERBERUS_THREADS` when set, else the available cores.
pub fn worker_count() -> usize {
    std::env::var("CERBERUS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Per-pixel softmax mosaics `[K,H,W]` of a `[3,H,W]` image.
pub fn predict_tiled(model: &ModelGraph, image: &Tensor<f32>, plan: &TilePlan, workers: usize) -> Result<BTreeMap<String, Tensor<f32>>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if plan.mode == TileMode::WholeImage {
        let x = Tensor::new(vec![1, 3, h, w], image.data().to_vec())?;
        return Ok(model
            .predict_all(&x)?
            .0
            .into_iter()
            .filter(|(_, v)| v.shape().len() == 4)
            .map(|(k, v)| (k, drop_batch(v)))
            .collect());
    }
    let tiles: Vec<(TileSpan, TileSpan)> = plan
        .rows
        .iter()
        .flat_map(|r| plan.cols.iter().map(move |c| (*r, *c)))
        .collect();
    let workers = workers.clamp(1, tiles.len());
    let per = tiles.len().div_ceil(workers);
    let results: Vec<Result<Vec<BTreeMap<String, Tensor<f32>>>>> = thread::scope(|s| {
        let handles: Vec<_> = tiles
            .chunks(per)
            .map(|chunk| {
                s.spawn(move || {
                    chunk
                        .iter()
                        .map(|(r, c)| model.predict_all(&crop(image, r.offset, c.offset, plan.tile)).map(|p| p.0))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("tile worker panicked")).collect()
    });
    let mut mosaics: BTreeMap<String, (usize, Vec<f32>)> = BTreeMap::new();
    let t = plan.tile;
    for ((r, c), probs) in tiles.iter().zip(results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten()) {
        for (task, p) in probs {
            if p.shape().len() != 4 {
                // image-level head
                continue;
            }
            let k = p.shape()[1];
            let (_, plane) = mosaics.entry(task).or_insert_with(|| (k, vec![0.0; k * h * w]));
            for ch in 0..k {
                for row in r.start..r.end {
                    let src = ch * t * t + (row - r.offset) * t + (c.start - c.offset);
                    let dst = ch * h * w + row * w + c.start;
                    let n = c.end - c.start;
                    plane[dst..dst + n].copy_from_slice(&p.data()[src..src + n]);
                }
            }
        }
    }
    mosaics
        .into_iter()
        .map(|(task, (k, data))| Ok((task, Tensor::new(vec![k, h, w], data)?)))
        .collect()
}

fn drop_batch(t: Tensor<f32>) -> Tensor<f32> {
    let shape = t.shape()[1..].to_vec();
    t.reshape(shape).expect("leading batch of one")
}
