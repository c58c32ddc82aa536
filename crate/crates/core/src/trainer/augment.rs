//! Training-time augmentation.
//!
//! Geometric transforms (flips, quarter turns) move image and label planes
//! together; photometric ones touch the image only and keep it in `[0,1]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip: bool,
    pub rotate: bool,
    pub gaussian_blur: bool,
    pub median_blur: bool,
    pub colour_jitter: bool,
    /// Chance that each enabled photometric transform fires.
    pub photometric_probability: f64,
    /// Largest brightness shift and contrast change per channel.
    pub jitter: f64,
    pub blur_sigma: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip: true,
            rotate: true,
            gaussian_blur: true,
            median_blur: true,
            colour_jitter: true,
            photometric_probability: 0.5,
            jitter: 0.15,
            blur_sigma: [0.3, 1.0],
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flip: false,
            rotate: false,
            gaussian_blur: false,
            median_blur: false,
            colour_jitter: false,
            ..AugmentConfig::default()
        }
    }
}

/// Horizontal flip, then vertical flip, then counter-clockwise quarter turns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Geometric {
    pub flip_h: bool,
    pub flip_v: bool,
    pub quarter_turns: u8,
}

impl Geometric {
    pub fn is_identity(&self) -> bool {
        !self.flip_h && !self.flip_v && self.quarter_turns % 4 == 0
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Transforms one row-major `h×w` plane.
    pub fn apply<T: Copy>(&self, plane: &[T], h: usize, w: usize) -> Vec<T> {
        debug_assert_eq!(plane.len(), h * w);
        let mut cur = plane.to_vec();
        if self.flip_h {
            for row in cur.chunks_mut(w) {
                row.reverse();
            }
        }
        if self.flip_v {
            cur = (0..h).rev().flat_map(|r| cur[r * w..(r + 1) * w].to_vec()).collect();
        }
        let (mut ch, mut cw) = (h, w);
        for _ in 0..self.quarter_turns % 4 {
            // counter-clockwise: out[r][c] = in[c][cw-1-r], out is cw×ch
            let mut out = Vec::with_capacity(cur.len());
            for r in 0..cw {
                for c in 0..ch {
                    out.push(cur[c * cw + (cw - 1 - r)]);
                }
            }
            cur = out;
            std::mem::swap(&mut ch, &mut cw);
        }
        cur
    }

    /// Transforms every channel of a `[C,H,W]` image.
    pub fn apply_image(&self, image: &Tensor<f32>) -> Tensor<f32> {
        let (c, h, w) = chw(image);
        let (oh, ow) = self.output_dims(h, w);
        let data = image.data().chunks(h * w).flat_map(|p| self.apply(p, h, w)).collect();
        Tensor::new(vec![c, oh, ow], data).expect("same element count")
    }

    pub fn draw(rng: &mut ChaCha8Rng, config: &AugmentConfig) -> Geometric {
        let mut g = Geometric::default();
        if config.flip {
            g.flip_h = rng.random_bool(0.5);
            g.flip_v = rng.random_bool(0.5);
        }
        if config.rotate {
            g.quarter_turns = rng.random_range(0..4);
        }
        g
    }
}

fn chw(image: &Tensor<f32>) -> (usize, usize, usize) {
    match *image.shape() {
        [c, h, w] => (c, h, w),
        ref s => panic!("expected a [C,H,W] image, got {s:?}"),
    }
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Separable 3-tap Gaussian with replicated borders.
pub fn gaussian_blur3(image: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    let (c, h, w) = chw(image);
    let side = (-1.0 / (2.0 * sigma * sigma)).exp();
    let norm = 1.0 + 2.0 * side;
    let k = [side / norm, 1.0 / norm, side / norm];
    let src = image.data();
    let mut tmp = vec![0.0f64; src.len()];
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for r in 0..h {
            for col in 0..w {
                tmp[base + r * w + col] = (0..3)
                    .map(|t| k[t] * src[base + r * w + clamp_index(col as isize + t as isize - 1, w)] as f64)
                    .sum();
            }
        }
        for r in 0..h {
            for col in 0..w {
                let v: f64 = (0..3)
                    .map(|t| k[t] * tmp[base + clamp_index(r as isize + t as isize - 1, h) * w + col])
                    .sum();
                out[base + r * w + col] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

/// 3×3 median per channel with replicated borders.
pub fn median_blur3(image: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = chw(image);
    let src = image.data();
    let mut out = vec![0.0f32; src.len()];
    let mut win = [0.0f32; 9];
    for ch in 0..c {
        let base = ch * h * w;
        for r in 0..h {
            for col in 0..w {
                let mut i = 0;
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let y = clamp_index(r as isize + dy, h);
                        let x = clamp_index(col as isize + dx, w);
                        win[i] = src[base + y * w + x];
                        i += 1;
                    }
                }
                win.sort_by(f32::total_cmp);
                out[base + r * w + col] = win[4];
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

/// Per channel: `(x − mean)·contrast + mean + brightness`, clamped to `[0,1]`.
pub fn colour_jitter(image: &Tensor<f32>, brightness: &[f64], contrast: &[f64]) -> Tensor<f32> {
    let (c, h, w) = chw(image);
    let mut out = image.data().to_vec();
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        let mean = plane.iter().map(|v| *v as f64).sum::<f64>() / (h * w).max(1) as f64;
        for v in plane.iter_mut() {
            *v = ((*v as f64 - mean) * contrast[ch] + mean + brightness[ch]).clamp(0.0, 1.0) as f32;
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

/// Photometric part of augmentation: blur, median, jitter in that order.
pub fn photometric(image: &Tensor<f32>, rng: &mut ChaCha8Rng, config: &AugmentConfig) -> Tensor<f32> {
    let p = config.photometric_probability;
    let mut img = image.clone();
    if config.gaussian_blur && rng.random_bool(p) {
        let [lo, hi] = config.blur_sigma;
        img = gaussian_blur3(&img, rng.random_range(lo..=hi));
    }
    if config.median_blur && rng.random_bool(p) {
        img = median_blur3(&img);
    }
    if config.colour_jitter && rng.random_bool(p) {
        let c = img.shape()[0];
        let j = config.jitter;
        let brightness: Vec<f64> = (0..c).map(|_| rng.random_range(-j..=j)).collect();
        let contrast: Vec<f64> = (0..c).map(|_| 1.0 + rng.random_range(-j..=j)).collect();
        img = colour_jitter(&img, &brightness, &contrast);
    }
    img
}
