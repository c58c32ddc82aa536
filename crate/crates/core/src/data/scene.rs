//! Synthetic aligned scenes: glands (ellipses) with optional lumina, nuclei
//! of K colour classes in the surrounding stroma, and a tissue label derived
//! from the content.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::instances::InstanceMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub min: usize,
    pub max: usize,
}

impl Range {
    pub const fn new(min: usize, max: usize) -> Self {
        Range { min, max }
    }

    fn draw(self, rng: &mut ChaCha8Rng) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueRule {
    /// Gland pixel fraction at or above which a scene is glandular.
    pub gland_fraction: f64,
    /// Nucleus count at or above which a non-glandular scene is cellular.
    pub min_nuclei: usize,
}

impl Default for TissueRule {
    fn default() -> Self {
        TissueRule {
            gland_fraction: 0.12,
            min_nuclei: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub glands: Range,
    /// Semi-axis range of gland ellipses, in pixels.
    pub gland_axes: Range,
    pub lumen_probability: f64,
    /// Lumen semi-axes as a percentage of the gland's.
    pub lumen_percent: Range,
    pub nuclei: Range,
    pub nucleus_radius: Range,
    pub nucleus_classes: usize,
    /// Background pixels required between any two objects.
    pub min_gap: usize,
    pub tissue: TissueRule,
    pub max_attempts: usize,
    pub seed: u64,
    pub patient: u32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            glands: Range::new(0, 2),
            gland_axes: Range::new(7, 12),
            lumen_probability: 0.8,
            lumen_percent: Range::new(35, 55),
            nuclei: Range::new(0, 12),
            nucleus_radius: Range::new(3, 4),
            nucleus_classes: 3,
            min_gap: 2,
            tissue: TissueRule::default(),
            max_attempts: 400,
            seed: 0,
            patient: 0,
        }
    }
}

impl SceneSpec {
    /// Spec with every object count set to zero.
    pub fn empty(height: usize, width: usize) -> Self {
        SceneSpec {
            height,
            width,
            glands: Range::new(0, 0),
            nuclei: Range::new(0, 0),
            ..SceneSpec::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("scene spec field `{field}`: {why}")));
        for (name, r) in [
            ("glands", self.glands),
            ("gland_axes", self.gland_axes),
            ("lumen_percent", self.lumen_percent),
            ("nuclei", self.nuclei),
            ("nucleus_radius", self.nucleus_radius),
        ] {
            if r.min > r.max {
                return bad(name, "min exceeds max");
            }
        }
        if self.height < 8 || self.width < 8 {
            return bad("height", "canvas must be at least 8×8");
        }
        if !(0.0..=1.0).contains(&self.lumen_probability) {
            return bad("lumen_probability", "must lie in [0,1]");
        }
        if self.lumen_percent.max >= 100 {
            return bad("lumen_percent", "lumen must be smaller than its gland");
        }
        if self.nucleus_classes == 0 || self.nucleus_classes > NUCLEUS_COLOURS.len() {
            return bad("nucleus_classes", "supported range is 1..=3");
        }
        if self.nucleus_radius.min == 0 || self.gland_axes.min < 3 {
            return bad("nucleus_radius", "objects need a positive size");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tissue {
    Background = 0,
    Glandular = 1,
    Cellular = 2,
    Stroma = 3,
}

impl Tissue {
    pub const COUNT: usize = 4;

    pub fn from_index(i: u32) -> Option<Tissue> {
        [Tissue::Background, Tissue::Glandular, Tissue::Cellular, Tissue::Stroma]
            .get(i as usize)
            .copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `[3,H,W]`, values on the u8 grid k/255.
    pub image: Tensor<f32>,
    pub glands: InstanceMap,
    pub lumen: InstanceMap,
    /// Carries one class in `1..=K` per nucleus.
    pub nuclei: InstanceMap,
    pub tissue: Tissue,
    pub patient: u32,
}

const STROMA: [f32; 3] = [0.93, 0.78, 0.86];
const GLASS: [f32; 3] = [0.97, 0.97, 0.98];
const EPITHELIUM: [f32; 3] = [0.62, 0.38, 0.66];
const LUMEN: [f32; 3] = [0.99, 0.95, 0.97];
const NUCLEUS_COLOURS: [[f32; 3]; 3] = [[0.20, 0.18, 0.55], [0.55, 0.12, 0.40], [0.32, 0.30, 0.16]];
const NOISE: f32 = 0.05;

/// SplitMix64 finaliser; the counter-based noise source.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in [-1, 1) from a hashed counter.
fn unit_noise(seed: u64, counter: u64) -> f32 {
    let bits = splitmix64(seed ^ splitmix64(counter)) >> 40;
    (bits as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
}

/// Per-patient colour style: channel shifts and a brightness scale.
pub fn patient_style(patient: u32) -> ([f32; 3], f32) {
    let base = splitmix64(0x5354_594C_4500_0000 ^ patient as u64);
    let shift = [0, 1, 2].map(|c| 0.07 * unit_noise(base, c));
    (shift, 1.0 + 0.1 * unit_noise(base, 3))
}

struct Canvas {
    h: usize,
    w: usize,
    blocked: Vec<bool>,
    gap: usize,
}

impl Canvas {
    fn fits(&self, pixels: &[usize]) -> bool {
        pixels.iter().all(|&p| !self.blocked[p])
    }

    /// Marks the object and a `gap`-wide Chebyshev margin as blocked.
    fn claim(&mut self, pixels: &[usize]) {
        let g = self.gap as isize;
        for &p in pixels {
            let (r, c) = ((p / self.w) as isize, (p % self.w) as isize);
            for dy in -g..=g {
                for dx in -g..=g {
                    let (y, x) = (r + dy, c + dx);
                    if y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w {
                        self.blocked[y as usize * self.w + x as usize] = true;
                    }
                }
            }
        }
    }
}

fn ellipse(h: usize, w: usize, cy: i64, cx: i64, a: i64, b: i64) -> Vec<usize> {
    let mut px = Vec::new();
    for y in (cy - a).max(0)..=(cy + a).min(h as i64 - 1) {
        for x in (cx - b).max(0)..=(cx + b).min(w as i64 - 1) {
            if (y - cy).pow(2) * b * b + (x - cx).pow(2) * a * a <= a * a * b * b {
                px.push(y as usize * w + x as usize);
            }
        }
    }
    px
}

/// Renumbers placement-order ids in raster order and carries classes along.
fn compact_with_classes(h: usize, w: usize, raw: &[u32], classes: &[u32]) -> Result<InstanceMap> {
    let map = InstanceMap::compacting(h, w, raw)?;
    let mut out = vec![0; map.count()];
    for (&old, &new) in raw.iter().zip(map.ids()) {
        if old > 0 {
            out[new as usize - 1] = classes[old as usize - 1];
        }
    }
    map.with_classes(out)
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.check()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut canvas = Canvas {
        h,
        w,
        blocked: vec![false; h * w],
        gap: spec.min_gap,
    };
    let mut glands = vec![0u32; h * w];
    let mut lumen = vec![0u32; h * w];
    let mut nuclei = vec![0u32; h * w];
    let mut nucleus_classes = Vec::new();

    let n_glands = spec.glands.draw(&mut rng);
    for k in 0..n_glands {
        let placed = (0..spec.max_attempts).find_map(|_| {
            let a = spec.gland_axes.draw(&mut rng) as i64;
            let b = spec.gland_axes.draw(&mut rng) as i64;
            if 2 * a + 1 > h as i64 || 2 * b + 1 > w as i64 {
                return None;
            }
            let cy = rng.random_range(a..h as i64 - a);
            let cx = rng.random_range(b..w as i64 - b);
            let px = ellipse(h, w, cy, cx, a, b);
            canvas.fits(&px).then_some((px, cy, cx, a, b))
        });
        let (px, cy, cx, a, b) = placed.ok_or_else(|| {
            Error::Constraint(format!(
                "gland {} of {n_glands} does not fit with a {} px gap after {} attempts",
                k + 1,
                spec.min_gap,
                spec.max_attempts
            ))
        })?;
        canvas.claim(&px);
        for &p in &px {
            glands[p] = k as u32 + 1;
        }
        if rng.random_bool(spec.lumen_probability) {
            let pct = spec.lumen_percent.draw(&mut rng) as i64;
            let (la, lb) = ((a * pct / 100).max(3), (b * pct / 100).max(3));
            if la + 2 < a && lb + 2 < b {
                let id = lumen.iter().copied().max().unwrap_or(0) + 1;
                for p in ellipse(h, w, cy, cx, la, lb) {
                    lumen[p] = id;
                }
            }
        }
    }

    let n_nuclei = spec.nuclei.draw(&mut rng);
    for k in 0..n_nuclei {
        let placed = (0..spec.max_attempts).find_map(|_| {
            let r = spec.nucleus_radius.draw(&mut rng) as i64;
            if 2 * r + 1 > h.min(w) as i64 {
                return None;
            }
            let cy = rng.random_range(r..h as i64 - r);
            let cx = rng.random_range(r..w as i64 - r);
            let px = ellipse(h, w, cy, cx, r, r);
            canvas.fits(&px).then_some(px)
        });
        let px = placed.ok_or_else(|| {
            Error::Constraint(format!(
                "nucleus {} of {n_nuclei} does not fit with a {} px gap after {} attempts",
                k + 1,
                spec.min_gap,
                spec.max_attempts
            ))
        })?;
        canvas.claim(&px);
        for &p in &px {
            nuclei[p] = k as u32 + 1;
        }
        nucleus_classes.push(rng.random_range(1..=spec.nucleus_classes as u32));
    }

    let gland_px = glands.iter().filter(|&&g| g > 0).count();
    let tissue = if n_glands == 0 && n_nuclei == 0 {
        Tissue::Background
    } else if gland_px as f64 / (h * w) as f64 >= spec.tissue.gland_fraction {
        Tissue::Glandular
    } else if n_nuclei >= spec.tissue.min_nuclei {
        Tissue::Cellular
    } else {
        Tissue::Stroma
    };

    let (shift, scale) = patient_style(spec.patient);
    let base = if tissue == Tissue::Background { GLASS } else { STROMA };
    let noise_seed = splitmix64(spec.seed ^ 0x4E4F_4953_45);
    let mut image = Tensor::zeros(&[3, h, w]);
    let data = image.data_mut();
    for p in 0..h * w {
        let colour = if lumen[p] > 0 {
            LUMEN
        } else if glands[p] > 0 {
            EPITHELIUM
        } else if nuclei[p] > 0 {
            NUCLEUS_COLOURS[nucleus_classes[nuclei[p] as usize - 1] as usize - 1]
        } else {
            base
        };
        for c in 0..3 {
            let v = colour[c] * scale + shift[c] + NOISE * unit_noise(noise_seed, (p * 3 + c) as u64);
            data[c * h * w + p] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    Ok(Scene {
        image,
        glands: InstanceMap::compacting(h, w, &glands)?,
        lumen: InstanceMap::compacting(h, w, &lumen)?,
        nuclei: compact_with_classes(h, w, &nuclei, &nucleus_classes)?,
        tissue,
        patient: spec.patient,
    })
}

/// Mean-pools a `[C,H,W]` image by an integer factor.
pub fn box_downsample(image: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::shape(format!("expected [C,H,W] image, got {s:?}"))),
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!("{h}×{w} is not divisible by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = (factor * factor) as f32;
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let (ch, y, x) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let mut s = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                s += image.data()[(ch * h + y * factor + dy) * w + x * factor + dx];
            }
        }
        s / norm
    }))
}

/// Count ranges steering a scene towards one tissue class. The label itself
/// is always recomputed from content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Background,
    Glandular,
    Cellular,
    Stroma,
}

impl Profile {
    pub const CYCLE: [Profile; 4] = [Profile::Glandular, Profile::Cellular, Profile::Stroma, Profile::Background];

    pub fn apply(self, base: &SceneSpec) -> SceneSpec {
        let mut s = base.clone();
        match self {
            Profile::Background => {
                s.glands = Range::new(0, 0);
                s.nuclei = Range::new(0, 0);
            }
            Profile::Glandular => {
                s.glands = Range::new(2, 2);
                s.gland_axes = Range::new(9, 12);
                s.nuclei = Range::new(0, 4);
            }
            Profile::Cellular => {
                s.glands = Range::new(0, 1);
                s.gland_axes = Range::new(7, 8);
                s.nuclei = Range::new(7, 12);
            }
            Profile::Stroma => {
                s.glands = Range::new(1, 1);
                s.gland_axes = Range::new(7, 9);
                s.nuclei = Range::new(1, 4);
            }
        }
        s
    }
}

/// Geometric problems with a generated scene: lumen pixels outside glands,
/// objects closer than the configured gap, class labels out of range.
pub fn scene_violations(scene: &Scene, spec: &SceneSpec) -> Vec<String> {
    let mut out = Vec::new();
    let (h, w) = (scene.glands.height(), scene.glands.width());
    if let Some(p) = (0..h * w).find(|&p| scene.lumen.ids()[p] > 0 && scene.glands.ids()[p] == 0) {
        out.push(format!("lumen pixel ({}, {}) lies outside every gland", p / w, p % w));
    }
    // every object of every map, as (map, id) owner labels
    let owner = |p: usize| -> Option<(u8, u32)> {
        if scene.glands.ids()[p] > 0 {
            Some((0, scene.glands.ids()[p]))
        } else if scene.nuclei.ids()[p] > 0 {
            Some((1, scene.nuclei.ids()[p]))
        } else {
            None
        }
    };
    let g = spec.min_gap as isize;
    'scan: for p in 0..h * w {
        let Some(a) = owner(p) else { continue };
        let (r, c) = ((p / w) as isize, (p % w) as isize);
        for dy in -g..=g {
            for dx in -g..=g {
                let (y, x) = (r + dy, c + dx);
                if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
                    continue;
                }
                if let Some(b) = owner(y as usize * w + x as usize) {
                    if a != b {
                        out.push(format!("objects closer than {} px near ({r}, {c})", spec.min_gap));
                        break 'scan;
                    }
                }
            }
        }
    }
    if let Some(classes) = scene.nuclei.classes() {
        if classes.iter().any(|&k| k == 0 || k as usize > spec.nucleus_classes) {
            out.push("nucleus class outside 1..=K".into());
        }
    } else if scene.nuclei.count() > 0 {
        out.push("nuclei carry no class labels".into());
    }
    out
}
