//! Instance maps, the pixel targets derived from them, and the inverse
//! direction: recovering instances from per-pixel class probabilities.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Integer-labelled map: 0 is background, ids `1..=M` identify objects.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    height: usize,
    width: usize,
    ids: Vec<u32>,
    count: usize,
    classes: Option<Vec<u32>>,
}

impl InstanceMap {
    /// Wraps a label plane, checking that ids are exactly `1..=M` with every id present.
    pub fn new(height: usize, width: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::shape(format!(
                "instance map has {} labels for a {height}×{width} canvas",
                ids.len()
            )));
        }
        let count = ids.iter().copied().max().unwrap_or(0) as usize;
        let mut seen = vec![false; count + 1];
        for &id in &ids {
            seen[id as usize] = true;
        }
        if let Some(missing) = (1..=count).find(|&k| !seen[k]) {
            return Err(Error::invalid(format!(
                "instance ids must be contiguous 1..={count}; id {missing} has no pixels"
            )));
        }
        Ok(InstanceMap {
            height,
            width,
            ids,
            count,
            classes: None,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        InstanceMap {
            height,
            width,
            ids: vec![0; height * width],
            count: 0,
            classes: None,
        }
    }

    /// Renumbers arbitrary non-negative labels to `1..=M` in raster order of first appearance.
    pub fn compacting(height: usize, width: usize, raw: &[u32]) -> Result<Self> {
        if raw.len() != height * width {
            return Err(Error::shape(format!(
                "label plane has {} values for a {height}×{width} canvas",
                raw.len()
            )));
        }
        let mut remap = std::collections::HashMap::new();
        let ids = raw
            .iter()
            .map(|&v| {
                if v == 0 {
                    0
                } else {
                    let next = remap.len() as u32 + 1;
                    *remap.entry(v).or_insert(next)
                }
            })
            .collect();
        InstanceMap::new(height, width, ids)
    }

    /// Attaches one class label per instance.
    pub fn with_classes(mut self, classes: Vec<u32>) -> Result<Self> {
        if classes.len() != self.count {
            return Err(Error::invalid(format!(
                "{} class labels supplied for {} instances",
                classes.len(),
                self.count
            )));
        }
        self.classes = Some(classes);
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.ids[r * self.width + c]
    }

    pub fn classes(&self) -> Option<&[u32]> {
        self.classes.as_deref()
    }

    pub fn class_of(&self, id: u32) -> Option<u32> {
        self.classes.as_ref().map(|c| c[id as usize - 1])
    }

    /// Pixel count of every instance, indexed by `id - 1`.
    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0; self.count];
        for &id in &self.ids {
            if id > 0 {
                areas[id as usize - 1] += 1;
            }
        }
        areas
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id > 0).collect()
    }

    /// Keeps the instances whose class is `class`, renumbered in raster order.
    pub fn filter_class(&self, class: u32) -> Result<InstanceMap> {
        let classes = self
            .classes
            .as_ref()
            .ok_or_else(|| Error::invalid("instance map carries no class labels"))?;
        let raw: Vec<u32> = self
            .ids
            .iter()
            .map(|&id| if id > 0 && classes[id as usize - 1] == class { id } else { 0 })
            .collect();
        let map = InstanceMap::compacting(self.height, self.width, &raw)?;
        let n = map.count;
        map.with_classes(vec![class; n])
    }

    /// Applies `perm[old_id - 1] = new_id`, carrying class labels along.
    pub fn relabel(&self, perm: &[u32]) -> Result<InstanceMap> {
        if perm.len() != self.count {
            return Err(Error::invalid("permutation length differs from instance count"));
        }
        let ids = self
            .ids
            .iter()
            .map(|&id| if id == 0 { 0 } else { perm[id as usize - 1] })
            .collect();
        let mut map = InstanceMap::new(self.height, self.width, ids)?;
        if let Some(classes) = &self.classes {
            let mut moved = vec![0; self.count];
            for (old, &new) in perm.iter().enumerate() {
                moved[new as usize - 1] = classes[old];
            }
            map.classes = Some(moved);
        }
        Ok(map)
    }

    /// Problems with this map as human-readable strings; empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = InstanceMap::new(self.height, self.width, self.ids.clone()) {
            out.push(e.to_string());
        }
        if let Some(c) = &self.classes {
            if c.len() != self.count {
                out.push(format!("{} class labels for {} instances", c.len(), self.count));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetScheme {
    Eroded2,
    Boundary3,
    Subtype(u32),
}

impl TargetScheme {
    pub fn num_classes(self) -> usize {
        match self {
            TargetScheme::Eroded2 => 2,
            TargetScheme::Boundary3 => 3,
            TargetScheme::Subtype(k) => k as usize + 1,
        }
    }
}

/// Per-pixel class map tagged with the scheme that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelTarget {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<u8>,
    pub scheme: TargetScheme,
}

impl PixelTarget {
    pub fn count(&self, class: u8) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }
}

fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

const NEIGHBOURS8: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

fn offset(h: usize, w: usize, r: usize, c: usize, dy: isize, dx: isize) -> Option<usize> {
    let (y, x) = (r as isize + dy, c as isize + dx);
    (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then(|| y as usize * w + x as usize)
}

/// Binary eroded target. Pixels outside the canvas count as members of every
/// instance, so objects cut by the border are not shrunk from that side.
pub fn erode_instances(gt: &InstanceMap, radius: usize) -> PixelTarget {
    let (h, w) = (gt.height, gt.width);
    let se = disk(radius);
    let mut classes = vec![0u8; h * w];
    let mut survived = vec![false; gt.count];
    for r in 0..h {
        for c in 0..w {
            let id = gt.get(r, c);
            if id == 0 {
                continue;
            }
            let inside = se
                .iter()
                .all(|&(dy, dx)| offset(h, w, r, c, dy, dx).is_none_or(|j| gt.ids[j] == id));
            if inside {
                classes[r * w + c] = 1;
                survived[id as usize - 1] = true;
            }
        }
    }
    for (k, _) in survived.iter().enumerate().filter(|(_, s)| !**s) {
        if let Some(p) = most_interior_pixel(gt, k as u32 + 1) {
            classes[p] = 1;
        }
    }
    PixelTarget {
        height: h,
        width: w,
        classes,
        scheme: TargetScheme::Eroded2,
    }
}

/// Member pixel with the largest distance to any in-canvas non-member; first in raster order on ties.
fn most_interior_pixel(gt: &InstanceMap, id: u32) -> Option<usize> {
    let w = gt.width;
    let outside: Vec<(i64, i64)> = (0..gt.ids.len())
        .filter(|&j| gt.ids[j] != id)
        .map(|j| ((j / w) as i64, (j % w) as i64))
        .collect();
    let mut best: Option<(i64, usize)> = None;
    for j in (0..gt.ids.len()).filter(|&j| gt.ids[j] == id) {
        let (y, x) = ((j / w) as i64, (j % w) as i64);
        let d = outside
            .iter()
            .map(|&(oy, ox)| (oy - y).pow(2) + (ox - x).pow(2))
            .min()
            .unwrap_or(i64::MAX);
        if best.is_none_or(|(bd, _)| d > bd) {
            best = Some((d, j));
        }
    }
    best.map(|(_, j)| j)
}

/// Three-class target: 0 background, 1 interior, 2 rim. A pixel is rim when a
/// different label lies within `thickness` of it, or when it is 8-adjacent to
/// another instance.
pub fn boundary_target(gt: &InstanceMap, thickness: usize) -> Result<PixelTarget> {
    if thickness == 0 {
        return Err(Error::invalid("boundary thickness must be at least 1"));
    }
    let (h, w) = (gt.height, gt.width);
    let se = disk(thickness);
    let mut classes = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            let id = gt.get(r, c);
            if id == 0 {
                continue;
            }
            let near_edge = se
                .iter()
                .any(|&(dy, dx)| offset(h, w, r, c, dy, dx).is_some_and(|j| gt.ids[j] != id));
            let touches_other = NEIGHBOURS8.iter().any(|&(dy, dx)| {
                offset(h, w, r, c, dy, dx).is_some_and(|j| gt.ids[j] != 0 && gt.ids[j] != id)
            });
            classes[r * w + c] = if near_edge || touches_other { 2 } else { 1 };
        }
    }
    Ok(PixelTarget {
        height: h,
        width: w,
        classes,
        scheme: TargetScheme::Boundary3,
    })
}

/// 8-connected labelling; ids follow the raster order of each component's first pixel.
pub fn connected_components(height: usize, width: usize, binary: &[bool]) -> Result<InstanceMap> {
    if binary.len() != height * width {
        return Err(Error::shape(format!(
            "binary map has {} values for a {height}×{width} canvas",
            binary.len()
        )));
    }
    let mut ids = vec![0u32; binary.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..binary.len() {
        if !binary[start] || ids[start] != 0 {
            continue;
        }
        next += 1;
        ids[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (r, c) = (p / width, p % width);
            for &(dy, dx) in &NEIGHBOURS8 {
                if let Some(q) = offset(height, width, r, c, dy, dx) {
                    if binary[q] && ids[q] == 0 {
                        ids[q] = next;
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    InstanceMap::new(height, width, ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "scheme")]
pub enum Recovery {
    /// Two-class eroded target; components are re-dilated by `radius`.
    Eroded2 { radius: usize },
    /// Three-class target with a rim class resolved by geodesic growth.
    Boundary3,
}

impl Recovery {
    pub fn num_classes(self) -> usize {
        match self {
            Recovery::Eroded2 { .. } => 2,
            Recovery::Boundary3 => 3,
        }
    }

    pub fn scheme(self) -> TargetScheme {
        match self {
            Recovery::Eroded2 { .. } => TargetScheme::Eroded2,
            Recovery::Boundary3 => TargetScheme::Boundary3,
        }
    }

    pub fn target(self, gt: &InstanceMap) -> Result<PixelTarget> {
        match self {
            Recovery::Eroded2 { radius } => Ok(erode_instances(gt, radius)),
            Recovery::Boundary3 => boundary_target(gt, 1),
        }
    }
}

/// Per-pixel argmax over a `[K,H,W]` map; ties go to the lower class.
pub fn argmax_channels(probs: &Tensor<f32>) -> Result<Vec<u8>> {
    let [k, h, w] = dims3(probs)?;
    let d = probs.data();
    Ok((0..h * w)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * h * w + p] > d[best * h * w + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect())
}

fn dims3(t: &Tensor<f32>) -> Result<[usize; 3]> {
    match *t.shape() {
        [k, h, w] => Ok([k, h, w]),
        ref s => Err(Error::shape(format!("expected a [K,H,W] map, got {s:?}"))),
    }
}

pub fn recover_instances(probs: &Tensor<f32>, scheme: Recovery) -> Result<InstanceMap> {
    let [k, h, w] = dims3(probs)?;
    if k != scheme.num_classes() {
        return Err(Error::shape(format!(
            "{scheme:?} recovery expects {} channels, got {k}",
            scheme.num_classes()
        )));
    }
    recover_from_classes(h, w, &argmax_channels(probs)?, scheme)
}

/// Instance recovery from an already-decided class map.
pub fn recover_from_classes(h: usize, w: usize, classes: &[u8], scheme: Recovery) -> Result<InstanceMap> {
    let seeds = connected_components(h, w, &classes.iter().map(|&c| c == 1).collect::<Vec<_>>())?;
    match scheme {
        Recovery::Eroded2 { radius } => Ok(dilate_seeds(&seeds, radius)),
        Recovery::Boundary3 => geodesic_grow(&seeds, classes),
    }
}

fn dilate_seeds(seeds: &InstanceMap, radius: usize) -> InstanceMap {
    let (h, w) = (seeds.height, seeds.width);
    let se: Vec<(isize, isize, isize)> = disk(radius).into_iter().map(|(dy, dx)| (dy, dx, dy * dy + dx * dx)).collect();
    let mut best: Vec<(isize, u32)> = vec![(isize::MAX, 0); h * w];
    for r in 0..h {
        for c in 0..w {
            let id = seeds.get(r, c);
            if id == 0 {
                continue;
            }
            for &(dy, dx, d2) in &se {
                if let Some(j) = offset(h, w, r, c, dy, dx) {
                    if (d2, id) < best[j] {
                        best[j] = (d2, id);
                    }
                }
            }
        }
    }
    let ids = best.into_iter().map(|(_, id)| id).collect();
    InstanceMap {
        height: h,
        width: w,
        ids,
        count: seeds.count,
        classes: None,
    }
}

/// Layered multi-source BFS through foreground (classes 1 and 2). Each newly
/// reached pixel takes the lowest id among its already-reached neighbours.
fn geodesic_grow(seeds: &InstanceMap, classes: &[u8]) -> Result<InstanceMap> {
    let (h, w) = (seeds.height, seeds.width);
    let mut owner = seeds.ids.clone();
    let mut frontier: Vec<usize> = (0..owner.len()).filter(|&p| owner[p] != 0).collect();
    while !frontier.is_empty() {
        let mut next: Vec<usize> = Vec::new();
        let mut claim = std::collections::HashMap::<usize, u32>::new();
        for &p in &frontier {
            let (r, c) = (p / w, p % w);
            for &(dy, dx) in &NEIGHBOURS8 {
                if let Some(q) = offset(h, w, r, c, dy, dx) {
                    if owner[q] == 0 && classes[q] == 2 {
                        let e = claim.entry(q).or_insert_with(|| {
                            next.push(q);
                            u32::MAX
                        });
                        *e = (*e).min(owner[p]);
                    }
                }
            }
        }
        for &q in &next {
            owner[q] = claim[&q];
        }
        frontier = next;
    }
    InstanceMap::compacting(h, w, &owner)
}

/// Modal pixel class per instance. Background votes (class 0) only count when
/// an instance has no foreground votes at all; ties go to the lower class.
pub fn majority_vote_subtype(instances: &InstanceMap, pixel_classes: &[u32]) -> Result<Vec<u32>> {
    if pixel_classes.len() != instances.ids.len() {
        return Err(Error::shape(format!(
            "class map has {} pixels, instance map {}",
            pixel_classes.len(),
            instances.ids.len()
        )));
    }
    let k = pixel_classes.iter().copied().max().unwrap_or(0) as usize + 1;
    let mut votes = vec![vec![0usize; k]; instances.count];
    for (&id, &cls) in instances.ids.iter().zip(pixel_classes) {
        if id > 0 {
            votes[id as usize - 1][cls as usize] += 1;
        }
    }
    Ok(votes
        .iter()
        .map(|v| {
            let lo = if v[1..].iter().any(|&n| n > 0) { 1 } else { 0 };
            let mut best = lo;
            for c in lo..k {
                if v[c] > v[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect())
}

/// Floor of the mean pixel coordinate of every instance, as (row, col).
pub fn centroids(instances: &InstanceMap) -> Vec<(usize, usize)> {
    let mut acc = vec![(0usize, 0usize, 0usize); instances.count];
    for (p, &id) in instances.ids.iter().enumerate() {
        if id > 0 {
            let a = &mut acc[id as usize - 1];
            a.0 += p / instances.width;
            a.1 += p % instances.width;
            a.2 += 1;
        }
    }
    acc.into_iter().map(|(r, c, n)| (r / n, c / n)).collect()
}

/// One `size×size` crop of a `[C,H,W]` image per instance, centred on its
/// centroid with the top-left at `centre - size/2`; off-canvas pixels are zero.
pub fn extract_centered_patches(
    image: &Tensor<f32>,
    instances: &InstanceMap,
    size: usize,
) -> Result<Vec<(u32, Tensor<f32>)>> {
    let [ch, h, w] = dims3(image)?;
    if (h, w) != (instances.height, instances.width) {
        return Err(Error::shape(format!(
            "image is {h}×{w} but instance map is {}×{}",
            instances.height, instances.width
        )));
    }
    let half = (size / 2) as isize;
    Ok(centroids(instances)
        .into_iter()
        .enumerate()
        .map(|(k, (cr, cc))| {
            let mut patch = Tensor::zeros(&[ch, size, size]);
            let out = patch.data_mut();
            for c in 0..ch {
                for y in 0..size {
                    for x in 0..size {
                        let sy = cr as isize - half + y as isize;
                        let sx = cc as isize - half + x as isize;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            out[(c * size + y) * size + x] = image.data()[(c * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
            }
            (k as u32 + 1, patch)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, r0: usize, c0: usize, side: usize) -> InstanceMap {
        let mut ids = vec![0; h * w];
        for r in r0..r0 + side {
            for c in c0..c0 + side {
                ids[r * w + c] = 1;
            }
        }
        InstanceMap::new(h, w, ids).unwrap()
    }

    #[test]
    fn non_contiguous_ids_are_rejected() {
        assert!(InstanceMap::new(1, 3, vec![1, 0, 3]).is_err());
        let m = InstanceMap::compacting(1, 3, &[7, 0, 3]).unwrap();
        assert_eq!(m.ids(), &[1, 0, 2]);
    }

    #[test]
    fn disk_radius_one_is_a_cross() {
        assert_eq!(disk(1).len(), 5);
        assert_eq!(disk(2).len(), 13);
    }

    #[test]
    fn erosion_of_square_leaves_interior() {
        let t = erode_instances(&square(9, 9, 2, 2, 5), 1);
        assert_eq!(t.count(1), 9);
        for r in 3..6 {
            for c in 3..6 {
                assert_eq!(t.classes[r * 9 + c], 1);
            }
        }
    }

    #[test]
    fn vanishing_instance_keeps_most_interior_pixel() {
        let t = erode_instances(&square(9, 9, 2, 2, 3), 3);
        assert_eq!(t.count(1), 1);
        assert_eq!(t.classes[3 * 9 + 3], 1);
    }
}
