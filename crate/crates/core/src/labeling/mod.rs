//! Pseudo-label pipeline over binary masks and grayscale patches.

mod pgm;

pub use pgm::{read_pgm, write_pgm};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geometry::Vec2;
use crate::scenario::Mask;

pub type Pixel = (i64, i64);

/// Row-major grayscale grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    /// Sorted lexicographically by (x, y).
    pub pixels: Vec<Pixel>,
    pub width: usize,
    pub height: usize,
}

impl Skeleton {
    pub fn contains(&self, p: Pixel) -> bool {
        self.pixels.binary_search(&p).is_ok()
    }

    pub fn to_mask(&self) -> Mask {
        let mut m = Mask::new(self.width, self.height);
        for &(x, y) in &self.pixels {
            m.set(x, y, true);
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TipLabel {
    pub pixel: Pixel,
    pub score: f64,
    pub frame: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthClass {
    Below,
    Near,
    Above,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthLabel {
    pub z_raw: f64,
    pub z_corrected: f64,
    pub z_tilde: f64,
    pub class: DepthClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelParams {
    pub alpha: f64,
    pub border_suppression: f64,
    pub heatmap_sigma: f64,
    /// Percentage of sharpest frames used for the depth offset.
    pub sharp_top_fraction: f64,
    pub sigma_preset: f64,
    pub class_threshold: f64,
}

impl Default for LabelParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            border_suppression: 2.0,
            heatmap_sigma: 3.0,
            sharp_top_fraction: 5.0,
            sigma_preset: 1.0,
            class_threshold: 0.5,
        }
    }
}

fn erode(m: &Mask) -> Mask {
    let mut out = Mask::new(m.width, m.height);
    for y in 0..m.height as i64 {
        for x in 0..m.width as i64 {
            if !m.get(x, y) {
                continue;
            }
            let full = (-1..=1).all(|dy| (-1..=1).all(|dx| m.get(x + dx, y + dy)));
            if full {
                out.set(x, y, true);
            }
        }
    }
    out
}

fn dilate(m: &Mask) -> Mask {
    let mut out = Mask::new(m.width, m.height);
    for y in 0..m.height as i64 {
        for x in 0..m.width as i64 {
            if m.get(x, y) {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        out.set(x + dx, y + dy, true);
                    }
                }
            }
        }
    }
    out
}

/// Lantuéjoul skeleton with the 3x3 square structuring element.
pub fn skeletonize(mask: &Mask) -> Result<Skeleton> {
    if mask.is_empty() {
        return Err(Error::Empty("mask"));
    }
    let mut acc = Mask::new(mask.width, mask.height);
    let mut xk = mask.clone();
    while !xk.is_empty() {
        let er = erode(&xk);
        let open = dilate(&er);
        for i in 0..xk.data.len() {
            if xk.data[i] && !open.data[i] {
                acc.data[i] = true;
            }
        }
        xk = er;
    }
    let mut pixels = acc.pixels();
    pixels.sort_unstable();
    Ok(Skeleton { pixels, width: mask.width, height: mask.height })
}

fn neighbour_count(sk: &Skeleton, p: Pixel) -> usize {
    let mut n = 0;
    for dy in -1..=1 {
        for dx in -1..=1 {
            if (dx, dy) != (0, 0) && sk.contains((p.0 + dx, p.1 + dy)) {
                n += 1;
            }
        }
    }
    n
}

/// Skeleton pixels with exactly one 8-neighbour.
pub fn endpoints(sk: &Skeleton) -> Vec<Pixel> {
    sk.pixels.iter().copied().filter(|&p| neighbour_count(sk, p) == 1).collect()
}

pub fn border_distance(p: Pixel, size: (usize, usize)) -> f64 {
    let (w, h) = (size.0 as i64, size.1 as i64);
    p.0.min(p.1).min(w - 1 - p.0).min(h - 1 - p.1) as f64
}

fn dist(a: Pixel, b: Pixel) -> f64 {
    (((a.0 - b.0).pow(2) + (a.1 - b.1).pow(2)) as f64).sqrt()
}

/// Mixed border/temporal score, argmax with lexicographic tie-break.
/// `None` when every candidate is suppressed.
pub fn select_tip(
    candidates: &[Pixel],
    prev_tip: Option<Pixel>,
    next_tip: Option<Pixel>,
    params: &LabelParams,
    size: (usize, usize),
    frame: usize,
) -> Option<TipLabel> {
    let mut cands: Vec<Pixel> = candidates
        .iter()
        .copied()
        .filter(|&p| border_distance(p, size) > params.border_suppression)
        .collect();
    cands.sort_unstable();
    cands.dedup();
    if cands.is_empty() {
        return None;
    }
    let db: Vec<f64> = cands.iter().map(|&p| border_distance(p, size)).collect();
    let db_max = db.iter().cloned().fold(0.0, f64::max);
    let one_sided = |nb: Option<Pixel>| -> Option<Vec<f64>> {
        let nb = nb?;
        let d: Vec<f64> = cands.iter().map(|&p| dist(p, nb)).collect();
        let m = d.iter().cloned().fold(0.0, f64::max);
        Some(d.into_iter().map(|v| if m > 0.0 { v / m } else { 0.0 }).collect())
    };
    let fwd = one_sided(prev_tip);
    let bwd = one_sided(next_tip);
    let mut best: Option<TipLabel> = None;
    for (i, &p) in cands.iter().enumerate() {
        let nb = if db_max > 0.0 { db[i] / db_max } else { 0.0 };
        let dt = match (&fwd, &bwd) {
            (Some(f), Some(b)) => 0.5 * (f[i] + b[i]),
            (Some(f), None) => f[i],
            (None, Some(b)) => b[i],
            (None, None) => 0.0,
        };
        let score = params.alpha * nb + (1.0 - params.alpha) * (1.0 - dt);
        if best.map_or(true, |b| score > b.score) {
            best = Some(TipLabel { pixel: p, score, frame });
        }
    }
    best
}

/// Forward pass with the previous label, then one backward pass with both
/// neighbours from the forward result.
pub fn label_clip(masks: &[Mask], params: &LabelParams) -> Result<Vec<Option<TipLabel>>> {
    let cands: Vec<Vec<Pixel>> = masks
        .iter()
        .map(|m| skeletonize(m).map(|s| endpoints(&s)))
        .collect::<Result<_>>()?;
    let size = |i: usize| (masks[i].width, masks[i].height);
    let mut fwd: Vec<Option<TipLabel>> = Vec::with_capacity(masks.len());
    for i in 0..masks.len() {
        let prev = if i > 0 { fwd[i - 1].map(|l: TipLabel| l.pixel) } else { None };
        fwd.push(select_tip(&cands[i], prev, None, params, size(i), i));
    }
    let mut out = vec![None; masks.len()];
    for i in (0..masks.len()).rev() {
        let prev = if i > 0 { fwd[i - 1].map(|l| l.pixel) } else { None };
        let next = if i + 1 < masks.len() {
            out[i + 1].or(fwd[i + 1]).map(|l: TipLabel| l.pixel)
        } else {
            None
        };
        out[i] = select_tip(&cands[i], prev, next, params, size(i), i);
    }
    Ok(out)
}

/// `exp(-‖(x,y) − p‖² / 2σ²)` over a `w × h` grid.
pub fn gaussian_heatmap(p: Vec2, sigma: f64, size: (usize, usize)) -> Result<Image> {
    if !(sigma > 0.0) {
        return domain("heatmap sigma must be > 0");
    }
    let k = 1.0 / (2.0 * sigma * sigma);
    Ok(Image::from_fn(size.0, size.1, |x, y| {
        let dx = x as f64 - p.x;
        let dy = y as f64 - p.y;
        (-(dx * dx + dy * dy) * k).exp()
    }))
}

/// Expected coordinate under `softmax(τ H)`.
pub fn soft_argmax(h: &Image, tau: f64) -> Result<Vec2> {
    if !(tau > 0.0) {
        return domain("soft-argmax temperature must be > 0");
    }
    if h.data.is_empty() {
        return Err(Error::Empty("heatmap"));
    }
    let m = h.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in 0..h.height {
        for x in 0..h.width {
            let w = (tau * (h.at(x, y) - m)).exp();
            sw += w;
            sx += w * x as f64;
            sy += w * y as f64;
        }
    }
    Ok(Vec2::new(sx / sw, sy / sw))
}

/// Variance of the 4-neighbour Laplacian over the patch interior.
pub fn patch_sharpness(patch: &Image) -> Result<f64> {
    if patch.width < 3 || patch.height < 3 {
        return domain("patch must be at least 3x3");
    }
    let mut vals = Vec::with_capacity((patch.width - 2) * (patch.height - 2));
    for y in 1..patch.height - 1 {
        for x in 1..patch.width - 1 {
            vals.push(
                patch.at(x, y - 1) + patch.at(x - 1, y) + patch.at(x + 1, y) + patch.at(x, y + 1)
                    - 4.0 * patch.at(x, y),
            );
        }
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    Ok(vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

/// Mean Sobel gradient energy over the patch interior.
pub fn gradient_energy(patch: &Image) -> f64 {
    if patch.width < 3 || patch.height < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for y in 1..patch.height - 1 {
        for x in 1..patch.width - 1 {
            let p = |dx: i64, dy: i64| patch.at((x as i64 + dx) as usize, (y as i64 + dy) as usize);
            let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            acc += gx * gx + gy * gy;
            n += 1;
        }
    }
    acc / n as f64
}

/// Index and depth of the frame with the highest score; ties go to the
/// smallest index.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.map_or(true, |b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Maximal-sharpness frame of an axial sequence.
pub fn focal_plane_label(frames: &[(f64, Image)]) -> Result<(usize, f64)> {
    let scores: Vec<f64> = frames.iter().map(|(_, p)| gradient_energy(p)).collect();
    let i = argmax_first(&scores).ok_or(Error::Empty("frames"))?;
    Ok((i, frames[i].0))
}

/// Deterministic textured patch whose contrast scales with `sharpness`.
pub fn synth_patch(sharpness: f64, size: usize) -> Image {
    Image::from_fn(size, size, |x, y| {
        let t = ((x * 7 + y * 13) % 5) as f64 / 4.0 - 0.5;
        let c = if (x + y) % 2 == 0 { 0.5 } else { -0.5 };
        0.5 + sharpness * 0.4 * (0.7 * c + 0.3 * t)
    })
}

/// Mean raw depth of the sharpest `ε%` records.
pub fn depth_offset(records: &[(f64, f64)], top_percent: f64) -> Result<f64> {
    if records.is_empty() || !(top_percent > 0.0) {
        return Err(Error::Empty("sharpest record set"));
    }
    let k = ((records.len() as f64 * top_percent / 100.0).ceil() as usize).clamp(1, records.len());
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| records[b].1.total_cmp(&records[a].1).then(a.cmp(&b)));
    Ok(idx[..k].iter().map(|&i| records[i].0).sum::<f64>() / k as f64)
}

pub fn depth_class(z_tilde: f64, delta: f64) -> DepthClass {
    if z_tilde < -delta {
        DepthClass::Below
    } else if z_tilde > delta {
        DepthClass::Above
    } else {
        DepthClass::Near
    }
}

/// Offset correction, standardisation and three-way classing.
pub fn normalize_depth(records: &[(f64, f64)], params: &LabelParams) -> Result<Vec<DepthLabel>> {
    if !(params.sigma_preset > 0.0) {
        return domain("sigma_preset must be > 0");
    }
    let mu = depth_offset(records, params.sharp_top_fraction)?;
    Ok(records
        .iter()
        .map(|&(z_raw, _)| {
            let z = z_raw - mu;
            let zt = z / params.sigma_preset;
            DepthLabel {
                z_raw,
                z_corrected: z,
                z_tilde: zt,
                class: depth_class(zt, params.class_threshold),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_mask(n: usize) -> Mask {
        let mut m = Mask::new(12, 5);
        for x in 2..2 + n {
            m.set(x as i64, 2, true);
        }
        m
    }

    #[test]
    fn thin_line_is_its_own_skeleton() {
        let m = line_mask(5);
        let sk = skeletonize(&m).unwrap();
        assert_eq!(sk.to_mask(), m);
        assert_eq!(endpoints(&sk), vec![(2, 2), (6, 2)]);
    }

    #[test]
    fn isolated_pixel_has_no_endpoint() {
        let mut m = Mask::new(5, 5);
        m.set(2, 2, true);
        let sk = skeletonize(&m).unwrap();
        assert!(endpoints(&sk).is_empty());
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(skeletonize(&Mask::new(3, 3)).is_err());
    }

    #[test]
    fn border_candidate_suppressed() {
        let p = LabelParams::default();
        let l = select_tip(&[(0, 5), (20, 5)], None, None, &p, (40, 10), 0).unwrap();
        assert_eq!(l.pixel, (20, 5));
        assert!(select_tip(&[(0, 5)], None, None, &p, (40, 10), 0).is_none());
    }

    #[test]
    fn sharpness_ordering() {
        let checker = Image::from_fn(9, 9, |x, y| ((x + y) % 2) as f64);
        let ramp = Image::from_fn(9, 9, |x, _| x as f64 / 8.0);
        assert!(patch_sharpness(&checker).unwrap() > patch_sharpness(&ramp).unwrap());
        assert_eq!(patch_sharpness(&Image::from_fn(4, 4, |_, _| 3.0)).unwrap(), 0.0);
        assert!(patch_sharpness(&Image::new(2, 5)).is_err());
    }

    #[test]
    fn depth_classes_partition_at_threshold() {
        assert_eq!(depth_class(0.5, 0.5), DepthClass::Near);
        assert_eq!(depth_class(-0.5, 0.5), DepthClass::Near);
        assert_eq!(depth_class(0.5000001, 0.5), DepthClass::Above);
        assert_eq!(depth_class(-0.5000001, 0.5), DepthClass::Below);
    }
}
