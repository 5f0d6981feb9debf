use serde::{Deserialize, Serialize};

use super::Rig;
use crate::error::{domain, Result};
use crate::geometry::{Pose3, Vec2};

/// Binary image, row-major, `true` = tool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    #[inline]
    pub fn get(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.data[y as usize * self.width + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: i64, y: i64, v: bool) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.data[y as usize * self.width + x as usize] = v;
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn pixels(&self) -> Vec<(i64, i64)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.data[y * self.width + x] {
                    out.push((x as i64, y as i64));
                }
            }
        }
        out
    }

    pub fn on_border(&self, x: i64, y: i64) -> bool {
        x == 0 || y == 0 || x == self.width as i64 - 1 || y == self.height as i64 - 1
    }
}

fn bresenham(a: (i64, i64), b: (i64, i64), mut put: impl FnMut(i64, i64)) {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(x, y);
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Last pixel inside the image along the ray from `tip` in direction `dir`.
fn border_entry(tip: (i64, i64), dir: Vec2, w: usize, h: usize) -> (i64, i64) {
    let (x0, y0) = (tip.0 as f64, tip.1 as f64);
    let xmax = (w - 1) as f64;
    let ymax = (h - 1) as f64;
    let mut t = f64::INFINITY;
    if dir.x > 1e-12 {
        t = t.min((xmax - x0) / dir.x);
    } else if dir.x < -1e-12 {
        t = t.min(-x0 / dir.x);
    }
    if dir.y > 1e-12 {
        t = t.min((ymax - y0) / dir.y);
    } else if dir.y < -1e-12 {
        t = t.min(-y0 / dir.y);
    }
    let x = (x0 + t * dir.x).round().clamp(0.0, xmax) as i64;
    let y = (y0 + t * dir.y).round().clamp(0.0, ymax) as i64;
    // snap the coordinate that hit first onto the border exactly
    let tx = if dir.x.abs() > 1e-12 { ((if dir.x > 0.0 { xmax } else { 0.0 }) - x0) / dir.x } else { f64::INFINITY };
    if (tx - t).abs() < 1e-9 {
        (if dir.x > 0.0 { xmax as i64 } else { 0 }, y)
    } else {
        (x, if dir.y > 0.0 { ymax as i64 } else { 0 })
    }
}

fn seg_dist2(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let l2 = ab.norm_squared();
    let t = if l2 > 0.0 { ((p - a).dot(&ab) / l2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * t)).norm_squared()
}

/// Straight tool from the border entry to the projected tip.
pub fn render_mask(rig: &Rig, pose: &Pose3, tool_width: u32) -> Result<Mask> {
    render_mask_at_angle(rig, pose, tool_width, rig.tool_entry_angle)
}

/// As [`render_mask`] with an explicit entry direction (rad, image frame).
pub fn render_mask_at_angle(rig: &Rig, pose: &Pose3, tool_width: u32, angle: f64) -> Result<Mask> {
    let cam = &rig.camera;
    let tip_px = rig.pixel_of(&rig.tip_of(pose));
    if !cam.contains(&tip_px) {
        return domain(format!("tip ({:.1}, {:.1}) outside field of view", tip_px.x, tip_px.y));
    }
    if tool_width == 0 {
        return domain("tool width must be >= 1");
    }
    let (w, h) = (cam.width as usize, cam.height as usize);
    let tip = (tip_px.x.round() as i64, tip_px.y.round() as i64);
    let dir = Vec2::new(angle.cos(), angle.sin());
    let entry = border_entry(tip, dir, w, h);
    let mut m = Mask::new(w, h);
    if tool_width == 1 {
        bresenham(tip, entry, |x, y| m.set(x, y, true));
        return Ok(m);
    }
    let a = Vec2::new(tip.0 as f64, tip.1 as f64);
    let b = Vec2::new(entry.0 as f64, entry.1 as f64);
    let r = tool_width as f64 / 2.0;
    let r2 = r * r;
    let pad = r.ceil() as i64 + 1;
    let (xlo, xhi) = (tip.0.min(entry.0) - pad, tip.0.max(entry.0) + pad);
    let (ylo, yhi) = (tip.1.min(entry.1) - pad, tip.1.max(entry.1) + pad);
    for y in ylo.max(0)..=yhi.min(h as i64 - 1) {
        for x in xlo.max(0)..=xhi.min(w as i64 - 1) {
            if seg_dist2(Vec2::new(x as f64, y as f64), a, b) <= r2 {
                m.set(x, y, true);
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bresenham_endpoints_inclusive() {
        let mut v = Vec::new();
        bresenham((0, 0), (5, 2), |x, y| v.push((x, y)));
        assert_eq!(v.first(), Some(&(0, 0)));
        assert_eq!(v.last(), Some(&(5, 2)));
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn entry_lies_on_border() {
        for k in 0..16 {
            let a = k as f64 * std::f64::consts::TAU / 16.0 + 0.05;
            let e = border_entry((100, 70), Vec2::new(a.cos(), a.sin()), 640, 480);
            assert!(e.0 == 0 || e.1 == 0 || e.0 == 639 || e.1 == 479, "{e:?}");
        }
    }
}
