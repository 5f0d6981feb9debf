use crate::error::{Error, Result};
use crate::geometry::Vec2;

/// Nearest-neighbour index over 2-D points sorted by x.
#[derive(Debug, Clone)]
pub struct NnIndex {
    xs: Vec<f64>,
    pts: Vec<Vec2>,
}

impl NnIndex {
    pub fn new(points: &[Vec2]) -> Self {
        let mut pts = points.to_vec();
        pts.sort_by(|a, b| a.x.total_cmp(&b.x));
        let xs = pts.iter().map(|p| p.x).collect();
        Self { xs, pts }
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// Squared distance to the nearest indexed point.
    pub fn nearest_sq(&self, q: &Vec2) -> f64 {
        let n = self.pts.len();
        let start = self.xs.partition_point(|&x| x < q.x);
        let mut best = f64::INFINITY;
        let mut hi = start;
        let mut lo = start;
        loop {
            let mut moved = false;
            if hi < n {
                let dx = self.xs[hi] - q.x;
                if dx * dx < best {
                    let d = (self.pts[hi] - q).norm_squared();
                    if d < best {
                        best = d;
                    }
                    hi += 1;
                    moved = true;
                } else {
                    hi = n;
                }
            }
            if lo > 0 {
                let dx = q.x - self.xs[lo - 1];
                if dx * dx < best {
                    let d = (self.pts[lo - 1] - q).norm_squared();
                    if d < best {
                        best = d;
                    }
                    lo -= 1;
                    moved = true;
                } else {
                    lo = 0;
                }
            }
            if !moved {
                break;
            }
        }
        best
    }
}

fn check(p: &[Vec2], q: &[Vec2]) -> Result<()> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Empty("point set"));
    }
    Ok(())
}

fn directed_mean(from: &[Vec2], to: &NnIndex, squared: bool) -> f64 {
    let s: f64 = from
        .iter()
        .map(|p| {
            let d2 = to.nearest_sq(p);
            if squared { d2 } else { d2.sqrt() }
        })
        .sum();
    s / from.len() as f64
}

/// `(1/2N) Σ min‖p−q‖ + (1/2M) Σ min‖q−p‖`.
pub fn chamfer_bidirectional(p: &[Vec2], q: &[Vec2]) -> Result<f64> {
    check(p, q)?;
    Ok(chamfer_with_index(p, &NnIndex::new(q), q))
}

/// Bi-Chamfer where the second set already has an index.
pub fn chamfer_with_index(p: &[Vec2], q_index: &NnIndex, q: &[Vec2]) -> f64 {
    let pi = NnIndex::new(p);
    0.5 * directed_mean(p, q_index, false) + 0.5 * directed_mean(q, &pi, false)
}

/// Sum of both directed mean squared nearest-neighbour distances.
pub fn chamfer_squared_mean(p: &[Vec2], q: &[Vec2]) -> Result<f64> {
    check(p, q)?;
    let qi = NnIndex::new(q);
    let pi = NnIndex::new(p);
    Ok(directed_mean(p, &qi, true) + directed_mean(q, &pi, true))
}

/// Fixed-correspondence counterpart of [`chamfer_squared_mean`]: both
/// directions use the index pairing, i.e. twice the mean paired squared
/// distance.
pub fn paired_squared_mean(p: &[Vec2], q: &[Vec2]) -> Result<f64> {
    check(p, q)?;
    if p.len() != q.len() {
        return Err(Error::Domain("paired sets must have equal length".into()));
    }
    let m = p.iter().zip(q).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / p.len() as f64;
    Ok(2.0 * m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singletons() {
        let p = [Vec2::new(0.0, 0.0)];
        let q = [Vec2::new(3.0, 4.0)];
        assert_eq!(chamfer_bidirectional(&p, &q).unwrap(), 5.0);
        assert_eq!(chamfer_squared_mean(&p, &q).unwrap(), 50.0);
        assert_eq!(paired_squared_mean(&p, &q).unwrap(), 50.0);
    }

    #[test]
    fn empty_rejected() {
        assert!(chamfer_bidirectional(&[], &[Vec2::zeros()]).is_err());
        assert!(chamfer_squared_mean(&[Vec2::zeros()], &[]).is_err());
    }

    #[test]
    fn index_handles_duplicates() {
        let pts = vec![Vec2::new(1.0, 1.0); 4];
        let idx = NnIndex::new(&pts);
        assert_eq!(idx.nearest_sq(&Vec2::new(1.0, 3.0)), 4.0);
    }
}
