//! Landmark containers shared by the codec, augmentations, synthesis,
//! metrics, and trainer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One landmark in image coordinates (x right, y down, pixels).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Ordered landmark list with per-point visibility.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<Point>,
    pub visibility: Vec<bool>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>, visibility: Vec<bool>) -> Result<Self> {
        if points.len() != visibility.len() {
            return Err(Error::shapes(
                "landmarks::new",
                format!("{} visibility flags", points.len()),
                format!("{}", visibility.len()),
            ));
        }
        Ok(LandmarkSet { points, visibility })
    }

    pub fn all_visible(points: Vec<Point>) -> Self {
        let visibility = vec![true; points.len()];
        LandmarkSet { points, visibility }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Visible (index, point) pairs.
    pub fn visible(&self) -> impl Iterator<Item = (usize, Point)> + '_ {
        self.points
            .iter()
            .zip(&self.visibility)
            .enumerate()
            .filter(|(_, (_, v))| **v)
            .map(|(i, (p, _))| (i, *p))
    }
}

/// Axis-aligned face box (x, y, w, h) in image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl FaceBox {
    /// Tight box around the given points, each side expanded by `margin`
    /// (fraction of the corresponding extent).
    pub fn around(points: &[Point], margin: f64) -> Self {
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        let (w, h) = (x1 - x0, y1 - y0);
        FaceBox {
            x: x0 - margin * w,
            y: y0 - margin * h,
            w: w * (1.0 + 2.0 * margin),
            h: h * (1.0 + 2.0 * margin),
        }
    }

    pub fn diag(&self) -> f64 {
        (self.w * self.w + self.h * self.h).sqrt()
    }

    pub fn geometric_mean(&self) -> f64 {
        (self.w * self.h).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn face_box_expands_ten_percent() {
        let pts = [Point::new(10.0, 20.0), Point::new(30.0, 60.0)];
        let b = FaceBox::around(&pts, 0.1);
        assert!((b.x - 8.0).abs() < 1e-12);
        assert!((b.y - 16.0).abs() < 1e-12);
        assert!((b.w - 24.0).abs() < 1e-12);
        assert!((b.h - 48.0).abs() < 1e-12);
    }

    #[test]
    fn visibility_length_must_match() {
        assert!(LandmarkSet::new(vec![Point::new(0.0, 0.0)], vec![true, false]).is_err());
    }
}
