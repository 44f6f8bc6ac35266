//! Heatmap codec: landmark coordinates to truncated Gaussian response maps
//! and back. Coordinates are scaled by `s`, rounded half-away-from-zero to
//! heatmap pixels, and each map carries a Gaussian bump truncated at a
//! Chebyshev radius around the peak.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmarks::{LandmarkSet, Point};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Gaussian width in heatmap pixels.
    pub sigma: f64,
    /// Truncation radius (Chebyshev, heatmap pixels).
    pub radius: usize,
    /// Image-to-heatmap downscale factor.
    pub scale: usize,
    pub heatmap_w: usize,
    pub heatmap_h: usize,
    /// Scale maps so the peak is exactly 1.0; otherwise the raw Gaussian
    /// normalization 1/(2*pi*sigma^2) applies.
    pub peak_normalize: bool,
    /// Apply the quarter-pixel refinement toward the larger axis neighbor
    /// when decoding; disabling it gives the plain argmax decode.
    pub quarter_offset: bool,
}

impl CodecConfig {
    /// Standard configuration for a given full-resolution image size.
    pub fn for_image(image_h: usize, image_w: usize) -> Result<Self> {
        let scale = 4;
        if image_h % scale != 0 || image_w % scale != 0 {
            return Err(Error::contract(
                "codec",
                format!("image dims {image_h}x{image_w} not divisible by scale {scale}"),
            ));
        }
        Ok(CodecConfig {
            sigma: 1.5,
            radius: 5,
            scale,
            heatmap_w: image_w / scale,
            heatmap_h: image_h / scale,
            peak_normalize: true,
            quarter_offset: true,
        })
    }

    pub fn peak(&self) -> f64 {
        if self.peak_normalize {
            1.0
        } else {
            1.0 / (2.0 * std::f64::consts::PI * self.sigma * self.sigma)
        }
    }
}

/// K per-landmark Gaussian response maps.
#[derive(Clone, Debug)]
pub struct HeatmapStack {
    /// [K, H', W'] response maps.
    pub values: Tensor,
    /// Peak value of an untruncated in-bounds map.
    pub peak: f64,
}

impl HeatmapStack {
    pub fn from_values(values: Tensor, peak: f64) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::shapes(
                "heatmap",
                "[K, H', W'] stack",
                format!("{:?}", values.shape()),
            ));
        }
        Ok(HeatmapStack { values, peak })
    }

    pub fn k(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Scale then round half-away-from-zero (Rust's `f64::round` tie rule).
pub fn quantize(x: f64, y: f64, scale: usize) -> (i64, i64) {
    debug_assert!(scale >= 1);
    (
        (x / scale as f64).round() as i64,
        (y / scale as f64).round() as i64,
    )
}

/// Encode image-space landmarks as a stack of truncated Gaussian maps.
/// Invisible landmarks produce all-zero maps; out-of-bounds peaks keep
/// whatever part of their window intersects the map.
pub fn encode(landmarks: &LandmarkSet, cfg: &CodecConfig) -> HeatmapStack {
    let (h, w) = (cfg.heatmap_h, cfg.heatmap_w);
    let k = landmarks.len();
    let peak = cfg.peak();
    let two_sigma_sq = 2.0 * cfg.sigma * cfg.sigma;
    let r = cfg.radius as i64;

    let mut data = vec![0.0; k * h * w];
    for (ki, (p, vis)) in landmarks.points.iter().zip(&landmarks.visibility).enumerate() {
        if !vis {
            continue;
        }
        let (cx, cy) = quantize(p.x, p.y, cfg.scale);
        let map = &mut data[ki * h * w..(ki + 1) * h * w];
        let y0 = (cy - r).max(0);
        let y1 = (cy + r).min(h as i64 - 1);
        let x0 = (cx - r).max(0);
        let x1 = (cx + r).min(w as i64 - 1);
        for j in y0..=y1 {
            for i in x0..=x1 {
                let d2 = ((i - cx) * (i - cx) + (j - cy) * (j - cy)) as f64;
                map[j as usize * w + i as usize] = peak * (-d2 / two_sigma_sq).exp();
            }
        }
    }
    HeatmapStack {
        values: Tensor::new([k, h, w], data).expect("sized by construction"),
        peak,
    }
}

/// Decode maps back to image-space coordinates: argmax, optional quarter-pixel
/// refinement toward the larger axis neighbor, then multiply by the scale.
/// All-zero maps decode as invisible.
pub fn decode(stack: &HeatmapStack, cfg: &CodecConfig) -> LandmarkSet {
    let shape = stack.values.shape();
    let (k, h, w) = (shape[0], shape[1], shape[2]);
    let mut points = Vec::with_capacity(k);
    let mut visibility = Vec::with_capacity(k);
    for ki in 0..k {
        let map = &stack.values.data()[ki * h * w..(ki + 1) * h * w];
        if map.iter().all(|v| *v == 0.0) {
            points.push(Point::new(0.0, 0.0));
            visibility.push(false);
            continue;
        }
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (i, &v) in map.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        let (my, mx) = (best / w, best % w);
        let at = |x: i64, y: i64| -> f64 {
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                0.0
            } else {
                map[y as usize * w + x as usize]
            }
        };
        let (mut fx, mut fy) = (mx as f64, my as f64);
        if cfg.quarter_offset {
            let (left, right) = (at(mx as i64 - 1, my as i64), at(mx as i64 + 1, my as i64));
            if right > left {
                fx += 0.25;
            } else if left > right {
                fx -= 0.25;
            }
            let (up, down) = (at(mx as i64, my as i64 - 1), at(mx as i64, my as i64 + 1));
            if down > up {
                fy += 0.25;
            } else if up > down {
                fy -= 0.25;
            }
        }
        points.push(Point::new(fx * cfg.scale as f64, fy * cfg.scale as f64));
        visibility.push(true);
    }
    LandmarkSet { points, visibility }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn cfg_256() -> CodecConfig {
        CodecConfig::for_image(256, 256).unwrap()
    }

    #[test]
    fn quantize_follows_scaling_with_half_away_from_zero_ties() {
        assert_eq!(quantize(205.0, 102.0, 4), (51, 26)); // 51.25 -> 51, 25.5 -> 26
        assert_eq!(quantize(0.0, 0.0, 7), (0, 0));
        assert_eq!(quantize(100.0, 100.0, 1), (100, 100));
    }

    #[test]
    fn unnormalized_peak_matches_gaussian_normalization() {
        let mut cfg = cfg_256();
        cfg.peak_normalize = false;
        let lm = LandmarkSet::all_visible(vec![Point::new(100.0, 80.0)]);
        let stack = encode(&lm, &cfg);
        let (cx, cy) = quantize(100.0, 80.0, 4);
        let v = stack.values.data()[cy as usize * cfg.heatmap_w + cx as usize];
        // 1 / (2 pi 1.5^2) = 0.070736...
        assert!((v - 0.070_735_530_263_270_77).abs() < 1e-9, "{v}");
    }

    #[test]
    fn normalized_neighbor_ratio_matches_gaussian() {
        let cfg = cfg_256();
        let lm = LandmarkSet::all_visible(vec![Point::new(100.0, 80.0)]);
        let stack = encode(&lm, &cfg);
        let (cx, cy) = quantize(100.0, 80.0, 4);
        let w = cfg.heatmap_w;
        let v = stack.values.data()[cy as usize * w + cx as usize + 1];
        // offset (1, 0): exp(-1 / 4.5) = 0.800737...
        assert!((v - (-1.0f64 / 4.5).exp()).abs() < 1e-12);
        assert!((v - 0.800_737).abs() < 1e-6);
    }

    #[test]
    fn invisible_landmark_gives_zero_map_and_decodes_invisible() {
        let cfg = cfg_256();
        let lm = LandmarkSet::new(vec![Point::new(50.0, 50.0)], vec![false]).unwrap();
        let stack = encode(&lm, &cfg);
        assert!(stack.values.data().iter().all(|v| *v == 0.0));
        let back = decode(&stack, &cfg);
        assert!(!back.visibility[0]);
    }

    #[test]
    fn single_pixel_impulse_decodes_without_offset() {
        let cfg = cfg_256();
        let (h, w) = (cfg.heatmap_h, cfg.heatmap_w);
        let mut data = vec![0.0; h * w];
        data[20 * w + 10] = 1.0;
        let stack = HeatmapStack::from_values(Tensor::new([1, h, w], data).unwrap(), 1.0).unwrap();
        let back = decode(&stack, &cfg);
        assert_eq!((back.points[0].x, back.points[0].y), (40.0, 80.0));
    }

    #[test]
    fn truncation_bounds_nonzero_support() {
        let cfg = cfg_256();
        let lm = LandmarkSet::all_visible(vec![Point::new(128.0, 128.0)]);
        let stack = encode(&lm, &cfg);
        let nonzero = stack.values.data().iter().filter(|v| **v != 0.0).count();
        assert!(nonzero <= (2 * cfg.radius + 1).pow(2) as usize);
        assert_eq!(nonzero, 11 * 11);
    }

    #[test]
    fn max_sits_on_quantized_landmark_and_is_unique() {
        let cfg = cfg_256();
        let mut rng = Rng::new(40);
        for _ in 0..50 {
            let p = Point::new(rng.range(30.0, 220.0), rng.range(30.0, 220.0));
            let stack = encode(&LandmarkSet::all_visible(vec![p]), &cfg);
            let (cx, cy) = quantize(p.x, p.y, cfg.scale);
            let w = cfg.heatmap_w;
            let data = stack.values.data();
            let peak = data[cy as usize * w + cx as usize];
            assert_eq!(peak, cfg.peak());
            let n_at_peak = data.iter().filter(|v| **v == peak).count();
            assert_eq!(n_at_peak, 1, "global maximum must be unique");
        }
    }

    #[test]
    fn translation_covariance_at_quantized_resolution() {
        let cfg = cfg_256();
        let p = Point::new(100.0, 120.0);
        let s = cfg.scale as f64;
        let (da, db) = (3i64, -2i64);
        let a = encode(&LandmarkSet::all_visible(vec![p]), &cfg);
        let b = encode(
            &LandmarkSet::all_visible(vec![Point::new(p.x + s * da as f64, p.y + s * db as f64)]),
            &cfg,
        );
        let w = cfg.heatmap_w as i64;
        let h = cfg.heatmap_h as i64;
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x + da, y + db);
                if sx < 0 || sy < 0 || sx >= w || sy >= h {
                    continue;
                }
                let va = a.values.data()[(y * w + x) as usize];
                let vb = b.values.data()[(sy * w + sx) as usize];
                assert!((va - vb).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn round_trip_error_bounded_by_quantization_plus_offset() {
        let cfg = cfg_256();
        let mut rng = Rng::new(41);
        let margin = (cfg.radius * cfg.scale) as f64;
        let bound = cfg.scale as f64 / 2.0 + cfg.scale as f64 * 0.25;
        for _ in 0..200 {
            let p = Point::new(
                rng.range(margin, 256.0 - margin),
                rng.range(margin, 256.0 - margin),
            );
            let lm = LandmarkSet::all_visible(vec![p]);
            let back = decode(&encode(&lm, &cfg), &cfg);
            assert!(back.visibility[0]);
            assert!((back.points[0].x - p.x).abs() <= bound);
            assert!((back.points[0].y - p.y).abs() <= bound);
        }
    }

    #[test]
    fn gaussian_map_soft_argmax_decodes_within_quarter_pixel() {
        // ties the codec to the differentiable decoder: a generated map at
        // (7, 9) soft-decodes to within 0.25 px with beta = 10
        let cfg = CodecConfig::for_image(64, 64).unwrap();
        let lm = LandmarkSet::all_visible(vec![Point::new(7.0 * 4.0, 9.0 * 4.0)]);
        let stack = encode(&lm, &cfg);
        let batched = stack.values.reshaped([1, 1, 16, 16]).unwrap();
        let mut tape = crate::tensor::Tape::inference();
        let c = crate::netops::soft_argmax(&mut tape, &batched, 10.0).unwrap();
        assert!((c.data()[0] - 7.0).abs() < 0.25, "{}", c.data()[0]);
        assert!((c.data()[1] - 9.0).abs() < 0.25, "{}", c.data()[1]);
    }
}
