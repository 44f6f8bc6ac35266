//! Training-time augmentation: the epoch-scheduled landmark patch curriculum
//! (black squares painted over landmark locations, shrinking as training
//! progresses) plus the standard photometric/geometric pipeline, composed
//! into the two Siamese views.
//!
//! Everything here is a pure function of (sample seed, epoch, config), so
//! augmented batches replay exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmarks::{FaceBox, LandmarkSet, Point};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Patch curriculum state: start at `initial_side`, shrink by one pixel every
/// `epoch_interval` epochs, stay at zero (no patch) for the tail.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatchSchedule {
    pub initial_side: usize,
    pub epoch_interval: usize,
    pub tail_epochs: usize,
    /// RGB fill value of the painted squares.
    pub intensity: [f64; 3],
}

impl PatchSchedule {
    pub fn new(initial_side: usize, epoch_interval: usize, tail_epochs: usize) -> Result<Self> {
        if initial_side == 0 {
            return Err(Error::contract("schedule", "initial side must be positive"));
        }
        if epoch_interval == 0 {
            return Err(Error::contract("schedule", "epoch interval must be positive"));
        }
        Ok(PatchSchedule {
            initial_side,
            epoch_interval,
            tail_epochs,
            intensity: [0.0; 3],
        })
    }

    /// Total epochs the schedule spans: n * interval + tail.
    pub fn total_epochs(&self) -> usize {
        self.initial_side * self.epoch_interval + self.tail_epochs
    }

    /// Patch side length at `epoch`: max(n - floor(epoch / interval), 0).
    /// Zero means the patch stage is over.
    pub fn side_at(&self, epoch: usize) -> Result<usize> {
        if epoch >= self.total_epochs() {
            return Err(Error::contract(
                "schedule",
                format!("epoch {epoch} outside schedule of {} epochs", self.total_epochs()),
            ));
        }
        let shrink = epoch / self.epoch_interval;
        Ok(self.initial_side.saturating_sub(shrink))
    }
}

impl Default for PatchSchedule {
    fn default() -> Self {
        PatchSchedule {
            initial_side: 5,
            epoch_interval: 10,
            tail_epochs: 0,
            intensity: [0.0; 3],
        }
    }
}

/// Standard augmentation pipeline configuration. Augmentations apply
/// independently, in the field order below.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    /// 1-3 rectangles filled with the image mean color.
    pub masking_prob: f64,
    /// Uniform scale jitter about the image center with bilinear resampling.
    pub scale_jitter_prob: f64,
    pub scale_jitter_range: (f64, f64),
    /// One uniformly colored rectangle covering a fraction of the image.
    pub occlusion_prob: f64,
    pub occlusion_area: (f64, f64),
    /// Replace channels by their average.
    pub gray_prob: f64,
    pub gamma_prob: f64,
    pub gamma_range: (f64, f64),
    /// 3x3 box blur.
    pub blur_prob: f64,
    /// Additive Gaussian noise.
    pub noise_prob: f64,
    pub noise_sigma: (f64, f64),
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            masking_prob: 0.3,
            scale_jitter_prob: 0.5,
            scale_jitter_range: (0.9, 1.1),
            occlusion_prob: 0.3,
            occlusion_area: (0.05, 0.2),
            gray_prob: 0.2,
            gamma_prob: 0.3,
            gamma_range: (0.5, 2.0),
            blur_prob: 0.2,
            noise_prob: 0.3,
            noise_sigma: (0.01, 0.05),
        }
    }
}

impl AugConfig {
    /// Pipeline with every augmentation disabled.
    pub fn disabled() -> Self {
        AugConfig {
            masking_prob: 0.0,
            scale_jitter_prob: 0.0,
            occlusion_prob: 0.0,
            gray_prob: 0.0,
            gamma_prob: 0.0,
            blur_prob: 0.0,
            noise_prob: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("masking_prob", self.masking_prob),
            ("scale_jitter_prob", self.scale_jitter_prob),
            ("occlusion_prob", self.occlusion_prob),
            ("gray_prob", self.gray_prob),
            ("gamma_prob", self.gamma_prob),
            ("blur_prob", self.blur_prob),
            ("noise_prob", self.noise_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config {
                    path: format!("augment.{name}"),
                    msg: format!("probability {p} outside [0, 1]"),
                });
            }
        }
        let ranges = [
            ("scale_jitter_range", self.scale_jitter_range),
            ("occlusion_area", self.occlusion_area),
            ("gamma_range", self.gamma_range),
            ("noise_sigma", self.noise_sigma),
        ];
        for (name, (lo, hi)) in ranges {
            if lo >= hi || lo <= 0.0 {
                return Err(Error::Config {
                    path: format!("augment.{name}"),
                    msg: format!("degenerate range ({lo}, {hi})"),
                });
            }
        }
        Ok(())
    }
}

/// One dataset sample: image, exact landmarks, face box, and the seed that
/// keys all randomness derived for it.
#[derive(Clone, Debug)]
pub struct SampleRecord {
    /// [3, H, W] pixels in [0, 1].
    pub image: Tensor,
    pub landmarks: LandmarkSet,
    pub face_box: FaceBox,
    pub seed: u64,
}

impl SampleRecord {
    pub fn image_hw(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

fn round_half_away(v: f64) -> i64 {
    v.round() as i64
}

/// Paint an axis-aligned square of `side` pixels over every visible landmark.
/// Odd sides center exactly on the rounded landmark pixel; even sides extend
/// one pixel further toward +x/+y. Side 0 is the identity. Landmarks are
/// never modified.
pub fn apply_fifa(image: &Tensor, landmarks: &LandmarkSet, side: usize, intensity: [f64; 3]) -> Tensor {
    if side == 0 {
        return image.clone();
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut data = image.data().to_vec();
    let lo_off = (side as i64 - 1) / 2; // toward -x/-y
    let hi_off = side as i64 / 2; // toward +x/+y
    for (_, p) in landmarks.visible() {
        let cx = round_half_away(p.x);
        let cy = round_half_away(p.y);
        let y0 = (cy - lo_off).max(0);
        let y1 = (cy + hi_off).min(h as i64 - 1);
        let x0 = (cx - lo_off).max(0);
        let x1 = (cx + hi_off).min(w as i64 - 1);
        if y0 > y1 || x0 > x1 {
            continue;
        }
        for c in 0..3 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    data[(c * h as usize + y as usize) * w + x as usize] = intensity[c];
                }
            }
        }
    }
    Tensor::new(image.shape().to_vec(), data).expect("same shape")
}

// ── standard augmentation primitives ────────────────────────────────

fn mean_color(data: &[f64], h: usize, w: usize) -> [f64; 3] {
    let plane = h * w;
    let mut m = [0.0; 3];
    for (c, mc) in m.iter_mut().enumerate() {
        *mc = data[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
    }
    m
}

fn fill_rect(data: &mut [f64], h: usize, w: usize, x0: usize, y0: usize, rw: usize, rh: usize, color: [f64; 3]) {
    let x1 = (x0 + rw).min(w);
    let y1 = (y0 + rh).min(h);
    for c in 0..3 {
        for y in y0..y1 {
            for x in x0..x1 {
                data[(c * h + y) * w + x] = color[c];
            }
        }
    }
}

fn gamma_map(data: &mut [f64], gamma: f64) {
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0).powf(gamma);
    }
}

fn gray_map(data: &mut [f64], h: usize, w: usize) {
    let plane = h * w;
    for i in 0..plane {
        let m = (data[i] + data[plane + i] + data[2 * plane + i]) / 3.0;
        data[i] = m;
        data[plane + i] = m;
        data[2 * plane + i] = m;
    }
}

fn box_blur3(data: &mut [f64], h: usize, w: usize) {
    let plane = h * w;
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let i = if i < 0 {
            -i
        } else if i >= n {
            2 * n - 2 - i
        } else {
            i
        };
        i as usize
    };
    for c in 0..3 {
        let src: Vec<f64> = data[c * plane..(c + 1) * plane].to_vec();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        acc += src[reflect(y as isize + dy, h) * w + reflect(x as isize + dx, w)];
                    }
                }
                data[c * plane + y * w + x] = acc / 9.0;
            }
        }
    }
}

fn add_noise(data: &mut [f64], sigma: f64, rng: &mut Rng) {
    for v in data.iter_mut() {
        *v = (*v + sigma * rng.normal()).clamp(0.0, 1.0);
    }
}

/// Bilinear rescale about the image center by `factor`; landmarks and the
/// face box follow the same similarity transform. Landmark coordinates are
/// clamped to stay inside the image.
fn scale_jitter(
    data: &[f64],
    h: usize,
    w: usize,
    landmarks: &LandmarkSet,
    face_box: &FaceBox,
    factor: f64,
) -> (Vec<f64>, LandmarkSet, FaceBox) {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let plane = h * w;
    let mut out = vec![0.0; 3 * plane];
    for y in 0..h {
        let sy = (cy + (y as f64 - cy) / factor).clamp(0.0, h as f64 - 1.0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = sy - y0 as f64;
        for x in 0..w {
            let sx = (cx + (x as f64 - cx) / factor).clamp(0.0, w as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = sx - x0 as f64;
            for c in 0..3 {
                let p = &data[c * plane..(c + 1) * plane];
                out[c * plane + y * w + x] = (1.0 - ty)
                    * ((1.0 - tx) * p[y0 * w + x0] + tx * p[y0 * w + x1])
                    + ty * ((1.0 - tx) * p[y1 * w + x0] + tx * p[y1 * w + x1]);
            }
        }
    }
    let points: Vec<Point> = landmarks
        .points
        .iter()
        .map(|p| {
            Point::new(
                (cx + factor * (p.x - cx)).clamp(0.0, w as f64 - 1.0),
                (cy + factor * (p.y - cy)).clamp(0.0, h as f64 - 1.0),
            )
        })
        .collect();
    let lm = LandmarkSet {
        points,
        visibility: landmarks.visibility.clone(),
    };
    let fb = FaceBox {
        x: cx + factor * (face_box.x - cx),
        y: cy + factor * (face_box.y - cy),
        w: factor * face_box.w,
        h: factor * face_box.h,
    };
    (out, lm, fb)
}

/// Apply the standard pipeline in its fixed order. Geometric jitter moves the
/// landmarks and face box consistently; photometric stages leave them alone.
pub fn apply_standard(
    image: &Tensor,
    landmarks: &LandmarkSet,
    face_box: &FaceBox,
    cfg: &AugConfig,
    rng: &mut Rng,
) -> (Tensor, LandmarkSet, FaceBox) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut data = image.data().to_vec();
    let mut lm = landmarks.clone();
    let mut fb = *face_box;

    if rng.chance(cfg.masking_prob) {
        let color = mean_color(&data, h, w);
        let n = 1 + rng.below(3);
        for _ in 0..n {
            let rw = (w as f64 * rng.range(0.1, 0.3)) as usize + 1;
            let rh = (h as f64 * rng.range(0.1, 0.3)) as usize + 1;
            let x0 = rng.below(w.saturating_sub(rw).max(1));
            let y0 = rng.below(h.saturating_sub(rh).max(1));
            fill_rect(&mut data, h, w, x0, y0, rw, rh, color);
        }
    }
    if rng.chance(cfg.scale_jitter_prob) {
        let factor = rng.range(cfg.scale_jitter_range.0, cfg.scale_jitter_range.1);
        let (d2, l2, f2) = scale_jitter(&data, h, w, &lm, &fb, factor);
        data = d2;
        lm = l2;
        fb = f2;
    }
    if rng.chance(cfg.occlusion_prob) {
        let area = rng.range(cfg.occlusion_area.0, cfg.occlusion_area.1) * (w * h) as f64;
        let aspect = rng.range(0.5, 2.0);
        let rw = ((area * aspect).sqrt() as usize).clamp(1, w);
        let rh = ((area / rw as f64) as usize).clamp(1, h);
        let x0 = rng.below(w.saturating_sub(rw).max(1));
        let y0 = rng.below(h.saturating_sub(rh).max(1));
        let color = [rng.uniform(), rng.uniform(), rng.uniform()];
        fill_rect(&mut data, h, w, x0, y0, rw, rh, color);
    }
    if rng.chance(cfg.gray_prob) {
        gray_map(&mut data, h, w);
    }
    if rng.chance(cfg.gamma_prob) {
        gamma_map(&mut data, rng.range(cfg.gamma_range.0, cfg.gamma_range.1));
    }
    if rng.chance(cfg.blur_prob) {
        box_blur3(&mut data, h, w);
    }
    if rng.chance(cfg.noise_prob) {
        let sigma = rng.range(cfg.noise_sigma.0, cfg.noise_sigma.1);
        add_noise(&mut data, sigma, rng);
    }

    (
        Tensor::new(image.shape().to_vec(), data).expect("same shape"),
        lm,
        fb,
    )
}

const VIEW_CLEAN: u64 = 0x5631;
const VIEW_PATCHED: u64 = 0x5632;

/// One augmented view of a record. `stream` separates the random draws of the
/// two Siamese branches; `with_patches` composes the landmark-patch stage on
/// top of the standard pipeline.
fn build_view(
    rec: &SampleRecord,
    cfg: &AugConfig,
    sched: &PatchSchedule,
    epoch: usize,
    stream: u64,
    with_patches: bool,
) -> Result<SampleRecord> {
    let mut rng = Rng::derive(rec.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15), stream);
    let (image, landmarks, face_box) =
        apply_standard(&rec.image, &rec.landmarks, &rec.face_box, cfg, &mut rng);
    let image = if with_patches {
        let side = sched.side_at(epoch)?;
        apply_fifa(&image, &landmarks, side, sched.intensity)
    } else {
        image
    };
    Ok(SampleRecord {
        image,
        landmarks,
        face_box,
        seed: rec.seed,
    })
}

/// The two Siamese views: view 1 is standard-augmented, view 2 additionally
/// carries the scheduled landmark patches. Deterministic in
/// (record seed, epoch, configs); the two views draw from independent streams.
pub fn two_views(
    rec: &SampleRecord,
    cfg: &AugConfig,
    sched: &PatchSchedule,
    epoch: usize,
) -> Result<(SampleRecord, SampleRecord)> {
    let v1 = build_view(rec, cfg, sched, epoch, VIEW_CLEAN, false)?;
    let v2 = build_view(rec, cfg, sched, epoch, VIEW_PATCHED, true)?;
    Ok((v1, v2))
}

/// The single-branch view used when Siamese training is off: the standard
/// pipeline, plus patches when the curriculum is enabled. Uses the clean
/// view's random stream so single-branch ablations differ from each other
/// only in the patches.
pub fn single_view(
    rec: &SampleRecord,
    cfg: &AugConfig,
    sched: &PatchSchedule,
    epoch: usize,
    with_patches: bool,
) -> Result<SampleRecord> {
    build_view(rec, cfg, sched, epoch, VIEW_CLEAN, with_patches)
}
