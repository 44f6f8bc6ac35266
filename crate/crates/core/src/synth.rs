//! Procedural face-like image generator with exact landmark ground truth.
//!
//! Faces are rotated ellipses with eyes, nose and mouth placed analytically in
//! the face frame; the twelve landmarks (4 jawline, 4 eye corners, nose tip,
//! 3 mouth points) come straight from the geometry, so ground truth is exact
//! by construction. Occluder rectangles may cover landmarks; visibility stays
//! true, since predicting occluded points is part of the task.
//!
//! Landmark order: 0-3 jawline left to right, 4 left-eye outer corner,
//! 5 left-eye inner, 6 right-eye inner, 7 right-eye outer, 8 nose tip,
//! 9 mouth left corner, 10 mouth center, 11 mouth right corner.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::SampleRecord;
use crate::error::{Error, Result};
use crate::landmarks::{FaceBox, LandmarkSet, Point};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const OUTER_LEFT_EYE: usize = 4;
pub const OUTER_RIGHT_EYE: usize = 7;
pub const LANDMARK_COUNT: usize = 12;

/// Analytic description of one synthetic face. All feature offsets live in
/// the unrotated face frame; `landmarks` and `render` apply the rotation.
#[derive(Clone, Debug)]
pub struct FaceSpec {
    pub center: Point,
    /// Semi-axes of the head ellipse (horizontal, vertical).
    pub axes: (f64, f64),
    /// Head roll in radians.
    pub theta: f64,
    /// Eye center offsets from the ellipse center (+x out, +y down).
    pub eye_dx: f64,
    pub eye_dy: f64,
    pub eye_radius: f64,
    /// Half-distance between the two corners of one eye.
    pub eye_corner: f64,
    pub nose_drop: f64,
    pub mouth_half_width: f64,
    pub mouth_drop: f64,
    pub mouth_sag: f64,
    pub skin: [f64; 3],
    pub eye_color: [f64; 3],
    pub mouth_color: [f64; 3],
    pub background: f64,
    pub illum_dir: (f64, f64),
    pub illum_strength: f64,
    /// Up to two (x, y, w, h, color) rectangles painted last.
    pub occluders: Vec<(f64, f64, f64, f64, [f64; 3])>,
}

impl FaceSpec {
    /// Draw a random face that fits (with its expanded box) inside h x w.
    pub fn sample(rng: &mut Rng, h: usize, w: usize) -> FaceSpec {
        let s = h.min(w) as f64;
        let a = s * rng.range(0.28, 0.34);
        let b = s * rng.range(0.32, 0.38);
        let max_r = a.max(b);
        let margin = 1.2 * max_r + 1.0;
        let cx = rng.range(margin, w as f64 - 1.0 - margin);
        let cy = rng.range(margin, h as f64 - 1.0 - margin);
        let theta = rng.range(-30f64.to_radians(), 30f64.to_radians());

        let skin_base = rng.range(0.55, 0.8);
        let skin = [
            (skin_base + rng.range(0.0, 0.1)).min(0.95),
            skin_base * rng.range(0.82, 0.95),
            skin_base * rng.range(0.6, 0.8),
        ];
        let eye_v = rng.range(0.05, 0.2);
        let mouth_v = rng.range(0.15, 0.4);

        let n_occ = {
            let u = rng.uniform();
            if u < 0.35 {
                0
            } else if u < 0.75 {
                1
            } else {
                2
            }
        };
        let mut occluders = Vec::new();
        for _ in 0..n_occ {
            let ow = s * rng.range(0.15, 0.3);
            let oh = s * rng.range(0.15, 0.3);
            // biased toward the face so landmarks actually get covered
            let ox = cx + rng.range(-0.9, 0.9) * a - ow / 2.0;
            let oy = cy + rng.range(-0.9, 0.9) * b - oh / 2.0;
            occluders.push((
                ox.clamp(0.0, w as f64 - 2.0),
                oy.clamp(0.0, h as f64 - 2.0),
                ow,
                oh,
                [rng.uniform(), rng.uniform(), rng.uniform()],
            ));
        }

        FaceSpec {
            center: Point::new(cx, cy),
            axes: (a, b),
            theta,
            eye_dx: a * rng.range(0.4, 0.5),
            eye_dy: -b * rng.range(0.25, 0.38),
            eye_radius: a * rng.range(0.16, 0.22),
            eye_corner: a * rng.range(0.24, 0.3),
            nose_drop: b * rng.range(0.05, 0.18),
            mouth_half_width: a * rng.range(0.35, 0.5),
            mouth_drop: b * rng.range(0.45, 0.6),
            mouth_sag: b * rng.range(0.05, 0.14),
            skin,
            eye_color: [eye_v, eye_v, eye_v + 0.05],
            mouth_color: [mouth_v + 0.25, mouth_v * 0.4, mouth_v * 0.4],
            background: rng.range(0.1, 0.9),
            illum_dir: {
                let ang = rng.range(0.0, std::f64::consts::TAU);
                (ang.cos(), ang.sin())
            },
            illum_strength: rng.range(0.0, 0.25),
            occluders,
        }
    }

    /// Face frame to image frame.
    fn place(&self, fx: f64, fy: f64) -> Point {
        let (s, c) = self.theta.sin_cos();
        Point::new(
            self.center.x + c * fx - s * fy,
            self.center.y + s * fx + c * fy,
        )
    }

    /// The twelve landmarks, computed analytically from the geometry.
    pub fn landmarks(&self) -> LandmarkSet {
        let (a, b) = self.axes;
        let jaw = |deg: f64| {
            let t = deg.to_radians();
            self.place(a * t.cos(), b * t.sin())
        };
        let points = vec![
            jaw(150.0),
            jaw(100.0),
            jaw(80.0),
            jaw(30.0),
            self.place(-self.eye_dx - self.eye_corner, self.eye_dy),
            self.place(-self.eye_dx + self.eye_corner, self.eye_dy),
            self.place(self.eye_dx - self.eye_corner, self.eye_dy),
            self.place(self.eye_dx + self.eye_corner, self.eye_dy),
            self.place(0.0, self.nose_drop),
            self.place(-self.mouth_half_width, self.mouth_drop),
            self.place(0.0, self.mouth_drop + self.mouth_sag),
            self.place(self.mouth_half_width, self.mouth_drop),
        ];
        LandmarkSet::all_visible(points)
    }

    /// Rasterize to a [3, h, w] image in [0, 1].
    pub fn render(&self, h: usize, w: usize) -> Tensor {
        let plane = h * w;
        let mut data = vec![0.0; 3 * plane];
        let diag = ((h * h + w * w) as f64).sqrt();
        let (st, ct) = self.theta.sin_cos();

        // background with an illumination gradient
        for y in 0..h {
            for x in 0..w {
                let d = ((x as f64 - self.center.x) * self.illum_dir.0
                    + (y as f64 - self.center.y) * self.illum_dir.1)
                    / diag;
                let v = (self.background + self.illum_strength * d).clamp(0.02, 0.98);
                data[y * w + x] = v;
                data[plane + y * w + x] = v;
                data[2 * plane + y * w + x] = v;
            }
        }

        let put = |x: f64, y: f64, color: [f64; 3], data: &mut Vec<f64>| {
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                let i = y as usize * w + x as usize;
                data[i] = color[0];
                data[plane + i] = color[1];
                data[2 * plane + i] = color[2];
            }
        };

        // head ellipse with a little shading along the illumination direction
        let (a, b) = self.axes;
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - self.center.x;
                let dy = y as f64 - self.center.y;
                let fx = ct * dx + st * dy;
                let fy = -st * dx + ct * dy;
                if (fx / a).powi(2) + (fy / b).powi(2) <= 1.0 {
                    let shade = 1.0
                        + 0.6 * self.illum_strength * (dx * self.illum_dir.0 + dy * self.illum_dir.1)
                            / a.max(b);
                    let i = y * w + x;
                    data[i] = (self.skin[0] * shade).clamp(0.0, 1.0);
                    data[plane + i] = (self.skin[1] * shade).clamp(0.0, 1.0);
                    data[2 * plane + i] = (self.skin[2] * shade).clamp(0.0, 1.0);
                }
            }
        }

        // eyes: bright sclera disk with a dark iris
        let sclera = [0.92, 0.92, 0.9];
        for side in [-1.0, 1.0] {
            let c = self.place(side * self.eye_dx, self.eye_dy);
            let r = self.eye_radius;
            let y0 = (c.y - r).floor().max(0.0) as usize;
            let y1 = ((c.y + r).ceil() as usize).min(h - 1);
            let x0 = (c.x - r).floor().max(0.0) as usize;
            let x1 = ((c.x + r).ceil() as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d2 = (x as f64 - c.x).powi(2) + (y as f64 - c.y).powi(2);
                    if d2 <= r * r {
                        let i = y * w + x;
                        let col = if d2 <= (0.55 * r) * (0.55 * r) { self.eye_color } else { sclera };
                        data[i] = col[0];
                        data[plane + i] = col[1];
                        data[2 * plane + i] = col[2];
                    }
                }
            }
        }

        // nose tip: small dark-ish disk below center
        let nose = self.place(0.0, self.nose_drop);
        let nr = (0.06 * a).max(1.0);
        for dy in -(nr.ceil() as i64)..=nr.ceil() as i64 {
            for dx in -(nr.ceil() as i64)..=nr.ceil() as i64 {
                if (dx * dx + dy * dy) as f64 <= nr * nr {
                    put(
                        nose.x + dx as f64,
                        nose.y + dy as f64,
                        [self.skin[0] * 0.6, self.skin[1] * 0.55, self.skin[2] * 0.55],
                        &mut data,
                    );
                }
            }
        }

        // mouth: quadratic Bezier through the three mouth landmarks
        let p0 = self.place(-self.mouth_half_width, self.mouth_drop);
        let p2 = self.place(self.mouth_half_width, self.mouth_drop);
        let mid = self.place(0.0, self.mouth_drop + self.mouth_sag);
        // control point so the curve passes through `mid` at t = 0.5
        let ctrl = Point::new(2.0 * mid.x - (p0.x + p2.x) / 2.0, 2.0 * mid.y - (p0.y + p2.y) / 2.0);
        let steps = (4.0 * self.mouth_half_width) as usize + 8;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let mt = 1.0 - t;
            let bx = mt * mt * p0.x + 2.0 * mt * t * ctrl.x + t * t * p2.x;
            let by = mt * mt * p0.y + 2.0 * mt * t * ctrl.y + t * t * p2.y;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    put(bx + dx as f64, by + dy as f64, self.mouth_color, &mut data);
                }
            }
        }

        // occluders go on top of everything
        for &(ox, oy, ow, oh, color) in &self.occluders {
            let x0 = ox.max(0.0) as usize;
            let y0 = oy.max(0.0) as usize;
            let x1 = ((ox + ow) as usize).min(w);
            let y1 = ((oy + oh) as usize).min(h);
            for y in y0..y1 {
                for x in x0..x1 {
                    let i = y * w + x;
                    data[i] = color[0];
                    data[plane + i] = color[1];
                    data[2 * plane + i] = color[2];
                }
            }
        }

        Tensor::new([3, h, w], data).expect("sized by construction")
    }
}

/// A generated split: samples plus the face specs they came from. Specs are
/// kept in memory for geometry cross-checks; only the samples go to disk.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub samples: Vec<SampleRecord>,
    pub specs: Vec<FaceSpec>,
    pub tag: String,
    pub seed: u64,
}

/// Deterministically generate `count` faces. Per-sample seeds derive from the
/// corpus seed, so any sample can be regenerated in isolation.
pub fn generate(count: usize, seed: u64, image_hw: (usize, usize)) -> Result<Corpus> {
    if count == 0 {
        return Err(Error::contract("generate", "count must be at least 1"));
    }
    let (h, w) = image_hw;
    let mut samples = Vec::with_capacity(count);
    let mut specs = Vec::with_capacity(count);
    for i in 0..count {
        let sample_seed = Rng::derive(seed, i as u64).next_u64();
        let mut rng = Rng::new(sample_seed);
        let spec = FaceSpec::sample(&mut rng, h, w);
        let landmarks = spec.landmarks();
        let face_box = clamp_box(FaceBox::around(&landmarks.points, 0.1), h, w);
        samples.push(SampleRecord {
            image: spec.render(h, w),
            landmarks,
            face_box,
            seed: sample_seed,
        });
        specs.push(spec);
    }
    Ok(Corpus {
        samples,
        specs,
        tag: String::new(),
        seed,
    })
}

fn clamp_box(b: FaceBox, h: usize, w: usize) -> FaceBox {
    let x0 = b.x.max(0.0);
    let y0 = b.y.max(0.0);
    let x1 = (b.x + b.w).min(w as f64 - 1.0);
    let y1 = (b.y + b.h).min(h as f64 - 1.0);
    FaceBox {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
    }
}

/// Distance between the outer eye-corner landmarks.
pub fn interocular(rec: &SampleRecord) -> Result<f64> {
    let lm = &rec.landmarks;
    if lm.len() <= OUTER_RIGHT_EYE {
        return Err(Error::contract(
            "interocular",
            format!("need {} landmarks, have {}", OUTER_RIGHT_EYE + 1, lm.len()),
        ));
    }
    if !lm.visibility[OUTER_LEFT_EYE] || !lm.visibility[OUTER_RIGHT_EYE] {
        return Err(Error::contract("interocular", "outer eye landmark missing"));
    }
    Ok(lm.points[OUTER_LEFT_EYE].dist(&lm.points[OUTER_RIGHT_EYE]))
}

// ── on-disk corpus layout: PPM images + one JSON manifest per split ──

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    landmarks: Vec<[f64; 2]>,
    visibility: Vec<bool>,
    face_box: [f64; 4],
    seed: u64,
}

/// Write a [3, H, W] image in [0, 1] as binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut bytes = Vec::with_capacity(3 * plane + 32);
    bytes.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for i in 0..plane {
        for c in 0..3 {
            let v = (image.data()[c * plane + i] * 255.0).round().clamp(0.0, 255.0);
            bytes.push(v as u8);
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a binary PPM back into a [3, H, W] tensor in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let ctx = || format!("{}: invalid PPM", path.display());
    // header: P6 <w> <h> <maxval> then one whitespace byte
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < raw.len() {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8_lossy(&raw[start..pos]).to_string());
    }
    pos += 1; // single whitespace after maxval
    if fields.len() != 4 || fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::contract("read_ppm", ctx()));
    }
    let w: usize = fields[1].parse().map_err(|_| Error::contract("read_ppm", ctx()))?;
    let h: usize = fields[2].parse().map_err(|_| Error::contract("read_ppm", ctx()))?;
    let plane = h * w;
    if raw.len() < pos + 3 * plane {
        return Err(Error::contract("read_ppm", ctx()));
    }
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = raw[pos + 3 * i + c] as f64 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

impl Corpus {
    /// Write images and the manifest into `dir` (one directory per split).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut manifest = Vec::with_capacity(self.samples.len());
        for (i, rec) in self.samples.iter().enumerate() {
            let file = format!("img_{i:06}.ppm");
            write_ppm(&dir.join(&file), &rec.image)?;
            manifest.push(ManifestEntry {
                file,
                landmarks: rec.landmarks.points.iter().map(|p| [p.x, p.y]).collect(),
                visibility: rec.landmarks.visibility.clone(),
                face_box: [rec.face_box.x, rec.face_box.y, rec.face_box.w, rec.face_box.h],
                seed: rec.seed,
            });
        }
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::json("manifest", e))?;
        fs::write(dir.join("manifest.json"), json)
            .map_err(|e| Error::io(dir.display().to_string(), e))
    }

    /// Load a split saved by [`Corpus::save`]. Face specs are not persisted,
    /// so the loaded corpus carries samples only.
    pub fn load(dir: &Path) -> Result<Corpus> {
        let manifest_path = dir.join("manifest.json");
        let json = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        let manifest: Vec<ManifestEntry> =
            serde_json::from_str(&json).map_err(|e| Error::json("manifest", e))?;
        let mut samples = Vec::with_capacity(manifest.len());
        for entry in manifest {
            let image = read_ppm(&dir.join(&entry.file))?;
            let points = entry.landmarks.iter().map(|p| Point::new(p[0], p[1])).collect();
            samples.push(SampleRecord {
                image,
                landmarks: LandmarkSet::new(points, entry.visibility)?,
                face_box: FaceBox {
                    x: entry.face_box[0],
                    y: entry.face_box[1],
                    w: entry.face_box[2],
                    h: entry.face_box[3],
                },
                seed: entry.seed,
            });
        }
        let tag = dir
            .file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_default();
        Ok(Corpus {
            samples,
            specs: Vec::new(),
            tag,
            seed: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_by_seed() {
        let a = generate(4, 11, (64, 64)).unwrap();
        let b = generate(4, 11, (64, 64)).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.seed, y.seed);
            assert!(x
                .image
                .data()
                .iter()
                .zip(y.image.data())
                .all(|(p, q)| p.to_bits() == q.to_bits()));
            assert_eq!(x.landmarks, y.landmarks);
        }
        let c = generate(4, 12, (64, 64)).unwrap();
        assert_ne!(a.samples[0].image.data(), c.samples[0].image.data());
    }

    #[test]
    fn per_sample_seeds_are_distinct() {
        let corpus = generate(64, 3, (32, 32)).unwrap();
        let mut seeds: Vec<u64> = corpus.samples.iter().map(|s| s.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 64);
    }

    #[test]
    fn pixels_stay_in_unit_interval_and_landmarks_in_bounds() {
        let corpus = generate(16, 5, (64, 64)).unwrap();
        for rec in &corpus.samples {
            assert!(rec.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for (_, p) in rec.landmarks.visible() {
                assert!(p.x >= 0.0 && p.x <= 63.0, "{p:?}");
                assert!(p.y >= 0.0 && p.y <= 63.0, "{p:?}");
            }
            assert_eq!(rec.landmarks.len(), LANDMARK_COUNT);
        }
    }

    #[test]
    fn upright_centered_face_has_mirror_symmetric_landmarks() {
        let mut rng = Rng::new(8);
        let mut spec = FaceSpec::sample(&mut rng, 64, 64);
        spec.theta = 0.0;
        spec.center = Point::new(31.5, 31.5);
        let lm = spec.landmarks();
        let pairs = [(0usize, 3usize), (1, 2), (4, 7), (5, 6), (9, 11)];
        for (l, r) in pairs {
            assert!(
                (lm.points[l].x + lm.points[r].x - 2.0 * 31.5).abs() < 1e-9,
                "pair {l},{r}"
            );
            assert!((lm.points[l].y - lm.points[r].y).abs() < 1e-9);
        }
        // nose and mouth center sit on the centerline
        assert!((lm.points[8].x - 31.5).abs() < 1e-9);
        assert!((lm.points[10].x - 31.5).abs() < 1e-9);
    }

    #[test]
    fn landmarks_regenerate_exactly_from_the_stored_spec() {
        let corpus = generate(8, 21, (64, 64)).unwrap();
        for (rec, spec) in corpus.samples.iter().zip(&corpus.specs) {
            let again = spec.landmarks();
            for (a, b) in rec.landmarks.points.iter().zip(&again.points) {
                assert_eq!(a.x.to_bits(), b.x.to_bits());
                assert_eq!(a.y.to_bits(), b.y.to_bits());
            }
        }
    }

    #[test]
    fn interocular_is_the_outer_corner_distance() {
        let corpus = generate(1, 2, (64, 64)).unwrap();
        let rec = &corpus.samples[0];
        let d = interocular(rec).unwrap();
        let want = rec.landmarks.points[OUTER_LEFT_EYE].dist(&rec.landmarks.points[OUTER_RIGHT_EYE]);
        assert_eq!(d, want);
        assert!(d > 10.0, "eyes too close for a useful normalizer: {d}");

        // hand case
        let mut rec2 = rec.clone();
        rec2.landmarks.points[OUTER_LEFT_EYE] = Point::new(20.0, 30.0);
        rec2.landmarks.points[OUTER_RIGHT_EYE] = Point::new(44.0, 30.0);
        assert_eq!(interocular(&rec2).unwrap(), 24.0);

        // coincident corners degrade to zero; the metrics layer rejects it
        rec2.landmarks.points[OUTER_RIGHT_EYE] = Point::new(20.0, 30.0);
        assert_eq!(interocular(&rec2).unwrap(), 0.0);
        assert!(crate::metrics::nme(&rec2.landmarks, &rec2.landmarks, 0.0).is_err());

        rec2.landmarks.visibility[OUTER_LEFT_EYE] = false;
        assert!(interocular(&rec2).is_err());
    }

    #[test]
    fn interocular_matches_spec_geometry() {
        let corpus = generate(6, 33, (64, 64)).unwrap();
        for (rec, spec) in corpus.samples.iter().zip(&corpus.specs) {
            // outer corners sit at +-(eye_dx + eye_corner) in the face frame,
            // mirrored about the center, so the distance is invariant to the
            // rotation: 2 * (eye_dx + eye_corner)
            let want = 2.0 * (spec.eye_dx + spec.eye_corner);
            assert!((interocular(rec).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ppm_round_trip_preserves_quantized_pixels() {
        let dir = std::env::temp_dir().join("fifa_synth_ppm_test");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let corpus = generate(1, 9, (32, 32)).unwrap();
        let path = dir.join("x.ppm");
        write_ppm(&path, &corpus.samples[0].image).unwrap();
        let back = read_ppm(&path).unwrap();
        for (a, b) in corpus.samples[0].image.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn corpus_save_load_round_trip() {
        let dir = std::env::temp_dir().join("fifa_synth_corpus_test");
        let _ = fs::remove_dir_all(&dir);
        let corpus = generate(3, 13, (32, 32)).unwrap();
        corpus.save(&dir).unwrap();
        let back = Corpus::load(&dir).unwrap();
        assert_eq!(back.samples.len(), 3);
        for (a, b) in corpus.samples.iter().zip(&back.samples) {
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.landmarks, b.landmarks);
            assert_eq!(a.face_box, b.face_box);
        }
        // saving the loaded corpus reproduces the files byte for byte
        let dir2 = std::env::temp_dir().join("fifa_synth_corpus_test2");
        let _ = fs::remove_dir_all(&dir2);
        back.save(&dir2).unwrap();
        for name in ["img_000000.ppm", "manifest.json"] {
            let x = fs::read(dir.join(name)).unwrap();
            let y = fs::read(dir2.join(name)).unwrap();
            assert_eq!(x, y, "{name}");
        }
        let _ = fs::remove_dir_all(&dir);
        let _ = fs::remove_dir_all(&dir2);
    }
}
