//! Deterministic synthetic inputs: feature tensors, crack-like test images,
//! pyramid levels, parameter bundles, and matched detection / ground-truth
//! box files, all derived from a single seed.

use std::path::Path;

use crate::crselector::CRSelectorParams;
use crate::error::Result;
use crate::eval::{BBox, Detection, GroundTruthBox};
use crate::io;
use crate::rng::{streams, RngState};
use crate::sca::ScAParams;
use crate::tensor::{Conv1x1Params, Shape, Tensor};

/// Sequential consumer over a precomputed uniform [-1, 1] sample vector, so
/// fixture generation stays a pure function of the seed.
struct Draws {
    vals: Vec<f64>,
    pos: usize,
}

impl Draws {
    fn new(rng: &RngState, n: usize) -> Self {
        Draws {
            vals: rng.uniform_vec(n, 1.0),
            pos: 0,
        }
    }

    fn next(&mut self) -> f64 {
        let v = self.vals[self.pos];
        self.pos += 1;
        v
    }

    /// Uniform in [0, 1).
    fn unit(&mut self) -> f64 {
        (self.next() + 1.0) / 2.0 * 0.999_999
    }

    fn index(&mut self, n: usize) -> usize {
        (self.unit() * n as f64) as usize
    }
}

/// Dark background with bright one-pixel polylines, values in [0, 1].
/// Returns the image and the fraction of bright (> 0.5) pixels.
pub fn crack_image(rng: &RngState, h: usize, w: usize) -> (Tensor, f64) {
    let mut d = Draws::new(&rng.stream(streams::FIXTURES), h * w + 2048);
    let mut px = vec![0.0f32; h * w];
    for p in px.iter_mut() {
        *p = (0.03 + 0.04 * d.unit()) as f32;
    }
    let n_lines = 2 + d.index(3);
    for _ in 0..n_lines {
        let mut i = d.index(h) as isize;
        let mut j = d.index(w) as isize;
        // A dominant direction with jitter keeps the walk crack-like.
        let vertical = d.unit() < 0.5;
        let steps = (h.max(w) * 3) / 2;
        for _ in 0..steps {
            if i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w {
                px[i as usize * w + j as usize] = (0.9 + 0.08 * d.unit()) as f32;
            }
            let jitter = d.index(3) as isize - 1;
            if vertical {
                i += 1;
                j += jitter;
            } else {
                j += 1;
                i += jitter;
            }
        }
    }
    let bright = px.iter().filter(|&&p| p > 0.5).count();
    let frac = bright as f64 / (h * w) as f64;
    let img = Tensor::new(Shape::new(1, 1, h, w), px).expect("crack image");
    (img, frac)
}

/// Ground-truth boxes and imperfect matching detections over a synthetic
/// 640x640 corpus with small, medium, and large objects.
pub fn box_corpus(
    rng: &RngState,
    n_images: usize,
    n_classes: usize,
) -> (Vec<GroundTruthBox>, Vec<Detection>) {
    let mut d = Draws::new(&rng.stream(streams::FIXTURES + 100), 65536);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for image_id in 0..n_images as i64 {
        let n_boxes = 2 + d.index(4);
        for _ in 0..n_boxes {
            let class_id = d.index(n_classes) as i64;
            // Side lengths spanning the three size buckets.
            let side = match d.index(3) {
                0 => 8.0 + 20.0 * d.unit(),
                1 => 40.0 + 50.0 * d.unit(),
                _ => 100.0 + 150.0 * d.unit(),
            };
            let aspect = 0.6 + 0.8 * d.unit();
            let bw = side * aspect;
            let bh = side / aspect;
            let x1 = d.unit() * (640.0 - bw);
            let y1 = d.unit() * (640.0 - bh);
            let gt = BBox::new(r2(x1), r2(y1), r2(x1 + bw), r2(y1 + bh)).expect("gt box");
            gts.push(GroundTruthBox {
                image_id,
                class_id,
                bbox: gt,
            });
            // Most ground truth gets a jittered detection.
            if d.unit() < 0.85 {
                let jx = (d.next()) * side * 0.1;
                let jy = (d.next()) * side * 0.1;
                let js = 1.0 + d.next() * 0.1;
                let dx2 = (x1 + jx + bw * js).min(640.0);
                let dy2 = (y1 + jy + bh * js).min(640.0);
                let bbox = BBox::new(
                    r2((x1 + jx).max(0.0).min(dx2)),
                    r2((y1 + jy).max(0.0).min(dy2)),
                    r2(dx2),
                    r2(dy2),
                )
                .expect("det box");
                let score = 0.5 + 0.5 * d.unit();
                dets.push(Detection::new(image_id, class_id, bbox, r2(score)).expect("det"));
            }
        }
        // A couple of background false positives per image.
        for _ in 0..1 + d.index(2) {
            let class_id = d.index(n_classes) as i64;
            let side = 10.0 + 80.0 * d.unit();
            let x1 = d.unit() * (640.0 - side);
            let y1 = d.unit() * (640.0 - side);
            let bbox = BBox::new(r2(x1), r2(y1), r2(x1 + side), r2(y1 + side)).expect("fp box");
            let score = 0.05 + 0.4 * d.unit();
            dets.push(Detection::new(image_id, class_id, bbox, r2(score)).expect("fp"));
        }
    }
    (gts, dets)
}

fn r2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Write the full fixture set into `dir` and return the manifest text.
pub fn generate(dir: &Path, seed: u64) -> Result<String> {
    let rng = RngState::new(seed);
    let mut manifest = String::new();
    manifest.push_str(&format!("seed={seed}\n"));

    let feat_shape = Shape::new(1, 4, 16, 16);
    let feat = rng.stream(streams::FIXTURES).uniform_tensor(feat_shape, 1.0);
    io::save_tensor(&dir.join("feature.crt1"), &feat)?;
    manifest.push_str(&format!("feature.crt1 shape={feat_shape}\n"));

    let (img, frac) = crack_image(&rng, 32, 32);
    io::save_tensor(&dir.join("image.crt1"), &img)?;
    manifest.push_str(&format!(
        "image.crt1 shape={} foreground_fraction={:.4}\n",
        img.shape(),
        frac
    ));

    let params = CRSelectorParams::seeded(4, 1, 4, &rng);
    io::save_crselector_params(&dir.join("params.crp1"), &params, seed)?;
    manifest.push_str("params.crp1 c_x=4 c_img=1 m=4\n");

    let gate = Conv1x1Params::new(
        3,
        1,
        rng.stream(streams::FIXTURES + 250).uniform_vec(3, 0.6),
        vec![0.1],
    )?;
    io::save_sca_params(&dir.join("sca.sca1"), &ScAParams::new(gate)?)?;
    manifest.push_str("sca.sca1 c=3\n");

    for (i, (h, w)) in [(16usize, 16usize), (8, 8), (4, 4)].iter().enumerate() {
        let shape = Shape::new(1, 3, *h, *w);
        let level = rng
            .stream(streams::FIXTURES + 200 + i as u64)
            .uniform_tensor(shape, 1.0);
        let name = format!("level{i}.crt1");
        io::save_tensor(&dir.join(&name), &level)?;
        manifest.push_str(&format!("{name} shape={shape}\n"));
    }

    let (gts, dets) = box_corpus(&rng, 8, 3);
    io::write_text(&dir.join("gts.txt"), &io::format_ground_truth(&gts))?;
    io::write_text(&dir.join("dets.txt"), &io::format_detections(&dets))?;
    manifest.push_str(&format!("gts.txt records={}\n", gts.len()));
    manifest.push_str(&format!("dets.txt records={}\n", dets.len()));

    io::write_text(&dir.join("manifest.txt"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crack_image_has_dark_background_and_bright_lines() {
        let (img, frac) = crack_image(&RngState::new(3), 32, 32);
        assert!(frac > 0.01 && frac < 0.5, "foreground fraction {frac}");
        let bright = img.data().iter().filter(|&&p| p > 0.5).count();
        let dark = img.data().iter().filter(|&&p| p < 0.2).count();
        assert_eq!(bright + dark, img.shape().len());
        assert!(img.data().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn crack_image_is_deterministic() {
        let (a, _) = crack_image(&RngState::new(9), 16, 16);
        let (b, _) = crack_image(&RngState::new(9), 16, 16);
        assert_eq!(a.data(), b.data());
        let (c, _) = crack_image(&RngState::new(10), 16, 16);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn box_corpus_is_valid_and_covers_buckets() {
        let (gts, dets) = box_corpus(&RngState::new(42), 8, 3);
        assert!(!gts.is_empty() && !dets.is_empty());
        assert!(dets.iter().all(|d| (0.0..=1.0).contains(&d.score)));
        let areas: Vec<f64> = gts
            .iter()
            .map(|g| (g.bbox.x2 - g.bbox.x1) * (g.bbox.y2 - g.bbox.y1))
            .collect();
        assert!(areas.iter().any(|&a| a < 32.0 * 32.0));
        assert!(areas.iter().any(|&a| a > 96.0 * 96.0));
    }

    #[test]
    fn generate_writes_full_set() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate(dir.path(), 7).unwrap();
        for name in [
            "feature.crt1",
            "image.crt1",
            "params.crp1",
            "sca.sca1",
            "level0.crt1",
            "level1.crt1",
            "level2.crt1",
            "gts.txt",
            "dets.txt",
            "manifest.txt",
        ] {
            assert!(dir.path().join(name).exists(), "missing {name}");
        }
        assert!(manifest.contains("seed=7"));
        let again = generate(dir.path(), 7).unwrap();
        assert_eq!(manifest, again);
        let feat = io::load_tensor(&dir.path().join("feature.crt1")).unwrap();
        assert_eq!(feat.shape(), Shape::new(1, 4, 16, 16));
        let (p, seed) = io::load_crselector_params(&dir.path().join("params.crp1")).unwrap();
        assert_eq!(seed, 7);
        assert_eq!(p.m, 4);
    }
}
