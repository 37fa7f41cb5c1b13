//! Procedural X-ray-like scenes and the on-disk dataset format.
//!
//! Items attenuate a bright background multiplicatively (transmittance
//! `Π (1 − αᵢ·maskᵢ)`), so overlaps blend instead of occluding. A Gaussian blur
//! softens every edge. Ground-truth hulls are the tight boxes of the rendered
//! item masks.
//!
//! Image files: `XRAY` magic, then `u32` H, W, C little-endian, then `H·W·C`
//! little-endian `f32` values in row-major `H×W×C` order.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{fold_half_turn, iou, BBox, RotatedBox};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 4] = ["bar", "l-shape", "ellipse", "ring"];
pub const MAGIC: &[u8; 4] = b"XRAY";
pub const BLUR_SIGMA: f64 = 1.0;
const PLACEMENT_ATTEMPTS: usize = 100;
const MAX_HULL_OVERLAP: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub size: usize,
    pub num_classes: usize,
    pub min_items: usize,
    pub max_items: usize,
    /// Rotation range in degrees, `[lo, hi)`.
    pub rotation_deg: (f64, f64),
    /// Item extent as a fraction of the image side.
    pub scale: (f64, f64),
    pub opacity: (f64, f64),
    /// Expected clutter blobs per 1000 pixels.
    pub clutter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 128,
            num_classes: 4,
            min_items: 1,
            max_items: 4,
            rotation_deg: (-90.0, 90.0),
            scale: (0.18, 0.4),
            opacity: (0.25, 0.6),
            clutter: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.size == 0 || self.size % 32 != 0 {
            return bad("image size must be a positive multiple of 32");
        }
        if self.num_classes == 0 || self.num_classes > CLASS_NAMES.len() {
            return bad("num_classes must be between 1 and 4");
        }
        if self.min_items == 0 || self.min_items > self.max_items {
            return bad("item count range must be nonempty and start at 1 or more");
        }
        let (r0, r1) = self.rotation_deg;
        let (s0, s1) = self.scale;
        let (o0, o1) = self.opacity;
        if !(r0 < r1) || !(s0 > 0.0 && s0 < s1 && s1 < 0.9) || !(o0 > 0.0 && o0 < o1 && o1 <= 1.0) {
            return bad("rotation, scale and opacity ranges must be nonempty and in range");
        }
        if !(self.clutter >= 0.0) {
            return bad("clutter density must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneItem {
    pub label: usize,
    pub pose: RotatedBox,
    pub hull: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub image: Tensor,
    pub items: Vec<SceneItem>,
}

/// Shape membership in item-local coordinates `(u, v)`, `v` along the long axis.
fn inside(label: usize, u: f64, v: f64, s: f64) -> bool {
    match label {
        0 => u.abs() <= s / 8.0 && v.abs() <= s / 2.0,
        1 => {
            let (a, t) = (s * 0.7, s / 5.0);
            let upright = u >= -a / 2.0 && u <= -a / 2.0 + t && v.abs() <= a / 2.0;
            let foot = v >= a / 2.0 - t && v <= a / 2.0 && u.abs() <= a / 2.0;
            upright || foot
        }
        2 => (u / (s / 3.6)).powi(2) + (v / (s / 2.0)).powi(2) <= 1.0,
        _ => {
            let r = (u * u + v * v).sqrt();
            let outer = s * 0.42;
            r <= outer && r >= outer * 0.55
        }
    }
}

/// Local half-extents `(w, h)` of the pose box.
fn pose_extent(label: usize, s: f64) -> (f64, f64) {
    match label {
        0 => (s / 4.0, s),
        1 => (s * 0.7, s * 0.7),
        2 => (s / 1.8, s),
        _ => (s * 0.84, s * 0.84),
    }
}

/// 2×2 supersampled coverage of an item.
fn coverage(label: usize, cx: f64, cy: f64, s: f64, theta: f64, size: usize) -> Vec<f64> {
    let (sin, cos) = theta.sin_cos();
    let mut cov = vec![0.0; size * size];
    let reach = s * 0.75;
    let (i0, i1) = ((cy - reach).floor().max(0.0) as usize, ((cy + reach).ceil() as usize).min(size));
    let (j0, j1) = ((cx - reach).floor().max(0.0) as usize, ((cx + reach).ceil() as usize).min(size));
    for i in i0..i1 {
        for j in j0..j1 {
            let mut hit = 0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let (dx, dy) = (j as f64 + ox - cx, i as f64 + oy - cy);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                if inside(label, u, v, s) {
                    hit += 1;
                }
            }
            cov[i * size + j] = hit as f64 / 4.0;
        }
    }
    cov
}

fn hull_of(cov: &[f64], size: usize) -> Option<BBox> {
    let (mut i0, mut i1, mut j0, mut j1) = (usize::MAX, 0, usize::MAX, 0);
    for i in 0..size {
        for j in 0..size {
            if cov[i * size + j] > 0.0 {
                i0 = i0.min(i);
                i1 = i1.max(i + 1);
                j0 = j0.min(j);
                j1 = j1.max(j + 1);
            }
        }
    }
    (i0 != usize::MAX).then(|| BBox {
        x1: j0 as f64,
        y1: i0 as f64,
        x2: j1 as f64,
        y2: i1 as f64,
    })
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let at = |v: isize| v.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; img.len()];
    for i in 0..size {
        for j in 0..size {
            tmp[i * size + j] = (-r..=r)
                .map(|d| k[(d + r) as usize] * img[i * size + at(j as isize + d)])
                .sum();
        }
    }
    let mut out = vec![0.0; img.len()];
    for i in 0..size {
        for j in 0..size {
            out[i * size + j] = (-r..=r)
                .map(|d| k[(d + r) as usize] * tmp[at(i as isize + d) * size + j])
                .sum();
        }
    }
    out
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Renders scene `index` of the dataset defined by `cfg`.
pub fn render_scene(cfg: &SynthConfig, index: u64) -> Result<SynthScene> {
    cfg.validate()?;
    let n = cfg.size;
    let nf = n as f64;
    let mut rng = scene_rng(cfg.seed, index);
    let mut trans = vec![1.0; n * n];

    let blobs = (cfg.clutter * (n * n) as f64 / 1000.0).round() as usize;
    for _ in 0..blobs {
        let (cx, cy) = (rng.random_range(0.0..nf), rng.random_range(0.0..nf));
        let r = rng.random_range(1.0..nf * 0.06 + 1.5);
        let a = rng.random_range(0.03..0.12);
        let (i0, i1) = ((cy - 3.0 * r).max(0.0) as usize, ((cy + 3.0 * r) as usize + 1).min(n));
        let (j0, j1) = ((cx - 3.0 * r).max(0.0) as usize, ((cx + 3.0 * r) as usize + 1).min(n));
        for i in i0..i1 {
            for j in j0..j1 {
                let d2 = (j as f64 + 0.5 - cx).powi(2) + (i as f64 + 0.5 - cy).powi(2);
                trans[i * n + j] *= 1.0 - a * (-d2 / (2.0 * r * r)).exp();
            }
        }
    }

    let count = rng.random_range(cfg.min_items..=cfg.max_items);
    let mut items: Vec<SceneItem> = Vec::with_capacity(count);
    for _ in 0..count {
        let label = rng.random_range(0..cfg.num_classes);
        let alpha = rng.random_range(cfg.opacity.0..cfg.opacity.1);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let s = rng.random_range(cfg.scale.0..cfg.scale.1) * nf;
            let theta = rng.random_range(cfg.rotation_deg.0..cfg.rotation_deg.1).to_radians();
            let (cx, cy) = (rng.random_range(0.0..nf), rng.random_range(0.0..nf));
            let cov = coverage(label, cx, cy, s, theta, n);
            let Some(hull) = hull_of(&cov, n) else { continue };
            if hull.x1 < 1.0 || hull.y1 < 1.0 || hull.x2 > nf - 1.0 || hull.y2 > nf - 1.0 {
                continue;
            }
            if items.iter().any(|it| iou(&it.hull, &hull) > MAX_HULL_OVERLAP) {
                continue;
            }
            let (w, h) = pose_extent(label, s);
            let theta = fold_half_turn(theta);
            placed = Some((cov, SceneItem {
                label,
                pose: RotatedBox::new(cx, cy, w, h, theta)?,
                hull,
            }));
            break;
        }
        if let Some((cov, item)) = placed {
            for (t, c) in trans.iter_mut().zip(&cov) {
                *t *= 1.0 - alpha * c;
            }
            items.push(item);
        }
    }

    let blurred = gaussian_blur(&trans, n, BLUR_SIGMA);
    let data = blurred.into_iter().map(|v| v.clamp(0.0, 1.0) as f32 as f64).collect();
    Ok(SynthScene {
        image: Tensor::new(vec![n, n, 1], data)?,
        items,
    })
}

pub fn encode_image(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = img.dims3()?;
    let mut out = Vec::with_capacity(16 + img.len() * 4);
    out.extend_from_slice(MAGIC);
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in img.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fmt = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(fmt("missing XRAY header".into()));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let n = h * w * c;
    if bytes.len() != 16 + 4 * n {
        return Err(fmt(format!("{h}×{w}×{c} needs {} bytes, file has {}", 16 + 4 * n, bytes.len())));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(vec![h, w, c], data)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub label: usize,
}

/// One image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub path: String,
    pub image: Tensor,
    pub boxes: Vec<LabeledBox>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    path: String,
    split: String,
    boxes: Vec<[f64; 5]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub n_train: usize,
    pub n_test: usize,
}

/// Scene `index` as a sample; `path` is the file name it is stored under.
pub fn render_sample(cfg: &SynthConfig, index: u64) -> Result<Sample> {
    let scene = render_scene(cfg, index)?;
    Ok(Sample {
        path: format!("images/{index:06}.xray"),
        image: scene.image,
        boxes: scene
            .items
            .iter()
            .map(|it| LabeledBox {
                bbox: it.hull,
                label: it.label,
            })
            .collect(),
    })
}

/// Renders `n_train + n_test` scenes in memory; test scenes follow train scenes.
pub fn render_dataset(cfg: &SynthConfig, n_train: usize, n_test: usize) -> Result<Dataset> {
    let all = (0..(n_train + n_test) as u64)
        .map(|i| render_sample(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let mut train = all;
    let test = train.split_off(n_train);
    Ok(Dataset { train, test })
}

/// Writes images, `annotations.jsonl` and `manifest.json` under `out_dir`.
pub fn generate_dataset(cfg: &SynthConfig, n_train: usize, n_test: usize, out_dir: &Path) -> Result<Manifest> {
    let ds = render_dataset(cfg, n_train, n_test)?;
    write_dataset(&ds, cfg, out_dir)
}

pub fn write_dataset(ds: &Dataset, cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut lines = Vec::new();
    for (split, samples) in [("train", &ds.train), ("test", &ds.test)] {
        for s in samples {
            let p = out_dir.join(&s.path);
            fs::write(&p, encode_image(&s.image)?).map_err(|e| Error::io(&p, e))?;
            let rec = AnnotationRecord {
                path: s.path.clone(),
                split: split.to_string(),
                boxes: s
                    .boxes
                    .iter()
                    .map(|b| [b.bbox.x1, b.bbox.y1, b.bbox.x2, b.bbox.y2, b.label as f64])
                    .collect(),
            };
            lines.push(serde_json::to_string(&rec)?);
        }
    }
    let ann = out_dir.join("annotations.jsonl");
    let mut f = fs::File::create(&ann).map_err(|e| Error::io(&ann, e))?;
    for l in &lines {
        writeln!(f, "{l}").map_err(|e| Error::io(&ann, e))?;
    }
    let manifest = Manifest {
        config: cfg.clone(),
        n_train: ds.train.len(),
        n_test: ds.test.len(),
    };
    let mp = out_dir.join("manifest.json");
    fs::write(&mp, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mp, e))?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let ann = dir.join("annotations.jsonl");
    let text = fs::read_to_string(&ann).map_err(|e| Error::io(&ann, e))?;
    let mut ds = Dataset::default();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: AnnotationRecord = serde_json::from_str(line).map_err(|e| Error::Format {
            path: ann.clone(),
            detail: format!("line {}: {e}", n + 1),
        })?;
        let boxes = rec
            .boxes
            .iter()
            .map(|b| {
                Ok(LabeledBox {
                    bbox: BBox::new(b[0], b[1], b[2], b[3])?,
                    label: b[4] as usize,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let sample = Sample {
            image: read_image(&dir.join(&rec.path))?,
            path: rec.path,
            boxes,
        };
        match rec.split.as_str() {
            "train" => ds.train.push(sample),
            "test" => ds.test.push(sample),
            other => {
                return Err(Error::Format {
                    path: ann.clone(),
                    detail: format!("line {}: unknown split `{other}`", n + 1),
                })
            }
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::principal_orientation;

    fn small() -> SynthConfig {
        SynthConfig {
            size: 64,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_per_index() {
        let cfg = small();
        assert_eq!(render_scene(&cfg, 7).unwrap(), render_scene(&cfg, 7).unwrap());
        assert_ne!(render_scene(&cfg, 7).unwrap().image, render_scene(&cfg, 8).unwrap().image);
    }

    #[test]
    fn scene_invariants() {
        let cfg = small();
        for i in 0..40 {
            let s = render_scene(&cfg, i).unwrap();
            assert!(!s.items.is_empty() && s.items.len() <= 4);
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            for it in &s.items {
                let h = it.hull;
                assert!(h.x1 > 0.0 && h.y1 > 0.0 && h.x2 < 64.0 && h.y2 < 64.0 && h.area() > 0.0);
            }
        }
    }

    #[test]
    fn single_item_has_mask_inside_hull() {
        let cfg = SynthConfig {
            min_items: 1,
            max_items: 1,
            clutter: 0.0,
            opacity: (0.59, 0.6),
            ..small()
        };
        let s = render_scene(&cfg, 3).unwrap();
        assert_eq!(s.items.len(), 1);
        let h = s.items[0].hull;
        let mut dark = 0;
        for i in h.y1 as usize..h.y2 as usize {
            for j in h.x1 as usize..h.x2 as usize {
                if s.image.data()[i * 64 + j] < 0.8 {
                    dark += 1;
                }
            }
        }
        assert!(dark > 0);
    }

    #[test]
    fn bar_mask_orientation_matches_pose() {
        for k in 0..12 {
            let phi = (-85.0 + 15.0 * k as f64).to_radians();
            let cov = coverage(0, 32.0, 32.0, 40.0, phi, 64);
            let t = Tensor::new(vec![64, 64], cov).unwrap();
            let got = principal_orientation(&t).unwrap();
            assert!(fold_half_turn(got - phi).abs() < 5f64.to_radians(), "{phi} {got}");
        }
    }

    #[test]
    fn class_balance_and_contrast() {
        let cfg = small();
        let mut counts = [0usize; 4];
        let (mut inside_sum, mut inside_n, mut bg_sum, mut bg_n) = (0.0, 0, 0.0, 0);
        for i in 0..1000 {
            let s = render_scene(&cfg, i).unwrap();
            for it in &s.items {
                counts[it.label] += 1;
            }
            if i < 100 {
                for r in 0..64 {
                    for c in 0..64 {
                        let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                        let v = s.image.data()[r * 64 + c];
                        if s.items.iter().any(|it| it.hull.contains(x, y)) {
                            inside_sum += v;
                            inside_n += 1;
                        } else {
                            bg_sum += v;
                            bg_n += 1;
                        }
                    }
                }
            }
        }
        let total: usize = counts.iter().sum();
        for c in counts {
            let frac = c as f64 / total as f64;
            assert!((frac - 0.25).abs() <= 0.05, "{counts:?}");
        }
        assert!(bg_sum / bg_n as f64 - inside_sum / inside_n as f64 > 0.05);
    }

    #[test]
    fn dataset_round_trip_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let m = generate_dataset(&cfg, 6, 2, dir.path()).unwrap();
        assert_eq!((m.n_train, m.n_test), (6, 2));
        let files = fs::read_dir(dir.path().join("images")).unwrap().count();
        assert_eq!(files, 8);
        let lines = fs::read_to_string(dir.path().join("annotations.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 8);
        let first = fs::read(dir.path().join("images/000003.xray")).unwrap();
        generate_dataset(&cfg, 6, 2, dir.path()).unwrap();
        assert_eq!(first, fs::read(dir.path().join("images/000003.xray")).unwrap());
        assert_eq!(lines, fs::read_to_string(dir.path().join("annotations.jsonl")).unwrap());

        let ds = load_dataset(dir.path()).unwrap();
        let mem = render_dataset(&cfg, 6, 2).unwrap();
        assert_eq!(ds, mem);
        assert_eq!(ds.train[0].image.shape(), &[64, 64, 1]);
    }

    #[test]
    fn corrupt_image_rejected() {
        let p = Path::new("x.xray");
        assert!(matches!(decode_image(b"NOPE", p), Err(Error::Format { .. })));
        let mut ok = encode_image(&Tensor::zeros(&[2, 2, 1])).unwrap();
        ok.pop();
        assert!(decode_image(&ok, p).is_err());
    }
}
