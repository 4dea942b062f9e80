//! Synthetic RGB-D scenes, dataset storage, and challenge subsets.
//!
//! Scenes are layered rectangles and ellipses with consistent occlusion:
//! nearer objects overwrite farther ones in color, depth and label.
//! Depth 0 marks invalid measurements; a designated "reflective" class
//! loses 30-90% of its depth, and a global blob process can invalidate a
//! configured fraction of every image.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pnm;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbdSample {
    pub width: usize,
    pub height: usize,
    /// Channel-major [3, h, w], values on the 1/255 grid in [0,1] as
    /// generated; in-memory transforms may leave the grid.
    pub rgb: Vec<f32>,
    /// Row-major h*w; 0 = invalid measurement.
    pub depth: Vec<u16>,
    /// Row-major h*w; 255 = ignore.
    pub label: Vec<u8>,
}

impl RgbdSample {
    pub fn invalid_fraction(&self) -> f64 {
        let z = self.depth.iter().filter(|&&d| d == 0).count();
        z as f64 / self.depth.len() as f64
    }

    /// Valid depths min-max scaled to [0,1]; invalid pixels stay 0.
    pub fn depth_normalized(&self) -> Vec<f32> {
        let valid: Vec<u16> = self.depth.iter().copied().filter(|&d| d > 0).collect();
        if valid.is_empty() {
            return vec![0.0; self.depth.len()];
        }
        let lo = *valid.iter().min().unwrap() as f32;
        let hi = *valid.iter().max().unwrap() as f32;
        let span = (hi - lo).max(1.0);
        self.depth
            .iter()
            .map(|&d| if d == 0 { 0.0 } else { (d as f32 - lo) / span })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    /// Class count including background class 0.
    pub classes: usize,
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object depth values; background sits at the far end.
    pub depth_range: (u16, u16),
    /// Expected fraction of pixels invalidated by the global blob process.
    pub invalid_rate: f64,
    /// Blob radius range in pixels for global invalid regions.
    pub blob_radius: (usize, usize),
    /// Objects of this class lose 30-90% of their depth pixels.
    pub reflective_class: Option<u8>,
}

impl SceneSpec {
    pub fn desk() -> Self {
        SceneSpec {
            classes: 6,
            width: 64,
            height: 64,
            min_objects: 3,
            max_objects: 7,
            depth_range: (5_000, 60_000),
            invalid_rate: 0.03,
            blob_radius: (2, 5),
            reflective_class: Some(5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 1 {
            return Err(Error::InvalidArgument("need at least the background class".into()));
        }
        if !(0.0..=1.0).contains(&self.invalid_rate) {
            return Err(Error::InvalidArgument("invalid_rate must lie in [0,1]".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::InvalidArgument("min_objects > max_objects".into()));
        }
        if let Some(rc) = self.reflective_class {
            if rc as usize >= self.classes {
                return Err(Error::InvalidArgument("reflective class out of range".into()));
            }
        }
        Ok(())
    }
}

/// Fixed, well-separated base color per class id.
pub fn class_color(c: usize) -> [f32; 3] {
    const PALETTE: [[f32; 3]; 6] = [
        [0.25, 0.27, 0.30], // background
        [0.85, 0.20, 0.15],
        [0.15, 0.75, 0.25],
        [0.20, 0.35, 0.90],
        [0.90, 0.85, 0.15],
        [0.15, 0.80, 0.85],
    ];
    if c < PALETTE.len() {
        return PALETTE[c];
    }
    // golden-ratio hue walk for larger class counts
    let h = (c as f32 * 0.618_034) % 1.0;
    let f = |shift: f32| {
        let x = ((h + shift) % 1.0) * 6.0;
        (2.0 - (x - 3.0).abs()).clamp(0.25, 0.9)
    };
    [f(0.0), f(1.0 / 3.0), f(2.0 / 3.0)]
}

#[derive(Clone, Copy)]
enum Shape {
    Rect { cx: f64, cy: f64, hw: f64, hh: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Shape {
    fn contains(&self, x: usize, y: usize) -> bool {
        let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
        match *self {
            Shape::Rect { cx, cy, hw, hh } => (xf - cx).abs() <= hw && (yf - cy).abs() <= hh,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((xf - cx) / rx, (yf - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

struct SceneObject {
    shape: Shape,
    class: u8,
    depth: u16,
}

fn paint(objects: &[SceneObject], spec: &SceneSpec, label: &mut [u8], depth: &mut [u16]) {
    // far to near, so nearer objects overwrite
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| objects[b].depth.cmp(&objects[a].depth).then(a.cmp(&b)));
    for &i in &order {
        let o = &objects[i];
        for y in 0..spec.height {
            for x in 0..spec.width {
                if o.shape.contains(x, y) {
                    let at = y * spec.width + x;
                    label[at] = o.class;
                    depth[at] = o.depth;
                }
            }
        }
    }
}

fn blob_pixels(cx: usize, cy: usize, r: usize, w: usize, h: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let r2 = (r * r) as i64;
    for y in cy.saturating_sub(r)..(cy + r + 1).min(h) {
        for x in cx.saturating_sub(r)..(cx + r + 1).min(w) {
            let (dx, dy) = (x as i64 - cx as i64, y as i64 - cy as i64);
            if dx * dx + dy * dy <= r2 {
                out.push(y * w + x);
            }
        }
    }
    out
}

pub fn synth_scene(spec: &SceneSpec, rng: &mut Rng) -> Result<RgbdSample> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let n = w * h;
    let mut label = vec![0u8; n];
    let mut depth = vec![spec.depth_range.1; n];

    let n_obj = if spec.classes > 1 {
        spec.min_objects
            + (rng::uniform(rng) * (spec.max_objects - spec.min_objects + 1) as f64) as usize
    } else {
        0
    };
    let mut objects = Vec::new();
    for _ in 0..n_obj.min(spec.max_objects) {
        let class = 1 + (rng::uniform(rng) * (spec.classes - 1) as f64) as u8;
        let class = class.min(spec.classes as u8 - 1);
        let cx = rng::uniform(rng) * w as f64;
        let cy = rng::uniform(rng) * h as f64;
        let half = |rng: &mut Rng| w as f64 * (0.08 + 0.18 * rng::uniform(rng));
        let shape = if rng::uniform(rng) < 0.5 {
            Shape::Rect { cx, cy, hw: half(rng), hh: half(rng) }
        } else {
            Shape::Ellipse { cx, cy, rx: half(rng), ry: half(rng) }
        };
        let span = (spec.depth_range.1 - spec.depth_range.0) as f64;
        let d = spec.depth_range.0 + (rng::uniform(rng) * span) as u16;
        objects.push(SceneObject { shape, class, depth: d.max(1) });
    }
    paint(&objects, spec, &mut label, &mut depth);

    // color from class and depth, with mild noise, quantized to 8 bits
    let far = spec.depth_range.1 as f32;
    let mut rgb = vec![0.0f32; 3 * n];
    for at in 0..n {
        let base = class_color(label[at] as usize);
        let shade = 0.75 + 0.25 * (1.0 - depth[at] as f32 / far);
        for ch in 0..3 {
            let noise = (rng::uniform(rng) as f32 - 0.5) * 0.06;
            let v = (base[ch] * shade + noise).clamp(0.0, 1.0);
            rgb[ch * n + at] = (v * 255.0).round() / 255.0;
        }
    }

    // reflective objects lose a 30-90% chunk of their depth
    if let Some(rc) = spec.reflective_class {
        for o in objects.iter().filter(|o| o.class == rc) {
            let owned: Vec<usize> = (0..n)
                .filter(|&at| {
                    label[at] == rc
                        && depth[at] == o.depth
                        && o.shape.contains(at % w, at / w)
                })
                .collect();
            if owned.is_empty() {
                continue;
            }
            let target = ((0.3 + 0.6 * rng::uniform(rng)) * owned.len() as f64) as usize;
            let r = ((owned.len() as f64).sqrt() * 0.35).max(1.0) as usize;
            let mut invalidated = 0;
            let mut tries = 0;
            while invalidated < target && tries < 200 {
                tries += 1;
                let seed_at = owned[(rng::uniform(rng) * owned.len() as f64) as usize % owned.len()];
                for at in blob_pixels(seed_at % w, seed_at / w, r, w, h) {
                    if invalidated >= target {
                        break;
                    }
                    if depth[at] != 0 && label[at] == rc {
                        depth[at] = 0;
                        invalidated += 1;
                    }
                }
            }
        }
    }

    // global invalid blobs up to the configured pixel budget
    let budget = (spec.invalid_rate * n as f64).round() as usize;
    let mut placed = 0;
    let mut tries = 0;
    while placed < budget && tries < 10_000 {
        tries += 1;
        let (rmin, rmax) = spec.blob_radius;
        let r = rmin + (rng::uniform(rng) * (rmax - rmin + 1) as f64) as usize;
        let r = r.min(rmax).min(w / 2 - 1).min(h / 2 - 1);
        let cx = r + (rng::uniform(rng) * (w - 2 * r) as f64) as usize;
        let cy = r + (rng::uniform(rng) * (h - 2 * r) as f64) as usize;
        for at in blob_pixels(cx, cy, r, w, h) {
            if placed >= budget {
                break;
            }
            if depth[at] != 0 {
                depth[at] = 0;
                placed += 1;
            }
        }
    }

    Ok(RgbdSample { width: w, height: h, rgb, depth, label })
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<RgbdSample>,
    pub classes: Vec<String>,
    pub seed: u64,
}

pub fn default_class_names(k: usize) -> Vec<String> {
    let base = ["background", "box", "plant", "chair", "lamp", "mirror"];
    (0..k)
        .map(|i| {
            if i < base.len() {
                base[i].to_string()
            } else {
                format!("class{}", i)
            }
        })
        .collect()
}

/// Deterministic dataset: sample i is drawn from stream (seed, [i]).
pub fn synth_dataset(spec: &SceneSpec, count: usize, seed: u64) -> Result<Dataset> {
    let samples = (0..count)
        .map(|i| synth_scene(spec, &mut rng::stream(seed, &[i as u64])))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples, classes: default_class_names(spec.classes), seed })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    classes: Vec<String>,
    count: usize,
    width: usize,
    height: usize,
    seed: u64,
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let first = ds.samples.first().ok_or_else(|| Error::Data("empty dataset".into()))?;
    std::fs::create_dir_all(dir)?;
    for (i, s) in ds.samples.iter().enumerate() {
        if s.width != first.width || s.height != first.height {
            return Err(Error::Data(format!("sample {} has inconsistent dimensions", i)));
        }
        let n = s.width * s.height;
        let mut rgb = vec![0u8; 3 * n];
        for at in 0..n {
            for ch in 0..3 {
                rgb[at * 3 + ch] = (s.rgb[ch * n + at] * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        pnm::write_ppm8(&dir.join(format!("{:04}_rgb.ppm", i)), s.width, s.height, &rgb)?;
        pnm::write_pgm16(&dir.join(format!("{:04}_depth.pgm", i)), s.width, s.height, &s.depth)?;
        pnm::write_pgm8(&dir.join(format!("{:04}_label.pgm", i)), s.width, s.height, &s.label)?;
    }
    let manifest = Manifest {
        classes: ds.classes.clone(),
        count: ds.samples.len(),
        width: first.width,
        height: first.height,
        seed: ds.seed,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut samples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let (w, h, rgb8) = pnm::read_ppm8(&dir.join(format!("{:04}_rgb.ppm", i)))?;
        let (wd, hd, depth) = pnm::read_pgm16(&dir.join(format!("{:04}_depth.pgm", i)))?;
        let (wl, hl, label) = pnm::read_pgm8(&dir.join(format!("{:04}_label.pgm", i)))?;
        if (w, h) != (manifest.width, manifest.height) || (w, h) != (wd, hd) || (w, h) != (wl, hl) {
            return Err(Error::Data(format!("sample {} has mismatched dimensions", i)));
        }
        let n = w * h;
        let mut rgb = vec![0.0f32; 3 * n];
        for at in 0..n {
            for ch in 0..3 {
                rgb[ch * n + at] = rgb8[at * 3 + ch] as f32 / 255.0;
            }
        }
        samples.push(RgbdSample { width: w, height: h, rgb, depth, label });
    }
    Ok(Dataset { samples, classes: manifest.classes, seed: manifest.seed })
}

/// Gamma-darkened copy: rgb^gamma, depth and label untouched.
pub fn low_light(sample: &RgbdSample, gamma: f32) -> RgbdSample {
    let mut out = sample.clone();
    for v in out.rgb.iter_mut() {
        *v = v.powf(gamma);
    }
    out
}

/// Indices of the samples with the highest invalid-depth fraction,
/// top ceil(fraction * N), ties broken by lower index.
pub fn invalid_subset(ds: &Dataset, fraction: f64) -> Result<Vec<usize>> {
    if ds.samples.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument("fraction must lie in [0,1]".into()));
    }
    let mut order: Vec<(usize, f64)> =
        ds.samples.iter().enumerate().map(|(i, s)| (i, s.invalid_fraction())).collect();
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let take = (fraction * ds.samples.len() as f64).ceil() as usize;
    Ok(order.into_iter().take(take).map(|(i, _)| i).collect())
}

/// Class names excluded from the small-objects evaluation protocol.
pub fn small_objects_config(dataset_name: &str, explicit: Option<&[String]>) -> Result<Vec<String>> {
    match dataset_name {
        "nyuv2" => Ok([
            "wall",
            "floor",
            "ceiling",
            "otherstructure",
            "otherfurniture",
            "otherprop",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()),
        "sunrgbd" => Ok(["wall", "floor", "ceiling"].iter().map(|s| s.to_string()).collect()),
        "synthetic" => Ok(explicit.map(|v| v.to_vec()).unwrap_or_default()),
        other => match explicit {
            Some(v) => Ok(v.to_vec()),
            None => Err(Error::InvalidArgument(format!(
                "unknown dataset '{}' and no explicit ignore list",
                other
            ))),
        },
    }
}

/// Map ignore-class names onto ids in a dataset's class table.
pub fn ignore_class_ids(names: &[String], classes: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            classes
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown class name '{}'", n)))
        })
        .collect()
}

// IGNORE_ID re-exported for dataset consumers.
pub use crate::diffusion::IGNORE_ID as IGNORE_LABEL;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_objects_give_pure_valid_background() {
        let spec = SceneSpec {
            min_objects: 0,
            max_objects: 0,
            invalid_rate: 0.0,
            reflective_class: None,
            ..SceneSpec::desk()
        };
        let s = synth_scene(&spec, &mut rng::stream(1, &[0])).unwrap();
        assert!(s.label.iter().all(|&l| l == 0));
        assert!(s.depth.iter().all(|&d| d > 0));
        assert_eq!(s.invalid_fraction(), 0.0);
    }

    #[test]
    fn occlusion_keeps_the_nearer_object() {
        let spec = SceneSpec { width: 8, height: 8, ..SceneSpec::desk() };
        let far = SceneObject {
            shape: Shape::Rect { cx: 4.0, cy: 4.0, hw: 3.0, hh: 3.0 },
            class: 1,
            depth: 40_000,
        };
        let near = SceneObject {
            shape: Shape::Rect { cx: 5.0, cy: 5.0, hw: 2.0, hh: 2.0 },
            class: 2,
            depth: 10_000,
        };
        let mut label = vec![0u8; 64];
        let mut depth = vec![60_000u16; 64];
        paint(&[far, near], &spec, &mut label, &mut depth);
        // overlap pixel (5,5) belongs to the nearer object
        assert_eq!(label[5 * 8 + 5], 2);
        assert_eq!(depth[5 * 8 + 5], 10_000);
        // non-overlap pixel (2,2) keeps the far object
        assert_eq!(label[2 * 8 + 2], 1);
        assert_eq!(depth[2 * 8 + 2], 40_000);
    }

    #[test]
    fn reflective_objects_lose_large_depth_chunks() {
        let spec = SceneSpec {
            min_objects: 1,
            max_objects: 1,
            invalid_rate: 0.0,
            classes: 2,
            reflective_class: Some(1),
            ..SceneSpec::desk()
        };
        let mut seen = false;
        for seed in 0..20 {
            let s = synth_scene(&spec, &mut rng::stream(seed, &[0])).unwrap();
            let owned = s.label.iter().filter(|&&l| l == 1).count();
            if owned < 30 {
                continue;
            }
            let invalid = s
                .label
                .iter()
                .zip(&s.depth)
                .filter(|(&l, &d)| l == 1 && d == 0)
                .count();
            let frac = invalid as f64 / owned as f64;
            assert!(frac >= 0.25 && frac <= 0.95, "reflective coverage {}", frac);
            seen = true;
        }
        assert!(seen);
    }

    #[test]
    fn invalid_fraction_tracks_configured_rate() {
        let spec = SceneSpec {
            invalid_rate: 0.1,
            reflective_class: None,
            ..SceneSpec::desk()
        };
        let mut total = 0.0;
        let runs = 1000;
        for seed in 0..runs {
            let s = synth_scene(&spec, &mut rng::stream(seed, &[0])).unwrap();
            total += s.invalid_fraction();
        }
        let mean = total / runs as f64;
        assert!((mean - 0.1).abs() < 0.01, "mean invalid fraction {}", mean);
    }

    #[test]
    fn scenes_are_bit_reproducible() {
        let spec = SceneSpec::desk();
        let a = synth_scene(&spec, &mut rng::stream(7, &[3])).unwrap();
        let b = synth_scene(&spec, &mut rng::stream(7, &[3])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_round_trip_is_bitwise() {
        let ds = synth_dataset(&SceneSpec { width: 32, height: 32, ..SceneSpec::desk() }, 3, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.classes, ds.classes);
        assert_eq!(back.seed, ds.seed);
        assert_eq!(back.samples, ds.samples);
    }

    #[test]
    fn low_light_squares_intensities_and_preserves_rest() {
        let ds = synth_dataset(&SceneSpec { width: 16, height: 16, ..SceneSpec::desk() }, 1, 2).unwrap();
        let mut s = ds.samples[0].clone();
        s.rgb[0] = 0.5;
        s.rgb[1] = 1.0;
        let dark = low_light(&s, 2.0);
        assert_eq!(dark.rgb[0], 0.25);
        assert_eq!(dark.rgb[1], 1.0);
        assert_eq!(dark.depth, s.depth);
        assert_eq!(dark.label, s.label);
        // monotone on the rest
        for (a, b) in s.rgb.iter().zip(&dark.rgb) {
            assert!(*b <= *a + 1e-7);
        }
    }

    #[test]
    fn invalid_subset_selects_by_fraction_then_id() {
        let mk = |frac: f64| {
            let n = 100;
            let invalid = (frac * n as f64).round() as usize;
            RgbdSample {
                width: 10,
                height: 10,
                rgb: vec![0.0; 300],
                depth: (0..n).map(|i| if i < invalid { 0 } else { 100 }).collect(),
                label: vec![0; n],
            }
        };
        let ds = Dataset {
            samples: vec![mk(0.9), mk(0.1), mk(0.5), mk(0.0), mk(0.7)],
            classes: default_class_names(6),
            seed: 0,
        };
        assert_eq!(invalid_subset(&ds, 0.2).unwrap(), vec![0]);
        assert_eq!(invalid_subset(&ds, 1.0).unwrap(), vec![0, 4, 2, 1, 3]);
        // all-valid dataset still yields the top slice, ties by id
        let flat = Dataset {
            samples: vec![mk(0.0), mk(0.0), mk(0.0), mk(0.0), mk(0.0)],
            classes: default_class_names(6),
            seed: 0,
        };
        assert_eq!(invalid_subset(&flat, 0.2).unwrap(), vec![0]);
        let empty = Dataset { samples: vec![], classes: vec![], seed: 0 };
        assert!(invalid_subset(&empty, 0.2).is_err());
    }

    #[test]
    fn small_objects_lists_match_protocol() {
        assert_eq!(
            small_objects_config("nyuv2", None).unwrap(),
            vec!["wall", "floor", "ceiling", "otherstructure", "otherfurniture", "otherprop"]
        );
        assert_eq!(small_objects_config("sunrgbd", None).unwrap(), vec!["wall", "floor", "ceiling"]);
        let custom = vec!["background".to_string()];
        assert_eq!(small_objects_config("synthetic", Some(&custom)).unwrap(), custom);
        assert!(small_objects_config("kitti", None).is_err());
    }

    #[test]
    fn ignore_ids_resolve_against_class_table() {
        let classes = default_class_names(6);
        let ids = ignore_class_ids(&["background".to_string(), "mirror".to_string()], &classes).unwrap();
        assert_eq!(ids, vec![0, 5]);
        assert!(ignore_class_ids(&["wall".to_string()], &classes).is_err());
    }

    #[test]
    fn ignore_label_constant_is_255() {
        assert_eq!(IGNORE_LABEL, 255);
    }
}
