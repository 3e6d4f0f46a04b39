//! Synthetic localized-object images, image-directory ingestion, and
//! deterministic mini-batching.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Where the object was drawn, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectRegion {
    pub center_row: f64,
    pub center_col: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[channels, size, size]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub object: Option<ObjectRegion>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub classes: usize,
    pub class_names: Vec<String>,
    pub image_size: usize,
    pub channels: usize,
    /// Files that could not be decoded while loading.
    pub skipped: usize,
}

impl Dataset {
    pub fn split(&self, which: Split) -> &[Sample] {
        match which {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 4,
            n_per_class: 200,
            image_size: 32,
            noise_level: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Disk,
    Ring,
    Cross,
    Bar,
    Square,
    Triangle,
}

/// Shape and rotation that define class `k`. The first six classes are
/// distinct shapes; later classes reuse the shapes without rotational
/// symmetry at golden-angle rotations.
fn class_shape(k: usize) -> (ShapeKind, f64) {
    use ShapeKind::*;
    const BASE: [ShapeKind; 6] = [Disk, Ring, Cross, Bar, Square, Triangle];
    const ROTATABLE: [ShapeKind; 2] = [Bar, Triangle];
    if k < BASE.len() {
        return (BASE[k], 0.0);
    }
    let j = k - BASE.len();
    let turn = (j / ROTATABLE.len() + 1) as f64;
    (ROTATABLE[j % ROTATABLE.len()], turn * PI * (3.0 - 5f64.sqrt()))
}

fn inside(kind: ShapeKind, angle: f64, dy: f64, dx: f64, r: f64) -> bool {
    let (s, c) = angle.sin_cos();
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    let d = dx.hypot(dy);
    match kind {
        ShapeKind::Disk => d <= r,
        ShapeKind::Ring => d <= r && d >= 0.55 * r,
        ShapeKind::Cross => {
            let arm = 0.28 * r;
            (u.abs() <= arm && v.abs() <= r) || (v.abs() <= arm && u.abs() <= r)
        }
        ShapeKind::Bar => u.abs() <= r && v.abs() <= 0.3 * r,
        ShapeKind::Square => u.abs() <= 0.75 * r && v.abs() <= 0.75 * r,
        // apex up, base at v = 0.6 r
        ShapeKind::Triangle => v <= 0.6 * r && v >= -r && u.abs() <= 0.5 * (v + r),
    }
}

/// Object radius used for a given image size.
pub fn object_radius(image_size: usize) -> f64 {
    image_size as f64 / 5.0
}

/// Draws class `label` centered at `(cy, cx)` onto a zero background.
pub fn render_shape(label: usize, image_size: usize, cy: f64, cx: f64) -> Vec<f64> {
    let (kind, angle) = class_shape(label);
    let r = object_radius(image_size);
    let mut out = vec![0.0; image_size * image_size];
    for y in 0..image_size {
        for x in 0..image_size {
            if inside(kind, angle, y as f64 - cy, x as f64 - cx, r) {
                out[y * image_size + x] = 1.0;
            }
        }
    }
    out
}

fn split_point(n: usize) -> usize {
    (n * 4 / 5).clamp(1, n.saturating_sub(1).max(1))
}

/// Generates `n_per_class` images per class, 80/20 train/test per class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n_classes < 2 {
        return Err(Error::Dataset("at least two classes are required".into()));
    }
    if spec.image_size < 16 {
        return Err(Error::Dataset("image size must be at least 16".into()));
    }
    if spec.n_per_class < 2 {
        return Err(Error::Dataset("need at least two samples per class".into()));
    }
    if !(0.0..=1.0).contains(&spec.noise_level) {
        return Err(Error::Dataset("noise level must lie in [0, 1]".into()));
    }
    let size = spec.image_size;
    let r = object_radius(size);
    let lo = r.ceil();
    let hi = size as f64 - 1.0 - r.ceil();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let cut = split_point(spec.n_per_class);
    for label in 0..spec.n_classes {
        for i in 0..spec.n_per_class {
            let cy = rng.gen_range(lo..=hi);
            let cx = rng.gen_range(lo..=hi);
            let mut pixels = render_shape(label, size, cy, cx);
            if spec.noise_level > 0.0 {
                for p in &mut pixels {
                    *p = (*p + rng.gen_range(0.0..spec.noise_level)).min(1.0);
                }
            }
            let sample = Sample {
                image: Tensor::new(vec![1, size, size], pixels)?,
                label,
                object: Some(ObjectRegion {
                    center_row: cy,
                    center_col: cx,
                    radius: r,
                }),
            };
            if i < cut {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    let class_names = (0..spec.n_classes)
        .map(|k| {
            let (kind, _) = class_shape(k);
            format!("{:?}{}", kind, k / 4).to_lowercase()
        })
        .collect();
    Ok(Dataset {
        train,
        test,
        classes: spec.n_classes,
        class_names,
        image_size: size,
        channels: 1,
        skipped: 0,
    })
}

/// Grayscale image, nearest-neighbor resized to `size x size`, scaled to `[0, 1]`.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
        .to_luma8();
    let resized = image::imageops::resize(
        &img,
        size as u32,
        size as u32,
        image::imageops::FilterType::Nearest,
    );
    let data = resized.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    Ok(Tensor::new(vec![1, size, size], data)?)
}

/// Loads `<root>/<class_name>/<file>` images. Classes are indexed by sorted
/// directory name; undecodable files are skipped and counted.
pub fn load_image_dir(root: &Path, image_size: usize) -> Result<Dataset> {
    if image_size == 0 {
        return Err(Error::Dataset("image size must be positive".into()));
    }
    let mut class_dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(Error::Dataset(format!(
            "{}: expected at least two class directories",
            root.display()
        )));
    }
    let (mut train, mut test, mut names) = (Vec::new(), Vec::new(), Vec::new());
    let mut skipped = 0;
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut samples = Vec::new();
        for f in files {
            match load_image(&f, image_size) {
                Ok(image) => samples.push(Sample {
                    image,
                    label,
                    object: None,
                }),
                Err(e) => {
                    log::warn!("skipping unreadable image: {e}");
                    skipped += 1;
                }
            }
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if samples.is_empty() {
            return Err(Error::Dataset(format!("class `{name}` has no readable images")));
        }
        let cut = samples.len() - samples.len() / 5;
        test.extend(samples.split_off(cut));
        train.extend(samples);
        names.push(name);
    }
    Ok(Dataset {
        train,
        test,
        classes: names.len(),
        class_names: names,
        image_size,
        channels: 1,
        skipped,
    })
}

/// Shuffled mini-batch indices over one split. Each epoch is a fresh
/// permutation drawn from the batcher's own seeded stream; the last batch of
/// an epoch may be short.
#[derive(Debug, Clone)]
pub struct Batcher {
    len: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Dataset("cannot batch an empty split".into()));
        }
        if batch_size == 0 || batch_size > len {
            return Err(Error::Config(format!(
                "batch size {batch_size} must lie in 1..={len}"
            )));
        }
        Ok(Batcher {
            len,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            pos: len,
        })
    }

    /// All batches of the next epoch.
    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut self.rng);
        self.pos = self.len;
        order.chunks(self.batch_size).map(|c| c.to_vec()).collect()
    }

    /// The next batch, starting a new epoch when the current one is used up.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.len {
            self.order = (0..self.len).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.len);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

/// Stacks the chosen samples into an NCHW batch with their labels.
pub fn assemble(split: &[Sample], indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let images: Vec<Tensor> = indices
        .iter()
        .map(|&i| {
            split
                .get(i)
                .map(|s| s.image.clone())
                .ok_or_else(|| Error::Dataset(format!("sample index {i} out of range")))
        })
        .collect::<Result<_>>()?;
    let labels = indices.iter().map(|&i| split[i].label).collect();
    Ok((Tensor::stack(&images)?, labels))
}

/// Draws the next batch from `batcher` and assembles it.
pub fn sample_batch(split: &[Sample], batcher: &mut Batcher) -> Result<(Tensor, Vec<usize>)> {
    if batcher.len != split.len() {
        return Err(Error::Dataset("batcher was built for a different split".into()));
    }
    let idx = batcher.next_batch();
    assemble(split, &idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            n_classes: 4,
            n_per_class: 10,
            image_size: 16,
            noise_level: noise,
            seed: 3,
        }
    }

    #[test]
    fn noiseless_images_are_binary() {
        let ds = generate_synthetic(&spec(0.0)).unwrap();
        for s in ds.train.iter().chain(&ds.test) {
            assert!(s.image.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(s.image.data().iter().any(|&v| v == 1.0));
        }
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let a = generate_synthetic(&spec(0.4)).unwrap();
        let b = generate_synthetic(&spec(0.4)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.test.len()), (32, 8));
        for s in a.train.iter().chain(&a.test) {
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn class_templates_are_distinct() {
        let size = 32;
        let c = (size as f64 - 1.0) / 2.0;
        let templates: Vec<Vec<f64>> = (0..10).map(|k| render_shape(k, size, c, c)).collect();
        for i in 0..templates.len() {
            for j in i + 1..templates.len() {
                let d: f64 = templates[i]
                    .iter()
                    .zip(&templates[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(d > 3.0, "classes {i} and {j} too close: {d}");
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(0.0);
        s.n_classes = 1;
        assert!(generate_synthetic(&s).is_err());
        let mut s = spec(0.0);
        s.image_size = 8;
        assert!(generate_synthetic(&s).is_err());
        let mut s = spec(0.0);
        s.noise_level = 1.5;
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn full_batch_is_a_permutation() {
        let mut b = Batcher::new(7, 7, 1).unwrap();
        let mut batch = b.next_batch();
        batch.sort();
        assert_eq!(batch, (0..7).collect::<Vec<_>>());
        assert!(Batcher::new(7, 8, 1).is_err());
        assert!(Batcher::new(7, 0, 1).is_err());
    }

    #[test]
    fn epochs_replay_with_same_seed() {
        let mut a = Batcher::new(10, 3, 9).unwrap();
        let mut b = Batcher::new(10, 3, 9).unwrap();
        let ea: Vec<_> = (0..2).map(|_| a.epoch()).collect();
        let eb: Vec<_> = (0..2).map(|_| b.epoch()).collect();
        assert_eq!(ea, eb);
        assert_ne!(ea[0], ea[1]);
        assert_eq!(ea[0].last().unwrap().len(), 1);
    }

    #[test]
    fn epoch_label_histogram_matches_split() {
        let ds = generate_synthetic(&spec(0.1)).unwrap();
        let mut b = Batcher::new(ds.train.len(), 5, 2).unwrap();
        let mut hist = vec![0; 4];
        for _ in 0..ds.train.len().div_ceil(5) {
            let (_, labels) = sample_batch(&ds.train, &mut b).unwrap();
            for l in labels {
                hist[l] += 1;
            }
        }
        let mut expected = vec![0; 4];
        for s in &ds.train {
            expected[s.label] += 1;
        }
        assert_eq!(hist, expected);
    }
}
