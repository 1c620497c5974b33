//! IDX ingestion, synthetic datasets and deterministic batching.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::network::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("IDX format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("image count {images} does not match label count {labels}")]
    Mismatch { images: usize, labels: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("batch plan error: {0}")]
    Plan(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// Examples with a leading batch dimension: `[N, C, H, W]` for images,
/// `[N, D]` for feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        if images.batch() != labels.len() {
            return Err(DataError::Mismatch {
                images: images.batch(),
                labels: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(DataError::Invalid("dataset is empty".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Invalid(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example shape.
    pub fn example_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// The first `n` examples (all of them when `n ≥ len`).
    pub fn truncate(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.gather(&idx);
        Dataset {
            images,
            labels,
            classes: self.classes,
        }
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Format {
            offset,
            message: format!("truncated header reading {what}"),
        })
}

/// Parses an IDX3 image file into `[N, 1, H, W]` pixels scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor, DataError> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::Format {
            offset: 0,
            message: format!("image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, "image count")? as usize;
    let h = be_u32(bytes, 8, "rows")? as usize;
    let w = be_u32(bytes, 12, "columns")? as usize;
    let len = n * h * w;
    let payload = &bytes[16..];
    if payload.len() < len {
        return Err(DataError::Format {
            offset: 16 + payload.len(),
            message: format!("truncated payload: expected {len} pixel bytes, found {}", payload.len()),
        });
    }
    let data = payload[..len].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![n, 1, h, w], data).expect("sized from header"))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(DataError::Format {
            offset: 0,
            message: format!("label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(DataError::Format {
            offset: 8 + payload.len(),
            message: format!("truncated payload: expected {n} labels, found {}", payload.len()),
        });
    }
    Ok(payload[..n].iter().map(|&b| b as usize).collect())
}

pub fn idx_from_bytes(images: &[u8], labels: &[u8]) -> Result<Dataset, DataError> {
    let images = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if images.batch() != labels.len() {
        return Err(DataError::Mismatch {
            images: images.batch(),
            labels: labels.len(),
        });
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    Dataset::new(images, labels, classes)
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    idx_from_bytes(&read(images_path.as_ref())?, &read(labels_path.as_ref())?)
}

/// Encodes single-channel images (values in [0, 1]) and labels as IDX bytes.
pub fn to_idx_bytes(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>), DataError> {
    let (h, w) = match ds.example_shape() {
        [1, h, w] | [h, w] => (*h, *w),
        other => return Err(DataError::Invalid(format!("IDX needs [1, H, W] examples, got {other:?}"))),
    };
    let mut img = Vec::with_capacity(16 + ds.images.len());
    for v in [IMAGES_MAGIC, ds.len() as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lbl = Vec::with_capacity(8 + ds.len());
    lbl.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in &ds.labels {
        let b = u8::try_from(l).map_err(|_| DataError::Invalid(format!("label {l} does not fit a byte")))?;
        lbl.push(b);
    }
    Ok((img, lbl))
}

pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<(), DataError> {
    let (img, lbl) = to_idx_bytes(ds)?;
    for (path, bytes) in [(images_path.as_ref(), img), (labels_path.as_ref(), lbl)] {
        std::fs::write(path, bytes).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

/// Isotropic unit-variance Gaussian clusters. Class means are random
/// directions scaled to length `separation`.
pub fn synth_blobs(
    classes: usize,
    dims: usize,
    n_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if classes < 2 || dims == 0 || n_per_class == 0 {
        return Err(DataError::Invalid(format!(
            "synth_blobs needs classes ≥ 2, dims ≥ 1, n_per_class ≥ 1 (got {classes}, {dims}, {n_per_class})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm * separation).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(classes * n_per_class * dims);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for _ in 0..n_per_class {
        for (c, mean) in means.iter().enumerate() {
            data.extend(mean.iter().map(|m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + z
            }));
            labels.push(c);
        }
    }
    let images = Tensor::new(vec![labels.len(), dims], data).expect("sized above");
    Dataset::new(images, labels, classes)
}

/// Stroke skeletons for the ten glyph classes on a unit box (x right, y down).
const GLYPHS: [&[[f64; 4]]; 10] = [
    &[[0.2, 0.0, 0.8, 0.0], [0.8, 0.0, 0.8, 1.0], [0.8, 1.0, 0.2, 1.0], [0.2, 1.0, 0.2, 0.0]],
    &[[0.5, 0.0, 0.5, 1.0], [0.3, 0.2, 0.5, 0.0]],
    &[[0.2, 0.0, 0.8, 0.0], [0.8, 0.0, 0.8, 0.5], [0.8, 0.5, 0.2, 1.0], [0.2, 1.0, 0.8, 1.0]],
    &[[0.2, 0.0, 0.8, 0.0], [0.8, 0.0, 0.8, 1.0], [0.3, 0.5, 0.8, 0.5], [0.2, 1.0, 0.8, 1.0]],
    &[[0.2, 0.0, 0.2, 0.5], [0.2, 0.5, 0.8, 0.5], [0.7, 0.0, 0.7, 1.0]],
    &[[0.8, 0.0, 0.2, 0.0], [0.2, 0.0, 0.2, 0.5], [0.2, 0.5, 0.8, 0.5], [0.8, 0.5, 0.8, 1.0], [0.8, 1.0, 0.2, 1.0]],
    &[[0.8, 0.0, 0.2, 0.0], [0.2, 0.0, 0.2, 1.0], [0.2, 1.0, 0.8, 1.0], [0.8, 1.0, 0.8, 0.5], [0.8, 0.5, 0.2, 0.5]],
    &[[0.2, 0.0, 0.8, 0.0], [0.8, 0.0, 0.4, 1.0]],
    &[[0.2, 0.0, 0.8, 0.0], [0.2, 0.0, 0.2, 1.0], [0.8, 0.0, 0.8, 1.0], [0.2, 0.5, 0.8, 0.5], [0.2, 1.0, 0.8, 1.0]],
    &[[0.8, 0.5, 0.2, 0.5], [0.2, 0.5, 0.2, 0.0], [0.2, 0.0, 0.8, 0.0], [0.8, 0.0, 0.8, 1.0], [0.8, 1.0, 0.2, 1.0]],
];

fn segment_distance(px: f64, py: f64, s: [f64; 4]) -> f64 {
    let [x0, y0, x1, y1] = s;
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (x0 + t * dx - px, y0 + t * dy - py);
    (cx * cx + cy * cy).sqrt()
}

/// MNIST-format stand-in: 28×28 single-channel renderings of ten digit-like
/// stroke glyphs with random scale, shear, offset, stroke width and pixel
/// noise plus one distractor stroke. Pixels are quantized to multiples of 1/255 so the dataset survives
/// an IDX round-trip bit-exactly.
pub fn synth_glyphs(n: usize, seed: u64) -> Result<Dataset, DataError> {
    const SIDE: usize = 28;
    if n == 0 {
        return Err(DataError::Invalid("synth_glyphs needs n ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).expect("positive std");
    let mut data = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        let sx = rng.gen_range(9.0..15.0);
        let sy = rng.gen_range(14.0..20.0);
        let shear = rng.gen_range(-0.35..0.35);
        let ox = 14.0 + rng.gen_range(-3.0..3.0) - sx / 2.0;
        let oy = 14.0 + rng.gen_range(-3.0..3.0) - sy / 2.0;
        let width = rng.gen_range(0.9..2.2);
        let mut segs: Vec<[f64; 4]> = GLYPHS[class]
            .iter()
            .map(|&[x0, y0, x1, y1]| {
                let j = |v: f64, rng: &mut ChaCha8Rng| v + rng.gen_range(-0.12..0.12);
                let map = |x: f64, y: f64| (ox + sx * (x + shear * (0.5 - y)), oy + sy * y);
                let (a, b) = map(j(x0, &mut rng), j(y0, &mut rng));
                let (c, d) = map(j(x1, &mut rng), j(y1, &mut rng));
                [a, b, c, d]
            })
            .collect();
        // One short distractor stroke anywhere in the frame.
        let (x0, y0) = (rng.gen_range(2.0..26.0), rng.gen_range(2.0..26.0));
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let len = rng.gen_range(3.0..8.0);
        segs.push([x0, y0, x0 + len * angle.cos(), y0 + len * angle.sin()]);
        for py in 0..SIDE {
            for px in 0..SIDE {
                let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
                let d = segs.iter().map(|&s| segment_distance(fx, fy, s)).fold(f64::INFINITY, f64::min);
                let ink = (1.0 - (d - width).max(0.0)).clamp(0.0, 1.0);
                let v = (ink + noise.sample(&mut rng)).clamp(0.0, 1.0);
                data.push((v * 255.0).round() / 255.0);
            }
        }
        labels.push(class);
    }
    let images = Tensor::new(vec![n, 1, SIDE, SIDE], data).expect("sized above");
    Dataset::new(images, labels, 10)
}

/// Train/validation split and batch ordering, all keyed by `seed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub validation_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl BatchPlan {
    pub fn validate(&self, n: usize) -> Result<(), DataError> {
        if self.batch_size == 0 || self.batch_size > n {
            return Err(DataError::Plan(format!("batch size {} not in [1, {n}]", self.batch_size)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(DataError::Plan(format!(
                "validation fraction {} not in [0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }

    /// Disjoint index sets; a pure function of `(n, seed, validation_fraction)`.
    /// Each side is returned in ascending order.
    pub fn split(&self, n: usize) -> Result<Split, DataError> {
        self.validate(n)?;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let n_val = (self.validation_fraction * n as f64).round() as usize;
        let mut validation = perm[..n_val].to_vec();
        let mut train = perm[n_val..].to_vec();
        validation.sort_unstable();
        train.sort_unstable();
        if train.len() < self.batch_size {
            return Err(DataError::Plan(format!(
                "batch size {} exceeds the {} training examples",
                self.batch_size,
                train.len()
            )));
        }
        Ok(Split { train, validation })
    }

    /// Shuffled full training batches for one epoch; the partial tail is dropped.
    pub fn batches(&self, split: &Split, epoch: u64) -> Result<Vec<Vec<usize>>, DataError> {
        if self.batch_size == 0 || self.batch_size > split.train.len() {
            return Err(DataError::Plan(format!(
                "batch size {} exceeds the {} training examples",
                self.batch_size,
                split.train.len()
            )));
        }
        let mut order = split.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch.wrapping_add(1));
        order.shuffle(&mut rng);
        Ok(order.chunks_exact(self.batch_size).map(<[usize]>::to_vec).collect())
    }

    /// Validation batches in index order, each of `min(batch_size, |val|)`
    /// examples; the partial tail is dropped.
    pub fn validation_batches(&self, split: &Split) -> Vec<Vec<usize>> {
        let size = self.batch_size.min(split.validation.len());
        if size == 0 {
            return Vec::new();
        }
        split.validation.chunks_exact(size).map(<[usize]>::to_vec).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut b = magic.to_be_bytes().to_vec();
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b
    }

    #[test]
    fn parses_tiny_image_file() {
        let mut bytes = vec![0x00, 0x00, 0x08, 0x03];
        bytes.extend_from_slice(&[0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2]);
        bytes.extend_from_slice(&[0, 128, 255, 64]);
        let t = parse_idx_images(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2, 2]);
        let expect = [0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0];
        assert_eq!(t.data(), &expect);
        assert!((t.data()[1] - 0.50196).abs() < 1e-5);
        assert!((t.data()[3] - 0.25098).abs() < 1e-5);
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let mut img = header(IMAGES_MAGIC, &[100, 1, 1]);
        img.extend(vec![0u8; 100]);
        let mut lbl = header(LABELS_MAGIC, &[99]);
        lbl.extend(vec![0u8; 99]);
        assert!(matches!(
            idx_from_bytes(&img, &lbl),
            Err(DataError::Mismatch { images: 100, labels: 99 })
        ));
    }

    #[test]
    fn wrong_magic_and_truncation_report_offsets() {
        let mut img = header(0x0000_0802, &[1, 1, 1]);
        img.push(0);
        assert!(matches!(parse_idx_images(&img), Err(DataError::Format { offset: 0, .. })));
        let mut short = header(IMAGES_MAGIC, &[2, 2, 2]);
        short.extend_from_slice(&[1, 2, 3]);
        match parse_idx_images(&short) {
            Err(DataError::Format { offset, .. }) => assert_eq!(offset, 19),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_idx_labels(&[0, 0, 8]), Err(DataError::Format { offset: 0, .. })));
    }

    #[test]
    fn idx_round_trip_is_bit_exact() {
        let ds = synth_glyphs(30, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back, ds);
    }

    /// Softmax regression trained by full-batch gradient descent.
    fn linear_probe_accuracy(ds: &Dataset) -> f64 {
        let d = ds.example_shape().iter().product::<usize>();
        let k = ds.classes;
        let mut w = vec![0.0; k * (d + 1)];
        for _ in 0..300 {
            let mut g = vec![0.0; w.len()];
            for (i, &y) in ds.labels.iter().enumerate() {
                let x = ds.images.row(i);
                let z: Vec<f64> = (0..k)
                    .map(|c| w[c * (d + 1) + d] + (0..d).map(|j| w[c * (d + 1) + j] * x[j]).sum::<f64>())
                    .collect();
                let m = z.iter().copied().fold(f64::MIN, f64::max);
                let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
                for c in 0..k {
                    let p = (z[c] - m).exp() / s - if c == y { 1.0 } else { 0.0 };
                    for j in 0..d {
                        g[c * (d + 1) + j] += p * x[j];
                    }
                    g[c * (d + 1) + d] += p;
                }
            }
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= 0.1 * gi / ds.len() as f64;
            }
        }
        let correct = ds
            .labels
            .iter()
            .enumerate()
            .filter(|(i, &y)| {
                let x = ds.images.row(*i);
                let score = |c: usize| w[c * (d + 1) + d] + (0..d).map(|j| w[c * (d + 1) + j] * x[j]).sum::<f64>();
                (0..k).all(|c| c == y || score(c) < score(y))
            })
            .count();
        correct as f64 / ds.len() as f64
    }

    #[test]
    fn separated_blobs_are_linearly_separable() {
        let ds = synth_blobs(4, 8, 200, 10.0, 1).unwrap();
        assert!(linear_probe_accuracy(&ds) > 0.99);
    }

    #[test]
    fn coincident_blobs_are_chance() {
        let ds = synth_blobs(4, 8, 500, 0.0, 2).unwrap();
        let train = ds.truncate(1000);
        let acc = linear_probe_accuracy(&train);
        assert!((acc - 0.25).abs() < 0.05, "{acc}");
    }

    proptest::proptest! {
        #[test]
        fn split_is_pure_and_disjoint(n in 2usize..400, seed in 0u64..1000, frac in 0.0f64..0.5) {
            let plan = BatchPlan { batch_size: 1, seed, validation_fraction: frac };
            let a = plan.split(n).unwrap();
            let b = plan.split(n).unwrap();
            proptest::prop_assert_eq!(&a, &b);
            proptest::prop_assert_eq!(a.train.len() + a.validation.len(), n);
            let t: HashSet<_> = a.train.iter().collect();
            proptest::prop_assert!(a.validation.iter().all(|i| !t.contains(i)));
        }
    }

    #[test]
    fn generators_are_seed_deterministic() {
        assert_eq!(synth_blobs(3, 4, 10, 2.0, 7).unwrap(), synth_blobs(3, 4, 10, 2.0, 7).unwrap());
        assert_ne!(synth_blobs(3, 4, 10, 2.0, 7).unwrap(), synth_blobs(3, 4, 10, 2.0, 8).unwrap());
        assert_eq!(synth_glyphs(20, 3).unwrap(), synth_glyphs(20, 3).unwrap());
        assert!(synth_blobs(1, 4, 10, 2.0, 0).is_err());
    }

    #[test]
    fn glyphs_are_balanced_and_in_range() {
        let ds = synth_glyphs(200, 0).unwrap();
        assert_eq!(ds.images.shape(), &[200, 1, 28, 28]);
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for c in 0..10 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == c).count(), 20);
        }
    }

    #[test]
    fn plan_arithmetic_and_disjointness() {
        let plan = BatchPlan {
            batch_size: 32,
            seed: 5,
            validation_fraction: 0.1,
        };
        let split = plan.split(100).unwrap();
        assert_eq!(split.train.len(), 90);
        assert_eq!(split.validation.len(), 10);
        let a: HashSet<_> = split.train.iter().collect();
        assert!(split.validation.iter().all(|i| !a.contains(i)));
        let e0 = plan.batches(&split, 0).unwrap();
        let e1 = plan.batches(&split, 1).unwrap();
        assert_eq!(e0.len(), 2);
        assert!(e0.iter().all(|b| b.len() == 32));
        assert_ne!(e0, e1);
        assert_eq!(e0, plan.batches(&split, 0).unwrap());
        assert_eq!(split, plan.split(100).unwrap());
        assert_eq!(plan.validation_batches(&split), vec![split.validation.clone()]);
    }

    #[test]
    fn oversized_batch_is_a_plan_error() {
        let plan = BatchPlan {
            batch_size: 95,
            seed: 0,
            validation_fraction: 0.1,
        };
        assert!(matches!(plan.split(100), Err(DataError::Plan(_))));
        let bad = BatchPlan {
            validation_fraction: 1.0,
            batch_size: 1,
            ..plan
        };
        assert!(bad.split(100).is_err());
    }
}
