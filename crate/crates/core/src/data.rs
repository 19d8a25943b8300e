//! Image classification datasets: MNIST IDX and CIFAR-10 binary files.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

/// Images stored as `N x C x H x W` values in `[0, 1]`, with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    image_shape: [usize; 3],
    pixels: Vec<f32>,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        image_shape: [usize; 3],
        pixels: Vec<f32>,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per = image_shape.iter().product::<usize>();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::Shape(format!(
                "{} labels need {} pixels of shape {image_shape:?}, got {}",
                labels.len(),
                per * labels.len(),
                pixels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {l} >= class count {classes}")));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Dataset {
            image_shape,
            pixels,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Single example as a `C x H x W` tensor.
    pub fn image_tensor(&self, i: usize) -> Result<Tensor> {
        if i >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "image index {i} out of range for {} images",
                self.len()
            )));
        }
        Tensor::new(self.image_shape.to_vec(), self.image(i).to_vec())
    }

    /// `N x C x H x W` batch of the given examples with their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("example {i} out of range")));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.image_shape);
        Ok((Tensor::new(shape, data)?, labels))
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            image_shape: self.image_shape,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn to_byte(p: f32) -> u8 {
    (p * 255.0).round().clamp(0.0, 255.0) as u8
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, format!("truncated header while reading {what}")))
}

/// Reads an IDX image file and its IDX label file.
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    load_mnist_split(images_path, labels_path, Split::Train)
}

pub fn load_mnist_split(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let img = read_file(images_path)?;
    let magic = be_u32(&img, 0, images_path, "magic")?;
    if magic != MNIST_IMAGE_MAGIC {
        return Err(Error::format(
            images_path,
            format!("magic mismatch: expected {MNIST_IMAGE_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let count = be_u32(&img, 4, images_path, "image count")? as usize;
    let rows = be_u32(&img, 8, images_path, "row count")? as usize;
    let cols = be_u32(&img, 12, images_path, "column count")? as usize;
    let payload = count * rows * cols;
    if img.len() - 16 < payload {
        return Err(Error::format(
            images_path,
            format!(
                "truncated payload: {count} images of {rows}x{cols} need {payload} bytes, found {}",
                img.len() - 16
            ),
        ));
    }

    let lab = read_file(labels_path)?;
    let magic = be_u32(&lab, 0, labels_path, "magic")?;
    if magic != MNIST_LABEL_MAGIC {
        return Err(Error::format(
            labels_path,
            format!("magic mismatch: expected {MNIST_LABEL_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let label_count = be_u32(&lab, 4, labels_path, "label count")? as usize;
    if label_count != count {
        return Err(Error::format(
            labels_path,
            format!(
                "count mismatch: {label_count} labels for {count} images in {}",
                images_path.display()
            ),
        ));
    }
    if lab.len() - 8 < count {
        return Err(Error::format(
            labels_path,
            format!("truncated payload: expected {count} labels"),
        ));
    }
    let labels: Vec<usize> = lab[8..8 + count].iter().map(|&b| b as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::format(labels_path, format!("label {bad} is not a digit")));
    }
    let pixels = img[16..16 + payload].iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::new([1, rows, cols], pixels, labels, 10, split)
}

pub fn write_mnist(images_path: &Path, labels_path: &Path, ds: &Dataset) -> Result<()> {
    let [c, h, w] = ds.image_shape;
    if c != 1 {
        return Err(Error::InvalidArgument(format!(
            "IDX images are single-channel, dataset has {c}"
        )));
    }
    let mut img = Vec::with_capacity(16 + ds.pixels.len());
    for v in [MNIST_IMAGE_MAGIC, ds.len() as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.pixels.iter().map(|&p| to_byte(p)));
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&MNIST_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    std::fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

/// Concatenates CIFAR-10 binary batch files: 1 label byte then three
/// 32x32 row-major planes (R, G, B) per record.
pub fn load_cifar10<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    load_cifar10_split(paths, Split::Train)
}

pub fn load_cifar10_split<P: AsRef<Path>>(paths: &[P], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        if bytes.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(Error::format(
                path,
                format!("length {} is not a multiple of {CIFAR_RECORD_BYTES}", bytes.len()),
            ));
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
            if rec[0] as usize >= CIFAR_CLASSES {
                return Err(Error::format(path, format!("record {r}: label byte {} > 9", rec[0])));
            }
            labels.push(rec[0] as usize);
            pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    Dataset::new([3, 32, 32], pixels, labels, CIFAR_CLASSES, split)
}

pub fn write_cifar10(path: &Path, ds: &Dataset) -> Result<()> {
    if ds.image_shape != [3, 32, 32] {
        return Err(Error::InvalidArgument(format!(
            "CIFAR-10 records are 3x32x32, dataset has {:?}",
            ds.image_shape
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD_BYTES);
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        out.extend(ds.image(i).iter().map(|&p| to_byte(p)));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Standard file locations inside a data directory.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn cifar10_paths(dir: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    }
}

pub fn load_split(kind: DatasetKind, dir: &Path, split: Split) -> Result<Dataset> {
    match kind {
        DatasetKind::Mnist => {
            let (i, l) = mnist_paths(dir, split);
            load_mnist_split(&i, &l, split)
        }
        DatasetKind::Cifar10 => {
            let paths: Vec<PathBuf> = cifar10_paths(dir, split).into_iter().filter(|p| p.exists()).collect();
            if paths.is_empty() {
                return Err(Error::io(
                    dir,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "no CIFAR-10 batch files found"),
                ));
            }
            load_cifar10_split(&paths, split)
        }
    }
}

/// Seeded class-stratified sample of `n` examples. Classes are visited
/// round-robin (in a seeded order) so per-class counts differ by at most one
/// whenever every class has enough examples. The chosen examples keep their
/// original relative order.
pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "subset of {n} requested from {} examples",
            ds.len()
        )));
    }
    if n < ds.classes {
        return Err(Error::InvalidArgument(format!(
            "stratified subset needs at least one example per class ({}), got {n}",
            ds.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for group in &mut by_class {
        group.shuffle(&mut rng);
    }
    let mut order: Vec<usize> = (0..ds.classes).collect();
    order.shuffle(&mut rng);
    let mut cursor = vec![0usize; ds.classes];
    let mut chosen = Vec::with_capacity(n);
    while chosen.len() < n {
        for &c in &order {
            if chosen.len() == n {
                break;
            }
            if let Some(&i) = by_class[c].get(cursor[c]) {
                chosen.push(i);
                cursor[c] += 1;
            }
        }
    }
    chosen.sort_unstable();
    Ok(ds.select(&chosen))
}

/// Procedural 10-class colour-texture images in the CIFAR-10 layout, for
/// exercising the CIFAR pipeline when the real batches are unavailable.
///
/// Each class combines one of five hues with one of two grating
/// orientations; every image gets a random phase, contrast, colour jitter and
/// pixel noise. Values are rounded to multiples of 1/255 so the data
/// survives a round trip through the binary format unchanged.
pub fn synthetic_cifar(n: usize, seed: u64, split: Split) -> Result<Dataset> {
    const HUES: [[f64; 3]; 5] = [
        [0.75, 0.30, 0.30],
        [0.30, 0.70, 0.35],
        [0.30, 0.40, 0.80],
        [0.75, 0.70, 0.30],
        [0.55, 0.35, 0.70],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = move |rng: &mut ChaCha8Rng| {
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % CIFAR_CLASSES;
        let hue = HUES[label % 5];
        let angle = if label < 5 { 0.35 } else { 1.9 } + 0.25 * gauss(&mut rng);
        let freq = 0.9 + 0.1 * gauss(&mut rng);
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        let contrast = 0.25 + 0.1 * rng.random::<f64>();
        let (ca, sa) = (angle.cos(), angle.sin());
        let jitter: Vec<f64> = (0..3).map(|_| 0.12 * gauss(&mut rng)).collect();
        for ch in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let t = (x as f64 * ca + y as f64 * sa) * freq + phase;
                    let v = hue[ch] + jitter[ch] + contrast * t.sin() + 0.06 * gauss(&mut rng);
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0);
                }
            }
        }
        labels.push(label);
    }
    Dataset::new([3, 32, 32], pixels, labels, CIFAR_CLASSES, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(count: u32, rows: u32, cols: u32, payload: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [MNIST_IMAGE_MAGIC, count, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = MNIST_LABEL_MAGIC.to_be_bytes().to_vec();
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn mnist_one_image_pixel_order() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&ip, idx_images(1, 2, 2, &[0, 51, 102, 255])).unwrap();
        std::fs::write(&lp, idx_labels(&[7])).unwrap();
        let ds = load_mnist(&ip, &lp).unwrap();
        let (t, labels) = ds.batch(&[0]).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 0.2, 0.4, 1.0]);
        assert_eq!(labels, vec![7]);
    }

    #[test]
    fn mnist_empty_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&ip, idx_images(0, 28, 28, &[])).unwrap();
        std::fs::write(&lp, idx_labels(&[])).unwrap();
        assert!(load_mnist(&ip, &lp).unwrap().is_empty());

        let mut bad = idx_images(0, 28, 28, &[]);
        bad[3] = 0x01;
        std::fs::write(&ip, &bad).unwrap();
        let err = load_mnist(&ip, &lp).unwrap_err().to_string();
        assert!(err.contains("magic") && err.contains(ip.to_str().unwrap()), "{err}");

        std::fs::write(&ip, idx_images(2, 2, 2, &[0; 7])).unwrap();
        std::fs::write(&lp, idx_labels(&[1, 2])).unwrap();
        assert!(load_mnist(&ip, &lp).unwrap_err().to_string().contains("truncated"));

        std::fs::write(&ip, idx_images(2, 2, 2, &[0; 8])).unwrap();
        std::fs::write(&lp, idx_labels(&[1])).unwrap();
        assert!(load_mnist(&ip, &lp).unwrap_err().to_string().contains("count mismatch"));
    }

    #[test]
    fn cifar_one_record_plane_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        let mut rec = vec![3u8];
        rec.extend(std::iter::repeat_n(255, 1024)); // R
        rec.extend(std::iter::repeat_n(0, 1024)); // G
        rec.extend((0..1024).map(|i| (i % 256) as u8)); // B
        std::fs::write(&p, &rec).unwrap();
        let ds = load_cifar10(&[&p]).unwrap();
        let t = ds.image_tensor(0).unwrap();
        assert_eq!(t.shape(), &[3, 32, 32]);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[1024], 0.0);
        assert_eq!(t.data()[2048 + 33], 33.0 / 255.0);
        assert_eq!(ds.labels(), &[3]);

        let q = dir.path().join("c.bin");
        std::fs::write(&q, [rec.clone(), rec.clone()].concat()).unwrap();
        assert_eq!(load_cifar10(&[&p, &q]).unwrap().len(), 3);

        std::fs::write(&q, &rec[..3072]).unwrap();
        assert!(load_cifar10(&[&q])
            .unwrap_err()
            .to_string()
            .contains("multiple of 3073"));
        let mut bad = rec;
        bad[0] = 10;
        std::fs::write(&q, &bad).unwrap();
        assert!(load_cifar10(&[&q]).unwrap_err().to_string().contains("label byte"));
    }

    #[test]
    fn round_trips_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthetic_cifar(25, 4, Split::Train).unwrap();
        let p = dir.path().join("s.bin");
        write_cifar10(&p, &ds).unwrap();
        assert_eq!(load_cifar10(&[&p]).unwrap(), ds);

        let pixels: Vec<f32> = (0..3 * 36).map(|i| ((i * 13) % 256) as f32 / 255.0).collect();
        let mnist = Dataset::new([1, 6, 6], pixels, vec![0, 9, 4], 10, Split::Train).unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_mnist(&ip, &lp, &mnist).unwrap();
        assert_eq!(load_mnist(&ip, &lp).unwrap(), mnist);
    }

    fn balanced(n_per: usize) -> Dataset {
        let labels: Vec<usize> = (0..10 * n_per).map(|i| i % 10).collect();
        Dataset::new([1, 1, 1], vec![0.5; labels.len()], labels, 10, Split::Train).unwrap()
    }

    #[test]
    fn subset_cases() {
        let ds = balanced(30);
        assert_eq!(subset(&ds, 300, 1).unwrap(), ds);
        assert_eq!(subset(&ds, 100, 1).unwrap().class_counts(), vec![10; 10]);
        assert!(subset(&ds, 9, 1).is_err());
        assert!(subset(&ds, 301, 1).is_err());
        assert_eq!(subset(&ds, 57, 3).unwrap(), subset(&ds, 57, 3).unwrap());
    }

    #[test]
    fn subset_stratification_quota() {
        let labels: Vec<usize> = (0..1000).map(|i| (i * i + 3 * i) % 10).collect();
        let ds = Dataset::new([1, 1, 1], vec![0.0; 1000], labels, 10, Split::Train).unwrap();
        let avail = ds.class_counts();
        for n in [10, 55, 123, 480] {
            let counts = subset(&ds, n, n as u64).unwrap().class_counts();
            assert_eq!(counts.iter().sum::<usize>(), n);
            // with enough examples everywhere, quotas are floor/ceil of n/10
            if avail.iter().all(|&a| a >= n.div_ceil(10)) {
                let (lo, hi) = (n / 10, n.div_ceil(10));
                assert!(counts.iter().all(|&c| c == lo || c == hi), "{counts:?}");
                let max = counts.iter().max().unwrap();
                let min = counts.iter().min().unwrap();
                assert!(max - min <= 1);
            }
        }
    }

    #[test]
    fn synthetic_cifar_is_balanced_and_deterministic() {
        let a = synthetic_cifar(40, 9, Split::Test).unwrap();
        assert_eq!(a.class_counts(), vec![4; 10]);
        assert_eq!(a, synthetic_cifar(40, 9, Split::Test).unwrap());
        assert_ne!(a, synthetic_cifar(40, 10, Split::Test).unwrap());
    }
}
