//! Dataset ingestion and batching.
//!
//! Images are held as raw u8 and scaled to [0, 1] floats at batch-assembly
//! time; no other normalization is applied anywhere, so perturbation budgets
//! are in pixel-fraction units throughout.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Scalar;
use crate::rng::{self, labels};

/// Where training data comes from.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum DataSource {
    /// Directory with CIFAR-10 binary batches (`data_batch_*.bin`,
    /// `test_batch.bin`; 1 label byte + 3072 pixel bytes per record).
    Cifar10Binary { dir: PathBuf },
    /// Gaussian class blobs in image space; linearly separable.
    SyntheticBlobs { classes: usize, channels: usize, height: usize, width: usize, count: usize, seed: u64 },
    /// Class-textured synthetic images, CIFAR-shaped; harder than blobs.
    SyntheticTextures { classes: usize, train: usize, test: usize, seed: u64 },
    /// Directory with one subdirectory per class holding same-sized images.
    ImageFolder { dir: PathBuf },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub source: DataSource,
    /// Average-pool factor applied at ingestion (1 = native resolution).
    pub downscale: usize,
    /// Keep only the first k training examples after the deterministic
    /// ingest order (the "10k subset" knob).
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
}

impl DatasetDescriptor {
    pub fn new(source: DataSource) -> Self {
        Self { source, downscale: 1, train_subset: None, test_subset: None }
    }
}

/// In-memory split with u8 pixels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn pixels_per_image(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Assemble a [0,1]-scaled float batch for the given indices.
    pub fn batch<F: Scalar>(&self, idxs: &[usize]) -> (Array4<F>, Vec<usize>) {
        let ppi = self.pixels_per_image();
        let mut x = Array4::zeros((idxs.len(), self.channels, self.height, self.width));
        {
            let xs = x.as_slice_mut().unwrap();
            for (bi, &i) in idxs.iter().enumerate() {
                let src = &self.images[i * ppi..(i + 1) * ppi];
                let dst = &mut xs[bi * ppi..(bi + 1) * ppi];
                for (d, s) in dst.iter_mut().zip(src.iter()) {
                    *d = F::cast(*s as f64 / 255.0);
                }
            }
        }
        let y = idxs.iter().map(|&i| self.labels[i] as usize).collect();
        (x, y)
    }

    /// The whole split as one batch (careful with large sets).
    pub fn full_batch<F: Scalar>(&self) -> (Array4<F>, Vec<usize>) {
        let idxs: Vec<usize> = (0..self.len()).collect();
        self.batch(&idxs)
    }

    /// Deterministically shuffled index order for one epoch.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut r = rng::stream(seed, labels::SHUFFLE, epoch);
        for i in (1..order.len()).rev() {
            let j = r.random_range(0..=i);
            order.swap(i, j);
        }
        order
    }

    fn truncate(&mut self, keep: usize) {
        let keep = keep.min(self.len());
        self.labels.truncate(keep);
        self.images.truncate(keep * self.pixels_per_image());
    }

    /// 2x2 (or kxk) average-pool the whole set.
    fn downscale(&mut self, factor: usize) {
        if factor <= 1 {
            return;
        }
        let (c, h, w) = (self.channels, self.height, self.width);
        let nh = h / factor;
        let nw = w / factor;
        let n = self.len();
        let mut out = vec![0u8; n * c * nh * nw];
        for i in 0..n {
            for ci in 0..c {
                for oy in 0..nh {
                    for ox in 0..nw {
                        let mut acc = 0u32;
                        for dy in 0..factor {
                            for dx in 0..factor {
                                let iy = oy * factor + dy;
                                let ix = ox * factor + dx;
                                acc += self.images[((i * c + ci) * h + iy) * w + ix] as u32;
                            }
                        }
                        out[((i * c + ci) * nh + oy) * nw + ox] =
                            (acc / (factor * factor) as u32) as u8;
                    }
                }
            }
        }
        self.images = out;
        self.height = nh;
        self.width = nw;
    }
}

/// Load a dataset into memory, returning (train, test).
pub fn ingest_dataset(desc: &DatasetDescriptor) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = match &desc.source {
        DataSource::Cifar10Binary { dir } => load_cifar10(dir)?,
        DataSource::SyntheticBlobs { classes, channels, height, width, count, seed } => {
            synthetic_blobs(*classes, *channels, *height, *width, *count, *seed)?
        }
        DataSource::SyntheticTextures { classes, train, test, seed } => {
            let tr = synthetic_textures(*classes, *train, *seed)?;
            let te = synthetic_textures(*classes, *test, seed.wrapping_add(0x9e3779b9))?;
            (tr, te)
        }
        DataSource::ImageFolder { dir } => load_image_folder(dir)?,
    };
    if let Some(k) = desc.train_subset {
        train.truncate(k);
    }
    if let Some(k) = desc.test_subset {
        test.truncate(k);
    }
    train.downscale(desc.downscale);
    test.downscale(desc.downscale);
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    Ok((train, test))
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

fn read_cifar_file(path: &Path, images: &mut Vec<u8>, labels: &mut Vec<u8>) -> Result<()> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    if buf.is_empty() || buf.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!(
            "{}: {} bytes is not a whole number of 3073-byte records",
            path.display(),
            buf.len()
        )));
    }
    for rec in buf.chunks_exact(CIFAR_RECORD) {
        let label = rec[0];
        if label > 9 {
            return Err(Error::Data(format!(
                "{}: label {} out of range 0..=9",
                path.display(),
                label
            )));
        }
        labels.push(label);
        images.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        channels: 3,
        height: 32,
        width: 32,
        num_classes: 10,
    };
    let mut found = 0;
    for i in 1..=5 {
        let p = dir.join(format!("data_batch_{i}.bin"));
        if p.exists() {
            read_cifar_file(&p, &mut train.images, &mut train.labels)?;
            found += 1;
        }
    }
    if found == 0 {
        return Err(Error::Data(format!(
            "no data_batch_*.bin files under {}",
            dir.display()
        )));
    }
    let mut test = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        channels: 3,
        height: 32,
        width: 32,
        num_classes: 10,
    };
    let tp = dir.join("test_batch.bin");
    if tp.exists() {
        read_cifar_file(&tp, &mut test.images, &mut test.labels)?;
    }
    Ok((train, test))
}

fn synthetic_blobs(
    classes: usize,
    channels: usize,
    height: usize,
    width: usize,
    count: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    let ppi = channels * height * width;
    let mut r = rng::stream(seed, labels::DATA, 0);
    // per-class centers: a per-channel base level (so classes stay separable
    // under global pooling) plus a small frozen per-pixel texture
    let bases: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..channels).map(|_| 0.25 + 0.5 * r.random::<f64>()).collect())
        .collect();
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|k| {
            (0..ppi)
                .map(|p| bases[k][p / (height * width)] + 0.05 * (r.random::<f64>() - 0.5))
                .collect()
        })
        .collect();
    let sigma = 0.08;
    let make = |n: usize, stream_epoch: u64| {
        let mut rr = rng::stream(seed, labels::DATA, stream_epoch);
        let mut images = Vec::with_capacity(n * ppi);
        let mut labs = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % classes;
            labs.push(class as u8);
            for p in 0..ppi {
                let v: f64 = centers[class][p] + sigma * normal(&mut rr);
                images.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        Dataset { images, labels: labs, channels, height, width, num_classes: classes }
    };
    let train_n = (count * 4) / 5;
    let train = make(train_n, 1);
    let test = make(count - train_n, 2);
    Ok((train, test))
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}

/// Class-textured images: each class has a characteristic oriented grating,
/// color balance and blob placement bias; per-image phase, jitter and noise
/// keep the task non-trivial. The texture amplitudes are deliberately small
/// so attack-scale perturbations can reach them.
fn synthetic_textures(classes: usize, count: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || classes > 10 {
        return Err(Error::Config("textured set supports 2..=10 classes".into()));
    }
    let (c, h, w) = (3usize, 32usize, 32usize);
    let ppi = c * h * w;
    let mut images = Vec::with_capacity(count * ppi);
    let mut labs = Vec::with_capacity(count);
    let mut r = rng::stream(seed, labels::DATA, 7);
    for i in 0..count {
        let class = i % classes;
        labs.push(class as u8);
        // class-determined texture parameters
        let angle = std::f64::consts::PI * (class as f64) / classes as f64;
        let freq = 0.35 + 0.1 * ((class % 3) as f64);
        let color = [
            0.5 + 0.2 * ((class % 2) as f64) - 0.1,
            0.5 + 0.2 * (((class / 2) % 2) as f64) - 0.1,
            0.5 + 0.2 * (((class / 4) % 2) as f64) - 0.1,
        ];
        let phase = r.random::<f64>() * std::f64::consts::TAU;
        let jitter = 0.2 * (r.random::<f64>() - 0.5);
        // one solid shape whose quadrant depends on the class
        let qx = (class % 2) as f64 * 16.0;
        let qy = ((class / 2) % 2) as f64 * 16.0;
        let cx = qx + 4.0 + 8.0 * r.random::<f64>();
        let cy = qy + 4.0 + 8.0 * r.random::<f64>();
        let rad = 3.0 + 3.0 * r.random::<f64>();
        let (dir_y, dir_x) = ((angle + jitter).sin(), (angle + jitter).cos());
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let t = freq * (dir_x * x as f64 + dir_y * y as f64) + phase;
                    let grating = 0.15 * t.sin();
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cy;
                    let shape = if dx * dx + dy * dy < rad * rad { 0.25 } else { 0.0 };
                    let noise = 0.08 * normal(&mut r);
                    let v = color[ci] + grating + shape + noise;
                    images.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
    }
    Ok(Dataset { images, labels: labs, channels: c, height: h, width: w, num_classes: classes })
}

/// Write a textured synthetic set to `dir` in the CIFAR-10 binary layout
/// (`data_batch_1.bin` ... and `test_batch.bin`), so the standard reader
/// path can ingest it.
pub fn write_synthetic_cifar(dir: &Path, train: usize, test: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let tr = synthetic_textures(10, train, seed)?;
    let te = synthetic_textures(10, test, seed.wrapping_add(0x9e3779b9))?;
    let dump = |ds: &Dataset, path: &Path| -> Result<()> {
        let mut buf = Vec::with_capacity(ds.len() * CIFAR_RECORD);
        for i in 0..ds.len() {
            buf.push(ds.labels[i]);
            buf.extend_from_slice(&ds.images[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS]);
        }
        fs::write(path, buf)?;
        Ok(())
    };
    // split across multiple batch files like the real distribution
    let per_file = 10000usize;
    let mut start = 0usize;
    let mut file_no = 1;
    while start < tr.len() {
        let end = (start + per_file).min(tr.len());
        let slice = Dataset {
            images: tr.images[start * CIFAR_PIXELS..end * CIFAR_PIXELS].to_vec(),
            labels: tr.labels[start..end].to_vec(),
            ..tr.clone()
        };
        dump(&slice, &dir.join(format!("data_batch_{file_no}.bin")))?;
        start = end;
        file_no += 1;
        if file_no > 5 {
            break;
        }
    }
    dump(&te, &dir.join("test_batch.bin"))?;
    Ok(())
}

fn load_image_folder(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(Error::Data("image folder needs at least 2 class subdirectories".into()));
    }
    let mut images = Vec::new();
    let mut labs = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (class, cdir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(cdir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            let img = image::open(&f)
                .map_err(|e| Error::Data(format!("{}: {e}", f.display())))?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            match dims {
                None => dims = Some((h, w)),
                Some(d) if d != (h, w) => {
                    return Err(Error::Data(format!(
                        "{}: image size {h}x{w} differs from first image {}x{}",
                        f.display(),
                        d.0,
                        d.1
                    )))
                }
                _ => {}
            }
            // HWC u8 -> CHW u8
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        images.push(img.get_pixel(x as u32, y as u32).0[c]);
                    }
                }
            }
            labs.push(class as u8);
        }
    }
    let (h, w) = dims.ok_or_else(|| Error::Data("image folder is empty".into()))?;
    // deterministic 80/20 split by position within each class ordering
    let n = labs.len();
    let ppi = 3 * h * w;
    let mut train = Dataset { images: Vec::new(), labels: Vec::new(), channels: 3, height: h, width: w, num_classes: class_dirs.len() };
    let mut test = train.clone();
    for i in 0..n {
        let dst = if i % 5 == 4 { &mut test } else { &mut train };
        dst.labels.push(labs[i]);
        dst.images.extend_from_slice(&images[i * ppi..(i + 1) * ppi]);
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_shaped_and_in_range() {
        let desc = DatasetDescriptor::new(DataSource::SyntheticBlobs {
            classes: 2,
            channels: 3,
            height: 32,
            width: 32,
            count: 2000,
            seed: 5,
        });
        let (train, test) = ingest_dataset(&desc).unwrap();
        assert_eq!(train.len(), 1600);
        assert_eq!(test.len(), 400);
        let (x, y) = train.batch::<f32>(&[0, 1, 2]);
        assert_eq!(x.shape(), [3, 3, 32, 32]);
        assert!(y.iter().all(|&l| l < 2));
        assert!(x.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn cifar_round_trip_through_binary_format() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_cifar(dir.path(), 120, 40, 9).unwrap();
        let desc = DatasetDescriptor::new(DataSource::Cifar10Binary { dir: dir.path().into() });
        let (train, test) = ingest_dataset(&desc).unwrap();
        assert_eq!(train.len(), 120);
        assert_eq!(test.len(), 40);
        assert_eq!(train.num_classes, 10);
        // compare against the direct generator
        let direct = synthetic_textures(10, 120, 9).unwrap();
        assert_eq!(train.images, direct.images);
        assert_eq!(train.labels, direct.labels);
    }

    #[test]
    fn truncated_cifar_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("data_batch_1.bin"), vec![0u8; 3073 * 2 + 17]).unwrap();
        let desc = DatasetDescriptor::new(DataSource::Cifar10Binary { dir: dir.path().into() });
        let err = ingest_dataset(&desc).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err:?}");
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![0u8; 3073];
        rec[0] = 11;
        std::fs::write(dir.path().join("data_batch_1.bin"), rec).unwrap();
        let desc = DatasetDescriptor::new(DataSource::Cifar10Binary { dir: dir.path().into() });
        assert!(ingest_dataset(&desc).is_err());
    }

    #[test]
    fn subset_and_downscale() {
        let mut desc = DatasetDescriptor::new(DataSource::SyntheticTextures {
            classes: 10,
            train: 100,
            test: 30,
            seed: 3,
        });
        desc.train_subset = Some(64);
        desc.downscale = 2;
        let (train, _) = ingest_dataset(&desc).unwrap();
        assert_eq!(train.len(), 64);
        assert_eq!((train.height, train.width), (16, 16));
        let (x, _) = train.batch::<f32>(&[0]);
        assert_eq!(x.shape(), [1, 3, 16, 16]);
    }

    #[test]
    fn epoch_order_is_seeded_and_complete() {
        let ds = synthetic_textures(10, 50, 1).unwrap();
        let a = ds.epoch_order(7, 3);
        let b = ds.epoch_order(7, 3);
        let c = ds.epoch_order(7, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
