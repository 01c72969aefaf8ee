//! MNIST ingestion: IDX parsing, nearest-neighbour upsampling to 32x32, the
//! 4-9 subset, batching and a download helper.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use flate2::read::GzDecoder;
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Task, IMAGE_SIDE};
use crate::tensor::{Element, Tensor};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const MNIST_SIDE: usize = 28;
pub const BATCH_SIZE: usize = 128;

/// `(file name, expected decompressed length)` of the four MNIST files.
pub const MNIST_FILES: [(&str, u64); 4] = [
    ("train-images-idx3-ubyte", 47_040_016),
    ("train-labels-idx1-ubyte", 60_008),
    ("t10k-images-idx3-ubyte", 7_840_016),
    ("t10k-labels-idx1-ubyte", 10_008),
];

const GZ_MIRRORS: [&str; 2] = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
];
const NPM_TARBALL: &str = "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz";

/// Raw IDX contents: `count` images of `rows x cols` bytes and their labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawIdx {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

fn open_idx(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

fn read_u32(r: &mut dyn Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_be_bytes(buf))
}

fn check_magic(found: u32, expected: u32, path: &Path) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("magic {found} where {expected} was expected"),
        })
    }
}

/// Reads an IDX image file and its label file. Paths ending in `.gz` are
/// decompressed on the fly.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<RawIdx> {
    let mut images = open_idx(images_path)?;
    check_magic(read_u32(&mut *images, images_path)?, IMAGE_MAGIC, images_path)?;
    let count = read_u32(&mut *images, images_path)? as usize;
    let rows = read_u32(&mut *images, images_path)? as usize;
    let cols = read_u32(&mut *images, images_path)? as usize;

    let mut labels_r = open_idx(labels_path)?;
    check_magic(read_u32(&mut *labels_r, labels_path)?, LABEL_MAGIC, labels_path)?;
    let label_count = read_u32(&mut *labels_r, labels_path)? as usize;
    if label_count != count {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            detail: format!("{label_count} labels for {count} images"),
        });
    }

    let mut pixels = vec![0u8; count * rows * cols];
    images.read_exact(&mut pixels).map_err(|e| Error::io(images_path, e))?;
    let mut labels = vec![0u8; count];
    labels_r.read_exact(&mut labels).map_err(|e| Error::io(labels_path, e))?;
    Ok(RawIdx {
        count,
        rows,
        cols,
        pixels,
        labels,
    })
}

/// Index map of nearest-neighbour resizing: `floor(dst * src / dst_size)`.
pub fn nearest_index(dst: usize, src_size: usize, dst_size: usize) -> usize {
    dst * src_size / dst_size
}

/// Resizes `n` square images of side `src` to side `dst`.
pub fn upsample_nearest(images: &[u8], src: usize, dst: usize) -> Vec<u8> {
    let n = images.len() / (src * src);
    let map: Vec<usize> = (0..dst).map(|i| nearest_index(i, src, dst)).collect();
    let mut out = Vec::with_capacity(n * dst * dst);
    for img in images.chunks_exact(src * src) {
        for &r in &map {
            let row = &img[r * src..(r + 1) * src];
            out.extend(map.iter().map(|&c| row[c]));
        }
    }
    out
}

/// MNIST 28x28 to 32x32.
pub fn upsample_nearest_32(images: &[u8]) -> Vec<u8> {
    upsample_nearest(images, MNIST_SIDE, IMAGE_SIDE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassMapping {
    Identity,
    /// 4 becomes 0 and 9 becomes 1.
    FourNine,
}

impl ClassMapping {
    pub fn classes(self) -> usize {
        match self {
            ClassMapping::Identity => 10,
            ClassMapping::FourNine => 2,
        }
    }
}

/// Upsampled images kept as raw bytes; pixels are scaled by 1/255 when a
/// batch is materialized.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Arc<Vec<u8>>,
    index: Vec<usize>,
    labels: Vec<usize>,
    split: Split,
    mapping: ClassMapping,
}

impl Dataset {
    /// `images` holds `labels.len()` images of 32x32 bytes.
    pub fn new(images: Vec<u8>, labels: Vec<usize>, split: Split, mapping: ClassMapping) -> Result<Self> {
        let pixels = IMAGE_SIDE * IMAGE_SIDE;
        if labels.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if images.len() != labels.len() * pixels {
            return Err(Error::Data(format!(
                "{} bytes of pixels for {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= mapping.classes()) {
            return Err(Error::Data(format!("label {bad} outside [0, {})", mapping.classes())));
        }
        Ok(Self {
            images: Arc::new(images),
            index: (0..labels.len()).collect(),
            labels,
            split,
            mapping,
        })
    }

    /// Upsamples a raw 28x28 IDX set.
    pub fn from_raw(raw: &RawIdx, split: Split) -> Result<Self> {
        if raw.rows != MNIST_SIDE || raw.cols != MNIST_SIDE {
            return Err(Error::Data(format!(
                "expected {MNIST_SIDE}x{MNIST_SIDE} images, got {}x{}",
                raw.rows, raw.cols
            )));
        }
        let labels = raw.labels.iter().map(|&l| l as usize).collect();
        Self::new(upsample_nearest_32(&raw.pixels), labels, split, ClassMapping::Identity)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn mapping(&self) -> ClassMapping {
        self.mapping
    }

    pub fn classes(&self) -> usize {
        self.mapping.classes()
    }

    /// Raw 32x32 bytes of example `i`.
    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let p = IMAGE_SIDE * IMAGE_SIDE;
        let k = self.index[i];
        &self.images[k * p..(k + 1) * p]
    }

    /// Examples at `indices`, in that order, sharing the pixel buffer.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Data("selection is empty".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Data(format!("index {bad} outside dataset of {}", self.len())));
        }
        Ok(Self {
            images: Arc::clone(&self.images),
            index: indices.iter().map(|&i| self.index[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
            mapping: self.mapping,
        })
    }

    /// First `n` examples (all if fewer).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// `N x 1 x 32 x 32` tensor of the given examples with pixels in [0, 1].
    pub fn tensor<T: Element>(&self, indices: &[usize]) -> Tensor<T> {
        let scale = T::lit(1.0 / 255.0);
        let mut data = Vec::with_capacity(indices.len() * IMAGE_SIDE * IMAGE_SIDE);
        for &i in indices {
            data.extend(self.image_bytes(i).iter().map(|&b| T::lit(b as f64) * scale));
        }
        Tensor::new(data, &[indices.len(), 1, IMAGE_SIDE, IMAGE_SIDE]).expect("consistent shape")
    }
}

/// Keeps only digits 4 and 9, relabelled 0 and 1, in original order.
pub fn make_binary_49(dataset: &Dataset) -> Result<Dataset> {
    if dataset.mapping != ClassMapping::Identity {
        return Err(Error::Data("4-9 subset needs identity-labelled digits".into()));
    }
    let keep: Vec<usize> = (0..dataset.len())
        .filter(|&i| matches!(dataset.labels[i], 4 | 9))
        .collect();
    if keep.is_empty() {
        return Err(Error::Data("no 4 or 9 digits in dataset".into()));
    }
    let mut out = dataset.select(&keep)?;
    for l in &mut out.labels {
        *l = usize::from(*l == 9);
    }
    out.mapping = ClassMapping::FourNine;
    Ok(out)
}

/// One mini-batch.
#[derive(Debug, Clone)]
pub struct Batch<T: Element> {
    pub x: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Iterator over mini-batches of a dataset.
pub struct Batches<'a, T: Element> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch: usize,
    pos: usize,
    _elem: std::marker::PhantomData<T>,
}

impl<T: Element> Iterator for Batches<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(Batch {
            x: self.dataset.tensor(idx),
            labels: idx.iter().map(|&i| self.dataset.labels[i]).collect(),
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch);
        (left, Some(left))
    }
}

impl<T: Element> ExactSizeIterator for Batches<'_, T> {}

/// Mini-batches of `batch` examples; the last may be smaller. With
/// `shuffle` the order is a fresh permutation drawn from `rng`, otherwise
/// ascending.
pub fn batches<'a, T: Element, R: Rng + ?Sized>(
    dataset: &'a Dataset,
    batch: usize,
    shuffle: bool,
    rng: &mut R,
) -> Result<Batches<'a, T>> {
    if batch == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        order.shuffle(rng);
    }
    Ok(Batches {
        dataset,
        order,
        batch,
        pos: 0,
        _elem: std::marker::PhantomData,
    })
}

/// Train and validation sets of one task. The official test split serves
/// as validation.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Dataset,
    pub val: Dataset,
}

/// `$MNIST_DIR` if set, else `data/mnist`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

fn locate(dir: &Path, name: &str) -> Option<PathBuf> {
    [dir.join(name), dir.join(format!("{name}.gz"))]
        .into_iter()
        .find(|p| p.is_file())
}

/// True when all four files are present, raw or gzipped.
pub fn mnist_present(dir: &Path) -> bool {
    MNIST_FILES.iter().all(|(name, _)| locate(dir, name).is_some())
}

/// Full 10-class MNIST at 32x32, fetching the files first if `download`
/// is set and any is missing.
pub fn load_mnist(dir: &Path, download: bool) -> Result<TaskData> {
    if !mnist_present(dir) {
        if download {
            fetch_mnist(dir)?;
        } else {
            return Err(Error::Data(format!(
                "MNIST files not found in {} (enable download or run fetch-data)",
                dir.display()
            )));
        }
    }
    let path = |name: &str| locate(dir, name).expect("checked above");
    let train = load_idx(&path(MNIST_FILES[0].0), &path(MNIST_FILES[1].0))?;
    let val = load_idx(&path(MNIST_FILES[2].0), &path(MNIST_FILES[3].0))?;
    info!("loaded MNIST: {} train, {} val", train.count, val.count);
    Ok(TaskData {
        train: Dataset::from_raw(&train, Split::Train)?,
        val: Dataset::from_raw(&val, Split::Val)?,
    })
}

/// Datasets for `task`. The convolutional task uses the 10-class images.
pub fn task_data(mnist: &TaskData, task: Task) -> Result<TaskData> {
    Ok(match task {
        Task::Binary49 => TaskData {
            train: make_binary_49(&mnist.train)?,
            val: make_binary_49(&mnist.val)?,
        },
        Task::Mnist10 | Task::ConvMnist10 => mnist.clone(),
    })
}

fn http_get(url: &str) -> Result<Vec<u8>> {
    let resp = reqwest::blocking::Client::builder()
        .timeout(std::time::Duration::from_secs(300))
        .build()
        .and_then(|c| c.get(url).send())
        .and_then(|r| r.error_for_status())
        .map_err(|e| Error::Download(format!("{url}: {e}")))?;
    resp.bytes()
        .map(|b| b.to_vec())
        .map_err(|e| Error::Download(format!("{url}: {e}")))
}

fn gunzip(bytes: &[u8], what: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| Error::Download(format!("{what}: {e}")))?;
    Ok(out)
}

fn write_checked(dir: &Path, name: &str, expected: u64, bytes: &[u8]) -> Result<()> {
    if bytes.len() as u64 != expected {
        return Err(Error::Download(format!(
            "{name}: {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

fn fetch_from_mirror(dir: &Path, base: &str) -> Result<()> {
    for (name, len) in MNIST_FILES {
        if locate(dir, name).is_some() {
            continue;
        }
        let url = format!("{base}{name}.gz");
        info!("downloading {url}");
        let raw = gunzip(&http_get(&url)?, name)?;
        write_checked(dir, name, len, &raw)?;
    }
    Ok(())
}

fn fetch_from_tarball(dir: &Path) -> Result<()> {
    info!("downloading {NPM_TARBALL}");
    let tgz = http_get(NPM_TARBALL)?;
    let mut archive = tar::Archive::new(GzDecoder::new(tgz.as_slice()));
    let entries = archive
        .entries()
        .map_err(|e| Error::Download(format!("tarball: {e}")))?;
    for entry in entries {
        let mut entry = entry.map_err(|e| Error::Download(format!("tarball: {e}")))?;
        let path = entry
            .path()
            .map_err(|e| Error::Download(format!("tarball: {e}")))?
            .into_owned();
        let Some(file) = path.file_name().and_then(|f| f.to_str()) else {
            continue;
        };
        if let Some(&(name, len)) = MNIST_FILES.iter().find(|(n, _)| *n == file) {
            if locate(dir, name).is_some() {
                continue;
            }
            let mut bytes = Vec::new();
            entry
                .read_to_end(&mut bytes)
                .map_err(|e| Error::Download(format!("{name}: {e}")))?;
            write_checked(dir, name, len, &bytes)?;
        }
    }
    Ok(())
}

/// Downloads any missing MNIST file into `dir` and checks its length.
/// Tries the gzip mirrors first, then an npm package that bundles the raw
/// files.
pub fn fetch_mnist(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if mnist_present(dir) {
        return Ok(());
    }
    for base in GZ_MIRRORS {
        match fetch_from_mirror(dir, base) {
            Ok(()) => return Ok(()),
            Err(e) => warn!("mirror failed: {e}"),
        }
    }
    fetch_from_tarball(dir)?;
    if mnist_present(dir) {
        Ok(())
    } else {
        Err(Error::Download("could not obtain all four MNIST files".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::stream_rng;

    fn write_idx(dir: &Path, images: &[(u32, u32, u32, u32)], labels: (u32, u32), pixels: &[u8], lab: &[u8]) -> (PathBuf, PathBuf) {
        let ip = dir.join("img");
        let lp = dir.join("lab");
        let mut buf = Vec::new();
        let (m, n, r, c) = images[0];
        for v in [m, n, r, c] {
            buf.extend_from_slice(&v.to_be_bytes());
        }
        buf.extend_from_slice(pixels);
        std::fs::write(&ip, buf).unwrap();
        let mut buf = Vec::new();
        buf.extend_from_slice(&labels.0.to_be_bytes());
        buf.extend_from_slice(&labels.1.to_be_bytes());
        buf.extend_from_slice(lab);
        std::fs::write(&lp, buf).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<u8> = (0..2 * 4).map(|v| v as u8).collect();
        let (ip, lp) = write_idx(dir.path(), &[(2051, 2, 2, 2)], (2049, 2), &px, &[3, 7]);
        let raw = load_idx(&ip, &lp).unwrap();
        assert_eq!((raw.count, raw.rows, raw.cols), (2, 2, 2));
        assert_eq!(raw.pixels, px);
        assert_eq!(raw.labels, vec![3, 7]);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx(dir.path(), &[(2051, 1, 1, 1)], (2051, 1), &[0], &[0]);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
        let (ip, lp) = write_idx(dir.path(), &[(2051, 10, 1, 1)], (2049, 9), &[0; 10], &[0; 9]);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
        let (ip, lp) = write_idx(dir.path(), &[(2051, 10, 2, 2)], (2049, 10), &[0; 12], &[0; 10]);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Io { .. })));
        assert!(matches!(load_idx(&dir.path().join("missing"), &lp), Err(Error::Io { .. })));
    }

    #[test]
    fn upsample_index_map() {
        assert_eq!(nearest_index(0, 28, 32), 0);
        assert_eq!(nearest_index(31, 28, 32), 27);
        let img = vec![9u8; 28 * 28];
        assert!(upsample_nearest_32(&img).iter().all(|&v| v == 9));
        let img: Vec<u8> = (0..28 * 28).map(|i| (i % 28) as u8).collect();
        let up = upsample_nearest_32(&img);
        for c in 0..32 {
            assert_eq!(up[5 * 32 + c] as usize, nearest_index(c, 28, 32));
        }
    }

    fn toy(labels: &[usize]) -> Dataset {
        let px = labels.iter().flat_map(|&l| vec![l as u8 * 20; 1024]).collect();
        Dataset::new(px, labels.to_vec(), Split::Train, ClassMapping::Identity).unwrap()
    }

    #[test]
    fn binary_subset() {
        let d = make_binary_49(&toy(&[4, 9, 7, 4])).unwrap();
        assert_eq!(d.labels(), &[0, 1, 0]);
        assert_eq!(d.image_bytes(2)[0], 80);
        assert_eq!(d.image_bytes(1)[0], 180);
        assert!(matches!(make_binary_49(&toy(&[7, 7])), Err(Error::Data(_))));
    }

    #[test]
    fn batch_sizes_and_order() {
        let d = toy(&vec![1; 300]);
        let mut rng = stream_rng(0, 0);
        let sizes: Vec<usize> = batches::<f32, _>(&d, 128, true, &mut rng)
            .unwrap()
            .map(|b| b.labels.len())
            .collect();
        assert_eq!(sizes, vec![128, 128, 44]);
        let d = toy(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let seq: Vec<usize> = batches::<f32, _>(&d, 3, false, &mut rng)
            .unwrap()
            .flat_map(|b| b.labels)
            .collect();
        assert_eq!(seq, (0..10).collect::<Vec<_>>());
        let perm = |seed| -> Vec<usize> {
            batches::<f32, _>(&d, 4, true, &mut stream_rng(seed, 2))
                .unwrap()
                .flat_map(|b| b.labels)
                .collect()
        };
        assert_eq!(perm(3), perm(3));
        assert!(batches::<f32, _>(&d, 0, false, &mut rng).is_err());
    }

    #[test]
    fn pixels_scaled_to_unit_interval() {
        let px: Vec<u8> = (0..1024).map(|i| (i % 256) as u8).collect();
        let d = Dataset::new(px, vec![0], Split::Val, ClassMapping::Identity).unwrap();
        let x = d.tensor::<f32>(&[0]);
        assert_eq!(x.shape(), &[1, 1, 32, 32]);
        let v = x.data();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[255], 1.0);
        assert!(v.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![], vec![], Split::Train, ClassMapping::Identity).is_err());
        assert!(Dataset::new(vec![0; 1024], vec![2], Split::Train, ClassMapping::FourNine).is_err());
        assert!(Dataset::new(vec![0; 1000], vec![2], Split::Train, ClassMapping::Identity).is_err());
    }
}
