//! Datasets: synthetic Gaussian blobs, MNIST IDX files, imbalanced
//! subsampling and per-class validation splits.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoding::{one_hot, ClassCounts};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::CountMismatch {
                images: features.rows(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::ClassIndex {
                index: bad,
                num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    pub fn counts(&self) -> ClassCounts {
        // Labels are validated on construction.
        ClassCounts::from_labels(&self.labels, self.num_classes).expect("labels in range")
    }

    pub fn one_hot_labels(&self) -> Matrix {
        one_hot(&self.labels, self.num_classes).expect("labels in range")
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Indices of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    /// Headered CSV: `x0,…,x{d-1},label`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..self.dims()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header).expect("in-memory write");
        for (row, &label) in self.features.iter_rows().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(label.to_string());
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    /// Parses [`Dataset::to_csv`] output. With `num_classes = None` the
    /// class count is the largest label plus one.
    pub fn from_csv(text: &str, num_classes: Option<usize>) -> Result<Dataset> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::invalid(format!("csv header: {e}")))?
            .clone();
        if header.iter().next_back() != Some("label") {
            return Err(Error::invalid("csv header must end with a `label` column"));
        }
        let dims = header.len() - 1;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let line = line + 2;
            let rec = rec.map_err(|e| Error::invalid(format!("csv line {line}: {e}")))?;
            if rec.len() != dims + 1 {
                return Err(Error::invalid(format!(
                    "csv line {line}: {} fields, expected {}",
                    rec.len(),
                    dims + 1
                )));
            }
            for f in rec.iter().take(dims) {
                data.push(
                    f.parse::<f64>()
                        .map_err(|e| Error::invalid(format!("csv line {line}: {f:?}: {e}")))?,
                );
            }
            let l = &rec[dims];
            labels.push(
                l.parse::<usize>()
                    .map_err(|e| Error::invalid(format!("csv line {line}: label {l:?}: {e}")))?,
            );
        }
        let n = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Dataset::new(Matrix::from_vec(labels.len(), dims, data)?, labels, n)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_csv(&text, num_classes).map_err(|e| match e {
            Error::InvalidArgument(message) => Error::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImbalanceMode {
    None,
    /// Even classes keep a tenth of their instances.
    EvenTenth,
    /// Class `p` keeps `1/2^p` of its instances.
    LongTailed,
}

impl ImbalanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ImbalanceMode::None => "none",
            ImbalanceMode::EvenTenth => "even_tenth",
            ImbalanceMode::LongTailed => "long_tailed",
        }
    }
}

impl fmt::Display for ImbalanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ImbalanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            ImbalanceMode::None,
            ImbalanceMode::EvenTenth,
            ImbalanceMode::LongTailed,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| Error::invalid(format!("unknown imbalance mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub mode: ImbalanceMode,
    pub seed: u64,
}

/// Subsampling divisor `f_p` for class `p`.
pub fn imbalance_divisor(class: usize, mode: ImbalanceMode) -> Result<f64> {
    if mode != ImbalanceMode::None && class > 9 {
        return Err(Error::invalid(format!(
            "{mode} imbalance is defined for classes 0..=9, got {class}"
        )));
    }
    Ok(match mode {
        ImbalanceMode::None => 1.0,
        ImbalanceMode::EvenTenth => (9 * ((class + 1) % 2) + 1) as f64,
        ImbalanceMode::LongTailed => (1u64 << class) as f64,
    })
}

/// Per class: shuffle with the spec's seed, keep the first `⌈n_p / f_p⌉`
/// instances, and move the first `val_per_class` of those into the
/// validation set. The training set keeps `⌈n_p / f_p⌉ − val_per_class`.
pub fn apply_imbalance(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if spec.val_per_class == 0 {
        return Err(Error::invalid("val_per_class must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (p, mut idx) in dataset.class_indices().into_iter().enumerate() {
        idx.shuffle(&mut rng);
        let f = imbalance_divisor(p, spec.mode)?;
        let kept = (idx.len() as f64 / f).ceil() as usize;
        if kept < spec.val_per_class + 1 {
            return Err(Error::invalid(format!(
                "class {p}: {kept} instances kept from {} leave no training data after {} validation",
                idx.len(),
                spec.val_per_class
            )));
        }
        val.extend_from_slice(&idx[..spec.val_per_class]);
        train.extend_from_slice(&idx[spec.val_per_class..kept]);
    }
    Ok((dataset.select(&train), dataset.select(&val)))
}

/// Carves `test_per_class` instances of every class out of `dataset`,
/// returning `(rest, test)`.
pub fn split_test(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7e57_7e57);
    let mut rest = Vec::new();
    let mut test = Vec::new();
    for (p, mut idx) in dataset.class_indices().into_iter().enumerate() {
        if idx.len() <= spec.test_per_class {
            return Err(Error::invalid(format!(
                "class {p} has {} instances, cannot hold out {}",
                idx.len(),
                spec.test_per_class
            )));
        }
        idx.shuffle(&mut rng);
        test.extend_from_slice(&idx[..spec.test_per_class]);
        rest.extend_from_slice(&idx[spec.test_per_class..]);
    }
    Ok((dataset.select(&rest), dataset.select(&test)))
}

/// `max_p n_p / min_p n_p`.
pub fn imbalance_factor(counts: &ClassCounts) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::invalid("imbalance factor of an empty count vector"));
    }
    if let Some(class) = counts.first_empty() {
        return Err(Error::EmptyClass { class });
    }
    let max = *counts.as_slice().iter().max().unwrap() as f64;
    let min = *counts.as_slice().iter().min().unwrap() as f64;
    Ok(max / min)
}

/// Center of class `p` among `n` blob classes.
///
/// With two or more dimensions the centers sit on a circle of radius
/// `separation` in the first two coordinates, at angles `2πp/n`. In one
/// dimension class `p` sits at `p·separation`.
pub fn blob_center(p: usize, n: usize, dims: usize, separation: f64) -> Vec<f64> {
    let mut c = vec![0.0; dims];
    if dims == 1 {
        c[0] = p as f64 * separation;
    } else {
        let angle = 2.0 * std::f64::consts::PI * p as f64 / n as f64;
        c[0] = separation * angle.cos();
        c[1] = separation * angle.sin();
    }
    c
}

/// Isotropic unit-variance Gaussian classes; rows are grouped by class.
pub fn gen_blobs(
    seed: u64,
    per_class_counts: &[usize],
    dims: usize,
    separation: f64,
) -> Result<Dataset> {
    if dims == 0 {
        return Err(Error::invalid("blobs need at least one dimension"));
    }
    if per_class_counts.is_empty() || per_class_counts.contains(&0) {
        return Err(Error::invalid(format!(
            "every blob class needs at least one instance, got {per_class_counts:?}"
        )));
    }
    if !separation.is_finite() {
        return Err(Error::invalid("blob separation must be finite"));
    }
    let n = per_class_counts.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = per_class_counts.iter().sum();
    let mut data = Vec::with_capacity(total * dims);
    let mut labels = Vec::with_capacity(total);
    for (p, &count) in per_class_counts.iter().enumerate() {
        let center = blob_center(p, n, dims, separation);
        for _ in 0..count {
            for c in &center {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(c + z);
            }
            labels.push(p);
        }
    }
    Dataset::new(Matrix::from_vec(total, dims, data)?, labels, n)
}

fn read_be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn idx_header(path: &Path, bytes: &[u8], magic: u32, header_len: usize) -> Result<()> {
    if bytes.len() < header_len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            actual: bytes.len(),
        });
    }
    let found = read_be_u32(bytes, 0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    Ok(())
}

fn check_len(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(())
}

/// Parses an IDX image/label file pair; pixels are scaled to `[0, 1]`.
pub fn parse_idx(
    images_path: &Path,
    images: &[u8],
    labels_path: &Path,
    labels: &[u8],
) -> Result<Dataset> {
    idx_header(images_path, images, IDX_IMAGES_MAGIC, 16)?;
    idx_header(labels_path, labels, IDX_LABELS_MAGIC, 8)?;
    let n_images = read_be_u32(images, 4) as usize;
    let rows = read_be_u32(images, 8) as usize;
    let cols = read_be_u32(images, 12) as usize;
    let n_labels = read_be_u32(labels, 4) as usize;
    let pixels = rows * cols;
    check_len(images_path, images, 16 + n_images * pixels)?;
    check_len(labels_path, labels, 8 + n_labels)?;
    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let data = images[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = labels[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(
        Matrix::from_vec(n_images, pixels, data)?,
        labels,
        num_classes,
    )
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = std::fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let labels = std::fs::read(lp).map_err(|e| Error::io(lp, e))?;
    parse_idx(ip, &images, lp, &labels)
}

/// Loads the official `train-*` and `t10k-*` files from `dir`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_idx(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
        // Two 2x3 images.
        let mut images = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 2, 2, 3] {
            images.extend_from_slice(&v.to_be_bytes());
        }
        images.extend_from_slice(&[0, 51, 102, 153, 204, 255]);
        images.extend_from_slice(&[255, 0, 0, 0, 0, 17]);
        let mut labels = Vec::new();
        for v in [IDX_LABELS_MAGIC, 2] {
            labels.extend_from_slice(&v.to_be_bytes());
        }
        labels.extend_from_slice(&[7, 2]);
        (images, labels)
    }

    fn parse(images: &[u8], labels: &[u8]) -> Result<Dataset> {
        parse_idx(Path::new("img"), images, Path::new("lbl"), labels)
    }

    #[test]
    fn idx_fixture_round_trips_pixels() {
        let (images, labels) = idx_fixture();
        let ds = parse(&images, &labels).unwrap();
        assert_eq!(ds.features.shape(), (2, 6));
        assert_eq!(ds.labels, vec![7, 2]);
        assert_eq!(ds.num_classes, 8);
        assert_eq!(ds.features.row(0), &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        assert_eq!(ds.features.get(1, 0), 1.0);
        assert_eq!(ds.features.get(1, 5), 17.0 / 255.0);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let (images, labels) = idx_fixture();

        let mut bad = labels.clone();
        bad[3] = 0x03;
        assert!(matches!(
            parse(&images, &bad),
            Err(Error::BadMagic { found: 0x803, .. })
        ));

        let cut = &images[..images.len() - 1];
        assert!(matches!(parse(cut, &labels), Err(Error::Truncated { .. })));
        assert!(matches!(
            parse(&images[..10], &labels),
            Err(Error::Truncated { .. })
        ));

        let mut three = Vec::new();
        for v in [IDX_LABELS_MAGIC, 3] {
            three.extend_from_slice(&v.to_be_bytes());
        }
        three.extend_from_slice(&[1, 2, 3]);
        assert!(matches!(
            parse(&images, &three),
            Err(Error::CountMismatch {
                images: 2,
                labels: 3
            })
        ));
    }

    #[test]
    fn divisors() {
        assert_eq!(
            imbalance_divisor(2, ImbalanceMode::EvenTenth).unwrap(),
            10.0
        );
        assert_eq!(imbalance_divisor(3, ImbalanceMode::EvenTenth).unwrap(), 1.0);
        assert_eq!(
            imbalance_divisor(0, ImbalanceMode::EvenTenth).unwrap(),
            10.0
        );
        assert_eq!(
            imbalance_divisor(9, ImbalanceMode::LongTailed).unwrap(),
            512.0
        );
        assert_eq!(
            imbalance_divisor(0, ImbalanceMode::LongTailed).unwrap(),
            1.0
        );
        assert_eq!(imbalance_divisor(42, ImbalanceMode::None).unwrap(), 1.0);
        assert!(imbalance_divisor(10, ImbalanceMode::LongTailed).is_err());
        assert!("uniform".parse::<ImbalanceMode>().is_err());
        assert_eq!(
            "long_tailed".parse::<ImbalanceMode>().unwrap(),
            ImbalanceMode::LongTailed
        );
    }

    /// Dataset with `per_class` copies of each of ten classes, feature = index.
    fn synthetic(per_class: usize) -> Dataset {
        let n = per_class * 10;
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let features = Matrix::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        Dataset::new(features, labels, 10).unwrap()
    }

    #[test]
    fn imbalance_counts_follow_formula() {
        let ds = synthetic(6000);
        let spec = |mode, val| SplitSpec {
            val_per_class: val,
            test_per_class: 0,
            mode,
            seed: 3,
        };
        let (train, val) = apply_imbalance(&ds, &spec(ImbalanceMode::LongTailed, 5)).unwrap();
        assert_eq!(train.counts().0[9], 7);
        assert_eq!(val.counts().0, vec![5; 10]);
        let (train, _) = apply_imbalance(&ds, &spec(ImbalanceMode::EvenTenth, 10)).unwrap();
        assert_eq!(train.counts().0[0], 590);
        assert_eq!(train.counts().0[1], 5990);
        let (train, _) = apply_imbalance(&ds, &spec(ImbalanceMode::None, 5)).unwrap();
        assert_eq!(train.counts().0, vec![5995; 10]);
    }

    #[test]
    fn imbalance_rejects_starved_class() {
        let ds = synthetic(512 * 5);
        let spec = SplitSpec {
            val_per_class: 5,
            test_per_class: 0,
            mode: ImbalanceMode::LongTailed,
            seed: 0,
        };
        // ⌈2560/512⌉ = 5 leaves nothing after five validation instances.
        assert!(apply_imbalance(&ds, &spec).is_err());
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let ds = synthetic(300);
        let spec = SplitSpec {
            val_per_class: 4,
            test_per_class: 0,
            mode: ImbalanceMode::EvenTenth,
            seed: 17,
        };
        let (train, val) = apply_imbalance(&ds, &spec).unwrap();
        let a: HashSet<u64> = train.features.data().iter().map(|v| v.to_bits()).collect();
        let b: HashSet<u64> = val.features.data().iter().map(|v| v.to_bits()).collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), train.len() + val.len());
        assert_eq!(apply_imbalance(&ds, &spec).unwrap(), (train.clone(), val));
        let other = apply_imbalance(&ds, &SplitSpec { seed: 18, ..spec })
            .unwrap()
            .0;
        assert_ne!(other, train);
    }

    #[test]
    fn imbalance_factor_examples() {
        let mut caltech = vec![31; 101];
        caltech[0] = 800;
        let f = imbalance_factor(&ClassCounts(caltech)).unwrap();
        assert!((f - 25.81).abs() <= 0.01);
        assert_eq!(imbalance_factor(&ClassCounts(vec![7; 4])).unwrap(), 1.0);
        assert_eq!(imbalance_factor(&ClassCounts(vec![100, 1])).unwrap(), 100.0);
        assert!(imbalance_factor(&ClassCounts(vec![3, 0])).is_err());
    }

    #[test]
    fn blobs_deterministic_and_shaped() {
        let a = gen_blobs(5, &[10, 10], 3, 2.0).unwrap();
        assert_eq!(a, gen_blobs(5, &[10, 10], 3, 2.0).unwrap());
        assert_ne!(a, gen_blobs(6, &[10, 10], 3, 2.0).unwrap());
        assert_eq!(a.features.shape(), (20, 3));
        assert_eq!(a.counts().0, vec![10, 10]);
        assert!(gen_blobs(0, &[10, 0], 2, 1.0).is_err());
        assert!(gen_blobs(0, &[10], 0, 1.0).is_err());
    }

    #[test]
    fn blob_means_track_centers() {
        let ds = gen_blobs(1, &[4000, 4000, 4000], 2, 4.0).unwrap();
        for (p, idx) in ds.class_indices().into_iter().enumerate() {
            let c = blob_center(p, 3, 2, 4.0);
            for (j, cj) in c.iter().enumerate() {
                let mean =
                    idx.iter().map(|&i| ds.features.get(i, j)).sum::<f64>() / idx.len() as f64;
                // 5σ/√n band
                assert!((mean - cj).abs() < 5.0 / (idx.len() as f64).sqrt());
            }
        }
        let zero = gen_blobs(1, &[10, 10], 2, 0.0).unwrap();
        assert_eq!(blob_center(0, 2, 2, 0.0), blob_center(1, 2, 2, 0.0));
        assert_eq!(zero.len(), 20);
    }

    #[test]
    fn csv_round_trip() {
        let ds = gen_blobs(3, &[3, 2], 2, 1.0).unwrap();
        let text = ds.to_csv();
        assert!(text.starts_with("x0,x1,label\n"));
        assert_eq!(Dataset::from_csv(&text, None).unwrap(), ds);
        assert!(Dataset::from_csv("a,b\n1,2\n", None).is_err());
        assert!(Dataset::from_csv("x0,label\n1.0\n", None).is_err());
    }

    proptest! {
        #[test]
        fn long_tailed_counts_exact(per_class in 3073usize..7000, val in 1usize..=5, seed in any::<u64>()) {
            // ⌈n/512⌉ − val >= 1 holds for every val <= 5 once n > 512·6.
            let ds = synthetic(per_class);
            for mode in [ImbalanceMode::LongTailed, ImbalanceMode::EvenTenth] {
                let spec = SplitSpec { val_per_class: val, test_per_class: 0, mode, seed };
                let (train, v) = apply_imbalance(&ds, &spec).unwrap();
                for p in 0..10 {
                    let f = imbalance_divisor(p, mode).unwrap();
                    let expected = (per_class as f64 / f).ceil() as usize - val;
                    prop_assert_eq!(train.counts().0[p], expected);
                    prop_assert_eq!(v.counts().0[p], val);
                }
            }
        }
    }
}
