//! Datasets: MNIST from IDX files and a synthetic content/style generator.

mod idx;
mod synth;

use std::path::{Path, PathBuf};

pub use idx::{encode_pixels, load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IMAGE_MAGIC, LABEL_MAGIC};
pub use synth::{flip_association, mutual_information, synth_generate, SynthDataset, SyntheticCausalConfig};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// One labeled input.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample<T: Real = f64> {
    pub x: Tensor<T>,
    pub y: usize,
    pub s: Option<usize>,
}

/// Inputs stacked along the leading dimension with labels and optional
/// ground-truth style buckets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T: Real = f64> {
    pub x: Tensor<T>,
    pub y: Vec<usize>,
    pub styles: Option<Vec<usize>>,
    pub classes: usize,
}

impl<T: Real> Dataset<T> {
    pub fn new(x: Tensor<T>, y: Vec<usize>, styles: Option<Vec<usize>>, classes: usize) -> Result<Self> {
        let n = x.shape().first().copied().unwrap_or(0);
        if n != y.len() {
            return Err(Error::CountMismatch { images: n, labels: y.len() });
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        if styles.as_ref().is_some_and(|s| s.len() != n) {
            return Err(Error::shape("dataset", "style labels do not match sample count"));
        }
        Ok(Dataset { x, y, styles, classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Shape of one input.
    pub fn sample_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    pub fn get(&self, i: usize) -> LabeledSample<T> {
        let row = self.x.slice_rows(i, i + 1);
        LabeledSample {
            x: row.reshape(self.sample_shape().to_vec()).expect("row has sample shape"),
            y: self.y[i],
            s: self.styles.as_ref().map(|s| s[i]),
        }
    }

    /// Rows in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Dataset {
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&r| self.y[r]).collect(),
            styles: self.styles.as_ref().map(|s| rows.iter().map(|&r| s[r]).collect()),
            classes: self.classes,
        }
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let end = end.min(self.len());
        Dataset {
            x: self.x.slice_rows(start, end),
            y: self.y[start..end].to_vec(),
            styles: self.styles.as_ref().map(|s| s[start..end].to_vec()),
            classes: self.classes,
        }
    }

    /// `(head, tail)` with the last `tail` rows split off.
    pub fn split_tail(&self, tail: usize) -> Result<(Self, Self)> {
        if tail >= self.len() {
            return Err(Error::Invalid(format!("cannot hold out {tail} of {} samples", self.len())));
        }
        let cut = self.len() - tail;
        Ok((self.slice(0, cut), self.slice(cut, self.len())))
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset {
            x: self.x.cast(),
            y: self.y.clone(),
            styles: self.styles.clone(),
            classes: self.classes,
        }
    }
}

/// Dataset root: `$CADV_DATA_DIR`, else the workspace `data/` directory.
pub fn data_root() -> PathBuf {
    match std::env::var_os("CADV_DATA_DIR") {
        Some(dir) => PathBuf::from(dir),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"),
    }
}

const MNIST_FILES: [(&str, &str); 2] = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
];

/// Paths of the MNIST train (`train = true`) or test IDX pair under `root`
/// or `root/mnist`.
pub fn mnist_paths(root: &Path, train: bool) -> Option<(PathBuf, PathBuf)> {
    let (img, lbl) = MNIST_FILES[usize::from(!train)];
    [root.join("mnist"), root.to_path_buf()]
        .into_iter()
        .map(|dir| (dir.join(img), dir.join(lbl)))
        .find(|(i, l)| i.is_file() && l.is_file())
}

pub fn load_mnist(root: &Path, train: bool) -> Result<Dataset<f64>> {
    let (img, lbl) = mnist_paths(root, train).ok_or_else(|| {
        Error::io(
            root.join("mnist"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST IDX files not found"),
        )
    })?;
    load_idx(&img, &lbl)
}
