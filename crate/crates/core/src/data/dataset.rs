use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::preprocess::{gaussian_blur_5x5, minmax_normalize};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Synthetic,
    External,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Synthetic => "synthetic",
            Provenance::External => "external",
        }
    }
}

/// A stack of single-channel images `[N, H, W, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    images: Tensor,
    labels: Option<Vec<usize>>,
    /// `(train_end, validation_end)`; the test split runs to `N`.
    boundaries: (usize, usize),
    provenance: Provenance,
    constant: Vec<bool>,
}

/// Split points for [`partition`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Boundaries {
    Fractions(f64, f64),
    Indices(usize, usize),
}

impl ImageDataset {
    /// Accepts `[N, H, W]` or `[N, H, W, 1]`.
    pub fn new(images: Tensor, labels: Option<Vec<usize>>, provenance: Provenance) -> Result<Self> {
        let images = match *images.shape() {
            [n, h, w] => images.reshape(&[n, h, w, 1])?,
            [_, _, _, 1] => images,
            ref s => {
                return Err(Error::dim("image dataset", "[N, H, W] or [N, H, W, 1]", format!("{s:?}")));
            }
        };
        let n = images.rows();
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::dim("dataset labels", n, l.len()));
            }
        }
        Ok(Self {
            images,
            labels,
            boundaries: (n, n),
            provenance,
            constant: vec![false; n],
        })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self) -> (usize, usize) {
        (self.images.shape()[1], self.images.shape()[2])
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn image(&self, i: usize) -> Tensor {
        let (h, w) = self.side();
        Tensor::new(vec![h, w], self.images.row(i).to_vec()).expect("row has H*W elements")
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn boundaries(&self) -> (usize, usize) {
        self.boundaries
    }

    pub fn constant_flags(&self) -> &[bool] {
        &self.constant
    }

    pub fn with_boundaries(mut self, boundaries: Boundaries) -> Result<Self> {
        self.boundaries = resolve(boundaries, self.len())?;
        Ok(self)
    }

    /// Images as a `[N, 1, H, W]` network batch (same memory layout).
    pub fn as_batch(&self) -> Tensor {
        let (h, w) = self.side();
        self.images
            .clone()
            .reshape(&[self.len(), 1, h, w])
            .expect("same element count")
    }

    pub fn select(&self, indices: &[usize]) -> Result<ImageDataset> {
        let images = self.images.select_rows(indices)?;
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        let constant = indices.iter().map(|&i| self.constant[i]).collect();
        let n = indices.len();
        Ok(Self {
            images,
            labels,
            boundaries: (n, n),
            provenance: self.provenance,
            constant,
        })
    }

    /// Min-max normalizes every image; constant images become zeros and are flagged.
    pub fn normalized(&self) -> Result<ImageDataset> {
        let mut out = self.clone();
        for i in 0..self.len() {
            let n = minmax_normalize(&self.image(i))?;
            out.images.row_mut(i).copy_from_slice(n.image.data());
            out.constant[i] = n.constant;
        }
        Ok(out)
    }

    pub fn blurred(&self) -> Result<ImageDataset> {
        let mut out = self.clone();
        for i in 0..self.len() {
            let b = gaussian_blur_5x5(&self.image(i))?;
            out.images.row_mut(i).copy_from_slice(b.data());
        }
        Ok(out)
    }
}

fn resolve(b: Boundaries, n: usize) -> Result<(usize, usize)> {
    let (a, c) = match b {
        Boundaries::Fractions(f1, f2) => {
            if !(0.0..=1.0).contains(&f1) || !(0.0..=1.0).contains(&f2) {
                return Err(Error::Domain(format!("partition fractions ({f1}, {f2}) outside [0, 1]")));
            }
            ((f1 * n as f64).round() as usize, (f2 * n as f64).round() as usize)
        }
        Boundaries::Indices(a, c) => (a, c),
    };
    if a > c || c > n {
        return Err(Error::Domain(format!(
            "partition boundaries ({a}, {c}) overlap or exceed N = {n}"
        )));
    }
    Ok((a, c))
}

/// Splits into contiguous train / validation / test datasets without
/// reordering.
pub fn partition(dataset: &ImageDataset, boundaries: Boundaries) -> Result<[ImageDataset; 3]> {
    let (a, c) = resolve(boundaries, dataset.len())?;
    let n = dataset.len();
    let range = |lo: usize, hi: usize| -> Result<ImageDataset> {
        let idx: Vec<usize> = (lo..hi).collect();
        if idx.is_empty() {
            // Empty splits keep the image shape but hold no rows.
            return Err(Error::Domain(format!("partition produced an empty split [{lo}, {hi})")));
        }
        dataset.select(&idx)
    };
    Ok([range(0, a)?, range(a, c)?, range(c, n)?])
}

/// Sizes of the three splits without materializing them.
pub fn partition_sizes(n: usize, boundaries: Boundaries) -> Result<(usize, usize, usize)> {
    let (a, c) = resolve(boundaries, n)?;
    Ok((a, c - a, n - c))
}

/// `key=value` description of a dataset file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn for_dataset(dataset: &ImageDataset, array_path: &str, preprocessing: &str) -> Self {
        let (h, w) = dataset.side();
        let (a, c) = dataset.boundaries();
        let mut m = Manifest::default();
        m.set("path", array_path);
        m.set("count", dataset.len());
        m.set("height", h);
        m.set("width", w);
        m.set("train_end", a);
        m.set("validation_end", c);
        m.set("provenance", dataset.provenance().as_str());
        m.set("preprocessing", preprocessing);
        m.set("constant_images", dataset.constant_flags().iter().filter(|&&f| f).count());
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("manifest line {}: expected key=value", no + 1)))?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(n: usize) -> ImageDataset {
        let images = Tensor::from_fn(&[n, 2, 2, 1], |i| (i / 4) as f64);
        ImageDataset::new(images, Some((0..n).collect()), Provenance::Synthetic).unwrap()
    }

    #[test]
    fn fractional_split_sizes() {
        let [a, b, c] = partition(&dataset(100), Boundaries::Fractions(0.8, 0.9)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        let mut order: Vec<usize> = a.labels().unwrap().to_vec();
        order.extend_from_slice(b.labels().unwrap());
        order.extend_from_slice(c.labels().unwrap());
        assert_eq!(order, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn published_stem_split() {
        let sizes = partition_sizes(19769, Boundaries::Indices(14826, 14826 + 1977)).unwrap();
        assert_eq!(sizes, (14826, 1977, 2966));
    }

    #[test]
    fn overlapping_boundaries_rejected() {
        assert!(partition(&dataset(10), Boundaries::Indices(6, 4)).is_err());
        assert!(partition(&dataset(10), Boundaries::Indices(4, 11)).is_err());
        assert!(partition_sizes(10, Boundaries::Fractions(0.9, 0.8)).is_err());
    }

    #[test]
    fn manifest_text_round_trip() {
        let d = dataset(4).with_boundaries(Boundaries::Indices(2, 3)).unwrap();
        let m = Manifest::for_dataset(&d, "images.npy", "minmax");
        let back = Manifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.get("train_end"), Some("2"));
        assert_eq!(back.get("provenance"), Some("synthetic"));
    }
}
