//! Labeled datasets, file loaders and non-i.i.d. client partitioners.

mod loaders;
mod partition;
mod synth;

pub use loaders::{load_cifar10_bin, load_idx, parse_cifar10, parse_idx};
pub use partition::{local_split, multimodal_preset, partition_multimodal, partition_unimodal, GroupSpec, LocalSplit};
pub use synth::{synth_dataset, SynthSpec};

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Flat feature vectors with class labels. Features are stored in single
/// precision and widened when batched.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f32>,
    dim: usize,
    labels: Vec<usize>,
    classes: usize,
    /// Position of each example in the dataset it was originally loaded as.
    origin: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(features: Vec<f32>, dim: usize, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::Consistency(format!(
                "{} feature values for {} examples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Consistency(format!("label {bad} outside {classes} classes")));
        }
        let origin = (0..labels.len()).collect();
        Ok(Self {
            features,
            dim,
            labels,
            classes,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn origin(&self) -> &[usize] {
        &self.origin
    }

    pub fn features(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows `indices` as a `len × dim` matrix plus their labels.
    pub fn batch(&self, indices: &[usize]) -> (DenseMatrix, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend(self.features(i).iter().map(|&v| f64::from(v)));
        }
        let x = DenseMatrix::new(indices.len(), self.dim, data).expect("sized above");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn to_matrix(&self) -> (DenseMatrix, Vec<usize>) {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// The examples at `indices`, in that order, keeping their origins.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.features(i));
        }
        Self {
            features,
            dim: self.dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            origin: indices.iter().map(|&i| self.origin[i]).collect(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }

    /// Example indices grouped by label, each in ascending order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }

    /// Distinct labels present, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        self.class_counts()
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(c, _)| c)
            .collect()
    }

    /// Keeps at most `n` examples of each class, the first ones in order.
    pub fn take_per_class(&self, n: usize) -> Self {
        let mut seen = vec![0; self.classes];
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let l = self.labels[i];
                seen[l] += 1;
                seen[l] <= n
            })
            .collect();
        self.subset(&keep)
    }

    /// Concatenates datasets of equal dimension and class count.
    pub fn concat(parts: &[&LabeledDataset]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::contract("nothing to concatenate"))?;
        let mut out = Self {
            features: Vec::new(),
            dim: first.dim,
            labels: Vec::new(),
            classes: first.classes,
            origin: Vec::new(),
        };
        for p in parts {
            if p.dim != out.dim || p.classes != out.classes {
                return Err(Error::Consistency("datasets differ in dimension or classes".into()));
            }
            out.features.extend_from_slice(&p.features);
            out.labels.extend_from_slice(&p.labels);
            out.origin.extend_from_slice(&p.origin);
        }
        Ok(out)
    }
}

/// Subpopulation a client belongs to under a multimodal partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupTag {
    Majority,
    Minority,
    None,
}

impl GroupTag {
    pub fn name(self) -> &'static str {
        match self {
            GroupTag::Majority => "majority",
            GroupTag::Minority => "minority",
            GroupTag::None => "none",
        }
    }
}

impl fmt::Display for GroupTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One client's private data.
#[derive(Clone, Debug)]
pub struct ClientData {
    pub id: usize,
    pub group: GroupTag,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// Non-fatal notes raised while building this client, e.g. a stratification fallback.
    pub warnings: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LabeledDataset {
        LabeledDataset::new(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 2, vec![1, 0, 1], 2).unwrap()
    }

    #[test]
    fn invalid_construction() {
        assert!(LabeledDataset::new(vec![0.0; 5], 2, vec![0, 1], 2).is_err());
        assert!(LabeledDataset::new(vec![0.0; 4], 2, vec![0, 2], 2).is_err());
    }

    #[test]
    fn subset_keeps_origin() {
        let d = tiny();
        let s = d.subset(&[2, 0]);
        assert_eq!(s.origin(), &[2, 0]);
        assert_eq!(s.labels(), &[1, 1]);
        assert_eq!(s.features(0), &[4.0, 5.0]);
        let s2 = s.subset(&[1]);
        assert_eq!(s2.origin(), &[0]);
    }

    #[test]
    fn batch_widens() {
        let (x, y) = tiny().batch(&[1]);
        assert_eq!(x.as_slice(), &[2.0, 3.0]);
        assert_eq!(y, vec![0]);
    }

    #[test]
    fn class_helpers() {
        let d = tiny();
        assert_eq!(d.class_counts(), vec![1, 2]);
        assert_eq!(d.indices_by_class(), vec![vec![1], vec![0, 2]]);
        assert_eq!(d.take_per_class(1).labels(), &[1, 0]);
    }
}
