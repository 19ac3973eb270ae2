use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{purpose, RngStream};

/// Isotropic unit-variance Gaussian clusters whose means sit `separation` apart.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn generate(&self) -> Result<LabeledDataset> {
        if self.classes == 0 || self.per_class == 0 || self.dim == 0 {
            return Err(Error::config("synthetic classes, per-class count and dim must be >= 1"));
        }
        let mut rng = RngStream::new(self.seed, 0, 0, purpose::SYNTH);
        let radius = self.separation / std::f64::consts::SQRT_2;
        let means: Vec<Vec<f64>> = (0..self.classes)
            .map(|c| {
                if self.classes <= self.dim {
                    // Orthogonal axes: every pair of means is exactly `separation` apart.
                    (0..self.dim).map(|j| if j == c { radius } else { 0.0 }).collect()
                } else {
                    let v: Vec<f64> = (0..self.dim).map(|_| rng.normal()).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.iter().map(|x| radius * x / norm).collect()
                }
            })
            .collect();
        let n = self.classes * self.per_class;
        let mut features = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % self.classes;
            labels.push(c);
            features.extend(means[c].iter().map(|&m| (m + rng.normal()) as f32));
        }
        LabeledDataset::new(features, self.dim, labels, self.classes)
    }
}

/// Gaussian clusters with means six standard deviations apart.
pub fn synth_dataset(classes: usize, per_class: usize, dim: usize, seed: u64) -> Result<LabeledDataset> {
    SynthSpec {
        classes,
        per_class,
        dim,
        separation: 6.0,
        seed,
    }
    .generate()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let d = synth_dataset(2, 10, 5, 1).unwrap();
        assert_eq!(d.len(), 20);
        assert_eq!(d.class_counts(), vec![10, 10]);
        assert_eq!(d, synth_dataset(2, 10, 5, 1).unwrap());
        assert_ne!(d, synth_dataset(2, 10, 5, 2).unwrap());
        assert!(synth_dataset(0, 10, 5, 1).is_err());
    }

    #[test]
    fn many_classes_in_few_dims() {
        let d = synth_dataset(6, 4, 2, 3).unwrap();
        assert_eq!(d.len(), 24);
        assert_eq!(d.classes(), 6);
    }
}
