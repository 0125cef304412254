use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{register_with_embeddings, ClassEntry, DatasetHandle, DatasetManifest, EmbeddingTable, ItemRef, ItemSource};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

/// Isotropic Gaussian clusters, one per class.
///
/// Class means sit on a randomly rotated scaled simplex: when
/// `n_classes <= dim` every pair of means is exactly `separation` apart,
/// otherwise the means are random directions of the same radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub name: String,
    pub n_classes: usize,
    pub items_per_class: usize,
    pub dim: usize,
    pub separation: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Items of a class are spread round-robin over this many groups.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups_per_class: Option<usize>,
}

fn default_noise() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn new(name: impl Into<String>, n_classes: usize, items_per_class: usize, dim: usize, separation: f64) -> Self {
        Self {
            name: name.into(),
            n_classes,
            items_per_class,
            dim,
            separation,
            noise_std: 1.0,
            groups_per_class: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.items_per_class < 2 || self.dim < 2 {
            return Err(Error::invalid(format!(
                "synthetic dataset needs n_classes >= 2, items_per_class >= 2, dim >= 2 (got {}, {}, {})",
                self.n_classes, self.items_per_class, self.dim
            )));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::invalid(format!("separation must be finite and >= 0, got {}", self.separation)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!("noise_std must be finite and >= 0, got {}", self.noise_std)));
        }
        if self.groups_per_class == Some(0) {
            return Err(Error::invalid("groups_per_class must be positive"));
        }
        Ok(())
    }

    pub fn class_id(&self, c: usize) -> String {
        format!("{}-c{c:03}", self.name)
    }

    pub fn item_id(&self, c: usize, i: usize) -> String {
        format!("{}-c{c:03}/{i:04}", self.name)
    }
}

/// Class means for `spec` under `seed`, row per class.
pub(crate) fn cluster_means(spec: &SyntheticSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = keyed_rng(seed, 0, &format!("synthetic-means/{}", spec.name));
    let radius = spec.separation / std::f64::consts::SQRT_2;
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(spec.n_classes);
    while dirs.len() < spec.n_classes {
        let mut v: Vec<f64> = (0..spec.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        if dirs.len() < spec.dim {
            for d in &dirs {
                let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(d).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        dirs.push(v.into_iter().map(|a| a / norm).collect());
    }
    dirs.into_iter().map(|d| d.into_iter().map(|a| a * radius).collect()).collect()
}

/// Draws a labelled Gaussian-cluster dataset and registers it with its embeddings attached.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<DatasetHandle> {
    spec.validate()?;
    let means = cluster_means(spec, seed);
    let mut table = EmbeddingTable::new(spec.dim)?;
    let mut classes = Vec::with_capacity(spec.n_classes);
    let mut row = vec![0f32; spec.dim];
    for (c, mean) in means.iter().enumerate() {
        let mut rng = keyed_rng(seed, c as u64, &format!("synthetic-items/{}", spec.name));
        let mut items = Vec::with_capacity(spec.items_per_class);
        for i in 0..spec.items_per_class {
            for (r, m) in row.iter_mut().zip(mean) {
                *r = (m + spec.noise_std * rng.sample::<f64, _>(StandardNormal)) as f32;
            }
            let id = spec.item_id(c, i);
            table.insert(id.clone(), &row)?;
            items.push(match spec.groups_per_class {
                Some(g) => ItemRef::grouped(id, format!("{}-c{c:03}/g{}", spec.name, i % g)),
                None => ItemRef::new(id),
            });
        }
        classes.push(ClassEntry { id: spec.class_id(c), display_name: format!("{} class {c}", spec.name), items });
    }
    let manifest = DatasetManifest {
        name: spec.name.clone(),
        notes: format!("synthetic gaussian clusters, separation {}", spec.separation),
        item_source: ItemSource::Synthetic { spec: spec.clone(), seed },
        split: None,
        classes,
        items: vec![],
        hierarchy: vec![],
    };
    register_with_embeddings(manifest, table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn counts_follow_spec() {
        let spec = SyntheticSpec::new("s", 5, 50, 16, 4.0);
        let h = generate_synthetic_dataset(&spec, 1).unwrap();
        assert_eq!(h.classes().len(), 5);
        assert_eq!(h.n_items(), 250);
        assert_eq!(h.embeddings().unwrap().dim(), 16);
        let means = cluster_means(&spec, 1);
        for i in 0..5 {
            for j in 0..i {
                assert!((dist(&means[i], &means[j]) - 4.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_separation_shares_one_mean() {
        let spec = SyntheticSpec::new("z", 4, 3, 8, 0.0);
        let means = cluster_means(&spec, 3);
        assert!(means.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn seeds_change_means_not_shape() {
        let spec = SyntheticSpec::new("s", 3, 4, 6, 2.0);
        let a = generate_synthetic_dataset(&spec, 1).unwrap();
        let b = generate_synthetic_dataset(&spec, 2).unwrap();
        assert_eq!(a.class_ids(), b.class_ids());
        assert_eq!(a.n_items(), b.n_items());
        assert_ne!(cluster_means(&spec, 1), cluster_means(&spec, 2));
        let again = generate_synthetic_dataset(&spec, 1).unwrap();
        assert_eq!(a.embeddings().unwrap().to_bytes(), again.embeddings().unwrap().to_bytes());
    }

    #[test]
    fn more_classes_than_dims_still_works() {
        let spec = SyntheticSpec::new("w", 10, 2, 3, 1.0);
        let h = generate_synthetic_dataset(&spec, 0).unwrap();
        assert_eq!(h.n_items(), 20);
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        assert!(generate_synthetic_dataset(&SyntheticSpec::new("a", 1, 5, 4, 1.0), 0).is_err());
        assert!(generate_synthetic_dataset(&SyntheticSpec::new("a", 3, 1, 4, 1.0), 0).is_err());
        assert!(generate_synthetic_dataset(&SyntheticSpec::new("a", 3, 5, 0, 1.0), 0).is_err());
        assert!(generate_synthetic_dataset(&SyntheticSpec::new("a", 3, 5, 4, -1.0), 0).is_err());
    }

    #[test]
    fn groups_are_assigned_round_robin() {
        let mut spec = SyntheticSpec::new("g", 2, 6, 4, 1.0);
        spec.groups_per_class = Some(3);
        let h = generate_synthetic_dataset(&spec, 0).unwrap();
        let groups: Vec<_> = h.classes()[0].items.iter().map(|i| i.group.clone().unwrap()).collect();
        assert_eq!(groups[0], groups[3]);
        assert_ne!(groups[0], groups[1]);
    }
}
