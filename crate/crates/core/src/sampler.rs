//! Class-balanced sampling of training centers.
//!
//! Every epoch draws the same number of sample points from each class:
//! without replacement when the class is large enough, with replacement
//! otherwise. The concatenated draw is then shuffled, so an epoch is a
//! seeded permutation of its per-class parts. All randomness comes from the
//! epoch seed, which is the base seed XORed with the epoch number.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::LabeledCloud;
use crate::error::{Error, Result};
use crate::Label;

/// Location of one candidate sample point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRef {
    pub cloud: usize,
    pub point: usize,
}

/// Per-class listing of every labeled point across the training clouds.
/// Classes that appear in a class table but own no points are kept with an
/// empty list.
#[derive(Debug, Clone)]
pub struct ClassIndex {
    per_class: BTreeMap<Label, Vec<SampleRef>>,
}

impl ClassIndex {
    pub fn classes(&self) -> impl Iterator<Item = (Label, &[SampleRef])> {
        self.per_class.iter().map(|(&c, v)| (c, v.as_slice()))
    }

    pub fn count(&self, class: Label) -> usize {
        self.per_class.get(&class).map_or(0, Vec::len)
    }

    pub fn num_classes(&self) -> usize {
        self.per_class
            .keys()
            .next_back()
            .map_or(0, |&k| k as usize + 1)
    }
}

/// One planned training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanEntry {
    pub cloud: usize,
    pub point: usize,
    pub class: Label,
}

/// The ordered sample list of one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub entries: Vec<PlanEntry>,
    pub seed: u64,
}

/// Seed used for epoch `epoch` of a run started with `base` seed.
pub fn epoch_seed(base: u64, epoch: usize) -> u64 {
    base ^ epoch as u64
}

/// Builds the per-class point listing over a set of labeled clouds.
pub fn build_class_index(clouds: &[LabeledCloud]) -> Result<ClassIndex> {
    let mut per_class: BTreeMap<Label, Vec<SampleRef>> = BTreeMap::new();
    for (cloud_id, cloud) in clouds.iter().enumerate() {
        let labels = cloud.labels().ok_or(Error::UnlabeledCloud)?;
        for &class in cloud.class_table().keys() {
            per_class.entry(class).or_default();
        }
        for (point, &class) in labels.iter().enumerate() {
            per_class.entry(class).or_default().push(SampleRef {
                cloud: cloud_id,
                point,
            });
        }
    }
    if per_class.values().all(Vec::is_empty) {
        return Err(Error::NoLabeledPoints);
    }
    Ok(ClassIndex { per_class })
}

/// Draws the balanced sample plan of one epoch.
///
/// Each non-empty class contributes exactly `n_per_class` entries: distinct
/// points when the class holds at least that many, independent draws with
/// replacement otherwise. Empty classes are skipped with a warning. The
/// concatenation is shuffled with the same seeded stream.
pub fn plan_epoch(index: &ClassIndex, n_per_class: usize, seed: u64) -> Result<EpochPlan> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (&class, members) in &index.per_class {
        if members.is_empty() {
            log::warn!("class {class} has no sample points; skipping it this epoch");
            continue;
        }
        if members.len() >= n_per_class {
            for i in rand::seq::index::sample(&mut rng, members.len(), n_per_class) {
                let m = members[i];
                entries.push(PlanEntry {
                    cloud: m.cloud,
                    point: m.point,
                    class,
                });
            }
        } else {
            for _ in 0..n_per_class {
                let m = members[rng.random_range(0..members.len())];
                entries.push(PlanEntry {
                    cloud: m.cloud,
                    point: m.point,
                    class,
                });
            }
        }
    }
    entries.shuffle(&mut rng);
    Ok(EpochPlan { entries, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashMap, HashSet};

    /// One cloud per class size, classes 0..sizes.len(), all points at
    /// distinct positions.
    fn synthetic_clouds(sizes: &[usize]) -> Vec<LabeledCloud> {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (class, &size) in sizes.iter().enumerate() {
            for i in 0..size {
                points.push([class as f64, i as f64, 0.0]);
                labels.push(class as Label);
            }
        }
        vec![LabeledCloud::with_labels(points, labels).unwrap()]
    }

    #[test]
    fn unlabeled_cloud_is_rejected() {
        let cloud = LabeledCloud::unlabeled(vec![[0.0; 3]]).unwrap();
        assert!(matches!(
            build_class_index(&[cloud]).unwrap_err(),
            Error::UnlabeledCloud
        ));
    }

    #[test]
    fn all_empty_is_rejected() {
        let cloud = LabeledCloud::with_labels(vec![], vec![]).unwrap();
        assert!(matches!(
            build_class_index(&[cloud]).unwrap_err(),
            Error::NoLabeledPoints
        ));
    }

    #[test]
    fn index_counts_points_per_class_across_clouds() {
        let mut clouds = synthetic_clouds(&[3, 5]);
        clouds.extend(synthetic_clouds(&[2]));
        let index = build_class_index(&clouds).unwrap();
        assert_eq!(index.count(0), 5);
        assert_eq!(index.count(1), 5);
        assert_eq!(index.num_classes(), 2);
    }

    #[test]
    fn plan_is_balanced_with_and_without_replacement() {
        let clouds = synthetic_clouds(&[1000, 50, 3]);
        let index = build_class_index(&clouds).unwrap();
        let plan = plan_epoch(&index, 10, 7).unwrap();
        assert_eq!(plan.entries.len(), 30);

        let mut per_class: HashMap<Label, Vec<usize>> = HashMap::new();
        for e in &plan.entries {
            per_class.entry(e.class).or_default().push(e.point);
        }
        for class in 0..3 {
            assert_eq!(per_class[&class].len(), 10, "class {class}");
        }
        // Large classes yield distinct points; the 3-point class must repeat.
        for class in [0, 1] {
            let distinct: HashSet<_> = per_class[&class].iter().collect();
            assert_eq!(distinct.len(), 10);
        }
        let distinct: HashSet<_> = per_class[&2].iter().collect();
        assert!(distinct.len() <= 3);
    }

    #[test]
    fn empty_class_is_skipped() {
        let mut table = std::collections::BTreeMap::new();
        table.insert(0, "a".to_string());
        table.insert(1, "ghost".to_string());
        let cloud = LabeledCloud::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0]],
            Some(vec![0, 0]),
            table,
        )
        .unwrap();
        let index = build_class_index(&[cloud]).unwrap();
        assert_eq!(index.count(1), 0);
        let plan = plan_epoch(&index, 4, 1).unwrap();
        assert_eq!(plan.entries.len(), 4);
        assert!(plan.entries.iter().all(|e| e.class == 0));
    }

    #[test]
    fn plans_are_deterministic_in_the_seed() {
        let clouds = synthetic_clouds(&[100, 40]);
        let index = build_class_index(&clouds).unwrap();
        let a = plan_epoch(&index, 20, 99).unwrap();
        let b = plan_epoch(&index, 20, 99).unwrap();
        let c = plan_epoch(&index, 20, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.entries, c.entries);
    }

    #[test]
    fn plan_order_is_a_shuffle_not_class_blocks() {
        let clouds = synthetic_clouds(&[500, 500]);
        let index = build_class_index(&clouds).unwrap();
        let plan = plan_epoch(&index, 100, 3).unwrap();
        let first_half_classes: HashSet<Label> =
            plan.entries[..100].iter().map(|e| e.class).collect();
        assert_eq!(first_half_classes.len(), 2);
    }

    #[test]
    fn zero_n_per_class_is_rejected() {
        let clouds = synthetic_clouds(&[10]);
        let index = build_class_index(&clouds).unwrap();
        assert!(plan_epoch(&index, 0, 1).is_err());
    }

    #[test]
    fn epoch_seed_is_base_xor_epoch() {
        assert_eq!(epoch_seed(0b1100, 0b1010), 0b0110);
        assert_eq!(epoch_seed(77, 0), 77);
    }

    #[test]
    fn selection_frequency_tracks_binomial_expectation() {
        let clouds = synthetic_clouds(&[40]);
        let index = build_class_index(&clouds).unwrap();
        let epochs = 300;
        let n = 10;
        let mut counts = vec![0usize; 40];
        for epoch in 0..epochs {
            let plan = plan_epoch(&index, n, epoch_seed(5150, epoch)).unwrap();
            for e in &plan.entries {
                counts[e.point] += 1;
            }
        }
        let p = n as f64 / 40.0;
        let mean = epochs as f64 * p;
        let sigma = (epochs as f64 * p * (1.0 - p)).sqrt();
        for (point, &count) in counts.iter().enumerate() {
            let z = (count as f64 - mean) / sigma;
            assert!(z.abs() <= 3.0, "point {point}: count {count}, z {z:.2}");
        }
    }
}
