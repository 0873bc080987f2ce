//! Training-time augmentation of a sample's neighborhood point set.
//!
//! Points are expressed relative to the sample center. The sub-transforms
//! apply in a fixed order, each drawing from the passed RNG only when its
//! config leaves it active: flips of x and y (each an independent coin at
//! `flip_prob`), rotation around z by a full-circle uniform angle, uniform
//! scaling, occlusion (removal of a random subset), artefact insertion
//! (uniform points in the cube of the coarsest grid), and per-coordinate
//! Gaussian jitter. Occlusion and artefact budgets are fractions of the
//! input point count.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Point;

/// Augmentation parameters. The default configuration matches training:
/// flips at probability 0.5, full rotation around z, scaling in
/// [0.95, 1.05], up to 5% of points removed, up to 5% artefact points
/// inserted, and 1 cm Gaussian noise per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_prob: f64,
    pub rotate: bool,
    pub scale_range: (f64, f64),
    pub max_occlusion: f64,
    pub max_artefacts: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            flip_prob: 0.5,
            rotate: true,
            scale_range: (0.95, 1.05),
            max_occlusion: 0.05,
            max_artefacts: 0.05,
            noise_sigma: 0.01,
        }
    }
}

impl AugmentConfig {
    /// Configuration that leaves every sample untouched.
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.flip_prob)
            && self.scale_range.0 > 0.0
            && self.scale_range.0 <= self.scale_range.1
            && self.scale_range.1.is_finite()
            && (0.0..1.0).contains(&self.max_occlusion)
            && (0.0..1.0).contains(&self.max_artefacts)
            && self.noise_sigma >= 0.0
            && self.noise_sigma.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation config: {self:?}")))
        }
    }
}

/// Applies the augmentation chain to a center-relative point set.
///
/// `artefact_half_extent` bounds the cube in which artefact points are
/// inserted; pass the half extent of the coarsest occupancy grid. A disabled
/// config returns the input unchanged without consuming randomness.
pub fn augment<R: Rng>(
    points: &[Point],
    config: &AugmentConfig,
    artefact_half_extent: f64,
    rng: &mut R,
) -> Vec<Point> {
    if !config.enabled {
        return points.to_vec();
    }

    let input_count = points.len();
    let mut out = points.to_vec();

    if config.flip_prob > 0.0 {
        let flip_x = rng.random_bool(config.flip_prob);
        let flip_y = rng.random_bool(config.flip_prob);
        if flip_x {
            for p in &mut out {
                p[0] = -p[0];
            }
        }
        if flip_y {
            for p in &mut out {
                p[1] = -p[1];
            }
        }
    }

    if config.rotate {
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let (sin, cos) = theta.sin_cos();
        for p in &mut out {
            let (x, y) = (p[0], p[1]);
            p[0] = cos * x - sin * y;
            p[1] = sin * x + cos * y;
        }
    }

    let (lo, hi) = config.scale_range;
    if (lo, hi) != (1.0, 1.0) {
        let s = if lo < hi { rng.random_range(lo..hi) } else { lo };
        for p in &mut out {
            for c in p {
                *c *= s;
            }
        }
    }

    if config.max_occlusion > 0.0 {
        let f = rng.random_range(0.0..config.max_occlusion);
        let remove = (f * input_count as f64).floor() as usize;
        if remove > 0 {
            let doomed: HashSet<usize> = rand::seq::index::sample(rng, out.len(), remove)
                .into_iter()
                .collect();
            let mut kept = Vec::with_capacity(out.len() - remove);
            for (i, p) in out.into_iter().enumerate() {
                if !doomed.contains(&i) {
                    kept.push(p);
                }
            }
            out = kept;
        }
    }

    if config.max_artefacts > 0.0 {
        let g = rng.random_range(0.0..config.max_artefacts);
        let insert = (g * input_count as f64).floor() as usize;
        if insert > 0 {
            debug_assert!(
                artefact_half_extent > 0.0,
                "artefact insertion needs a positive grid extent"
            );
            for _ in 0..insert {
                out.push([
                    rng.random_range(-artefact_half_extent..artefact_half_extent),
                    rng.random_range(-artefact_half_extent..artefact_half_extent),
                    rng.random_range(-artefact_half_extent..artefact_half_extent),
                ]);
            }
        }
    }

    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
        for p in &mut out {
            for c in p {
                *c += normal.sample(rng);
            }
        }
    }

    out
}
