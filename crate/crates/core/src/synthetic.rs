//! Synthetic labeled scenes for tests and examples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cloud::LabeledCloud;
use crate::{Label, Point};

/// A small scene with three clearly distinct shape classes on a 4×4 m
/// footprint: a ground sheet (class 0), four vertical poles (class 1) and
/// four spheres floating above the ground (class 2). Local neighborhoods
/// of the classes differ strongly — a flat slab, a thin vertical line, a
/// curved shell — so a shape classifier can separate them from geometry
/// alone.
pub fn three_class_scene(seed: u64, points_per_class: usize) -> LabeledCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ground_noise = Normal::new(0.0, 0.01).unwrap();
    let pole_jitter = Normal::new(0.0, 0.02).unwrap();
    let unit = Normal::new(0.0, 1.0).unwrap();

    let mut points: Vec<Point> = Vec::with_capacity(3 * points_per_class);
    let mut labels: Vec<Label> = Vec::with_capacity(3 * points_per_class);

    for _ in 0..points_per_class {
        points.push([
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            ground_noise.sample(&mut rng),
        ]);
        labels.push(0);
    }

    let pole_xy = [(1.5, 1.5), (1.5, -1.5), (-1.5, 1.5), (-1.5, -1.5)];
    for i in 0..points_per_class {
        let (px, py) = pole_xy[i % pole_xy.len()];
        points.push([
            px + pole_jitter.sample(&mut rng),
            py + pole_jitter.sample(&mut rng),
            rng.random_range(0.0..1.5),
        ]);
        labels.push(1);
    }

    let sphere_centers = [(0.0, 1.2), (0.0, -1.2), (1.2, 0.0), (-1.2, 0.0)];
    let radius = 0.25;
    for i in 0..points_per_class {
        let (cx, cy) = sphere_centers[i % sphere_centers.len()];
        // Uniform direction via a normalized Gaussian triple.
        let mut d = [0.0f64; 3];
        loop {
            for v in &mut d {
                *v = unit.sample(&mut rng);
            }
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if norm > 1e-9 {
                for v in &mut d {
                    *v /= norm;
                }
                break;
            }
        }
        points.push([
            cx + radius * d[0],
            cy + radius * d[1],
            0.8 + radius * d[2],
        ]);
        labels.push(2);
    }

    LabeledCloud::with_labels(points, labels).expect("generated points are finite")
}
