//! Binary occupancy grids extracted around a point at one or several voxel
//! sizes.
//!
//! A grid of resolution `n` (even) and voxel side `delta` covers the
//! half-open cube `[center - (n/2)*delta, center + (n/2)*delta)` on every
//! axis, so the center point itself always lands in voxel
//! `(n/2, n/2, n/2)`. Values are stored flat in C order with x outermost and
//! z innermost.

use std::io::{Read, Write};

use crate::cloud::LabeledCloud;
use crate::error::{Error, Result};
use crate::nn::Scalar;
use crate::spatial::SpatialIndex;
use crate::{Label, Point};

/// Resolution and voxel side of one occupancy grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    n: usize,
    delta: f64,
}

impl GridSpec {
    pub fn new(n: usize, delta: f64) -> Result<Self> {
        if n < 2 || n % 2 != 0 {
            return Err(Error::OddGridResolution(n));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::NonPositiveParam {
                name: "delta",
                value: delta,
            });
        }
        Ok(Self { n, delta })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Half the cube side: `(n/2) * delta`.
    pub fn half_extent(&self) -> f64 {
        (self.n / 2) as f64 * self.delta
    }

    /// Full cube side: `n * delta`.
    pub fn extent(&self) -> f64 {
        self.n as f64 * self.delta
    }

    fn voxel_of(&self, relative: &Point) -> [usize; 3] {
        let half = self.n as i64 / 2;
        let mut out = [0usize; 3];
        for d in 0..3 {
            let i = (relative[d] / self.delta).floor() as i64 + half;
            // In-cube points can only fall outside through rounding at the
            // voxel boundary; clamp rather than drop them.
            out[d] = i.clamp(0, self.n as i64 - 1) as usize;
        }
        out
    }
}

/// A dense binary occupancy grid; occupied voxels hold exactly one.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid<T> {
    spec: GridSpec,
    values: Vec<T>,
}

impl<T: Scalar> OccupancyGrid<T> {
    pub fn empty(spec: GridSpec) -> Self {
        Self {
            values: vec![T::zero(); spec.n * spec.n * spec.n],
            spec,
        }
    }

    /// Rasterizes points given relative to the grid center. Points outside
    /// the half-open cube are ignored.
    pub fn from_relative_points(points: &[Point], spec: GridSpec) -> Self {
        let mut grid = Self::empty(spec);
        let half = spec.half_extent();
        for r in points {
            if (0..3).all(|d| -half <= r[d] && r[d] < half) {
                grid.set_relative(r);
            }
        }
        grid
    }

    fn set_relative(&mut self, relative: &Point) {
        let [ix, iy, iz] = self.spec.voxel_of(relative);
        let n = self.spec.n;
        self.values[(ix * n + iy) * n + iz] = T::one();
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> T {
        let n = self.spec.n;
        self.values[(ix * n + iy) * n + iz]
    }

    pub fn is_set(&self, ix: usize, iy: usize, iz: usize) -> bool {
        self.get(ix, iy, iz) > T::zero()
    }

    pub fn count_occupied(&self) -> usize {
        self.values.iter().filter(|&&v| v > T::zero()).count()
    }

    /// Debug dump: `n` as little-endian u32, `delta` as little-endian f64,
    /// then `n^3` bytes of 0/1 in storage order.
    pub fn write_dump(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&(self.spec.n as u32).to_le_bytes())?;
        w.write_all(&self.spec.delta.to_le_bytes())?;
        let bytes: Vec<u8> = self
            .values
            .iter()
            .map(|&v| u8::from(v > T::zero()))
            .collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_dump(mut r: impl Read) -> Result<Self> {
        let mut n_raw = [0u8; 4];
        r.read_exact(&mut n_raw)?;
        let mut delta_raw = [0u8; 8];
        r.read_exact(&mut delta_raw)?;
        let n = u32::from_le_bytes(n_raw) as usize;
        let delta = f64::from_le_bytes(delta_raw);
        let spec =
            GridSpec::new(n, delta).map_err(|e| Error::GridDump(format!("bad header: {e}")))?;
        let mut bytes = vec![0u8; n * n * n];
        r.read_exact(&mut bytes)?;
        let values = bytes
            .iter()
            .map(|&b| match b {
                0 => Ok(T::zero()),
                1 => Ok(T::one()),
                other => Err(Error::GridDump(format!("voxel byte {other} is not 0/1"))),
            })
            .collect::<Result<Vec<T>>>()?;
        Ok(Self { spec, values })
    }
}

/// Occupancy grid around `center`, built from the indexed cloud through a box
/// query of half extent `(n/2) * delta`.
pub fn occupancy_grid<T: Scalar>(
    index: &SpatialIndex,
    cloud: &LabeledCloud,
    center: Point,
    spec: GridSpec,
) -> OccupancyGrid<T> {
    let mut grid = OccupancyGrid::empty(spec);
    for id in index.box_query(center, spec.half_extent()) {
        let q = cloud.points()[id];
        let relative = [q[0] - center[0], q[1] - center[1], q[2] - center[2]];
        grid.set_relative(&relative);
    }
    grid
}

/// One training or inference sample: the same neighborhood voxelized at every
/// scale, plus the center's label when the cloud carries labels.
#[derive(Debug, Clone)]
pub struct MultiScaleSample<T> {
    pub grids: Vec<OccupancyGrid<T>>,
    pub center: Point,
    pub label: Option<Label>,
}

/// Validates a scale set: non-empty, finite, positive, strictly increasing.
pub fn validate_scales(deltas: &[f64]) -> Result<()> {
    let ok = !deltas.is_empty()
        && deltas.iter().all(|d| d.is_finite() && *d > 0.0)
        && deltas.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::BadScales(deltas.to_vec()))
    }
}

/// Extracts the `deltas.len()` occupancy grids of resolution `n` around
/// `center`. When the cloud is labeled, the sample carries the label of the
/// cloud point nearest to the center (the point itself when the center is a
/// cloud point).
pub fn multiscale_grids<T: Scalar>(
    index: &SpatialIndex,
    cloud: &LabeledCloud,
    center: Point,
    n: usize,
    deltas: &[f64],
) -> Result<MultiScaleSample<T>> {
    validate_scales(deltas)?;
    let grids = deltas
        .iter()
        .map(|&delta| Ok(occupancy_grid(index, cloud, center, GridSpec::new(n, delta)?)))
        .collect::<Result<Vec<_>>>()?;
    let label = cloud.labels().map(|ls| ls[index.nearest(center)]);
    Ok(MultiScaleSample {
        grids,
        center,
        label,
    })
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Brute-force rasterizers used as references by tests.

    use super::*;

    /// Per-point rasterization over the whole cloud, no spatial index: the
    /// membership test and index formula applied directly to every point.
    pub fn rasterize(points: &[Point], center: Point, spec: GridSpec) -> Vec<bool> {
        let n = spec.n();
        let half = spec.half_extent();
        let mut out = vec![false; n * n * n];
        for q in points {
            if (0..3).all(|d| center[d] - half <= q[d] && q[d] < center[d] + half) {
                let mut idx = [0usize; 3];
                for d in 0..3 {
                    let i = ((q[d] - center[d]) / spec.delta()).floor() as i64 + n as i64 / 2;
                    idx[d] = i.clamp(0, n as i64 - 1) as usize;
                }
                out[(idx[0] * n + idx[1]) * n + idx[2]] = true;
            }
        }
        out
    }

    /// The O(P * n^3) route: every voxel scans every point for membership in
    /// that voxel's world-space box.
    pub fn rasterize_per_voxel(points: &[Point], center: Point, spec: GridSpec) -> Vec<bool> {
        let n = spec.n();
        let half = n as i64 / 2;
        let mut out = vec![false; n * n * n];
        for ix in 0..n {
            for iy in 0..n {
                for iz in 0..n {
                    let idx = [ix, iy, iz];
                    let occupied = points.iter().any(|q| {
                        (0..3).all(|d| {
                            let lo = center[d] + (idx[d] as i64 - half) as f64 * spec.delta();
                            let hi = center[d] + (idx[d] as i64 + 1 - half) as f64 * spec.delta();
                            lo <= q[d] && q[d] < hi
                        })
                    });
                    if occupied {
                        out[(ix * n + iy) * n + iz] = true;
                    }
                }
            }
        }
        out
    }
}
