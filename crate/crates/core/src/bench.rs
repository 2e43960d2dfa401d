//! Warp-cost micro-benchmark.
//!
//! One simulated epoch warps `n_points` points for each of 30 images
//! through `exp(θ_i)` then `exp(−θ_j)` and backpropagates a squared error
//! to both vectors. The sparse path compares warped coordinates; the
//! interpolated path additionally samples a `dim`-channel feature map
//! bilinearly at every warped point, as dense pixel-space methods do.

use std::hint::black_box;
use std::time::Instant;

use nalgebra::{RowVector3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sl3::{ExpTape, Mat3, Sl3Vector, W_EPSILON};

pub const BENCH_IMAGES: usize = 30;
/// Point count of a dense 266×266 grid.
pub const DENSE_POINTS: usize = 70_756;
pub const SPARSE_POINTS: usize = 16;
/// Each timed sample runs enough epochs to last at least this long.
const MIN_SAMPLE_SECONDS: f64 = 2e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchTiming {
    pub n_points: usize,
    pub dim: usize,
    pub interpolate: bool,
    /// Median seconds per epoch.
    pub seconds_per_epoch: f64,
    pub repeats: usize,
}

struct Workload {
    thetas: Vec<Sl3Vector>,
    points: Vec<Vec<[f64; 2]>>,
    /// Per image, `n_points × dim` row-major.
    payload: Vec<Vec<f64>>,
    /// Per image, `side × side × dim` feature grid over `[-1, 1]²`.
    maps: Vec<Vec<f64>>,
    side: usize,
    dim: usize,
}

impl Workload {
    fn new(n_points: usize, dim: usize, interpolate: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let thetas = (0..BENCH_IMAGES)
            .map(|_| {
                Sl3Vector(std::array::from_fn(|k| {
                    let s = if k >= 6 { 0.01 } else { 0.1 };
                    rng.random_range(-s..=s)
                }))
            })
            .collect();
        let points = (0..BENCH_IMAGES)
            .map(|_| {
                (0..n_points)
                    .map(|_| [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)])
                    .collect()
            })
            .collect();
        let payload = (0..BENCH_IMAGES)
            .map(|_| (0..n_points * dim).map(|_| rng.random::<f64>()).collect())
            .collect();
        let side = if interpolate {
            ((n_points as f64).sqrt().ceil() as usize).max(2)
        } else {
            0
        };
        let maps = (0..if interpolate { BENCH_IMAGES } else { 0 })
            .map(|_| (0..side * side * dim).map(|_| rng.random::<f64>()).collect())
            .collect();
        Self {
            thetas,
            points,
            payload,
            maps,
            side,
            dim,
        }
    }

    /// One forward and backward pass over every consecutive image pair;
    /// returns the loss and the summed gradient norm so nothing is elided.
    fn epoch(&self, interpolate: bool) -> f64 {
        let mut acc = 0.0;
        for i in 0..BENCH_IMAGES {
            let j = (i + 1) % BENCH_IMAGES;
            let a_i = self.thetas[i].to_algebra();
            let a_j = self.thetas[j].to_algebra();
            let tape_i = ExpTape::record(&a_i);
            let tape_j = ExpTape::record(&-a_j);
            let (e_i, e_j) = (tape_i.value(), tape_j.value());
            let rel = e_j * e_i;
            let mut d_rel = Mat3::zeros();
            let mut loss = 0.0;
            let mut carried = 0.0;

            for (k, (x, target)) in self.points[i].iter().zip(&self.points[j]).enumerate() {
                let q = rel * Vector3::new(x[0], x[1], 1.0);
                if q[2].abs() <= W_EPSILON {
                    continue;
                }
                let y = [q[0] / q[2], q[1] / q[2]];
                let (mut gy0, mut gy1);
                if interpolate {
                    let feats = &self.payload[i][k * self.dim..(k + 1) * self.dim];
                    let (l, g) = self.sample_loss(j, y, feats);
                    loss += l;
                    (gy0, gy1) = (g[0], g[1]);
                } else {
                    // Sparse keypoints carry their payload without resampling.
                    carried += self.payload[i][k * self.dim];
                    gy0 = 0.0;
                    gy1 = 0.0;
                }
                let r = [y[0] - target[0], y[1] - target[1]];
                loss += r[0] * r[0] + r[1] * r[1];
                gy0 += 2.0 * r[0];
                gy1 += 2.0 * r[1];
                let w = q[2];
                let dq = Vector3::new(gy0 / w, gy1 / w, -(gy0 * y[0] + gy1 * y[1]) / w);
                d_rel += dq * RowVector3::new(x[0], x[1], 1.0);
            }
            let g_i = tape_i.backward(&(e_j.transpose() * d_rel));
            let g_j = tape_j.backward(&(d_rel * e_i.transpose()));
            let d_theta = Sl3Vector::algebra_adjoint(&(g_i - g_j));
            acc += loss + carried + d_theta.norm();
        }
        acc
    }

    /// Squared feature difference at a bilinearly sampled location and its
    /// gradient with respect to that location.
    fn sample_loss(&self, image: usize, y: [f64; 2], feats: &[f64]) -> (f64, [f64; 2]) {
        let s = (self.side - 1) as f64;
        let gx = ((y[0] + 1.0) * 0.5 * s).clamp(0.0, s);
        let gy = ((y[1] + 1.0) * 0.5 * s).clamp(0.0, s);
        let x0 = (gx.floor() as usize).min(self.side - 2);
        let y0 = (gy.floor() as usize).min(self.side - 2);
        let (tx, ty) = (gx - x0 as f64, gy - y0 as f64);
        let map = &self.maps[image];
        let at = |xx: usize, yy: usize| &map[(yy * self.side + xx) * self.dim..][..self.dim];
        let (c00, c10, c01, c11) = (at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1));
        let mut loss = 0.0;
        let (mut dtx, mut dty) = (0.0, 0.0);
        for d in 0..self.dim {
            let top = c00[d] + tx * (c10[d] - c00[d]);
            let bottom = c01[d] + tx * (c11[d] - c01[d]);
            let v = top + ty * (bottom - top);
            let r = v - feats[d];
            loss += r * r;
            let dv = 2.0 * r;
            dtx += dv * ((1.0 - ty) * (c10[d] - c00[d]) + ty * (c11[d] - c01[d]));
            dty += dv * (bottom - top);
        }
        (loss, [dtx * 0.5 * s, dty * 0.5 * s])
    }
}

/// Median per-epoch time over `repeats` samples.
pub fn warp_bench(n_points: usize, dim: usize, repeats: usize, interpolate: bool) -> Result<BenchTiming> {
    if n_points == 0 || dim == 0 || repeats == 0 {
        return Err(Error::InvalidArgument(
            "bench needs at least one point, one channel and one repeat".into(),
        ));
    }
    let work = Workload::new(n_points, dim, interpolate, 0);

    let start = Instant::now();
    black_box(work.epoch(interpolate));
    let once = start.elapsed().as_secs_f64().max(1e-9);
    let inner = ((MIN_SAMPLE_SECONDS / once).ceil() as usize).max(1);

    let mut samples: Vec<f64> = (0..repeats.max(5))
        .map(|_| {
            let start = Instant::now();
            for _ in 0..inner {
                black_box(work.epoch(black_box(interpolate)));
            }
            start.elapsed().as_secs_f64() / inner as f64
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    Ok(BenchTiming {
        n_points,
        dim,
        interpolate,
        seconds_per_epoch: samples[samples.len() / 2],
        repeats: samples.len(),
    })
}
