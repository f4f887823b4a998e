//! BEV voxel pooling.
//!
//! Three interchangeable implementations accumulate per-point feature rows
//! into `C×ny×nx` cells:
//!
//! * [`pool_reference`]: one sequential pass in input order.
//! * [`pool_cumsum`]: stable sort by cell id, running prefix sum over the
//!   sorted rows, and per-cell totals recovered by subtracting the prefix at
//!   each segment boundary. Channels are independent and run in parallel.
//! * [`pool_concurrent`]: points split across worker threads that add into a
//!   shared grid with a lossless atomic `f64` add.
//!
//! Cells are half-open; a point exactly on the upper x or y edge is dropped.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{transform_ego, EgoPose, Vec3};
use crate::nnprims::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevGridConfig {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub nx: usize,
    pub ny: usize,
}

impl BevGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::Config("BEV grid needs nx, ny >= 1".into()));
        }
        if !(self.x_range.1 > self.x_range.0) || !(self.y_range.1 > self.y_range.0) {
            return Err(Error::Config(format!(
                "BEV ranges must be increasing, got x {:?}, y {:?}",
                self.x_range, self.y_range
            )));
        }
        Ok(())
    }

    pub fn cell_size(&self) -> (f64, f64) {
        (
            (self.x_range.1 - self.x_range.0) / self.nx as f64,
            (self.y_range.1 - self.y_range.0) / self.ny as f64,
        )
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    /// `(ix, iy)` of the cell containing `(x, y)`.
    pub fn cell_xy(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= self.x_range.0 && x < self.x_range.1 && y >= self.y_range.0 && y < self.y_range.1) {
            return None;
        }
        let (dx, dy) = self.cell_size();
        let ix = (((x - self.x_range.0) / dx).floor() as usize).min(self.nx - 1);
        let iy = (((y - self.y_range.0) / dy).floor() as usize).min(self.ny - 1);
        Some((ix, iy))
    }

    /// Flat cell id `iy·nx + ix`.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        self.cell_xy(x, y).map(|(ix, iy)| iy * self.nx + ix)
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        let (dx, dy) = self.cell_size();
        (
            self.x_range.0 + (ix as f64 + 0.5) * dx,
            self.y_range.0 + (iy as f64 + 0.5) * dy,
        )
    }
}

/// `M` positions (ego meters) with an `M×C` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturedPoints {
    pub positions: Vec<Vec3>,
    pub features: Vec<f64>,
    pub channels: usize,
}

impl FeaturedPoints {
    pub fn new(positions: Vec<Vec3>, features: Vec<f64>, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Invalid("featured points need at least one channel".into()));
        }
        if features.len() != positions.len() * channels {
            return Err(Error::shape(
                "FeaturedPoints",
                positions.len() * channels,
                features.len(),
            ));
        }
        Ok(FeaturedPoints {
            positions,
            features,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    /// Appends `other`, which must have the same channel count.
    pub fn extend(&mut self, other: &FeaturedPoints) -> Result<()> {
        if other.channels != self.channels {
            return Err(Error::shape("FeaturedPoints::extend", self.channels, other.channels));
        }
        self.positions.extend_from_slice(&other.positions);
        self.features.extend_from_slice(&other.features);
        Ok(())
    }
}

/// Pooled `C×ny×nx` features.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub data: Tensor,
    pub config: BevGridConfig,
    pub dropped: usize,
}

impl BevGrid {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn max_abs_diff(&self, other: &BevGrid) -> f64 {
        self.data.max_abs_diff(&other.data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMethod {
    Reference,
    Cumsum,
    Concurrent,
}

impl std::str::FromStr for PoolMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(PoolMethod::Reference),
            "cumsum" => Ok(PoolMethod::Cumsum),
            "concurrent" => Ok(PoolMethod::Concurrent),
            other => Err(Error::Config(format!("unknown pooling implementation `{other}`"))),
        }
    }
}

impl PoolMethod {
    pub const ALL: [PoolMethod; 3] = [PoolMethod::Reference, PoolMethod::Cumsum, PoolMethod::Concurrent];

    pub fn name(self) -> &'static str {
        match self {
            PoolMethod::Reference => "reference",
            PoolMethod::Cumsum => "cumsum",
            PoolMethod::Concurrent => "concurrent",
        }
    }
}

/// Per-cell reduction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    /// Sum divided by the number of points in the cell.
    Mean,
}

fn empty_grid(points: &FeaturedPoints, cfg: &BevGridConfig) -> Result<Tensor> {
    cfg.validate()?;
    Ok(Tensor::zeros(&[points.channels, cfg.ny, cfg.nx]))
}

pub fn pool_reference(points: &FeaturedPoints, cfg: &BevGridConfig) -> Result<BevGrid> {
    let mut data = empty_grid(points, cfg)?;
    let cells = cfg.cells();
    let mut dropped = 0;
    let grid = data.data_mut();
    for (i, p) in points.positions.iter().enumerate() {
        let Some(cell) = cfg.cell_of(p[0], p[1]) else {
            dropped += 1;
            continue;
        };
        for (ch, v) in points.row(i).iter().enumerate() {
            grid[ch * cells + cell] += v;
        }
    }
    Ok(BevGrid {
        data,
        config: cfg.clone(),
        dropped,
    })
}

/// Sort + prefix-sum pooling. Points are ordered by cell with a stable
/// counting sort, then one running prefix over all channels is differenced at
/// segment boundaries. Segments are split into point-balanced chunks that
/// run independently, each restarting its prefix at zero.
pub fn pool_cumsum(points: &FeaturedPoints, cfg: &BevGridConfig) -> Result<BevGrid> {
    let mut data = empty_grid(points, cfg)?;
    let cells = cfg.cells();
    let c = points.channels;

    let cell_of: Vec<Option<usize>> = points.positions.iter().map(|p| cfg.cell_of(p[0], p[1])).collect();
    let mut starts = vec![0usize; cells + 1];
    for cell in cell_of.iter().flatten() {
        starts[cell + 1] += 1;
    }
    for k in 0..cells {
        starts[k + 1] += starts[k];
    }
    let kept = starts[cells];
    let dropped = points.len() - kept;
    let mut next = starts.clone();
    let mut order = vec![0usize; kept];
    for (i, cell) in cell_of.iter().enumerate() {
        if let Some(cell) = *cell {
            order[next[cell]] = i;
            next[cell] += 1;
        }
    }

    // Occupied cells with their exclusive segment ends, in cell order.
    let segments: Vec<(usize, usize)> = (0..cells).filter(|&k| starts[k + 1] > starts[k]).map(|k| (k, starts[k + 1])).collect();
    let target = kept.div_ceil(64).max(4096);
    let mut chunks: Vec<std::ops::Range<usize>> = Vec::new();
    let mut from = 0;
    for (s, &(_, end)) in segments.iter().enumerate() {
        let begin = if from == 0 { 0 } else { segments[from - 1].1 };
        if end - begin >= target || s + 1 == segments.len() {
            chunks.push(from..s + 1);
            from = s + 1;
        }
    }

    let sums: Vec<Vec<f64>> = exec::map_slice(&chunks, |range| {
        let mut out = Vec::with_capacity(range.len() * c);
        let mut prefix = vec![0.0; c];
        let mut boundary = vec![0.0; c];
        let mut k = if range.start == 0 { 0 } else { segments[range.start - 1].1 };
        for &(_, end) in &segments[range.clone()] {
            while k < end {
                for (acc, v) in prefix.iter_mut().zip(points.row(order[k])) {
                    *acc += v;
                }
                k += 1;
            }
            for (p, b) in prefix.iter().zip(boundary.iter_mut()) {
                out.push(p - *b);
                *b = *p;
            }
        }
        out
    });
    let grid = data.data_mut();
    for (range, block) in chunks.iter().zip(&sums) {
        for (&(cell, _), row) in segments[range.clone()].iter().zip(block.chunks(c)) {
            for (ch, v) in row.iter().enumerate() {
                grid[ch * cells + cell] = *v;
            }
        }
    }
    Ok(BevGrid {
        data,
        config: cfg.clone(),
        dropped,
    })
}

fn atomic_add(slot: &AtomicU64, v: f64) {
    let mut cur = slot.load(Ordering::Relaxed);
    loop {
        let next = (f64::from_bits(cur) + v).to_bits();
        match slot.compare_exchange_weak(cur, next, Ordering::Relaxed, Ordering::Relaxed) {
            Ok(_) => return,
            Err(actual) => cur = actual,
        }
    }
}

/// Splits the points into `workers` contiguous ranges; each worker adds its
/// rows into a shared grid of atomics. No update is lost, but additions to a
/// shared cell happen in scheduling order. With one worker the additions run
/// on the calling thread in input order.
pub fn pool_concurrent(points: &FeaturedPoints, cfg: &BevGridConfig, workers: usize) -> Result<BevGrid> {
    if workers == 0 {
        return Err(Error::Invalid("pool_concurrent needs at least one worker".into()));
    }
    let shape = empty_grid(points, cfg)?.shape().to_vec();
    let cells = cfg.cells();
    let grid: Vec<AtomicU64> = (0..shape.iter().product()).map(|_| AtomicU64::new(0f64.to_bits())).collect();

    let work = |range: std::ops::Range<usize>| -> usize {
        let mut dropped = 0;
        for i in range {
            let p = points.positions[i];
            let Some(cell) = cfg.cell_of(p[0], p[1]) else {
                dropped += 1;
                continue;
            };
            for (ch, &v) in points.row(i).iter().enumerate() {
                atomic_add(&grid[ch * cells + cell], v);
            }
        }
        dropped
    };

    let n = points.len();
    let dropped = if workers == 1 {
        work(0..n)
    } else {
        let per = n.div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let range = (w * per).min(n)..((w + 1) * per).min(n);
                    s.spawn(move || work(range))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("pooling worker panicked")).sum()
        })
    };
    let data = Tensor::from_vec(&shape, grid.into_iter().map(|a| f64::from_bits(a.into_inner())).collect())?;
    Ok(BevGrid {
        data,
        config: cfg.clone(),
        dropped,
    })
}

/// Dispatches to one implementation. `workers` only affects `Concurrent`.
pub fn pool(points: &FeaturedPoints, cfg: &BevGridConfig, method: PoolMethod, workers: usize) -> Result<BevGrid> {
    match method {
        PoolMethod::Reference => pool_reference(points, cfg),
        PoolMethod::Cumsum => pool_cumsum(points, cfg),
        PoolMethod::Concurrent => pool_concurrent(points, cfg, workers),
    }
}

/// Points per cell, `ny×nx`.
pub fn cell_counts(points: &FeaturedPoints, cfg: &BevGridConfig) -> Vec<usize> {
    let mut counts = vec![0; cfg.cells()];
    for p in &points.positions {
        if let Some(cell) = cfg.cell_of(p[0], p[1]) {
            counts[cell] += 1;
        }
    }
    counts
}

/// Pools with the requested reduction; `Mean` divides each occupied cell by
/// its point count.
pub fn pool_with(points: &FeaturedPoints, cfg: &BevGridConfig, method: PoolMethod, workers: usize, reduction: Reduction) -> Result<BevGrid> {
    let mut grid = pool(points, cfg, method, workers)?;
    if reduction == Reduction::Mean {
        let counts = cell_counts(points, cfg);
        let cells = cfg.cells();
        exec::for_each_chunk_mut(grid.data.data_mut(), cells, |_, plane| {
            for (v, &n) in plane.iter_mut().zip(&counts) {
                if n > 0 {
                    *v /= n as f64;
                }
            }
        });
    }
    Ok(grid)
}

/// Moves every frame into the `current` ego frame, concatenates, and pools.
pub fn pool_aligned_frames(
    frames: &[(FeaturedPoints, EgoPose)],
    current: &EgoPose,
    cfg: &BevGridConfig,
    method: PoolMethod,
    workers: usize,
) -> Result<BevGrid> {
    let Some((first, _)) = frames.first() else {
        return Err(Error::Invalid("pool_aligned_frames needs at least one frame".into()));
    };
    let mut all = FeaturedPoints {
        positions: Vec::new(),
        features: Vec::new(),
        channels: first.channels,
    };
    for (pts, pose) in frames {
        let moved = FeaturedPoints {
            positions: transform_ego(&pts.positions, pose, current),
            features: pts.features.clone(),
            channels: pts.channels,
        };
        all.extend(&moved)?;
    }
    pool(&all, cfg, method, workers)
}

/// Uniformly scattered points with features in `[-1, 1)`. About 2 % of the
/// points fall outside the grid.
pub fn synthetic_points(m: usize, channels: usize, cfg: &BevGridConfig, seed: u64) -> FeaturedPoints {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wx, wy) = (cfg.x_range.1 - cfg.x_range.0, cfg.y_range.1 - cfg.y_range.0);
    let positions = (0..m)
        .map(|_| {
            [
                cfg.x_range.0 + wx * rng.random_range(-0.01..1.01),
                cfg.y_range.0 + wy * rng.random_range(-0.01..1.01),
                rng.random_range(-3.0..5.0),
            ]
        })
        .collect();
    let features = (0..m * channels).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeaturedPoints {
        positions,
        features,
        channels,
    }
}

/// One timing row of the pooling benchmark.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub implementation: &'static str,
    pub m: usize,
    pub c: usize,
    pub nx: usize,
    pub ny: usize,
    pub workers: usize,
    pub seconds: f64,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "impl,M,C,nx,ny,workers,seconds";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6}",
            self.implementation, self.m, self.c, self.nx, self.ny, self.workers, self.seconds
        )
    }
}

/// Best-of-`reps` wall time for each implementation on one synthetic instance.
pub fn bench_pooling(m: usize, c: usize, cfg: &BevGridConfig, workers: usize, reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let points = synthetic_points(m, c, cfg, seed);
    PoolMethod::ALL
        .iter()
        .map(|&method| {
            let w = if method == PoolMethod::Concurrent { workers } else { 1 };
            let mut best = f64::INFINITY;
            for _ in 0..reps.max(1) {
                let t = Instant::now();
                let g = pool(&points, cfg, method, w)?;
                best = best.min(t.elapsed().as_secs_f64());
                std::hint::black_box(g);
            }
            Ok(BenchRow {
                implementation: method.name(),
                m,
                c,
                nx: cfg.nx,
                ny: cfg.ny,
                workers: w,
                seconds: best,
            })
        })
        .collect()
}
