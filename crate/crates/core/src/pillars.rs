//! Radar pillar encoding: voxelize points into vertical pillars, augment each
//! point to 9 features, encode with a single VFE stage and scatter the pillar
//! vectors into a dense pseudo image.
//!
//! Augmented point layout:
//!
//! | cols | content                                   |
//! |------|-------------------------------------------|
//! | 0..4 | `x, y, z, r`                              |
//! | 4..7 | offset from the pillar's point mean       |
//! | 7..9 | `(x, y)` offset from the pillar's center  |

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::nnprims::Tensor;

pub const AUGMENTED_DIM: usize = 9;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RadarPointCloud {
    pub points: Vec<[f64; 4]>,
}

impl RadarPointCloud {
    pub fn new(points: Vec<[f64; 4]>) -> Result<Self> {
        let bad: Vec<usize> = points
            .iter()
            .enumerate()
            .filter(|(_, p)| p.iter().any(|v| !v.is_finite()))
            .map(|(i, _)| i)
            .collect();
        if !bad.is_empty() {
            return Err(Error::NonFinite { indices: bad });
        }
        Ok(RadarPointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PillarGridConfig {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub pillar_size: (f64, f64),
    /// `(H, W)`: rows along y, columns along x.
    pub grid: (usize, usize),
    pub max_points: usize,
    pub max_pillars: usize,
}

impl PillarGridConfig {
    /// Grid of `grid` pillars spanning the given ranges exactly.
    pub fn spanning(x_range: (f64, f64), y_range: (f64, f64), grid: (usize, usize), max_points: usize, max_pillars: usize) -> Result<Self> {
        let cfg = PillarGridConfig {
            x_range,
            y_range,
            pillar_size: (
                (x_range.1 - x_range.0) / grid.1.max(1) as f64,
                (y_range.1 - y_range.0) / grid.0.max(1) as f64,
            ),
            grid,
            max_points,
            max_pillars,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.grid;
        let (dx, dy) = self.pillar_size;
        if h == 0 || w == 0 || !(dx > 0.0) || !(dy > 0.0) {
            return Err(Error::Config("pillar grid and pillar size must be positive".into()));
        }
        let span_x = self.x_range.1 - self.x_range.0;
        let span_y = self.y_range.1 - self.y_range.0;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
        if !close(w as f64 * dx, span_x) || !close(h as f64 * dy, span_y) {
            return Err(Error::Config(format!(
                "pillar grid {h}×{w} of {dx}×{dy} m does not span x {:?}, y {:?}",
                self.x_range, self.y_range
            )));
        }
        if self.max_points == 0 {
            return Err(Error::Config("max points per pillar must be at least 1".into()));
        }
        if self.max_pillars == 0 {
            return Err(Error::Config("max pillars must be at least 1".into()));
        }
        Ok(())
    }

    /// `(x_index, y_index)` of the pillar holding `(x, y)`, half-open cells.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<[usize; 2]> {
        let fx = (x - self.x_range.0) / self.pillar_size.0;
        let fy = (y - self.y_range.0) / self.pillar_size.1;
        if !(fx >= 0.0 && fy >= 0.0) || x >= self.x_range.1 || y >= self.y_range.1 {
            return None;
        }
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        (ix < self.grid.1 && iy < self.grid.0).then_some([ix, iy])
    }

    pub fn center_of(&self, cell: [usize; 2]) -> [f64; 2] {
        [
            self.x_range.0 + (cell[0] as f64 + 0.5) * self.pillar_size.0,
            self.y_range.0 + (cell[1] as f64 + 0.5) * self.pillar_size.1,
        ]
    }

    pub fn flat_index(&self, cell: [usize; 2]) -> usize {
        cell[1] * self.grid.1 + cell[0]
    }
}

/// `P×T×9` pillar features with their grid coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarTensor {
    pub features: Vec<f64>,
    pub coords: Vec<[usize; 2]>,
    pub point_counts: Vec<usize>,
    pub max_points: usize,
}

impl PillarTensor {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// The `T×9` block of pillar `p`.
    pub fn pillar(&self, p: usize) -> &[f64] {
        let stride = self.max_points * AUGMENTED_DIM;
        &self.features[p * stride..(p + 1) * stride]
    }

    pub fn row(&self, p: usize, t: usize) -> &[f64] {
        &self.pillar(p)[t * AUGMENTED_DIM..(t + 1) * AUGMENTED_DIM]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PillarBuild {
    pub pillars: PillarTensor,
    pub dropped_out_of_range: usize,
    /// Nonempty pillars discarded by the `max_pillars` cap.
    pub truncated_pillars: usize,
}

/// Planar distance between an augmented row's point and its pillar center.
pub fn center_distance(row: &[f64]) -> f64 {
    row[7].hypot(row[8])
}

/// Expands raw `(x, y, z, r)` points of one pillar to the 9-feature layout.
pub fn augment_points(points: &[[f64; 4]], pillar_center: [f64; 2]) -> Result<Vec<[f64; AUGMENTED_DIM]>> {
    if points.is_empty() {
        return Err(Error::Invalid("cannot augment an empty pillar".into()));
    }
    let n = points.len() as f64;
    let mut mean = [0.0; 3];
    for p in points {
        for k in 0..3 {
            mean[k] += p[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(points
        .iter()
        .map(|p| {
            [
                p[0],
                p[1],
                p[2],
                p[3],
                p[0] - mean[0],
                p[1] - mean[1],
                p[2] - mean[2],
                p[0] - pillar_center[0],
                p[1] - pillar_center[1],
            ]
        })
        .collect())
}

/// Voxelizes a radar cloud into at most `max_pillars` pillars of
/// `max_points` rows each.
///
/// Pillars appear in first-occurrence order of the input stream. A pillar
/// with more than `T` points keeps a seeded uniform sample without
/// replacement (survivors keep their input order); the random stream depends
/// only on `seed` and the pillar's grid cell, so the result is independent of
/// processing order. When more than `max_pillars` pillars are nonempty, the
/// most populated ones are kept (ties go to the earlier pillar).
pub fn build_pillars(cloud: &RadarPointCloud, cfg: &PillarGridConfig, seed: u64) -> Result<PillarBuild> {
    cfg.validate()?;
    let mut slot_of: HashMap<usize, usize> = HashMap::new();
    let mut members: Vec<([usize; 2], Vec<usize>)> = Vec::new();
    let mut dropped = 0;
    for (i, p) in cloud.points.iter().enumerate() {
        let Some(cell) = cfg.cell_of(p[0], p[1]) else {
            dropped += 1;
            continue;
        };
        let slot = *slot_of.entry(cfg.flat_index(cell)).or_insert_with(|| {
            members.push((cell, Vec::new()));
            members.len() - 1
        });
        members[slot].1.push(i);
    }

    let truncated = members.len().saturating_sub(cfg.max_pillars);
    if truncated > 0 {
        let mut order: Vec<usize> = (0..members.len()).collect();
        order.sort_by(|&a, &b| members[b].1.len().cmp(&members[a].1.len()).then(a.cmp(&b)));
        let mut keep = vec![false; members.len()];
        for &k in &order[..cfg.max_pillars] {
            keep[k] = true;
        }
        let mut it = keep.into_iter();
        members.retain(|_| it.next().unwrap());
    }

    let t = cfg.max_points;
    let stride = t * AUGMENTED_DIM;
    let blocks: Vec<Result<(Vec<f64>, usize)>> = exec::map_slice(&members, |(cell, idx)| {
        let chosen: Vec<usize> = if idx.len() > t {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(cfg.flat_index(*cell) as u64);
            let mut pick = rand::seq::index::sample(&mut rng, idx.len(), t).into_vec();
            pick.sort_unstable();
            pick.into_iter().map(|k| idx[k]).collect()
        } else {
            idx.clone()
        };
        let raw: Vec<[f64; 4]> = chosen.iter().map(|&i| cloud.points[i]).collect();
        let rows = augment_points(&raw, cfg.center_of(*cell))?;
        let mut block = vec![0.0; stride];
        for (dst, row) in block.chunks_mut(AUGMENTED_DIM).zip(&rows) {
            dst.copy_from_slice(row);
        }
        Ok((block, rows.len()))
    });

    let mut features = Vec::with_capacity(members.len() * stride);
    let mut point_counts = Vec::with_capacity(members.len());
    for b in blocks {
        let (block, count) = b?;
        features.extend_from_slice(&block);
        point_counts.push(count);
    }
    Ok(PillarBuild {
        pillars: PillarTensor {
            features,
            coords: members.iter().map(|(c, _)| *c).collect(),
            point_counts,
            max_points: t,
        },
        dropped_out_of_range: dropped,
        truncated_pillars: truncated,
    })
}

/// Weights of the single affine + ReLU VFE stage, `C×9` plus `C` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct VfeParams {
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl VfeParams {
    pub fn new(weights: Tensor, bias: Vec<f64>) -> Result<Self> {
        if weights.rank() != 2 || weights.shape()[1] != AUGMENTED_DIM {
            return Err(Error::shape("VfeParams", "C×9 weights", format!("{:?}", weights.shape())));
        }
        if bias.len() != weights.shape()[0] {
            return Err(Error::shape("VfeParams", weights.shape()[0], bias.len()));
        }
        Ok(VfeParams { weights, bias })
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }
}

/// Per-point `max(0, W·x + b)` followed by a max over the real points of
/// each pillar (padding rows do not take part). Returns `P×C`.
pub fn vfe_forward(pillars: &PillarTensor, params: &VfeParams) -> Result<Tensor> {
    let c = params.channels();
    if c == 0 {
        return Err(Error::Invalid("VFE needs at least one output channel".into()));
    }
    let p = pillars.len();
    let w = params.weights.data();
    let mut out = vec![0.0; p * c];
    if p == 0 {
        return Ok(Tensor::zeros(&[0, c]));
    }
    exec::for_each_chunk_mut(&mut out, c, |i, dst| {
        dst.fill(f64::NEG_INFINITY);
        for t in 0..pillars.point_counts[i] {
            let row = pillars.row(i, t);
            for (ch, best) in dst.iter_mut().enumerate() {
                let wr = &w[ch * AUGMENTED_DIM..(ch + 1) * AUGMENTED_DIM];
                let z = params.bias[ch] + wr.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                *best = best.max(z.max(0.0));
            }
        }
    });
    Tensor::from_vec(&[p, c], out)
}

/// Dense `C×H×W` radar feature image.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoImage {
    pub data: Tensor,
}

/// Writes each pillar's `C` features at flat cell `y·W + x`.
pub fn scatter_to_pseudo_image(features: &Tensor, coords: &[[usize; 2]], cfg: &PillarGridConfig) -> Result<PseudoImage> {
    if features.rank() != 2 || features.shape()[0] != coords.len() {
        return Err(Error::shape(
            "scatter_to_pseudo_image",
            format!("{}×C features", coords.len()),
            format!("{:?}", features.shape()),
        ));
    }
    let (h, w) = cfg.grid;
    let c = features.shape()[1];
    let mut data = Tensor::zeros(&[c, h, w]);
    let hw = h * w;
    for (p, &[x, y]) in coords.iter().enumerate() {
        if x >= w || y >= h {
            return Err(Error::Invalid(format!("pillar {p} at ({x}, {y}) lies outside the {h}×{w} grid")));
        }
        let flat = y * w + x;
        for ch in 0..c {
            data.data_mut()[ch * hw + flat] = features.data()[p * c + ch];
        }
    }
    Ok(PseudoImage { data })
}

/// Reads the `C`-vectors at `coords` back out of a pseudo image.
pub fn gather_from_pseudo_image(image: &PseudoImage, coords: &[[usize; 2]]) -> Result<Tensor> {
    let [c, h, w] = [image.data.shape()[0], image.data.shape()[1], image.data.shape()[2]];
    let mut out = Vec::with_capacity(coords.len() * c);
    for &[x, y] in coords {
        if x >= w || y >= h {
            return Err(Error::Invalid(format!("({x}, {y}) lies outside the {h}×{w} grid")));
        }
        out.extend((0..c).map(|ch| image.data.data()[ch * h * w + y * w + x]));
    }
    if coords.is_empty() {
        return Ok(Tensor::zeros(&[0, c]));
    }
    Tensor::from_vec(&[coords.len(), c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(t: usize, pmax: usize) -> PillarGridConfig {
        PillarGridConfig::spanning((0.0, 8.0), (0.0, 4.0), (4, 8), t, pmax).unwrap()
    }

    #[test]
    fn augment_singleton() {
        let rows = augment_points(&[[1.0, 2.0, 0.5, 0.7]], [1.2, 2.2]).unwrap();
        let want = [1.0, 2.0, 0.5, 0.7, 0.0, 0.0, 0.0, -0.2, -0.2];
        for (a, b) in rows[0].iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((center_distance(&rows[0]) - 0.2 * 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn augment_symmetric_pair() {
        let rows = augment_points(&[[0.0, 0.0, 0.0, 1.0], [2.0, 2.0, 2.0, 1.0]], [1.0, 1.0]).unwrap();
        assert_eq!(&rows[0][4..7], &[-1.0, -1.0, -1.0]);
        assert_eq!(&rows[1][4..7], &[1.0, 1.0, 1.0]);
        assert!(augment_points(&[], [0.0, 0.0]).is_err());
    }

    #[test]
    fn config_must_span_ranges() {
        let mut c = cfg(2, 4);
        c.pillar_size.0 = 0.9;
        assert!(c.validate().is_err());
        let mut c = cfg(2, 4);
        c.max_points = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_cloud_has_no_pillars() {
        let b = build_pillars(&RadarPointCloud::default(), &cfg(3, 4), 1).unwrap();
        assert!(b.pillars.is_empty());
    }

    #[test]
    fn underflow_is_zero_padded() {
        let cloud = RadarPointCloud::new(vec![[0.2, 0.2, 0.0, 1.0], [0.7, 0.4, 1.0, 2.0]]).unwrap();
        let b = build_pillars(&cloud, &cfg(3, 4), 0).unwrap();
        assert_eq!(b.pillars.point_counts, vec![2]);
        assert!(b.pillars.row(0, 2).iter().all(|&v| v == 0.0));
        assert_eq!(b.pillars.coords, vec![[0, 0]]);
    }

    #[test]
    fn first_occurrence_order_and_drops() {
        let cloud = RadarPointCloud::new(vec![
            [5.5, 1.5, 0.0, 1.0],
            [-1.0, 0.0, 0.0, 1.0],
            [0.5, 0.5, 0.0, 1.0],
            [5.2, 1.1, 0.0, 1.0],
            [8.0, 1.0, 0.0, 1.0],
        ])
        .unwrap();
        let b = build_pillars(&cloud, &cfg(4, 8), 0).unwrap();
        assert_eq!(b.pillars.coords, vec![[5, 1], [0, 0]]);
        assert_eq!(b.dropped_out_of_range, 2);
    }

    #[test]
    fn overflow_sampling_is_seeded_subset() {
        let pts: Vec<[f64; 4]> = (0..5).map(|i| [0.1 * i as f64, 0.3, 0.0, i as f64]).collect();
        let cloud = RadarPointCloud::new(pts.clone()).unwrap();
        let a = build_pillars(&cloud, &cfg(2, 4), 42).unwrap();
        let b = build_pillars(&cloud, &cfg(2, 4), 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pillars.point_counts, vec![2]);
        for t in 0..2 {
            let row = a.pillars.row(0, t);
            assert!(pts.iter().any(|p| p[..] == row[..4]));
        }
        assert_ne!(a.pillars.row(0, 0)[3], a.pillars.row(0, 1)[3]);
    }

    #[test]
    fn pillar_cap_keeps_most_populated() {
        let cloud = RadarPointCloud::new(vec![
            [0.5, 0.5, 0.0, 1.0],
            [1.5, 0.5, 0.0, 1.0],
            [1.6, 0.5, 0.0, 1.0],
            [2.5, 0.5, 0.0, 1.0],
            [2.6, 0.5, 0.0, 1.0],
            [3.5, 0.5, 0.0, 1.0],
        ])
        .unwrap();
        let b = build_pillars(&cloud, &cfg(4, 2), 0).unwrap();
        assert_eq!(b.truncated_pillars, 2);
        assert_eq!(b.pillars.coords, vec![[1, 0], [2, 0]]);
    }

    fn eye_vfe() -> VfeParams {
        let w = Tensor::from_fn(&[9, 9], |i| if i % 10 == 0 { 1.0 } else { 0.0 });
        VfeParams::new(w, vec![0.0; 9]).unwrap()
    }

    #[test]
    fn vfe_single_point_passes_through() {
        let cloud = RadarPointCloud::new(vec![[0.2, 0.4, 0.5, 0.7]]).unwrap();
        let b = build_pillars(&cloud, &cfg(3, 4), 0).unwrap();
        let out = vfe_forward(&b.pillars, &eye_vfe()).unwrap();
        let row = b.pillars.row(0, 0);
        for ch in 0..9 {
            assert_eq!(out.get(&[0, ch]), row[ch].max(0.0));
        }
    }

    #[test]
    fn vfe_duplicate_point_is_idempotent() {
        let one = RadarPointCloud::new(vec![[0.2, 0.4, 0.5, 0.7]]).unwrap();
        let two = RadarPointCloud::new(vec![[0.2, 0.4, 0.5, 0.7]; 2]).unwrap();
        let vfe = eye_vfe();
        let a = vfe_forward(&build_pillars(&one, &cfg(3, 4), 0).unwrap().pillars, &vfe).unwrap();
        let b = vfe_forward(&build_pillars(&two, &cfg(3, 4), 0).unwrap().pillars, &vfe).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vfe_masks_padding() {
        // All-negative responses: an unmasked max would pick the zero padding.
        let w = Tensor::zeros(&[2, 9]);
        let vfe = VfeParams::new(w, vec![-1.0, -2.0]).unwrap();
        let cloud = RadarPointCloud::new(vec![[0.2, 0.4, 0.5, 0.7]]).unwrap();
        let b = build_pillars(&cloud, &cfg(3, 4), 0).unwrap();
        let out = vfe_forward(&b.pillars, &vfe).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
        assert!(VfeParams::new(Tensor::zeros(&[2, 8]), vec![0.0; 2]).is_err());
    }

    #[test]
    fn scatter_flat_index() {
        let c = PillarGridConfig::spanning((0.0, 128.0), (0.0, 8.0), (8, 128), 1, 4).unwrap();
        assert_eq!(c.flat_index([5, 3]), 389);
        assert_eq!(c.flat_index([0, 0]), 0);
        let feats = Tensor::from_vec(&[1, 2], vec![1.5, -2.0]).unwrap();
        let img = scatter_to_pseudo_image(&feats, &[[5, 3]], &c).unwrap();
        assert_eq!(img.data.data()[389], 1.5);
        assert_eq!(img.data.data()[8 * 128 + 389], -2.0);
        assert_eq!(img.data.data().iter().filter(|&&v| v != 0.0).count(), 2);
        assert!(scatter_to_pseudo_image(&feats, &[[128, 0]], &c).is_err());
    }
}
