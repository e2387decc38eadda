//! Seeded index-set masks for IMU patches, video tubelets and graph nodes.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Random,
    Time,
    Freq,
    TimeFreq,
    Tube,
    Node,
}

/// Which whole lines of a per-device patch grid a structured mask removes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuredMode {
    Time,
    Freq,
    TimeFreq,
}

/// Masking style for IMU patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImuMaskStyle {
    Random,
    Time,
    Freq,
    TimeFreq,
}

impl ImuMaskStyle {
    fn structured(self) -> Option<StructuredMode> {
        match self {
            Self::Random => None,
            Self::Time => Some(StructuredMode::Time),
            Self::Freq => Some(StructuredMode::Freq),
            Self::TimeFreq => Some(StructuredMode::TimeFreq),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub total: usize,
    /// Sorted, unique.
    pub masked_indices: Vec<usize>,
    pub ratio_requested: f64,
    pub seed: u64,
    pub strategy: MaskStrategy,
}

impl MaskPlan {
    /// A plan masking nothing.
    pub fn none(total: usize) -> Self {
        Self { total, masked_indices: Vec::new(), ratio_requested: 0.0, seed: 0, strategy: MaskStrategy::Random }
    }

    /// Build from an explicit index set; indices are sorted and deduplicated.
    pub fn from_indices(total: usize, mut masked: Vec<usize>, strategy: MaskStrategy) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if let Some(&bad) = masked.iter().find(|&&i| i >= total) {
            return Err(Error::Index(format!("masked index {bad} out of range for {total} tokens")));
        }
        let ratio_requested = if total == 0 { 0.0 } else { masked.len() as f64 / total as f64 };
        Ok(Self { total, masked_indices: masked, ratio_requested, seed: 0, strategy })
    }

    pub fn num_masked(&self) -> usize {
        self.masked_indices.len()
    }

    pub fn num_visible(&self) -> usize {
        self.total - self.masked_indices.len()
    }

    pub fn achieved_ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.num_masked() as f64 / self.total as f64
        }
    }

    /// Per-index flag, `true` where masked.
    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.total];
        for &i in &self.masked_indices {
            f[i] = true;
        }
        f
    }

    pub fn is_masked(&self, index: usize) -> bool {
        self.masked_indices.binary_search(&index).is_ok()
    }

    /// Visible indices in ascending order.
    pub fn visible_indices(&self) -> Vec<usize> {
        let flags = self.flags();
        (0..self.total).filter(|&i| !flags[i]).collect()
    }

    /// Concatenate plans over consecutive index blocks.
    pub fn concat(plans: &[MaskPlan]) -> MaskPlan {
        let mut offset = 0;
        let mut masked = Vec::new();
        for p in plans {
            masked.extend(p.masked_indices.iter().map(|&i| i + offset));
            offset += p.total;
        }
        let first = plans.first();
        MaskPlan {
            total: offset,
            masked_indices: masked,
            ratio_requested: first.map_or(0.0, |p| p.ratio_requested),
            seed: first.map_or(0, |p| p.seed),
            strategy: first.map_or(MaskStrategy::Random, |p| p.strategy),
        }
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidParam(format!("mask ratio {ratio} outside [0, 1]")));
    }
    Ok(())
}

/// `round(ratio · n)` with ties to even.
pub fn mask_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round_ties_even() as usize).min(n)
}

fn draw(total: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_for(seed, &[]);
    let mut idx = sample(&mut rng, total, count).into_vec();
    idx.sort_unstable();
    idx
}

pub fn random_mask(total: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    Ok(MaskPlan {
        total,
        masked_indices: draw(total, mask_count(ratio, total), seed),
        ratio_requested: ratio,
        seed,
        strategy: MaskStrategy::Random,
    })
}

/// Line counts `(time columns, freq rows)` whose union best approximates
/// `ratio` of a `time_cells × freq_cells` grid.
fn union_counts(time_cells: usize, freq_cells: usize, ratio: f64) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_key = (f64::INFINITY, f64::INFINITY);
    for a in 0..=time_cells {
        for b in 0..=freq_cells {
            let (fa, fb) = (a as f64 / time_cells as f64, b as f64 / freq_cells as f64);
            let covered = 1.0 - (1.0 - fa) * (1.0 - fb);
            let key = ((covered - ratio).abs(), (fa - fb).abs());
            if key.0 < best_key.0 - 1e-12 || ((key.0 - best_key.0).abs() <= 1e-12 && key.1 < best_key.1 - 1e-12) {
                best = (a, b);
                best_key = key;
            }
        }
    }
    best
}

/// Whole time columns and/or frequency rows of one device's patch grid,
/// indexed `time · freq_cells + freq`.
pub fn structured_mask(
    time_cells: usize,
    freq_cells: usize,
    mode: StructuredMode,
    ratio: f64,
    seed: u64,
) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    if time_cells == 0 || freq_cells == 0 {
        return Err(Error::InvalidParam("structured mask needs a non-empty grid".into()));
    }
    let (n_cols, n_rows) = match mode {
        StructuredMode::Time => (mask_count(ratio, time_cells), 0),
        StructuredMode::Freq => (0, mask_count(ratio, freq_cells)),
        StructuredMode::TimeFreq => union_counts(time_cells, freq_cells, ratio),
    };
    let mut rng = rng_for(seed, &[]);
    let cols = sample(&mut rng, time_cells, n_cols).into_vec();
    let rows = sample(&mut rng, freq_cells, n_rows).into_vec();
    let mut grid = vec![false; time_cells * freq_cells];
    for &t in &cols {
        for f in 0..freq_cells {
            grid[t * freq_cells + f] = true;
        }
    }
    for &f in &rows {
        for t in 0..time_cells {
            grid[t * freq_cells + f] = true;
        }
    }
    let strategy = match mode {
        StructuredMode::Time => MaskStrategy::Time,
        StructuredMode::Freq => MaskStrategy::Freq,
        StructuredMode::TimeFreq => MaskStrategy::TimeFreq,
    };
    Ok(MaskPlan {
        total: grid.len(),
        masked_indices: (0..grid.len()).filter(|&i| grid[i]).collect(),
        ratio_requested: ratio,
        seed,
        strategy,
    })
}

/// Same spatial cells masked in every temporal slice; token index is
/// `t · spatial_cells + s`.
pub fn tube_mask(spatial_cells: usize, temporal_cells: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    let cells = draw(spatial_cells, mask_count(ratio, spatial_cells), seed);
    let mut masked = Vec::with_capacity(cells.len() * temporal_cells);
    for t in 0..temporal_cells {
        masked.extend(cells.iter().map(|&s| t * spatial_cells + s));
    }
    Ok(MaskPlan {
        total: spatial_cells * temporal_cells,
        masked_indices: masked,
        ratio_requested: ratio,
        seed,
        strategy: MaskStrategy::Tube,
    })
}

pub fn node_mask(n_nodes: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    let mut plan = random_mask(n_nodes, ratio, seed)?;
    plan.strategy = MaskStrategy::Node;
    Ok(plan)
}

/// IMU patch mask over `devices` consecutive per-device grids. Random style
/// draws over all patches at once; structured styles draw each device
/// independently.
pub fn imu_mask(
    devices: usize,
    time_cells: usize,
    freq_cells: usize,
    style: ImuMaskStyle,
    ratio: f64,
    seed: u64,
) -> Result<MaskPlan> {
    match style.structured() {
        None => random_mask(devices * time_cells * freq_cells, ratio, seed),
        Some(mode) => {
            let plans = (0..devices)
                .map(|d| structured_mask(time_cells, freq_cells, mode, ratio, crate::rng::derive_seed(seed, &[d as u64])))
                .collect::<Result<Vec<_>>>()?;
            let mut plan = MaskPlan::concat(&plans);
            plan.seed = seed;
            Ok(plan)
        }
    }
}

/// Rows of `tokens` left visible by `plan`, with their original indices.
pub fn apply_mask(tokens: &Tensor, plan: &MaskPlan) -> Result<(Tensor, Vec<usize>)> {
    if tokens.rows() != plan.total {
        return Err(Error::Shape(format!("mask plan covers {} tokens, got {}", plan.total, tokens.rows())));
    }
    let keep = plan.visible_indices();
    let mut data = Vec::with_capacity(keep.len() * tokens.cols());
    for &i in &keep {
        data.extend_from_slice(tokens.row(i));
    }
    Ok((Tensor::from_vec(keep.len(), tokens.cols(), data), keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn random_counts() {
        let p = random_mask(320, 0.75, 1).unwrap();
        assert_eq!((p.num_masked(), p.num_visible()), (240, 80));
        assert_eq!(random_mask(320, 0.0, 1).unwrap().num_masked(), 0);
        assert_eq!(random_mask(320, 1.0, 1).unwrap().num_masked(), 320);
        assert!(random_mask(10, 1.5, 1).is_err());
        assert!(random_mask(10, -0.1, 1).is_err());
    }

    #[test]
    fn counts_round_ties_to_even() {
        assert_eq!(mask_count(0.5, 5), 2);
        assert_eq!(mask_count(0.5, 7), 4);
        assert_eq!(mask_count(0.25, 2), 0);
    }

    #[test]
    fn random_mask_is_uniform() {
        let mut hits = vec![0u32; 320];
        let draws = 10_000;
        for seed in 0..draws {
            for i in random_mask(320, 0.75, seed).unwrap().masked_indices {
                hits[i] += 1;
            }
        }
        for (i, &h) in hits.iter().enumerate() {
            let freq = h as f64 / draws as f64;
            assert!((freq - 0.75).abs() < 0.02, "index {i}: {freq}");
        }
    }

    #[test]
    fn seeds_give_distinct_plans() {
        let random: HashSet<Vec<usize>> = (0..100).map(|s| random_mask(320, 0.75, s).unwrap().masked_indices).collect();
        assert_eq!(random.len(), 100);
        let tube: HashSet<Vec<usize>> = (0..100).map(|s| tube_mask(196, 8, 0.9, s).unwrap().masked_indices).collect();
        assert_eq!(tube.len(), 100);
        assert_eq!(random_mask(320, 0.75, 5).unwrap(), random_mask(320, 0.75, 5).unwrap());
    }

    #[test]
    fn structured_counts() {
        let t = structured_mask(10, 8, StructuredMode::Time, 0.5, 3).unwrap();
        assert_eq!(t.num_masked(), 40);
        let cols: HashSet<usize> = t.masked_indices.iter().map(|i| i / 8).collect();
        assert_eq!(cols.len(), 5);
        let f = structured_mask(10, 8, StructuredMode::Freq, 0.5, 3).unwrap();
        assert_eq!(f.num_masked(), 40);
        let rows: HashSet<usize> = f.masked_indices.iter().map(|i| i % 8).collect();
        assert_eq!(rows.len(), 4);
        for mode in [StructuredMode::Time, StructuredMode::Freq, StructuredMode::TimeFreq] {
            assert_eq!(structured_mask(10, 8, mode, 0.0, 3).unwrap().num_masked(), 0);
        }
    }

    #[test]
    fn time_freq_union_is_closest_attainable() {
        let p = structured_mask(10, 8, StructuredMode::TimeFreq, 0.5, 4).unwrap();
        let (a, b) = union_counts(10, 8, 0.5);
        let cols: HashSet<usize> =
            (0..10).filter(|&t| (0..8).all(|f| p.is_masked(t * 8 + f))).collect();
        let rows: HashSet<usize> =
            (0..8).filter(|&f| (0..10).all(|t| p.is_masked(t * 8 + f))).collect();
        assert_eq!((cols.len(), rows.len()), (a, b));
        assert_eq!(p.num_masked(), a * 8 + b * 10 - a * b);
        let best = (0..=10)
            .flat_map(|a| (0..=8).map(move |b| (1.0 - (1.0 - a as f64 / 10.0) * (1.0 - b as f64 / 8.0) - 0.5).abs()))
            .fold(f64::INFINITY, f64::min);
        assert!((p.achieved_ratio() - 0.5).abs() <= best + 1e-12);
    }

    #[test]
    fn tube_counts_and_shape() {
        let p = tube_mask(196, 8, 0.9, 7).unwrap();
        assert_eq!((p.num_masked(), p.num_visible()), (1408, 160));
        let first: Vec<usize> = p.masked_indices.iter().filter(|&&i| i < 196).copied().collect();
        for t in 0..8 {
            let slice: Vec<usize> =
                p.masked_indices.iter().filter(|&&i| i / 196 == t).map(|&i| i % 196).collect();
            assert_eq!(slice, first);
        }
        assert_eq!(tube_mask(196, 8, 0.0, 7).unwrap().num_masked(), 0);
    }

    #[test]
    fn node_counts() {
        assert_eq!(node_mask(4, 0.5, 1).unwrap().num_masked(), 2);
        assert_eq!(node_mask(4, 0.25, 1).unwrap().num_masked(), 1);
        assert_eq!(node_mask(4, 0.0, 1).unwrap().num_masked(), 0);
        assert_eq!(node_mask(4, 0.5, 1).unwrap().strategy, MaskStrategy::Node);
    }

    #[test]
    fn imu_mask_styles() {
        let p = imu_mask(4, 10, 8, ImuMaskStyle::Random, 0.75, 2).unwrap();
        assert_eq!((p.total, p.num_masked()), (320, 240));
        let p = imu_mask(4, 10, 8, ImuMaskStyle::Time, 0.5, 2).unwrap();
        assert_eq!((p.total, p.num_masked()), (320, 160));
        for d in 0..4 {
            assert_eq!(p.masked_indices.iter().filter(|&&i| i / 80 == d).count(), 40);
        }
    }

    #[test]
    fn apply_mask_cases() {
        let tokens = Tensor::from_fn(6, 2, |r, c| (r * 10 + c) as f64);
        let (vis, idx) = apply_mask(&tokens, &MaskPlan::none(6)).unwrap();
        assert_eq!((vis, idx), (tokens.clone(), (0..6).collect()));
        let full = MaskPlan::from_indices(6, (0..6).collect(), MaskStrategy::Random).unwrap();
        assert_eq!(apply_mask(&tokens, &full).unwrap().0.rows(), 0);
        let some = MaskPlan::from_indices(6, vec![4, 1], MaskStrategy::Random).unwrap();
        let (vis, idx) = apply_mask(&tokens, &some).unwrap();
        assert_eq!(idx, vec![0, 2, 3, 5]);
        assert_eq!(vis.row(1), tokens.row(2));
        assert!(apply_mask(&tokens, &MaskPlan::none(5)).is_err());
        assert!(MaskPlan::from_indices(3, vec![3], MaskStrategy::Node).is_err());
    }

    #[test]
    fn plan_json_round_trip() {
        let p = tube_mask(16, 4, 0.5, 9).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<MaskPlan>(&json).unwrap(), p);
        assert!(json.contains("\"tube\""));
    }

    proptest! {
        #[test]
        fn plans_partition_the_index_set(total in 1usize..200, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
            let p = random_mask(total, ratio, seed).unwrap();
            prop_assert_eq!(p.num_masked(), mask_count(ratio, total));
            let vis = p.visible_indices();
            prop_assert_eq!(vis.len() + p.num_masked(), total);
            let mut all: Vec<usize> = vis.into_iter().chain(p.masked_indices.iter().copied()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..total).collect::<Vec<_>>());
        }

        #[test]
        fn tube_property(spatial in 1usize..40, temporal in 1usize..6, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
            let p = tube_mask(spatial, temporal, ratio, seed).unwrap();
            for &i in &p.masked_indices {
                for t in 0..temporal {
                    prop_assert!(p.is_masked(t * spatial + i % spatial));
                }
            }
        }
    }
}
