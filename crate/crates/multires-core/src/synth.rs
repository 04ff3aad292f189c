//! Synthetic multi-resolution benchmark data.
//!
//! The generator lays out four disjoint bands of grid cells on a shared
//! 2-D plane, separated by empty gaps so nearest-center correspondence
//! never crosses a band boundary:
//!
//! 1. an unlabeled block — coarse and fine instances, all unlabeled;
//! 2. a coarse-labeled band — each cell's coarse instance is labeled,
//!    its fine constituents are emitted unlabeled;
//! 3. a fine-labeled band — exactly one randomly chosen constituent per
//!    cell is labeled, everything else (including the parent coarse
//!    instance) is unlabeled;
//! 4. a held-out test block — fine instances only, all labeled, kept
//!    outside training and correspondence.
//!
//! Each cell is an r×r patch of fine pixels plus one coarse pixel at the
//! patch center. A cell is positive with probability `positive_cell_prob`;
//! a positive cell contains a contiguous blob of ⌈ρ·r²⌉ positive pixels
//! with ρ drawn from a bimodal law on [rho_min, 1] (mostly sparse blobs,
//! some nearly saturated cells), so the coarse truth is the OR of the fine
//! truths and the positive count per cell varies widely. Fine features are
//! an isotropic Gaussian around a class-dependent mean; coarse features
//! are the mean of the constituent fine features plus extra noisy label
//! channels.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::data::{DataError, Instance, Label, MultiResDataset, ResolutionLayer};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Generator parameters. Defaults produce the benchmark dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Side length of the unlabeled and test blocks, in cells.
    pub grid_side: usize,
    /// Fine pixels per cell side; each cell holds ratio² fine instances.
    pub ratio: usize,
    pub fine_dim: usize,
    /// Coarse feature dimension; must exceed `fine_dim`. The first
    /// `fine_dim` coarse features are the mean of the constituent fine
    /// features, the rest are noisy label channels.
    pub coarse_dim: usize,
    /// Distance between the class means of the fine feature clouds.
    pub class_sep: f64,
    /// Standard deviation of the fine feature noise.
    pub noise: f64,
    /// Standard deviation of the coarse label channels around 0/1.
    pub label_channel_noise: f64,
    /// Number of cells in the coarse-labeled band.
    pub n_coarse_labeled: usize,
    /// Number of cells in the fine-labeled band (one label per cell).
    pub n_fine_labeled: usize,
    /// Lower bound of the positive-pixel fraction in positive cells.
    pub rho_min: f64,
    pub positive_cell_prob: f64,
}

/// Probability that a positive cell draws its positive fraction ρ from the
/// sparse band [rho_min, SPARSE_BLOB_MAX] rather than the dense band
/// [DENSE_BLOB_MIN, 1].
pub const SPARSE_BLOB_PROB: f64 = 0.7;
/// Upper edge of the sparse band of the positive-fraction law.
pub const SPARSE_BLOB_MAX: f64 = 0.3;
/// Lower edge of the dense band of the positive-fraction law.
pub const DENSE_BLOB_MIN: f64 = 0.85;

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            grid_side: 10,
            ratio: 3,
            fine_dim: 12,
            coarse_dim: 13,
            class_sep: 3.0,
            noise: 1.0,
            label_channel_noise: 0.3,
            n_coarse_labeled: 200,
            n_fine_labeled: 20,
            rho_min: 0.1,
            positive_cell_prob: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: &str| Err(SynthError::Invalid(m.to_string()));
        if self.grid_side == 0 {
            return fail("grid_side must be at least 1");
        }
        if self.ratio == 0 {
            return fail("ratio must be at least 1");
        }
        if self.fine_dim == 0 {
            return fail("fine_dim must be at least 1");
        }
        if self.coarse_dim <= self.fine_dim {
            return Err(SynthError::Invalid(format!(
                "coarse_dim ({}) must exceed fine_dim ({})",
                self.coarse_dim, self.fine_dim
            )));
        }
        if !(self.rho_min > 0.0 && self.rho_min <= 1.0) {
            return fail("rho_min must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.positive_cell_prob) {
            return fail("positive_cell_prob must lie in [0, 1]");
        }
        if self.noise < 0.0 || self.label_channel_noise < 0.0 || self.class_sep < 0.0 {
            return fail("class_sep and noise levels must be nonnegative");
        }
        Ok(())
    }
}

/// A generated dataset plus the ground truth behind every emitted
/// training instance (test labels are carried on the instances).
pub struct SyntheticDataset {
    pub dataset: MultiResDataset,
    pub fine_truth: BTreeMap<usize, Label>,
    pub coarse_truth: BTreeMap<usize, Label>,
}

enum CellRole {
    /// Band 1: everything unlabeled.
    UnlabeledBoth,
    /// Band 2: coarse labeled, fine constituents unlabeled.
    CoarseLabeled,
    /// Band 3: one random fine constituent labeled, parent unlabeled.
    FineLabeledOne,
    /// Band 4: fine constituents labeled into the test split, no parent.
    TestFine,
}

struct Builder<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    fine_labeled: Vec<Instance>,
    fine_unlabeled: Vec<Instance>,
    coarse_labeled: Vec<Instance>,
    coarse_unlabeled: Vec<Instance>,
    fine_test: Vec<Instance>,
    fine_truth: BTreeMap<usize, Label>,
    coarse_truth: BTreeMap<usize, Label>,
    next_fine_id: usize,
    next_coarse_id: usize,
}

impl Builder<'_> {
    fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Pixel truths for one cell: a connected blob of ⌈ρ·r²⌉ positives
    /// grown by randomized flood fill, or all-negative.
    fn cell_truths(&mut self) -> (bool, Vec<bool>) {
        let r = self.cfg.ratio;
        let cells = r * r;
        let positive = self.rng.gen_bool(self.cfg.positive_cell_prob);
        let mut blob = vec![false; cells];
        if positive {
            let rho = {
                // Bimodal positive-fraction law on [rho_min, 1]: most
                // positive cells hold only a small blob, the rest are
                // nearly saturated. The two modes keep the fine-per-coarse
                // positive count strongly variable across cells, which is
                // the many-to-one structure the consistency terms must
                // cope with.
                let u: f64 = self.rng.gen_range(0.0..=1.0);
                let sparse_hi = self.cfg.rho_min.max(SPARSE_BLOB_MAX);
                let dense_lo = self.cfg.rho_min.max(DENSE_BLOB_MIN);
                if u < SPARSE_BLOB_PROB {
                    let t = u / SPARSE_BLOB_PROB;
                    self.cfg.rho_min + (sparse_hi - self.cfg.rho_min) * t
                } else {
                    let t = (u - SPARSE_BLOB_PROB) / (1.0 - SPARSE_BLOB_PROB);
                    dense_lo + (1.0 - dense_lo) * t
                }
            };
            let target = ((rho * cells as f64).ceil() as usize).clamp(1, cells);
            let mut queued = vec![false; cells];
            let start = self.rng.gen_range(0..cells);
            let mut frontier = vec![start];
            queued[start] = true;
            let mut grown = 0;
            while grown < target {
                let pick = self.rng.gen_range(0..frontier.len());
                let pixel = frontier.swap_remove(pick);
                blob[pixel] = true;
                grown += 1;
                let (u, v) = (pixel / r, pixel % r);
                let neighbors = [
                    (u.wrapping_sub(1), v),
                    (u + 1, v),
                    (u, v.wrapping_sub(1)),
                    (u, v + 1),
                ];
                for (nu, nv) in neighbors {
                    if nu < r && nv < r && !queued[nu * r + nv] {
                        queued[nu * r + nv] = true;
                        frontier.push(nu * r + nv);
                    }
                }
            }
        }
        (positive, blob)
    }

    fn fine_features(&mut self, positive: bool) -> Vec<f64> {
        let mu = if positive {
            self.cfg.class_sep / (self.cfg.fine_dim as f64).sqrt()
        } else {
            0.0
        };
        (0..self.cfg.fine_dim)
            .map(|_| mu + self.cfg.noise * self.normal())
            .collect()
    }

    /// Emit one cell. `row_base` is the band's first fine row; `(ci, cj)`
    /// is the cell position within the band, in cell units.
    fn emit_cell(&mut self, role: CellRole, row_base: usize, ci: usize, cj: usize) {
        let r = self.cfg.ratio;
        let (cell_positive, blob) = self.cell_truths();

        // fine constituents, row-major within the cell
        let mut feature_sum = vec![0.0; self.cfg.fine_dim];
        let mut members = Vec::with_capacity(r * r);
        for u in 0..r {
            for v in 0..r {
                let pixel_positive = blob[u * r + v];
                let features = self.fine_features(pixel_positive);
                for (s, f) in feature_sum.iter_mut().zip(&features) {
                    *s += f;
                }
                let location = vec![
                    (row_base + ci * r + u) as f64 + 0.5,
                    (cj * r + v) as f64 + 0.5,
                ];
                let id = self.next_fine_id;
                self.next_fine_id += 1;
                members.push((id, location, features, pixel_positive));
            }
        }

        let truth_of = |positive: bool| {
            if positive {
                Label::Positive
            } else {
                Label::Negative
            }
        };

        // parent coarse instance at the cell center (not for test cells)
        if !matches!(role, CellRole::TestFine) {
            let mut features: Vec<f64> = feature_sum
                .iter()
                .map(|s| s / (r * r) as f64)
                .collect();
            let signal = if cell_positive { 1.0 } else { 0.0 };
            for _ in 0..self.cfg.coarse_dim - self.cfg.fine_dim {
                features.push(signal + self.cfg.label_channel_noise * self.normal());
            }
            let location = vec![
                (row_base + ci * r) as f64 + r as f64 / 2.0,
                (cj * r) as f64 + r as f64 / 2.0,
            ];
            let id = self.next_coarse_id;
            self.next_coarse_id += 1;
            self.coarse_truth.insert(id, truth_of(cell_positive));
            if matches!(role, CellRole::CoarseLabeled) {
                self.coarse_labeled.push(Instance::new(
                    id,
                    location,
                    features,
                    truth_of(cell_positive),
                ));
            } else {
                self.coarse_unlabeled
                    .push(Instance::new(id, location, features, Label::Unlabeled));
            }
        }

        let chosen = if matches!(role, CellRole::FineLabeledOne) {
            Some(self.rng.gen_range(0..r * r))
        } else {
            None
        };
        for (k, (id, location, features, pixel_positive)) in members.into_iter().enumerate() {
            match role {
                CellRole::TestFine => {
                    self.fine_test
                        .push(Instance::new(id, location, features, truth_of(pixel_positive)));
                    continue;
                }
                CellRole::FineLabeledOne if chosen == Some(k) => {
                    self.fine_labeled.push(Instance::new(
                        id,
                        location,
                        features,
                        truth_of(pixel_positive),
                    ));
                }
                _ => {
                    self.fine_unlabeled
                        .push(Instance::new(id, location, features, Label::Unlabeled));
                }
            }
            self.fine_truth.insert(id, truth_of(pixel_positive));
        }
    }

    /// Emit a band of `count` cells in rows of `grid_side`, returning the
    /// band's height in fine rows.
    fn emit_band(&mut self, role: &CellRole, row_base: usize, count: usize) -> usize {
        let per_row = self.cfg.grid_side;
        for k in 0..count {
            let (ci, cj) = (k / per_row, k % per_row);
            let role = match role {
                CellRole::UnlabeledBoth => CellRole::UnlabeledBoth,
                CellRole::CoarseLabeled => CellRole::CoarseLabeled,
                CellRole::FineLabeledOne => CellRole::FineLabeledOne,
                CellRole::TestFine => CellRole::TestFine,
            };
            self.emit_cell(role, row_base, ci, cj);
        }
        count.div_ceil(per_row) * self.cfg.ratio
    }
}

/// Generate a dataset. The same `(config, seed)` always produces the same
/// instances, bit for bit.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SyntheticDataset, SynthError> {
    cfg.validate()?;
    let mut b = Builder {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(seed),
        fine_labeled: vec![],
        fine_unlabeled: vec![],
        coarse_labeled: vec![],
        coarse_unlabeled: vec![],
        fine_test: vec![],
        fine_truth: BTreeMap::new(),
        coarse_truth: BTreeMap::new(),
        next_fine_id: 0,
        next_coarse_id: 0,
    };

    // bands are separated by 2r empty fine rows so every pixel's nearest
    // coarse center is its own cell's
    let gap = 2 * cfg.ratio;
    let mut row = 0;
    let block = cfg.grid_side * cfg.grid_side;
    for (role, count) in [
        (CellRole::UnlabeledBoth, block),
        (CellRole::CoarseLabeled, cfg.n_coarse_labeled),
        (CellRole::FineLabeledOne, cfg.n_fine_labeled),
        (CellRole::TestFine, block),
    ] {
        row += b.emit_band(&role, row, count) + gap;
    }

    let fine = ResolutionLayer::new(0, cfg.fine_dim, b.fine_labeled, b.fine_unlabeled)?;
    let coarse = ResolutionLayer::new(1, cfg.coarse_dim, b.coarse_labeled, b.coarse_unlabeled)?;
    let dataset = MultiResDataset::new(fine, vec![coarse], 2, b.fine_test)?;
    Ok(SyntheticDataset {
        dataset,
        fine_truth: b.fine_truth,
        coarse_truth: b.coarse_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_correspondence;

    #[test]
    fn benchmark_counts_are_exact() {
        let cfg = SynthConfig::default();
        let synth = generate_synthetic(&cfg, 7).unwrap();
        let d = &synth.dataset;
        assert_eq!(d.fine.labeled.len(), 20);
        // unlabeled block 900 + coarse band 200·9 + fine band 20·8
        assert_eq!(d.fine.unlabeled.len(), 900 + 1800 + 160);
        assert_eq!(d.coarse[0].labeled.len(), 200);
        // unlabeled block 100 + fine-band parents 20
        assert_eq!(d.coarse[0].unlabeled.len(), 120);
        assert_eq!(d.fine_test.len(), 900);
        assert!(d.fine_test.iter().all(|i| i.label.is_labeled()));
    }

    #[test]
    fn coarse_truth_is_the_or_of_member_truths() {
        for seed in 0..4 {
            let synth = generate_synthetic(&SynthConfig::default(), seed).unwrap();
            let corr =
                build_correspondence(&synth.dataset.coarse[0], &synth.dataset.fine).unwrap();
            corr.validate_partition(
                synth
                    .dataset
                    .fine
                    .all_instances()
                    .map(|i| i.id),
            )
            .unwrap();
            for coarse in synth.dataset.coarse[0].all_instances() {
                let members = corr.group(coarse.id).unwrap();
                assert_eq!(members.len(), 9);
                let any_positive = members
                    .iter()
                    .any(|fid| synth.fine_truth[fid] == Label::Positive);
                let want = if any_positive {
                    Label::Positive
                } else {
                    Label::Negative
                };
                assert_eq!(synth.coarse_truth[&coarse.id], want, "cell {}", coarse.id);
            }
        }
    }

    #[test]
    fn emitted_labels_match_the_recorded_truth() {
        let synth = generate_synthetic(&SynthConfig::default(), 3).unwrap();
        for inst in &synth.dataset.fine.labeled {
            assert_eq!(inst.label, synth.fine_truth[&inst.id]);
        }
        for inst in &synth.dataset.coarse[0].labeled {
            assert_eq!(inst.label, synth.coarse_truth[&inst.id]);
        }
    }

    #[test]
    fn same_seed_reproduces_bit_identical_features() {
        let cfg = SynthConfig::default();
        let a = generate_synthetic(&cfg, 11).unwrap();
        let b = generate_synthetic(&cfg, 11).unwrap();
        for (x, y) in a
            .dataset
            .fine
            .all_instances()
            .zip(b.dataset.fine.all_instances())
        {
            assert_eq!(x.id, y.id);
            for (u, v) in x.features.iter().zip(&y.features) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
        let c = generate_synthetic(&cfg, 12).unwrap();
        let differs = a
            .dataset
            .fine
            .all_instances()
            .zip(c.dataset.fine.all_instances())
            .any(|(x, y)| x.features != y.features);
        assert!(differs);
    }

    #[test]
    fn positive_cells_have_blob_sizes_from_both_bands() {
        // with ρ bimodal on [0.1, 0.3] ∪ [0.85, 1] and r = 3, blob sizes
        // concentrate in 1..=3 with a dense mode at 8..=9
        let synth = generate_synthetic(&SynthConfig::default(), 5).unwrap();
        let corr = build_correspondence(&synth.dataset.coarse[0], &synth.dataset.fine).unwrap();
        let mut sizes = std::collections::BTreeSet::new();
        let mut any_negative = false;
        for coarse in synth.dataset.coarse[0].all_instances() {
            let positives = corr
                .group(coarse.id)
                .unwrap()
                .iter()
                .filter(|fid| synth.fine_truth[fid] == Label::Positive)
                .count();
            if positives == 0 {
                any_negative = true;
            } else {
                sizes.insert(positives);
            }
        }
        assert!(any_negative);
        assert!(sizes.len() >= 4, "blob sizes seen: {sizes:?}");
        assert!(*sizes.iter().min().unwrap() >= 1);
        assert!(*sizes.iter().max().unwrap() <= 9);
        // the law is bimodal: sparse blobs and nearly saturated cells both occur
        assert!(
            sizes.iter().any(|&s| s <= 3),
            "no sparse blobs: {sizes:?}"
        );
        assert!(
            sizes.iter().any(|&s| s >= 8),
            "no dense blobs: {sizes:?}"
        );
    }

    #[test]
    fn coarse_features_start_with_the_member_mean() {
        let cfg = SynthConfig {
            grid_side: 2,
            n_coarse_labeled: 0,
            n_fine_labeled: 0,
            ..SynthConfig::default()
        };
        let synth = generate_synthetic(&cfg, 9).unwrap();
        let corr = build_correspondence(&synth.dataset.coarse[0], &synth.dataset.fine).unwrap();
        let fine_by_id: BTreeMap<usize, &Instance> = synth
            .dataset
            .fine
            .all_instances()
            .map(|i| (i.id, i))
            .collect();
        for coarse in synth.dataset.coarse[0].all_instances() {
            let members = corr.group(coarse.id).unwrap();
            for d in 0..cfg.fine_dim {
                let mean: f64 = members
                    .iter()
                    .map(|fid| fine_by_id[fid].features[d])
                    .sum::<f64>()
                    / members.len() as f64;
                assert!((coarse.features[d] - mean).abs() < 1e-12);
            }
            assert_eq!(coarse.features.len(), cfg.coarse_dim);
        }
    }

    #[test]
    fn test_band_is_disjoint_from_training_ids() {
        let synth = generate_synthetic(&SynthConfig::default(), 2).unwrap();
        let train_ids: std::collections::BTreeSet<usize> = synth
            .dataset
            .fine
            .all_instances()
            .map(|i| i.id)
            .collect();
        for t in &synth.dataset.fine_test {
            assert!(!train_ids.contains(&t.id));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.coarse_dim = cfg.fine_dim;
        assert!(matches!(
            generate_synthetic(&cfg, 0),
            Err(SynthError::Invalid(_))
        ));
        let cfg = SynthConfig {
            rho_min: 0.0,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic(&cfg, 0).is_err());
    }
}
