//! Multi-resolution datasets and the spatial correspondence between layers.
//!
//! A dataset holds one fine layer (resolution 0) and any number of coarser
//! layers (1..K), each split into labeled and unlabeled instances. A
//! [`CorrespondenceMap`] assigns every fine instance to exactly one coarse
//! instance — the group `S_i` over which consistency penalties are computed.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("layer {layer}: instance {id} has {got} features, layer declares {expected}")]
    FeatureDim {
        layer: usize,
        id: usize,
        expected: usize,
        got: usize,
    },
    #[error("instance {id}: location has {got} coordinates, dataset declares {expected}")]
    LocationDim {
        id: usize,
        expected: usize,
        got: usize,
    },
    #[error("layer {layer}: duplicate instance id {id}")]
    DuplicateId { layer: usize, id: usize },
    #[error("layer {layer}: instance {id} in the labeled set has no label")]
    UnlabeledInLabeledSet { layer: usize, id: usize },
    #[error("layer {layer}: instance {id} in the unlabeled set carries a label")]
    LabeledInUnlabeledSet { layer: usize, id: usize },
    #[error("fine layer must have resolution id 0, got {0}")]
    FineResolutionId(usize),
    #[error("coarse layer at position {position} must have resolution id {expected}, got {got}")]
    CoarseResolutionId {
        position: usize,
        expected: usize,
        got: usize,
    },
    #[error("correspondence requires a nonempty coarse layer")]
    EmptyCoarseLayer,
    #[error("correspondence: location dimensions differ (coarse {coarse}, fine {fine})")]
    CorrespondenceDim { coarse: usize, fine: usize },
    #[error("grid side {side} is not divisible by ratio {ratio}")]
    GridNotDivisible { side: usize, ratio: usize },
    #[error("grid ratio must be at least 1")]
    ZeroRatio,
    #[error("fold split requires at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error("fold split: {folds} folds need at least {folds} labeled instances, have {have}")]
    TooFewLabeled { folds: usize, have: usize },
    #[error("correspondence does not partition the fine layer: {0}")]
    NotAPartition(String),
}

/// Binary class label, or absence of one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Label {
    Negative,
    Positive,
    Unlabeled,
}

impl Label {
    /// 0.0 / 1.0 for labeled instances, None otherwise.
    pub fn as_f64(self) -> Option<f64> {
        match self {
            Label::Negative => Some(0.0),
            Label::Positive => Some(1.0),
            Label::Unlabeled => None,
        }
    }

    pub fn is_labeled(self) -> bool {
        self != Label::Unlabeled
    }
}

/// One observation: spatial location, feature vector, optional label.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: usize,
    pub location: Vec<f64>,
    pub features: Vec<f64>,
    pub label: Label,
}

impl Instance {
    pub fn new(id: usize, location: Vec<f64>, features: Vec<f64>, label: Label) -> Self {
        Instance {
            id,
            location,
            features,
            label,
        }
    }
}

/// All instances observed at one resolution, split by label availability.
#[derive(Debug, Clone)]
pub struct ResolutionLayer {
    pub resolution_id: usize,
    pub feature_dim: usize,
    pub labeled: Vec<Instance>,
    pub unlabeled: Vec<Instance>,
}

impl ResolutionLayer {
    /// Build a layer, enforcing feature arity, id uniqueness, and the
    /// labeled/unlabeled split discipline.
    pub fn new(
        resolution_id: usize,
        feature_dim: usize,
        labeled: Vec<Instance>,
        unlabeled: Vec<Instance>,
    ) -> Result<Self, DataError> {
        let layer = ResolutionLayer {
            resolution_id,
            feature_dim,
            labeled,
            unlabeled,
        };
        layer.validate()?;
        Ok(layer)
    }

    fn validate(&self) -> Result<(), DataError> {
        let mut seen = BTreeSet::new();
        for inst in self.labeled.iter().chain(&self.unlabeled) {
            if inst.features.len() != self.feature_dim {
                return Err(DataError::FeatureDim {
                    layer: self.resolution_id,
                    id: inst.id,
                    expected: self.feature_dim,
                    got: inst.features.len(),
                });
            }
            if !seen.insert(inst.id) {
                return Err(DataError::DuplicateId {
                    layer: self.resolution_id,
                    id: inst.id,
                });
            }
        }
        for inst in &self.labeled {
            if !inst.label.is_labeled() {
                return Err(DataError::UnlabeledInLabeledSet {
                    layer: self.resolution_id,
                    id: inst.id,
                });
            }
        }
        for inst in &self.unlabeled {
            if inst.label.is_labeled() {
                return Err(DataError::LabeledInUnlabeledSet {
                    layer: self.resolution_id,
                    id: inst.id,
                });
            }
        }
        Ok(())
    }

    /// Labeled and unlabeled instances in one iterator (labeled first).
    pub fn all_instances(&self) -> impl Iterator<Item = &Instance> {
        self.labeled.iter().chain(&self.unlabeled)
    }

    pub fn total_len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }
}

/// A fine layer, K coarser layers, and a held-out labeled fine test split.
#[derive(Debug, Clone)]
pub struct MultiResDataset {
    pub fine: ResolutionLayer,
    pub coarse: Vec<ResolutionLayer>,
    pub location_dim: usize,
    /// Labeled fine-resolution instances reserved for evaluation; never part
    /// of training or correspondence.
    pub fine_test: Vec<Instance>,
}

impl MultiResDataset {
    pub fn new(
        fine: ResolutionLayer,
        coarse: Vec<ResolutionLayer>,
        location_dim: usize,
        fine_test: Vec<Instance>,
    ) -> Result<Self, DataError> {
        if fine.resolution_id != 0 {
            return Err(DataError::FineResolutionId(fine.resolution_id));
        }
        for (pos, layer) in coarse.iter().enumerate() {
            if layer.resolution_id != pos + 1 {
                return Err(DataError::CoarseResolutionId {
                    position: pos,
                    expected: pos + 1,
                    got: layer.resolution_id,
                });
            }
        }
        let ds = MultiResDataset {
            fine,
            coarse,
            location_dim,
            fine_test,
        };
        for inst in ds
            .fine
            .all_instances()
            .chain(ds.coarse.iter().flat_map(|l| l.all_instances()))
            .chain(ds.fine_test.iter())
        {
            if inst.location.len() != ds.location_dim {
                return Err(DataError::LocationDim {
                    id: inst.id,
                    expected: ds.location_dim,
                    got: inst.location.len(),
                });
            }
        }
        Ok(ds)
    }

    /// Number of coarse resolutions K.
    pub fn num_coarse(&self) -> usize {
        self.coarse.len()
    }
}

/// Many-to-one assignment of fine instances to coarse instances: the groups
/// `S_i`, keyed by coarse instance id.
#[derive(Debug, Clone)]
pub struct CorrespondenceMap {
    pub coarse_resolution: usize,
    pub fine_resolution: usize,
    pub groups: BTreeMap<usize, Vec<usize>>,
}

impl CorrespondenceMap {
    /// Fine instance ids assigned to the given coarse instance.
    pub fn group(&self, coarse_id: usize) -> Option<&[usize]> {
        self.groups.get(&coarse_id).map(|g| g.as_slice())
    }

    /// Check that the groups are disjoint and cover exactly `fine_ids`.
    pub fn validate_partition(
        &self,
        fine_ids: impl Iterator<Item = usize>,
    ) -> Result<(), DataError> {
        let expected: BTreeSet<usize> = fine_ids.collect();
        let mut seen = BTreeSet::new();
        for (coarse_id, group) in &self.groups {
            for &fid in group {
                if !seen.insert(fid) {
                    return Err(DataError::NotAPartition(format!(
                        "fine id {fid} appears in more than one group"
                    )));
                }
                if !expected.contains(&fid) {
                    return Err(DataError::NotAPartition(format!(
                        "group {coarse_id} contains unknown fine id {fid}"
                    )));
                }
            }
        }
        if seen.len() != expected.len() {
            let missing = expected.difference(&seen).next();
            return Err(DataError::NotAPartition(format!(
                "fine id {:?} is not assigned to any group",
                missing
            )));
        }
        Ok(())
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Assign every fine instance (labeled and unlabeled) to the coarse instance
/// with the nearest location (Euclidean); distance ties break toward the
/// lowest coarse id.
pub fn build_correspondence(
    coarse: &ResolutionLayer,
    fine: &ResolutionLayer,
) -> Result<CorrespondenceMap, DataError> {
    let mut centers: Vec<(usize, &[f64])> = coarse
        .all_instances()
        .map(|c| (c.id, c.location.as_slice()))
        .collect();
    if centers.is_empty() {
        return Err(DataError::EmptyCoarseLayer);
    }
    // Ascending id order makes "first strict improvement wins" equal to the
    // lowest-id tie-break.
    centers.sort_by_key(|(id, _)| *id);

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for inst in fine.all_instances() {
        if inst.location.len() != centers[0].1.len() {
            return Err(DataError::CorrespondenceDim {
                coarse: centers[0].1.len(),
                fine: inst.location.len(),
            });
        }
        let mut best_id = centers[0].0;
        let mut best_d2 = squared_distance(&inst.location, centers[0].1);
        for &(cid, loc) in &centers[1..] {
            let d2 = squared_distance(&inst.location, loc);
            if d2 < best_d2 {
                best_d2 = d2;
                best_id = cid;
            }
        }
        groups.entry(best_id).or_default().push(inst.id);
    }
    for group in groups.values_mut() {
        group.sort_unstable();
    }
    Ok(CorrespondenceMap {
        coarse_resolution: coarse.resolution_id,
        fine_resolution: fine.resolution_id,
        groups,
    })
}

/// Correspondence for an H×W coarse raster refined by `ratio` per axis: fine
/// pixel (i, j) belongs to coarse pixel (⌊i/r⌋, ⌊j/r⌋). Ids are row-major
/// within each raster. Every group has exactly r² members.
pub fn grid_correspondence(
    coarse_h: usize,
    coarse_w: usize,
    ratio: usize,
) -> Result<CorrespondenceMap, DataError> {
    if ratio == 0 {
        return Err(DataError::ZeroRatio);
    }
    let (fine_h, fine_w) = (coarse_h * ratio, coarse_w * ratio);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..fine_h {
        for j in 0..fine_w {
            let coarse_id = (i / ratio) * coarse_w + (j / ratio);
            groups.entry(coarse_id).or_default().push(i * fine_w + j);
        }
    }
    for group in groups.values_mut() {
        group.sort_unstable();
    }
    Ok(CorrespondenceMap {
        coarse_resolution: 1,
        fine_resolution: 0,
        groups,
    })
}

/// [`grid_correspondence`] from the fine raster's dimensions; errors when a
/// side is not divisible by the ratio.
pub fn grid_correspondence_from_fine(
    fine_h: usize,
    fine_w: usize,
    ratio: usize,
) -> Result<CorrespondenceMap, DataError> {
    if ratio == 0 {
        return Err(DataError::ZeroRatio);
    }
    if fine_h % ratio != 0 {
        return Err(DataError::GridNotDivisible {
            side: fine_h,
            ratio,
        });
    }
    if fine_w % ratio != 0 {
        return Err(DataError::GridNotDivisible {
            side: fine_w,
            ratio,
        });
    }
    grid_correspondence(fine_h / ratio, fine_w / ratio, ratio)
}

/// Seeded n-fold partition of a layer's labeled set into (train, validation)
/// pairs. Validation sizes differ by at most one; the first `N mod n` folds
/// take the extra instance.
pub fn split_folds(
    layer: &ResolutionLayer,
    folds: usize,
    seed: u64,
) -> Result<Vec<(Vec<Instance>, Vec<Instance>)>, DataError> {
    if folds < 2 {
        return Err(DataError::TooFewFolds(folds));
    }
    let n = layer.labeled.len();
    if n < folds {
        return Err(DataError::TooFewLabeled { folds, have: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let base = n / folds;
    let extra = n % folds;
    let mut splits = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let size = base + usize::from(f < extra);
        let val_idx: BTreeSet<usize> = order[start..start + size].iter().copied().collect();
        start += size;
        let mut train = Vec::with_capacity(n - size);
        let mut validation = Vec::with_capacity(size);
        for (i, inst) in layer.labeled.iter().enumerate() {
            if val_idx.contains(&i) {
                validation.push(inst.clone());
            } else {
                train.push(inst.clone());
            }
        }
        splits.push((train, validation));
    }
    Ok(splits)
}
