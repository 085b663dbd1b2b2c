//! The lizard data model: RGB patches stacked as `[N, H, W, 3]` u8 and label
//! maps stacked as `[N, H, W, 2]` u16 (channel 0 instance ids, channel 1
//! class ids), plus splitting, geometric augmentation and class counting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{LabelError, PatchLabels};
use crate::npy::{self, DType, NpyArray, NpyData, NpyError};

/// Number of nucleus classes in lizard.
pub const LIZARD_CLASSES: usize = 6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Npy(#[from] NpyError),
    #[error("{what}: expected dtype {expected:?}, found {found:?}")]
    DtypeMismatch {
        what: &'static str,
        expected: DType,
        found: DType,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("patch {patch}: {source}")]
    LabelInconsistency {
        patch: usize,
        #[source]
        source: LabelError,
    },
    #[error("fortran-ordered arrays are not supported")]
    FortranOrder,
    #[error("instance id {0} does not fit in u16")]
    InstanceIdOverflow(u32),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
}

/// One RGB patch, row-major `[H, W, C]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

/// A validated stack of label maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    pub num_classes: usize,
    pub patches: Vec<PatchLabels>,
}

impl LabelSet {
    /// Decodes and validates a `[N, H, W, 2]` u16 label array.
    pub fn from_npy(arr: &NpyArray, num_classes: usize) -> Result<Self, DataError> {
        if arr.fortran_order {
            return Err(DataError::FortranOrder);
        }
        let NpyData::U16(values) = &arr.data else {
            return Err(DataError::DtypeMismatch {
                what: "labels",
                expected: DType::U16,
                found: arr.dtype(),
            });
        };
        let &[n, h, w, 2] = arr.shape.as_slice() else {
            return Err(DataError::ShapeMismatch(format!(
                "labels must be [N, H, W, 2], got {:?}",
                arr.shape
            )));
        };
        let mut patches = Vec::with_capacity(n);
        for (i, chunk) in values.chunks_exact((h * w * 2).max(1)).take(n).enumerate() {
            let ids = chunk.iter().step_by(2).map(|&v| v as u32).collect();
            let classes = chunk.iter().skip(1).step_by(2).copied().collect();
            let labels = PatchLabels::new(h, w, ids, classes);
            labels
                .validate(num_classes)
                .map_err(|source| DataError::LabelInconsistency { patch: i, source })?;
            patches.push(labels);
        }
        // Zero-area patches have no chunks to iterate.
        while patches.len() < n {
            patches.push(PatchLabels::background(h, w));
        }
        Ok(Self {
            num_classes,
            patches,
        })
    }

    /// Encodes as a lizard-format `[N, H, W, 2]` u16 array.
    pub fn to_npy(&self) -> Result<NpyArray, DataError> {
        let (h, w) = self.extents().unwrap_or((0, 0));
        let mut values = Vec::with_capacity(self.patches.len() * h * w * 2);
        for patch in &self.patches {
            if patch.extents() != (h, w) {
                return Err(DataError::ShapeMismatch(format!(
                    "patch extents {:?} differ from {:?}",
                    patch.extents(),
                    (h, w)
                )));
            }
            for (&id, &class) in patch.instances.ids.iter().zip(&patch.classes.classes) {
                let id = u16::try_from(id).map_err(|_| DataError::InstanceIdOverflow(id))?;
                values.push(id);
                values.push(class);
            }
        }
        Ok(NpyArray::new(
            vec![self.patches.len(), h, w, 2],
            NpyData::U16(values),
        )?)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Common (H, W) of the patches, `None` when the set is empty.
    pub fn extents(&self) -> Option<(usize, usize)> {
        self.patches.first().map(PatchLabels::extents)
    }
}

/// Reads and validates a label file.
pub fn load_label_set(label_bytes: &[u8], num_classes: usize) -> Result<LabelSet, DataError> {
    LabelSet::from_npy(&npy::read_npy(label_bytes)?, num_classes)
}

/// Images and labels in lizard layout, validated on construction.
#[derive(Debug, Clone)]
pub struct LabeledPatchSet {
    pub images: NpyArray,
    pub labels: NpyArray,
    pub num_classes: usize,
}

impl LabeledPatchSet {
    pub fn new(images: NpyArray, labels: NpyArray, num_classes: usize) -> Result<Self, DataError> {
        if images.fortran_order {
            return Err(DataError::FortranOrder);
        }
        if images.dtype() != DType::U8 {
            return Err(DataError::DtypeMismatch {
                what: "images",
                expected: DType::U8,
                found: images.dtype(),
            });
        }
        let &[n, h, w, 3] = images.shape.as_slice() else {
            return Err(DataError::ShapeMismatch(format!(
                "images must be [N, H, W, 3], got {:?}",
                images.shape
            )));
        };
        // Validates dtype, layout and every label invariant.
        LabelSet::from_npy(&labels, num_classes)?;
        if labels.shape[..3] != [n, h, w] {
            return Err(DataError::ShapeMismatch(format!(
                "images {:?} and labels {:?} disagree on N, H, W",
                images.shape, labels.shape
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.images.shape[1]
    }

    pub fn width(&self) -> usize {
        self.images.shape[2]
    }

    pub fn image(&self, index: usize) -> PatchImage {
        let (h, w) = (self.height(), self.width());
        let NpyData::U8(data) = &self.images.data else {
            unreachable!("validated as u8")
        };
        let stride = h * w * 3;
        PatchImage {
            height: h,
            width: w,
            channels: 3,
            data: data[index * stride..(index + 1) * stride].to_vec(),
        }
    }

    pub fn patch_labels(&self, index: usize) -> PatchLabels {
        let (h, w) = (self.height(), self.width());
        let NpyData::U16(data) = &self.labels.data else {
            unreachable!("validated as u16")
        };
        let stride = h * w * 2;
        let chunk = &data[index * stride..(index + 1) * stride];
        PatchLabels::new(
            h,
            w,
            chunk.iter().step_by(2).map(|&v| v as u32).collect(),
            chunk.iter().skip(1).step_by(2).copied().collect(),
        )
    }

    pub fn label_set(&self) -> LabelSet {
        LabelSet {
            num_classes: self.num_classes,
            patches: (0..self.len()).map(|i| self.patch_labels(i)).collect(),
        }
    }
}

/// Parses both files and validates them as one lizard dataset.
pub fn load_patch_set(
    image_bytes: &[u8],
    label_bytes: &[u8],
    num_classes: usize,
) -> Result<LabeledPatchSet, DataError> {
    let images = npy::read_npy(image_bytes)?;
    let labels = npy::read_npy(label_bytes)?;
    LabeledPatchSet::new(images, labels, num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded uniform shuffle of `0..n` followed by a prefix split of
/// `round(train_fraction * n)` training indices.
pub fn split(n: usize, spec: SplitSpec) -> Result<Split, DataError> {
    if n < 2 {
        return Err(DataError::InvalidSplit(format!("need at least 2 items, got {n}")));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(DataError::InvalidSplit(format!(
            "train fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = (spec.train_fraction * n as f64).round() as usize;
    let test = order.split_off(n_train);
    Ok(Split { train: order, test })
}

/// Interpolation-free geometric augmentations (a subset of the dihedral group
/// of the square). Rotations are counterclockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    Identity,
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 6] = [
        AugmentOp::Identity,
        AugmentOp::HFlip,
        AugmentOp::VFlip,
        AugmentOp::Rot90,
        AugmentOp::Rot180,
        AugmentOp::Rot270,
    ];

    pub fn output_extents(self, height: usize, width: usize) -> (usize, usize) {
        match self {
            AugmentOp::Rot90 | AugmentOp::Rot270 => (width, height),
            _ => (height, width),
        }
    }

    /// Source pixel `(row, col)` read for output pixel `(r, c)` on an input of
    /// extents `(h, w)`.
    fn source(self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            AugmentOp::Identity => (r, c),
            AugmentOp::HFlip => (r, w - 1 - c),
            AugmentOp::VFlip => (h - 1 - r, c),
            AugmentOp::Rot90 => (c, w - 1 - r),
            AugmentOp::Rot180 => (h - 1 - r, w - 1 - c),
            AugmentOp::Rot270 => (h - 1 - c, r),
        }
    }

    /// Applies the coordinate map to a row-major `[H, W, C]` buffer.
    pub fn apply<T: Copy>(self, data: &[T], h: usize, w: usize, channels: usize) -> Vec<T> {
        assert_eq!(data.len(), h * w * channels);
        let (oh, ow) = self.output_extents(h, w);
        let mut out = Vec::with_capacity(data.len());
        for r in 0..oh {
            for c in 0..ow {
                let (sr, sc) = self.source(r, c, h, w);
                let base = (sr * w + sc) * channels;
                out.extend_from_slice(&data[base..base + channels]);
            }
        }
        out
    }
}

/// Transforms an image and its labels with the same coordinate bijection.
pub fn augment(
    image: &PatchImage,
    labels: &PatchLabels,
    op: AugmentOp,
) -> (PatchImage, PatchLabels) {
    let (h, w) = (image.height, image.width);
    assert_eq!(labels.extents(), (h, w), "image and labels disagree on extents");
    let (oh, ow) = op.output_extents(h, w);
    let image = PatchImage {
        height: oh,
        width: ow,
        channels: image.channels,
        data: op.apply(&image.data, h, w, image.channels),
    };
    (image, augment_labels(labels, op))
}

pub fn augment_labels(labels: &PatchLabels, op: AugmentOp) -> PatchLabels {
    let (h, w) = labels.extents();
    let (oh, ow) = op.output_extents(h, w);
    PatchLabels::new(
        oh,
        ow,
        op.apply(&labels.instances.ids, h, w, 1),
        op.apply(&labels.classes.classes, h, w, 1),
    )
}

/// Number of distinct instances of each class 1..=C (entry `t - 1` holds class `t`).
pub fn class_counts(labels: &PatchLabels, num_classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; num_classes];
    for (_, class) in labels.instance_classes() {
        if (1..=num_classes).contains(&(class as usize)) {
            counts[class as usize - 1] += 1;
        }
    }
    counts
}
