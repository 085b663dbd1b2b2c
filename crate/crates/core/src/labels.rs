//! Per-patch instance and class maps.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LabelError {
    #[error("class value {value} at pixel {pixel} exceeds the {num_classes} foreground classes")]
    ClassOutOfRange {
        pixel: usize,
        value: u16,
        num_classes: usize,
    },
    #[error("pixel {pixel} has instance id {instance} but class {class}")]
    BackgroundMismatch {
        pixel: usize,
        instance: u32,
        class: u16,
    },
    #[error("instance {instance} spans classes {first} and {second}")]
    SplitInstance { instance: u32, first: u16, second: u16 },
    #[error("map extents differ: {0:?} vs {1:?}")]
    ExtentMismatch((usize, usize), (usize, usize)),
}

/// Per-pixel instance ids, row-major. Id 0 is background; ids need not be
/// contiguous and are only meaningful within one patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
}

/// Per-pixel class ids, row-major. Class 0 is background, 1..=C are nucleus types.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<u16>,
}

/// The instance/class label pair of one patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchLabels {
    pub instances: InstanceMap,
    pub classes: ClassMap,
}

impl PatchLabels {
    pub fn new(height: usize, width: usize, ids: Vec<u32>, classes: Vec<u16>) -> Self {
        assert_eq!(ids.len(), height * width);
        assert_eq!(classes.len(), height * width);
        Self {
            instances: InstanceMap { height, width, ids },
            classes: ClassMap {
                height,
                width,
                classes,
            },
        }
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0; height * width], vec![0; height * width])
    }

    pub fn height(&self) -> usize {
        self.instances.height
    }

    pub fn width(&self) -> usize {
        self.instances.width
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    /// Checks class range, background co-location and per-instance class
    /// uniqueness, returning the id -> class table on success.
    pub fn validate(&self, num_classes: usize) -> Result<BTreeMap<u32, u16>, LabelError> {
        let (h, w) = self.extents();
        if (self.classes.height, self.classes.width) != (h, w) {
            return Err(LabelError::ExtentMismatch(
                (h, w),
                (self.classes.height, self.classes.width),
            ));
        }
        let mut table = BTreeMap::new();
        for (pixel, (&id, &class)) in self
            .instances
            .ids
            .iter()
            .zip(&self.classes.classes)
            .enumerate()
        {
            if class as usize > num_classes {
                return Err(LabelError::ClassOutOfRange {
                    pixel,
                    value: class,
                    num_classes,
                });
            }
            if (id == 0) != (class == 0) {
                return Err(LabelError::BackgroundMismatch {
                    pixel,
                    instance: id,
                    class,
                });
            }
            if id == 0 {
                continue;
            }
            match table.insert(id, class) {
                Some(prev) if prev != class => {
                    return Err(LabelError::SplitInstance {
                        instance: id,
                        first: prev.min(class),
                        second: prev.max(class),
                    })
                }
                _ => {}
            }
        }
        Ok(table)
    }

    /// Maps every nonzero instance id to its class. Assumes valid labels.
    pub fn instance_classes(&self) -> BTreeMap<u32, u16> {
        self.instances
            .ids
            .iter()
            .zip(&self.classes.classes)
            .filter(|(&id, _)| id != 0)
            .map(|(&id, &class)| (id, class))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_background_is_valid() {
        let labels = PatchLabels::background(4, 4);
        assert!(labels.validate(6).unwrap().is_empty());
    }

    #[test]
    fn instance_with_two_classes() {
        let labels = PatchLabels::new(1, 3, vec![5, 5, 0], vec![1, 2, 0]);
        assert_eq!(
            labels.validate(6),
            Err(LabelError::SplitInstance {
                instance: 5,
                first: 1,
                second: 2
            })
        );
    }

    #[test]
    fn instance_on_background_class() {
        let labels = PatchLabels::new(1, 2, vec![3, 0], vec![0, 0]);
        assert!(matches!(
            labels.validate(6),
            Err(LabelError::BackgroundMismatch { pixel: 0, .. })
        ));
        let labels = PatchLabels::new(1, 2, vec![0, 0], vec![0, 4]);
        assert!(matches!(
            labels.validate(6),
            Err(LabelError::BackgroundMismatch { pixel: 1, .. })
        ));
    }

    #[test]
    fn class_range() {
        let labels = PatchLabels::new(1, 1, vec![1], vec![7]);
        assert!(matches!(
            labels.validate(6),
            Err(LabelError::ClassOutOfRange { value: 7, .. })
        ));
    }
}
