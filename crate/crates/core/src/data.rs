use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::Image;

/// Class index into the label space of the classifier and the generator's
/// embedding table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassLabel(pub usize);

impl ClassLabel {
    pub fn check(self, num_classes: usize) -> Result<Self> {
        if self.0 >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: self.0,
                num_classes,
            });
        }
        Ok(self)
    }
}

/// In-memory labelled image collection. Iteration order is insertion order;
/// randomized access goes through explicitly seeded generators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    samples: Vec<(Image, ClassLabel)>,
}

impl Dataset {
    pub fn new() -> Self {
        Dataset {
            samples: Vec::new(),
        }
    }

    pub fn from_samples(samples: Vec<(Image, ClassLabel)>) -> Self {
        Dataset { samples }
    }

    pub fn push(&mut self, image: Image, label: ClassLabel) {
        self.samples.push((image, label));
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, i: usize) -> &(Image, ClassLabel) {
        &self.samples[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Image, ClassLabel)> {
        self.samples.iter()
    }

    pub fn images(&self) -> impl Iterator<Item = &Image> {
        self.samples.iter().map(|(im, _)| im)
    }

    pub fn class_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for (_, l) in &self.samples {
            if l.0 < num_classes {
                h[l.0] += 1;
            }
        }
        h
    }

    /// Every label is in range and every image is `size x size`.
    pub fn validate(&self, num_classes: usize, size: usize) -> Result<()> {
        for (i, (im, label)) in self.samples.iter().enumerate() {
            if label.0 >= num_classes {
                return Err(Error::Validation(format!(
                    "sample {}: label {} out of range for {} classes",
                    i, label.0, num_classes
                )));
            }
            if im.width() != size || im.height() != size {
                return Err(Error::Preprocess(format!(
                    "sample {}: image is {}x{}, expected {}x{}",
                    i,
                    im.width(),
                    im.height(),
                    size,
                    size
                )));
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}
