//! In-memory training data.

use crate::error::{Error, Result};
use crate::imageproc::{GrayImage, MaskImage};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub label: usize,
    /// Ground-truth foreground for segmentation data.
    pub mask: Option<MaskImage>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>, samples: Vec<Sample>) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.label >= class_names.len().max(1)) {
            return Err(Error::invalid(format!("sample '{}' has label {} outside the class table", s.id, s.label)));
        }
        Ok(Dataset { class_names, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn images(&self) -> Vec<GrayImage> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }

    /// Dataset union; class tables must agree.
    pub fn union(&self, other: &Dataset) -> Result<Dataset> {
        if self.class_names != other.class_names {
            return Err(Error::config("cannot merge datasets with different class tables"));
        }
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        Ok(Dataset { class_names: self.class_names.clone(), samples })
    }

    pub fn map_images(&self, mut f: impl FnMut(&Sample) -> Result<GrayImage>) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| Ok(Sample { image: f(s)?, ..s.clone() }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { class_names: self.class_names.clone(), samples })
    }
}
