//! Curriculum over the fraction of decoder unaries kept during the HOC phase.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GcrfError, Result};

/// `(epoch_start, fraction)` pairs; the fraction in force at an epoch is that
/// of the last stage starting at or before it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub stages: Vec<(usize, f64)>,
}

impl Default for MaskSchedule {
    fn default() -> Self {
        Self {
            stages: vec![(0, 1.0), (2, 0.75), (4, 0.5), (6, 0.25), (8, 0.10)],
        }
    }
}

impl MaskSchedule {
    pub fn new(stages: Vec<(usize, f64)>) -> Result<Self> {
        let s = Self { stages };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(fraction: f64) -> Result<Self> {
        Self::new(vec![(0, fraction)])
    }

    pub fn validate(&self) -> Result<()> {
        let Some(&(first, _)) = self.stages.first() else {
            return Err(GcrfError::InvalidInput("mask schedule has no stages".into()));
        };
        if first != 0 {
            return Err(GcrfError::InvalidInput("mask schedule must start at epoch 0".into()));
        }
        for &(_, f) in &self.stages {
            if !(f > 0.0 && f <= 1.0) {
                return Err(GcrfError::InvalidInput(format!("mask fraction {f} is outside (0, 1]")));
            }
        }
        for pair in self.stages.windows(2) {
            let ((e0, f0), (e1, f1)) = (pair[0], pair[1]);
            if e1 <= e0 {
                return Err(GcrfError::InvalidInput("mask schedule epochs must increase".into()));
            }
            if f1 > f0 {
                return Err(GcrfError::InvalidInput("mask schedule fractions must not increase".into()));
            }
        }
        Ok(())
    }

    pub fn fraction_at(&self, epoch: usize) -> f64 {
        self.stages
            .iter()
            .take_while(|(start, _)| *start <= epoch)
            .last()
            .map_or(1.0, |&(_, f)| f)
    }
}

/// Number of kept pixels for a fraction; never zero so the system stays
/// constrained.
pub fn kept_pixels(fraction: f64, pixels: usize) -> usize {
    ((fraction * pixels as f64).round() as usize).clamp(1, pixels)
}

/// Uniformly random mask with exactly `kept_pixels(fraction, pixels)` ones.
pub fn random_mask(pixels: usize, fraction: f64, rng: &mut impl Rng) -> Vec<bool> {
    let mut mask = vec![false; pixels];
    for i in index::sample(rng, pixels, kept_pixels(fraction, pixels)) {
        mask[i] = true;
    }
    mask
}
