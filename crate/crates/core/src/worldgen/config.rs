use serde::{Deserialize, Serialize};

use super::world::ObjectClass;
use crate::error::{Error, Result};

/// Furniture and item cells are laid out on a fixed LAYOUT_GRID×LAYOUT_GRID
/// lattice, independent of the patch grid.
pub const LAYOUT_GRID: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Square image side H = W in pixels.
    pub image_size: usize,
    /// Images per episode (m).
    pub images: usize,
    /// Patch-grid side P.
    pub patch_grid: usize,
    pub ctrf_prob: f64,
    /// Probability that a counterfactual task carries both hazards when both apply.
    pub double_ctrf_prob: f64,
    pub min_items: usize,
    pub max_items: usize,
    /// Upper bound on distractor location facts per task.
    pub max_facts: usize,
    pub classes: Vec<ObjectClass>,
    pub template_version: u32,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_size: 64,
            images: 2,
            patch_grid: 8,
            ctrf_prob: 0.5,
            double_ctrf_prob: 0.25,
            min_items: 4,
            max_items: 6,
            max_facts: 2,
            classes: ObjectClass::ALL.to_vec(),
            template_version: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if !(1..=4).contains(&self.images) {
            return fail(format!("images must be in [1,4], got {}", self.images));
        }
        if !(0.0..=1.0).contains(&self.ctrf_prob) || !(0.0..=1.0).contains(&self.double_ctrf_prob) {
            return fail(format!("probabilities must lie in [0,1], got {}", self.ctrf_prob));
        }
        if self.patch_grid == 0 || !self.image_size.is_multiple_of(self.patch_grid) {
            return fail(format!(
                "image size {} is not divisible by patch grid {}",
                self.image_size, self.patch_grid
            ));
        }
        if !self.image_size.is_multiple_of(8 * LAYOUT_GRID) || self.image_size == 0 {
            return fail(format!(
                "image size {} must be a positive multiple of {}",
                self.image_size,
                8 * LAYOUT_GRID
            ));
        }
        if self.min_items > self.max_items {
            return fail(format!("min_items {} > max_items {}", self.min_items, self.max_items));
        }
        if self.template_version != 1 {
            return fail(format!("unknown template version {}", self.template_version));
        }
        Ok(())
    }

    pub fn has(&self, class: ObjectClass) -> bool {
        self.classes.contains(&class)
    }

    /// Side of one layout cell in pixels.
    pub fn cell_px(&self) -> usize {
        self.image_size / LAYOUT_GRID
    }
}
