//! Inter-/intra-class diversity-preserved classification.
//!
//! Each parent class (non-mitosis, mitosis) is split into `T` child classes
//! by k-means on deep features. Negative children take ids `[0, T)` and
//! positive children `[T, 2T)`. Parent and child heads are trained jointly
//! with focal and center losses.

mod cam;
mod child;
mod efdmix;
mod loss;

pub use cam::{cam, Cam};
pub use child::{child_weights, generate_child_labels, weights_from_distances, ChildLabels};
pub use efdmix::{efdmix, efdmix_detached, EfdMix};
pub use loss::{
    center_loss, center_loss_grad, child_focal_loss, child_focal_loss_logits, focal_loss,
    focal_loss_logits, joint_loss, softmax, update_centers, PROB_EPS,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localize::Patch;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InCdpConfig {
    /// Child classes per parent class.
    pub t: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub center_rate: f64,
    /// Symmetric Beta parameter for the mixing weight.
    pub mix_beta: f64,
    /// Probability of mixing a given batch.
    pub mix_prob: f64,
    pub mix_sorted: bool,
    pub weight_clip: (f64, f64),
}

impl Default for InCdpConfig {
    fn default() -> Self {
        Self {
            t: 4,
            gamma: 2.0,
            lambda: 0.5,
            center_rate: 0.5,
            mix_beta: 0.1,
            mix_prob: 0.5,
            mix_sorted: true,
            weight_clip: (0.25, 4.0),
        }
    }
}

impl InCdpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |arg, reason: &str| {
            Err(Error::InvalidArgument {
                arg,
                reason: reason.to_string(),
            })
        };
        if self.t < 1 {
            return bad("t", "need at least one child class per parent");
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma", "must be non-negative");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda", "must be non-negative");
        }
        if !(self.center_rate > 0.0 && self.center_rate <= 1.0) {
            return bad("center_rate", "must lie in (0, 1]");
        }
        let (lo, hi) = self.weight_clip;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0) {
            return bad("weight_clip", "need 0 < w_min <= 1 <= w_max");
        }
        Ok(())
    }
}

/// A patch with its parent label and, once generated, its child label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub patch: Patch,
    pub parent: u8,
    pub child: Option<usize>,
}

impl LabeledPatch {
    /// Checks the parent/child id ranges for `t` children per parent.
    pub fn is_consistent(&self, t: usize) -> bool {
        match (self.parent, self.child) {
            (0, Some(c)) => c < t,
            (1, Some(c)) => (t..2 * t).contains(&c),
            (0 | 1, None) => true,
            _ => false,
        }
    }
}

/// One centre per class, maintained by moving-average updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centers {
    pub vectors: Array2<f64>,
}

impl Centers {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            vectors: Array2::zeros((classes, dim)),
        }
    }

    pub fn classes(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Per-child-class focal loss weights with mean 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildWeights {
    pub weights: Vec<f64>,
}
