//! Training, detection, evaluation and the ablation harness.

mod ablation;
mod detect;
mod metrics;
mod plot;
mod train;

use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation, AblationRow};
pub use detect::{
    detect, detect_dataset, evaluate, localization_report, Detection, DetectionResult, LocalizationReport,
};
pub use metrics::{f1_score, match_detections, prf1, MatchReport, Metrics};
pub use plot::{plot_features, project_2d};
pub use train::{
    build_manifest, collect_features, fit, train, train_on_manifest, ClusterStats, EpochLoss, FitOptions, Manifest,
    ManifestEntry, ManifestStats, SampleOrigin, TrainOutput, TrainSample, TrainedModel,
};

use crate::dgsb::DgsbConfig;
use crate::error::{Error, Result};
use crate::incdp::InCdpConfig;
use crate::localize::LocalizeConfig;
use crate::stain::{default_domains, StainMatrix};

/// Which of the three optional stages are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Flags {
    pub dgsb: bool,
    pub se: bool,
    pub incdp: bool,
}

impl Flags {
    pub const ALL_ON: Flags = Flags {
        dgsb: true,
        se: true,
        incdp: true,
    };
    pub const ALL_OFF: Flags = Flags {
        dgsb: false,
        se: false,
        incdp: false,
    };

    /// All eight combinations, all-off first.
    pub fn all_combinations() -> Vec<Flags> {
        (0..8u8)
            .map(|b| Flags {
                dgsb: b & 1 != 0,
                se: b & 2 != 0,
                incdp: b & 4 != 0,
            })
            .collect()
    }

    /// `dgsb+se+incdp`, `baseline` when nothing is on.
    pub fn name(&self) -> String {
        let parts: Vec<&str> = [(self.dgsb, "dgsb"), (self.se, "se"), (self.incdp, "incdp")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

impl Default for Flags {
    fn default() -> Self {
        Self::ALL_ON
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Total epochs of the final classifier.
    pub epochs: usize,
    /// Leading epochs trained on the parent loss alone before child labels
    /// are generated (only with `incdp`).
    pub parent_epochs: usize,
    /// Output channels of each convolutional block.
    pub channels: Vec<usize>,
    /// A candidate this close to an annotated mitosis is a positive sample.
    pub positive_radius: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.0,
            weight_decay: 5e-4,
            batch_size: 16,
            epochs: 20,
            parent_epochs: 10,
            channels: vec![16, 32, 64],
            positive_radius: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StainConfig {
    /// Basis used for hematoxylin extraction and as the restaining source.
    pub source: StainMatrix,
    /// Target domains of stain augmentation.
    pub domains: Vec<(String, StainMatrix)>,
    pub gain_jitter: f64,
}

impl Default for StainConfig {
    fn default() -> Self {
        Self {
            source: StainMatrix::default(),
            domains: default_domains(),
            gain_jitter: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub patch_size: usize,
    pub match_radius: f64,
    pub score_threshold: f64,
    pub flags: Flags,
    pub train: TrainConfig,
    pub localize: LocalizeConfig,
    pub dgsb: DgsbConfig,
    pub incdp: InCdpConfig,
    pub stain: StainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            patch_size: 80,
            match_radius: 30.0,
            score_threshold: 0.5,
            flags: Flags::ALL_ON,
            train: TrainConfig::default(),
            localize: LocalizeConfig::default(),
            dgsb: DgsbConfig::default(),
            incdp: InCdpConfig::default(),
            stain: StainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn with_flags(&self, flags: Flags) -> Self {
        Self {
            flags,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |arg, reason: String| Err(Error::InvalidArgument { arg, reason });
        if !(self.match_radius > 0.0) {
            return bad("match_radius", format!("must be positive, got {}", self.match_radius));
        }
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return bad("score_threshold", format!("must be in (0, 1), got {}", self.score_threshold));
        }
        let pools = self.train.channels.len().saturating_sub(1);
        let stride = 2usize << pools;
        if self.train.channels.is_empty() || self.train.channels.contains(&0) {
            return bad("channels", "need at least one block with nonzero width".into());
        }
        if self.patch_size == 0 || self.patch_size % stride != 0 {
            return bad("patch_size", format!("{} is not a positive multiple of {stride}", self.patch_size));
        }
        if self.train.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.train.lr > 0.0) || self.train.momentum < 0.0 || self.train.weight_decay < 0.0 {
            return bad("lr", "need lr > 0, momentum >= 0, weight_decay >= 0".into());
        }
        if self.flags.incdp && self.train.parent_epochs >= self.train.epochs {
            return bad(
                "parent_epochs",
                format!("{} leaves no joint epochs out of {}", self.train.parent_epochs, self.train.epochs),
            );
        }
        if self.localize.min_area == 0 || self.localize.min_area >= self.localize.max_area {
            return bad("min_area", "need 0 < min_area < max_area".into());
        }
        let d = &self.dgsb;
        if d.k == 0 || d.m == Some(0) || !(d.epsilon > 0.0 && d.epsilon < 1.0) {
            return bad("dgsb", "need k >= 1, m >= 1 and epsilon in (0, 1)".into());
        }
        if self.flags.se && self.stain.domains.is_empty() {
            return bad("domains", "stain enhancement needs at least one target domain".into());
        }
        self.incdp.validate()
    }
}
