use serde::{Deserialize, Serialize};

use super::detect::{detect_dataset, evaluate};
use super::train::train;
use super::{Flags, PipelineConfig};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: Flags,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Trains every variant on the train split with the same seed and scores it
/// on the test split.
pub fn run_ablation(ds: &Dataset, variants: &[Flags], cfg: &PipelineConfig, seed: u64) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "variants",
            reason: "need at least one variant".into(),
        });
    }
    variants
        .iter()
        .map(|&flags| {
            let vcfg = cfg.with_flags(flags);
            let out = train(ds, &vcfg, seed)?;
            let results = detect_dataset(ds, Split::Test, &out.model, &vcfg)?;
            let (m, _) = evaluate(ds, &results, vcfg.match_radius)?;
            Ok(AblationRow {
                name: flags.name(),
                flags,
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
                tp: m.tp,
                fp: m.fp,
                fn_: m.fn_,
            })
        })
        .collect()
}
