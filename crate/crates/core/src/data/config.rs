//! Flat `key = value` configuration.
//!
//! Blank lines and `#` comments are ignored; unknown keys are errors. Lists
//! are comma separated. [`Config::to_text`] writes every key with its
//! current value and a short description, which doubles as the reference.

use std::path::Path;
use std::str::FromStr;

use super::synth::SyntheticConfig;
use crate::error::{Error, Result};
use crate::localize::ThresholdMethod;
use crate::pipeline::PipelineConfig;
use crate::stain::StainMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub synth: SyntheticConfig,
}

impl Default for Config {
    fn default() -> Self {
        let synth = SyntheticConfig::default();
        Self {
            seed: synth.seed,
            pipeline: PipelineConfig::default(),
            synth,
        }
    }
}

fn err(line: usize, reason: impl Into<String>) -> Error {
    Error::Config {
        line,
        reason: reason.into(),
    }
}

fn scalar<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| err(line, format!("`{key}`: cannot parse `{v}`")))
}

fn boolean(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(err(line, format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| scalar(line, key, s.trim())).collect()
}

fn triple(line: usize, key: &str, v: &str) -> Result<[f64; 3]> {
    let xs: Vec<f64> = list(line, key, v)?;
    xs.try_into()
        .map_err(|xs: Vec<f64>| err(line, format!("`{key}`: expected 3 numbers, got {}", xs.len())))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        std::fs::read_to_string(path)?.parse()
    }

    /// Sets the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.synth.validate()
    }

    /// The configuration as parseable text with every key present.
    pub fn to_text(&self) -> String {
        let p = &self.pipeline;
        let s = &self.synth;
        let t = &p.train;
        let mut out = String::new();
        let mut put = |key: &str, value: String, doc: &str| {
            out.push_str(&format!("# {doc}\n{key} = {value}\n"));
        };
        put("seed", self.seed.to_string(), "base seed of sampling, training and generation");
        put("patch_size", p.patch_size.to_string(), "patch side in pixels (80 * 80 patches)");

        put("stain.h", join(&p.stain.source.hematoxylin()), "hematoxylin absorbance vector (RGB)");
        put("stain.e", join(&p.stain.source.eosin()), "eosin absorbance vector (RGB)");
        for (name, m) in &p.stain.domains {
            put(
                &format!("stain.domains.{name}"),
                join(&m.flat()),
                "augmentation target basis, 9 numbers row-major (H, E, residual)",
            );
        }
        put("stain.gain_jitter", p.stain.gain_jitter.to_string(), "restaining gain drawn from 1 +- this");

        let threshold = match p.localize.threshold {
            ThresholdMethod::Otsu => "otsu".to_string(),
            ThresholdMethod::Fixed(v) => v.to_string(),
        };
        put("localize.threshold", threshold, "otsu, or a fixed hematoxylin concentration");
        put("localize.min_area", p.localize.min_area.to_string(), "smallest nucleus area in pixels");
        put("localize.max_area", p.localize.max_area.to_string(), "largest nucleus area in pixels");
        put("localize.open_radius", p.localize.open_radius.to_string(), "morphological opening radius");

        put("dgsb.k", p.dgsb.k.to_string(), "negative clusters (10 clusters)");
        let m = p.dgsb.m.map_or("auto".to_string(), |m| m.to_string());
        put("dgsb.m", m, "samples per cluster; auto = ceil(positives / k)");
        put("dgsb.epsilon", p.dgsb.epsilon.to_string(), "difficulty threshold (epsilon = 0.5)");
        put("dgsb.diff_epochs", p.dgsb.diff_epochs.to_string(), "training epochs of the difficulty classifier");

        let i = &p.incdp;
        put("incdp.t", i.t.to_string(), "child classes per parent (4 clusters)");
        put("incdp.gamma", i.gamma.to_string(), "focal loss focusing parameter");
        put("incdp.lambda", i.lambda.to_string(), "child loss weight (lambda = 0.5)");
        put("incdp.center_rate", i.center_rate.to_string(), "centre update rate");
        put("incdp.mix_beta", i.mix_beta.to_string(), "mixing weight ~ Beta(b, b)");
        put("incdp.mix_prob", i.mix_prob.to_string(), "probability of mixing a batch");
        put("incdp.mix_sorted", i.mix_sorted.to_string(), "mix sorted order statistics instead of raw features");
        put("incdp.weight_min", i.weight_clip.0.to_string(), "lower clip of child weights");
        put("incdp.weight_max", i.weight_clip.1.to_string(), "upper clip of child weights");

        put("train.lr", t.lr.to_string(), "learning rate (1e-3)");
        put("train.momentum", t.momentum.to_string(), "gradient descent momentum");
        put("train.weight_decay", t.weight_decay.to_string(), "weight decay (5e-4)");
        put("train.batch_size", t.batch_size.to_string(), "patches per step");
        put("train.epochs", t.epochs.to_string(), "epochs of the final classifier");
        put("train.parent_epochs", t.parent_epochs.to_string(), "parent-only epochs before child labels");
        put("train.channels", join(&t.channels), "output channels per convolution block");
        put("train.positive_radius", t.positive_radius.to_string(), "candidate-to-mitosis distance for a positive");

        put("eval.match_radius", p.match_radius.to_string(), "detection-to-annotation matching radius");
        put("eval.score_threshold", p.score_threshold.to_string(), "minimum positive probability");

        put("ablation.dgsb", p.flags.dgsb.to_string(), "diversity-guided sample balancing");
        put("ablation.se", p.flags.se.to_string(), "stain enhancement (restaining + feature mixing)");
        put("ablation.incdp", p.flags.incdp.to_string(), "parent/child joint loss");

        put("synth.images", s.images.to_string(), "generated images");
        put("synth.test_images", s.test_images.to_string(), "trailing images in the test split");
        put("synth.width", s.width.to_string(), "image width");
        put("synth.height", s.height.to_string(), "image height");
        put("synth.normal_nuclei", s.normal_nuclei.to_string(), "ordinary nuclei per image");
        put("synth.mitoses", s.mitoses.to_string(), "mitoses per image");
        put("synth.impostors", s.impostors.to_string(), "mitosis look-alikes per image");
        put("synth.radius_min", s.radius.0.to_string(), "smallest nucleus radius");
        put("synth.radius_max", s.radius.1.to_string(), "largest nucleus radius");
        put("synth.min_separation", s.min_separation.to_string(), "minimum distance between shape centres");
        put(
            "synth.low_intensity_fraction",
            s.low_intensity_fraction.to_string(),
            "fraction of faintly stained mitoses",
        );
        put("synth.stain_jitter", s.stain_jitter.to_string(), "per-image stain vector noise");
        put("synth.gain_jitter", s.gain_jitter.to_string(), "per-image stain amount gain 1 +- this");
        put("synth.noise", s.noise.to_string(), "pixel noise amplitude in intensity levels");
        out
    }
}

impl FromStr for Config {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut c = Config::default();
        let mut h = c.pipeline.stain.source.hematoxylin();
        let mut e = c.pipeline.stain.source.eosin();
        let mut stain_line = 0;
        let mut domains_seen = false;
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, v) = content
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected `key = value`, got `{content}`")))?;
            let (key, v) = (key.trim(), v.trim());
            let p = &mut c.pipeline;
            let s = &mut c.synth;
            match key {
                "seed" => {
                    c.seed = scalar(line, key, v)?;
                    s.seed = c.seed;
                }
                "patch_size" => p.patch_size = scalar(line, key, v)?,
                "stain.h" => {
                    h = triple(line, key, v)?;
                    stain_line = line;
                }
                "stain.e" => {
                    e = triple(line, key, v)?;
                    stain_line = line;
                }
                "stain.gain_jitter" => p.stain.gain_jitter = scalar(line, key, v)?,
                _ if key.starts_with("stain.domains.") => {
                    let name = &key["stain.domains.".len()..];
                    if name.is_empty() {
                        return Err(err(line, "domain name is empty"));
                    }
                    let values: Vec<f64> = list(line, key, v)?;
                    let m = StainMatrix::from_flat(&values).map_err(|x| err(line, x.to_string()))?;
                    if !domains_seen {
                        p.stain.domains.clear();
                        domains_seen = true;
                    }
                    match p.stain.domains.iter_mut().find(|(d, _)| d == name) {
                        Some(slot) => slot.1 = m,
                        None => p.stain.domains.push((name.to_string(), m)),
                    }
                }
                "localize.threshold" => {
                    p.localize.threshold = if v == "otsu" {
                        ThresholdMethod::Otsu
                    } else {
                        ThresholdMethod::Fixed(scalar(line, key, v)?)
                    }
                }
                "localize.min_area" => p.localize.min_area = scalar(line, key, v)?,
                "localize.max_area" => p.localize.max_area = scalar(line, key, v)?,
                "localize.open_radius" => p.localize.open_radius = scalar(line, key, v)?,
                "dgsb.k" => p.dgsb.k = scalar(line, key, v)?,
                "dgsb.m" => p.dgsb.m = if v == "auto" { None } else { Some(scalar(line, key, v)?) },
                "dgsb.epsilon" => p.dgsb.epsilon = scalar(line, key, v)?,
                "dgsb.diff_epochs" => p.dgsb.diff_epochs = scalar(line, key, v)?,
                "incdp.t" => p.incdp.t = scalar(line, key, v)?,
                "incdp.gamma" => p.incdp.gamma = scalar(line, key, v)?,
                "incdp.lambda" => p.incdp.lambda = scalar(line, key, v)?,
                "incdp.center_rate" => p.incdp.center_rate = scalar(line, key, v)?,
                "incdp.mix_beta" => p.incdp.mix_beta = scalar(line, key, v)?,
                "incdp.mix_prob" => p.incdp.mix_prob = scalar(line, key, v)?,
                "incdp.mix_sorted" => p.incdp.mix_sorted = boolean(line, key, v)?,
                "incdp.weight_min" => p.incdp.weight_clip.0 = scalar(line, key, v)?,
                "incdp.weight_max" => p.incdp.weight_clip.1 = scalar(line, key, v)?,
                "train.lr" => p.train.lr = scalar(line, key, v)?,
                "train.momentum" => p.train.momentum = scalar(line, key, v)?,
                "train.weight_decay" => p.train.weight_decay = scalar(line, key, v)?,
                "train.batch_size" => p.train.batch_size = scalar(line, key, v)?,
                "train.epochs" => p.train.epochs = scalar(line, key, v)?,
                "train.parent_epochs" => p.train.parent_epochs = scalar(line, key, v)?,
                "train.channels" => p.train.channels = list(line, key, v)?,
                "train.positive_radius" => p.train.positive_radius = scalar(line, key, v)?,
                "eval.match_radius" => p.match_radius = scalar(line, key, v)?,
                "eval.score_threshold" => p.score_threshold = scalar(line, key, v)?,
                "ablation.dgsb" => p.flags.dgsb = boolean(line, key, v)?,
                "ablation.se" => p.flags.se = boolean(line, key, v)?,
                "ablation.incdp" => p.flags.incdp = boolean(line, key, v)?,
                "synth.images" => s.images = scalar(line, key, v)?,
                "synth.test_images" => s.test_images = scalar(line, key, v)?,
                "synth.width" => s.width = scalar(line, key, v)?,
                "synth.height" => s.height = scalar(line, key, v)?,
                "synth.normal_nuclei" => s.normal_nuclei = scalar(line, key, v)?,
                "synth.mitoses" => s.mitoses = scalar(line, key, v)?,
                "synth.impostors" => s.impostors = scalar(line, key, v)?,
                "synth.radius_min" => s.radius.0 = scalar(line, key, v)?,
                "synth.radius_max" => s.radius.1 = scalar(line, key, v)?,
                "synth.min_separation" => s.min_separation = scalar(line, key, v)?,
                "synth.low_intensity_fraction" => s.low_intensity_fraction = scalar(line, key, v)?,
                "synth.stain_jitter" => s.stain_jitter = scalar(line, key, v)?,
                "synth.gain_jitter" => s.gain_jitter = scalar(line, key, v)?,
                "synth.noise" => s.noise = scalar(line, key, v)?,
                _ => return Err(err(line, format!("unknown key `{key}`"))),
            }
        }
        c.pipeline.stain.source = StainMatrix::from_he(h, e).map_err(|x| err(stain_line, x.to_string()))?;
        c.validate().map_err(|x| match x {
            Error::Config { .. } => x,
            other => err(0, other.to_string()),
        })?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let c = Config::default();
        let back: Config = c.to_text().parse().unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_and_errors() {
        let c: Config = "seed = 3\ntrain.channels = 8, 16, 32\ndgsb.m = 4 # fixed\nlocalize.threshold = 0.3\n"
            .parse()
            .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.synth.seed, 3);
        assert_eq!(c.pipeline.train.channels, vec![8, 16, 32]);
        assert_eq!(c.pipeline.dgsb.m, Some(4));
        assert_eq!(c.pipeline.localize.threshold, ThresholdMethod::Fixed(0.3));
        assert!(matches!("bogus = 1".parse::<Config>(), Err(Error::Config { line: 1, .. })));
        assert!(matches!("\ntrain.lr = fast".parse::<Config>(), Err(Error::Config { line: 2, .. })));
        assert!("eval.score_threshold = 1.5".parse::<Config>().is_err());
    }

    #[test]
    fn domains_replace_defaults() {
        let c: Config = "stain.domains.x = 0.65, 0.70, 0.29, 0.07, 0.99, 0.11, 0.27, 0.57, 0.78"
            .parse()
            .unwrap();
        assert_eq!(c.pipeline.stain.domains.len(), 1);
        assert_eq!(c.pipeline.stain.domains[0].0, "x");
    }
}
