//! Batch front end: every subcommand reads files, runs one pipeline stage and
//! writes its result. Outputs depend only on the inputs, the configuration
//! and the seed.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mitdet_core::data::{write_png, Config, Dataset, Label, Split};
use mitdet_core::dgsb::{embed, DefaultEmbedder};
use mitdet_core::localize::{crop_patches, extract_candidates};
use mitdet_core::pipeline::{
    build_manifest, collect_features, detect_dataset, evaluate, plot_features, run_ablation, train_on_manifest,
    AblationRow, DetectionResult, EpochLoss, Flags, Manifest, TrainedModel,
};
use mitdet_core::stain::hematoxylin_channel;
use mitdet_core::{NucleusCandidate, PipelineConfig};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "mitdet", version, about = "Mitosis detection from point annotations")]
struct Cli {
    /// key = value configuration file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn indices(self, ds: &Dataset) -> Vec<usize> {
        match self {
            SplitArg::Train => ds.indices(Split::Train),
            SplitArg::Test => ds.indices(Split::Test),
            SplitArg::All => (0..ds.len()).collect(),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write nucleus candidates of every image as JSON.
    Localize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the balanced training manifest of the train split.
    Build {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the classifier and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Manifest from `build`; built on the fly when absent.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss history as CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Detect mitoses with a trained checkpoint.
    Detect {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detections against the annotated mitoses.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate flag combinations with one seed.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated variant names such as `baseline,dgsb+se+incdp`,
        /// or `all` for the eight combinations.
        #[arg(long, default_value = "baseline,dgsb+se+incdp")]
        variants: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scatter plot of candidate features, positives against negatives.
    PlotFeatures {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint whose pooled features are plotted; the training-free
        /// embedder is used without one.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long, default_value_t = 512)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 2 on a usage error, 1 when the command fails.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let cfg = match &cli.config {
        Some(path) => Config::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => Config::default(),
    };
    let cfg = match cli.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Serialize)]
struct ImageCandidates<'a> {
    image_id: &'a str,
    candidates: Vec<NucleusCandidate>,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let seed = cfg.seed;
    let pc = &cfg.pipeline;
    match cli.command {
        Command::Synth { out } => {
            let ds = mitdet_core::data::generate_synthetic(&cfg.synth)?;
            ds.save(&out)?;
            eprintln!("wrote {} images to {}", ds.len(), out.display());
        }
        Command::Localize { data, split, out } => {
            let ds = load_dataset(&data)?;
            let rows: Vec<ImageCandidates> = split
                .indices(&ds)
                .into_iter()
                .map(|i| ImageCandidates {
                    image_id: ds.id(i),
                    candidates: extract_candidates(&hematoxylin_channel(&ds.images[i], &pc.stain.source), &pc.localize),
                })
                .collect();
            write_json(&out, &rows)?;
        }
        Command::Build { data, out } => {
            let ds = load_dataset(&data)?;
            let manifest = build_manifest(&ds, pc, seed)?;
            eprintln!("{:?}", manifest.stats);
            write_json(&out, &manifest)?;
        }
        Command::Train {
            data,
            manifest,
            out,
            history,
        } => {
            let ds = load_dataset(&data)?;
            let manifest: Manifest = match manifest {
                Some(path) => read_json(&path)?,
                None => build_manifest(&ds, pc, seed)?,
            };
            let trained = train_on_manifest(&ds, &manifest, pc, seed)?;
            trained.model.save(&out)?;
            if let Some(path) = history {
                std::fs::write(&path, history_csv(&trained.history))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Detect {
            data,
            model,
            split,
            out,
        } => {
            let ds = load_dataset(&data)?;
            let model = TrainedModel::load(&model)?;
            let results = match split {
                SplitArg::Train => detect_dataset(&ds, Split::Train, &model, pc)?,
                SplitArg::Test => detect_dataset(&ds, Split::Test, &model, pc)?,
                SplitArg::All => {
                    let mut r = detect_dataset(&ds, Split::Train, &model, pc)?;
                    r.extend(detect_dataset(&ds, Split::Test, &model, pc)?);
                    r
                }
            };
            write_json(&out, &results)?;
        }
        Command::Eval { data, detections, out } => {
            let ds = load_dataset(&data)?;
            let results: Vec<DetectionResult> = read_json(&detections)?;
            let (metrics, _) = evaluate(&ds, &results, pc.match_radius)?;
            println!(
                "precision {:.4}  recall {:.4}  f1 {:.4}  tp {}  fp {}  fn {}",
                metrics.precision, metrics.recall, metrics.f1, metrics.tp, metrics.fp, metrics.fn_
            );
            if let Some(path) = out {
                write_json(&path, &metrics)?;
            }
        }
        Command::Ablate { data, variants, out } => {
            let ds = load_dataset(&data)?;
            let flags = parse_variants(&variants)?;
            let rows = run_ablation(&ds, &flags, pc, seed)?;
            print!("{}", ablation_table(&rows));
            if let Some(path) = out {
                write_json(&path, &rows)?;
            }
        }
        Command::PlotFeatures {
            data,
            model,
            split,
            size,
            out,
        } => {
            let ds = load_dataset(&data)?;
            let model = model.map(|p| TrainedModel::load(&p)).transpose()?;
            let img = feature_plot(&ds, split, model.as_ref(), pc, size)?;
            write_png(&img, &out)?;
        }
    }
    Ok(())
}

/// `epoch,L_focal_p,L_center_p,L_focal_c,L_center_c,total`; child columns
/// are empty while the child head is inactive.
pub fn history_csv(history: &[EpochLoss]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("epoch,L_focal_p,L_center_p,L_focal_c,L_center_c,total\n");
    for h in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            h.epoch,
            h.focal_p,
            h.center_p,
            opt(h.focal_c),
            opt(h.center_c),
            h.total
        );
    }
    out
}

fn parse_variants(text: &str) -> Result<Vec<Flags>> {
    if text.trim() == "all" {
        return Ok(Flags::all_combinations());
    }
    text.split(',')
        .map(|name| {
            let name = name.trim();
            if name == "baseline" {
                return Ok(Flags::ALL_OFF);
            }
            let mut f = Flags::ALL_OFF;
            for part in name.split('+') {
                match part {
                    "dgsb" => f.dgsb = true,
                    "se" => f.se = true,
                    "incdp" => f.incdp = true,
                    _ => bail!("unknown variant component `{part}` in `{name}`"),
                }
            }
            Ok(f)
        })
        .collect()
}

/// Plain-text rendering of ablation rows.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<18} {:>5} {:>5} {:>6} {:>9} {:>7} {:>7} {:>4} {:>4} {:>4}\n",
        "model", "DGSB", "SE", "InCDP", "precision", "recall", "f1", "tp", "fp", "fn"
    );
    let mark = |b: bool| if b { "x" } else { "" };
    for r in rows {
        let _ = writeln!(
            out,
            "{:<18} {:>5} {:>5} {:>6} {:>9.4} {:>7.4} {:>7.4} {:>4} {:>4} {:>4}",
            r.name,
            mark(r.flags.dgsb),
            mark(r.flags.se),
            mark(r.flags.incdp),
            r.precision,
            r.recall,
            r.f1,
            r.tp,
            r.fp,
            r.fn_
        );
    }
    out
}

fn feature_plot(
    ds: &Dataset,
    split: SplitArg,
    model: Option<&TrainedModel>,
    cfg: &PipelineConfig,
    size: usize,
) -> Result<mitdet_core::RgbImage> {
    let mut patches = Vec::new();
    let mut labels = Vec::new();
    for i in split.indices(ds) {
        let img = &ds.images[i];
        let cands = extract_candidates(&hematoxylin_channel(img, &cfg.stain.source), &cfg.localize);
        let mitoses = ds.points(i, Label::Mitosis);
        for (c, p) in cands.iter().zip(crop_patches(img, ds.id(i), &cands, cfg.patch_size)) {
            let positive = mitoses.iter().any(|m| m.distance(&c.point()) <= cfg.train.positive_radius);
            labels.push(u8::from(positive));
            patches.push(p);
        }
    }
    let features = match model {
        Some(m) => {
            let pixels: Vec<_> = patches.into_iter().map(|p| p.pixels).collect();
            collect_features(&m.classifier, &pixels)
        }
        None => {
            let embedder = DefaultEmbedder {
                stain: cfg.stain.source.clone(),
                ..Default::default()
            };
            embed(&patches, &embedder)?
        }
    };
    Ok(plot_features(&features, &labels, size)?)
}
