//! Command-line parsing. Each subcommand's flags overlay the
//! [`RunConfig`] loaded from `--config`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fccdn_core::losses::LossVariant;
use fccdn_core::NetworkConfig;

use crate::commands;
use crate::config::{RunConfig, OUTPUT_ROOT_ENV};
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "fccdn", version, about = "Bitemporal change detection: data preparation, training, evaluation and prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tile a directory of image triples into a dataset with a manifest and statistics.
    Prepare(PrepareArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled split.
    Eval(EvalArgs),
    /// Write predicted masks for a split.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (dataset or run directory).
    #[arg(long, visible_alias = "run-dir")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory with t1/, t2/ and label/ subdirectories.
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub overlap: Option<usize>,
    /// Train:validation:test ratio, e.g. 7:1:2.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Model {
    /// DED backbone with NL-FPN, dense fusion and SSL heads.
    Fccdn,
    /// Dual encoder-decoder only.
    Ded,
    /// Fully convolutional Siamese baseline.
    Fcs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    BinarySsl,
    Contrastive,
    MulticlassSsl,
    None,
}

impl From<Variant> for LossVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::BinarySsl => LossVariant::BinarySsl,
            Variant::Contrastive => LossVariant::Contrastive,
            Variant::MulticlassSsl => LossVariant::MulticlassSsl,
            Variant::None => LossVariant::None,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Continue from a training snapshot (e.g. last.ckpt).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Architecture preset; replaces the [network] section.
    #[arg(long, value_enum)]
    pub model: Option<Model>,
    #[arg(long)]
    pub width_multiplier: Option<f64>,
    #[arg(long, value_enum)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub validation_start_epoch: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Switch every augmentation off.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args)]
pub struct ModelInput {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// train, validation, test or all.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub input: ModelInput,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub input: ModelInput,
    /// Predict over tiles of this size instead of whole images.
    #[arg(long)]
    pub tile: Option<usize>,
    #[arg(long)]
    pub overlap: Option<usize>,
    /// Also write {id}_errors.png for labelled pairs.
    #[arg(long)]
    pub render_errors: bool,
}

fn set<T: Clone>(dst: &mut T, v: &Option<T>) {
    if let Some(v) = v {
        *dst = v.clone();
    }
}

fn set_opt<T: Clone>(dst: &mut Option<T>, v: &Option<T>) {
    if v.is_some() {
        *dst = v.clone();
    }
}

impl Common {
    fn apply(&self, c: &mut RunConfig) {
        set_opt(&mut c.paths.out, &self.out);
    }
}

impl ModelInput {
    fn apply(&self, c: &mut RunConfig) {
        set_opt(&mut c.paths.manifest, &self.manifest);
        set_opt(&mut c.paths.stats, &self.stats);
        set_opt(&mut c.paths.checkpoint, &self.checkpoint);
        set(&mut c.inference.split, &self.split);
        set(&mut c.inference.batch_size, &self.batch_size);
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Prepare(a) => &a.common,
            Command::Synth(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::Predict(a) => &a.common,
        }
    }

    /// Defaults, then the config file, then the flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let common = self.common();
        let mut c = RunConfig::load(common.config.as_deref())?;
        common.apply(&mut c);
        match self {
            Command::Prepare(a) => {
                set_opt(&mut c.paths.source, &a.source);
                set(&mut c.prepare.size, &a.size);
                set(&mut c.prepare.overlap, &a.overlap);
                set(&mut c.prepare.split, &a.split);
                set(&mut c.prepare.seed, &a.seed);
            }
            Command::Synth(a) => {
                set(&mut c.synth.n, &a.n);
                set(&mut c.synth.size, &a.size);
                set(&mut c.synth.seed, &a.seed);
                set(&mut c.synth.split, &a.split);
            }
            Command::Train(a) => {
                set_opt(&mut c.paths.manifest, &a.manifest);
                set_opt(&mut c.paths.stats, &a.stats);
                set_opt(&mut c.paths.resume, &a.resume);
                if let Some(model) = a.model {
                    let w = c.network.width_multiplier;
                    c.network = match model {
                        Model::Fccdn => NetworkConfig::fccdn(w),
                        Model::Ded => NetworkConfig::ded(w),
                        Model::Fcs => NetworkConfig::fcs(w),
                    };
                    if model != Model::Fccdn && a.variant.is_none() {
                        c.train.loss_variant = LossVariant::None;
                    }
                }
                set(&mut c.network.width_multiplier, &a.width_multiplier);
                if let Some(v) = a.variant {
                    c.train.loss_variant = v.into();
                }
                set(&mut c.train.batch_size, &a.batch_size);
                set(&mut c.train.learning_rate, &a.lr);
                set(&mut c.train.weight_decay, &a.weight_decay);
                set(&mut c.train.max_epochs, &a.max_epochs);
                if a.max_steps.is_some() {
                    c.train.max_steps = a.max_steps;
                }
                set(&mut c.train.validation_start_epoch, &a.validation_start_epoch);
                set(&mut c.train.plateau_patience_epochs, &a.patience);
                set(&mut c.train.seed, &a.seed);
                if a.no_augment {
                    c.augment = fccdn_core::data::AugmentationConfig::none();
                }
            }
            Command::Eval(a) => a.input.apply(&mut c),
            Command::Predict(a) => {
                a.input.apply(&mut c);
                set_opt(&mut c.inference.tile, &a.tile);
                set(&mut c.inference.overlap, &a.overlap);
                if a.render_errors {
                    c.inference.render_errors = true;
                }
            }
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
        c.resolve_output_root(root.as_deref());
        c.validate()?;
        Ok(c)
    }
}

/// Runs one parsed command.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.command.resolve()?;
    match &cli.command {
        Command::Prepare(_) => commands::cmd_prepare(&cfg),
        Command::Synth(_) => commands::cmd_synth(&cfg),
        Command::Train(_) => commands::cmd_train(&cfg).map(|_| ()),
        Command::Eval(_) => commands::cmd_eval(&cfg).map(|_| ()),
        Command::Predict(_) => commands::cmd_predict(&cfg).map(|_| ()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("fccdn").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_the_file_which_overrides_defaults() {
        let d = tempfile::tempdir().unwrap();
        let f = d.path().join("c.toml");
        std::fs::write(&f, "[train]\nbatch_size = 4\nseed = 3\n[paths]\nout = \"/tmp/x\"\n").unwrap();
        let cli = parse(&["train", "--config", f.to_str().unwrap(), "--seed", "9"]);
        let c = cli.command.resolve().unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.train.learning_rate, 0.002);
        assert_eq!(c.paths.out.as_deref(), Some(std::path::Path::new("/tmp/x")));
    }

    #[test]
    fn model_presets() {
        let c = parse(&["train", "--model", "fcs", "--width-multiplier", "0.25"])
            .command
            .resolve()
            .unwrap();
        assert_eq!(c.network, NetworkConfig::fcs(0.25));
        assert_eq!(c.train.loss_variant, LossVariant::None);
    }

    #[test]
    fn ssl_variant_on_fcs_is_a_usage_error() {
        let e = parse(&["train", "--model", "fcs", "--variant", "binary-ssl"])
            .command
            .resolve();
        // FCS has no segmentation heads to constrain; the training loop rejects it,
        // the configuration itself is valid.
        assert!(e.is_ok());
        let bad = parse(&["predict", "--tile", "40"]).command.resolve().unwrap_err();
        assert_eq!(bad.exit_code(), 2);
    }
}
