//! Command-line front end.
//!
//! Every subcommand reads one [`RunConfig`] resolved from three layers —
//! built-in defaults, an optional `--config` JSON file, then flags — and
//! writes its artifacts under one output root. The root comes from `--out`,
//! falling back to the `STYLECONV_OUT` environment variable, the config
//! file, and finally `./out`.
//!
//! Per-component seeds are never set directly: after the layers merge, the
//! corpus / model-init / training / grader seeds are derived from the single
//! root `seed` so the manifest pins the whole run to one number.
//!
//! After a successful command the root's `experiment.json` is regenerated
//! (root seed, resolved config, sha256 of every artifact) and the command's
//! wall time is folded into `timing.json`. Both files stay outside the
//! hashes: reruns of the same command line are byte-identical.
//!
//! Exit codes: 0 success, 1 failed precondition or runtime error, 2 usage.

mod commands;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attack::AttackConfig;
use crate::corpus::{CorpusSpec, StyleSpec};
use crate::harness::{
    collect_artifact_hashes, write_experiment_manifest, write_timing, ExperimentManifest,
    GraderConfig, TimingLog,
};
use crate::probe::ProbeConfig;
use crate::rng::stream;
use crate::segcore::{ArchConfig, TapPoint, TrainConfig};
use crate::styleops::InterpMode;

/// Default output root when neither flag, env var, nor config names one.
pub const DEFAULT_OUT: &str = "out";

/// Environment variable consulted for the output root when `--out` is absent.
pub const OUT_ENV: &str = "STYLECONV_OUT";

/// Two-style toy corpus: a fine renderer and a coarse one (dilation 2,
/// merge distance 6), each carrying a faint luminance grating so the origin
/// signal survives into pixel statistics.
pub fn toy_corpus_spec(n_images: usize, image_size: usize, seed: u64) -> CorpusSpec {
    CorpusSpec {
        n_images,
        image_size,
        styles: vec![
            StyleSpec::fine("fine").with_marker(0.01, 0.0),
            StyleSpec::coarse("coarse", 2, 6.0).with_marker(0.01, 90.0),
        ],
        seed,
        train_frac: 0.7,
        val_frac: 0.15,
    }
}

/// The one configuration object every subcommand reads.
///
/// All fields have defaults sized for the toy preset, so an empty config
/// file (or none at all) is valid. Unknown keys are rejected — a typo in a
/// config file fails loudly instead of silently using the default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; all component seeds derive from it after merging.
    pub seed: u64,
    /// Output root for artifacts, manifest and timing.
    pub out: PathBuf,
    /// Corpus location override; default `<out>/corpus`.
    pub corpus_dir: Option<PathBuf>,
    /// Model checkpoint override; default `<out>/models/gen.ckpt`.
    pub model: Option<PathBuf>,
    /// Probe checkpoint override; default `<out>/probe/probe.json`.
    pub probe: Option<PathBuf>,
    pub corpus: CorpusSpec,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub probe_train: ProbeConfig,
    /// Tap the probe attaches to.
    pub tap: TapPoint,
    pub attack: AttackConfig,
    /// ε grid for `attack-table`.
    pub eps_grid: Vec<f32>,
    /// Step-count grid for `attack-table`.
    pub steps_grid: Vec<usize>,
    /// Mixing weights for `interpolate`.
    pub alphas: Vec<f64>,
    pub interp_mode: InterpMode,
    /// Monte-Carlo draws for `uncertainty`.
    pub n_a: usize,
    /// Fine-style fraction of the distillation training mix.
    pub fine_frac: f64,
    pub grader: GraderConfig,
    /// Slack the generalist gets in the style-adoption check.
    pub adoption_margin: f64,
    /// Cap on evaluation-set size for the batch commands.
    pub limit: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from(DEFAULT_OUT),
            corpus_dir: None,
            model: None,
            probe: None,
            corpus: toy_corpus_spec(24, 48, 0),
            arch: ArchConfig {
                in_channels: 3,
                n_classes: 5,
                stages: 2,
                width: 8,
                seed: 0,
            },
            train: TrainConfig::default(),
            probe_train: ProbeConfig::default(),
            tap: TapPoint::Bottleneck,
            attack: AttackConfig::default(),
            eps_grid: vec![2e-3, 5e-3, 1e-2],
            steps_grid: vec![1, 5, 10],
            alphas: (0..=10).map(|i| i as f64 / 10.0).collect(),
            interp_mode: InterpMode::InputSpace,
            n_a: 20,
            fine_frac: 0.05,
            grader: GraderConfig::default(),
            adoption_margin: 0.02,
            limit: None,
        }
    }
}

/// Overlay `over` onto `base`: objects merge key-by-key, everything else
/// (arrays included) replaces wholesale.
fn deep_merge(base: &mut Value, over: &Value) {
    if let (Value::Object(b), Value::Object(o)) = (&mut *base, over) {
        for (k, v) in o {
            deep_merge(b.entry(k.clone()).or_insert(Value::Null), v);
        }
        return;
    }
    *base = over.clone();
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments — exits 2, like clap's own parse failures.
    #[error("{0}")]
    Usage(String),
    /// Missing artifact or unusable input — exits 1.
    #[error("{0}")]
    Precondition(String),
    /// Anything that went wrong past the preconditions — exits 1.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

macro_rules! failed_from {
    ($($t:ty),* $(,)?) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Failed(e.to_string())
            }
        }
    )*};
}

failed_from!(
    crate::corpus::CorpusError,
    crate::segcore::SegError,
    crate::segcore::CheckpointError,
    crate::probe::ProbeError,
    crate::attack::AttackError,
    crate::styleops::StyleOpsError,
    crate::harness::HarnessError,
);

fn io_fail(path: &Path, e: std::io::Error) -> CliError {
    CliError::Failed(format!("{}: {e}", path.display()))
}

fn provenance() -> String {
    format!(
        "{} (git {}, {}, {}, {} profile)",
        env!("CARGO_PKG_VERSION"),
        env!("STYLECONV_GIT_SHA"),
        env!("STYLECONV_RUSTC"),
        env!("STYLECONV_TARGET"),
        env!("STYLECONV_PROFILE"),
    )
}

#[derive(Debug, Parser)]
#[command(
    name = "styleconv",
    version = provenance(),
    about = "Multi-style lesion segmentation: corpora, probes, conversions, audits",
    arg_required_else_help = true
)]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output root (overrides STYLECONV_OUT and the config file).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Root seed; every component seed derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Model checkpoint (default <out>/models/gen.ckpt).
    #[arg(long, global = true, value_name = "FILE")]
    model: Option<PathBuf>,

    /// Probe checkpoint (default <out>/probe/probe.json).
    #[arg(long, global = true, value_name = "FILE")]
    probe: Option<PathBuf>,

    /// Corpus directory (default <out>/corpus).
    #[arg(long, global = true, value_name = "DIR")]
    corpus_dir: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate the synthetic multi-style corpus.
    Synth {
        /// Number of scenes (each rendered once per style).
        #[arg(long)]
        n_images: Option<usize>,
        /// Square image side in pixels.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Per-style (S, Q) lesion statistics and KDE maps.
    Characterize {
        /// Lesion class 1–4; default all four.
        #[arg(long)]
        class: Option<u8>,
        /// KDE grid resolution per axis.
        #[arg(long, default_value_t = 64)]
        grid: usize,
        /// Fixed KDE bandwidth; default Scott's rule.
        #[arg(long)]
        bandwidth: Option<f64>,
    },
    /// Train a segmentation model on one or more styles.
    Train {
        /// Comma-separated style names, or "all" for a generalist.
        #[arg(long, default_value = "all")]
        styles: String,
        /// Checkpoint name; default "gen" for all styles, else the style names.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
    },
    /// Fit the origin probe on a frozen backbone tap.
    TrainProbe {
        /// Tap name: enc_1.., bottleneck, dec_1..
        #[arg(long)]
        tap: Option<String>,
    },
    /// Fit one probe per tap and report the accuracy profile.
    ProbeSweep,
    /// Attack success rates over an (ε, steps) grid.
    AttackTable {
        /// Comma-separated ε values.
        #[arg(long, value_name = "LIST")]
        eps: Option<String>,
        /// Comma-separated step counts.
        #[arg(long, value_name = "LIST")]
        steps: Option<String>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Convert one image toward a target style.
    Convert {
        /// Source style name or id; default the first style.
        #[arg(long)]
        style: Option<String>,
        /// Test-split index within the source style.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Target style name or id; default the other style when there are two.
        #[arg(long)]
        target: Option<String>,
        /// Convert an external PNG instead of a corpus sample.
        #[arg(long, value_name = "FILE")]
        image: Option<PathBuf>,
        #[arg(long)]
        eps: Option<f32>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        radius: Option<f32>,
    },
    /// Sweep the interpolation path between a sample and its conversion.
    Interpolate {
        #[arg(long)]
        style: Option<String>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        target: Option<String>,
        /// Comma-separated mixing weights in [0,1], ascending.
        #[arg(long, value_name = "LIST")]
        alphas: Option<String>,
        /// input-space | loss-space
        #[arg(long)]
        mode: Option<String>,
    },
    /// Monte-Carlo uncertainty map along random interpolations.
    Uncertainty {
        #[arg(long)]
        style: Option<String>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        target: Option<String>,
        /// Number of mixing-weight draws.
        #[arg(long)]
        n_a: Option<usize>,
    },
    /// Cross-style mIoU matrix (and adoption check when specialists exist).
    EvalMatrix {
        /// Comma-separated checkpoint paths; default gen + per-style models.
        #[arg(long, value_name = "LIST")]
        models: Option<String>,
    },
    /// Distillation experiment: skewed mix, then conversion gain on the rare style.
    DistillGain {
        #[arg(long)]
        fine_frac: Option<f64>,
        #[arg(long)]
        n_images: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Per-lesion AUC-PR with per-class conversion targets.
    MixedEval {
        /// Style whose test set is evaluated; default the first style.
        #[arg(long)]
        style: Option<String>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Severity-grader audit of converted images.
    Integrity {
        #[arg(long)]
        style: Option<String>,
        #[arg(long)]
        target: Option<String>,
        /// Grader training steps.
        #[arg(long)]
        grader_steps: Option<usize>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Probe and mask drift under benign perturbations vs the attack.
    Robustness {
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run every stage end-to-end under one root.
    Pipeline {
        #[arg(long, default_value = "toy")]
        preset: String,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Synth { .. } => "synth",
            Cmd::Characterize { .. } => "characterize",
            Cmd::Train { .. } => "train",
            Cmd::TrainProbe { .. } => "train-probe",
            Cmd::ProbeSweep => "probe-sweep",
            Cmd::AttackTable { .. } => "attack-table",
            Cmd::Convert { .. } => "convert",
            Cmd::Interpolate { .. } => "interpolate",
            Cmd::Uncertainty { .. } => "uncertainty",
            Cmd::EvalMatrix { .. } => "eval-matrix",
            Cmd::DistillGain { .. } => "distill-gain",
            Cmd::MixedEval { .. } => "mixed-eval",
            Cmd::Integrity { .. } => "integrity",
            Cmd::Robustness { .. } => "robustness",
            Cmd::Pipeline { .. } => "pipeline",
        }
    }
}

/// Resolve the three config layers and derive component seeds.
fn build_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut merged = serde_json::to_value(RunConfig::default()).expect("default serializes");
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Precondition(format!("config {}: {e}", path.display())))?;
        let over: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Precondition(format!("config {}: {e}", path.display())))?;
        deep_merge(&mut merged, &over);
    }
    let mut cfg: RunConfig = serde_json::from_value(merged)
        .map_err(|e| CliError::Precondition(format!("config: {e}")))?;

    if cli.out.is_none() {
        if let Some(root) = std::env::var_os(OUT_ENV) {
            if !root.is_empty() {
                cfg.out = PathBuf::from(root);
            }
        }
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &cli.model {
        cfg.model = Some(p.clone());
    }
    if let Some(p) = &cli.probe {
        cfg.probe = Some(p.clone());
    }
    if let Some(p) = &cli.corpus_dir {
        cfg.corpus_dir = Some(p.clone());
    }

    // One knob, many streams: the manifest records the derived values.
    cfg.corpus.seed = cfg.seed;
    cfg.arch.seed = stream(cfg.seed, "arch").gen();
    cfg.train.seed = stream(cfg.seed, "train").gen();
    cfg.grader.seed = stream(cfg.seed, "grader").gen();
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    let vals: Result<Vec<T>, _> = s.split(',').map(|p| p.trim().parse::<T>()).collect();
    match vals {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::Usage(format!("invalid {what} list '{s}'"))),
    }
}

/// Fold one wall-time entry into `<out>/timing.json`.
pub(crate) fn record_timing(out: &Path, name: &str, secs: f64) -> Result<(), CliError> {
    let path = out.join("timing.json");
    let mut log: TimingLog = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text)
            .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?,
        Err(_) => TimingLog::default(),
    };
    log.entries.insert(name.to_string(), secs);
    write_timing(&path, &log)?;
    Ok(())
}

/// Regenerate `<out>/experiment.json` from the resolved config and the
/// hashes of everything currently under the root.
fn write_run_manifest(cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| io_fail(&cfg.out, e))?;
    let manifest = ExperimentManifest {
        seed: cfg.seed,
        config: serde_json::to_value(cfg)
            .map_err(|e| CliError::Failed(format!("config serialization: {e}")))?,
        artifacts: collect_artifact_hashes(&cfg.out, &[])?,
    };
    write_experiment_manifest(&cfg.out.join("experiment.json"), &manifest)?;
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let started = Instant::now();
    let mut cfg = build_config(cli)?;

    match &cli.cmd {
        Cmd::Synth { n_images, size } => {
            if let Some(n) = n_images {
                cfg.corpus.n_images = *n;
            }
            if let Some(s) = size {
                cfg.corpus.image_size = *s;
            }
            commands::synth(&cfg)?;
        }
        Cmd::Characterize {
            class,
            grid,
            bandwidth,
        } => commands::characterize(&cfg, *class, *grid, *bandwidth)?,
        Cmd::Train {
            styles,
            name,
            steps,
            batch_size,
            lr,
        } => {
            if let Some(v) = steps {
                cfg.train.steps = *v;
            }
            if let Some(v) = batch_size {
                cfg.train.batch_size = *v;
            }
            if let Some(v) = lr {
                cfg.train.lr = *v;
            }
            commands::train_cmd(&cfg, styles, name.as_deref())?;
        }
        Cmd::TrainProbe { tap } => {
            if let Some(t) = tap {
                cfg.tap = TapPoint::parse(t)
                    .map_err(|e| CliError::Usage(format!("--tap: {e}")))?;
            }
            commands::train_probe_cmd(&cfg)?;
        }
        Cmd::ProbeSweep => commands::probe_sweep_cmd(&cfg)?,
        Cmd::AttackTable { eps, steps, limit } => {
            if let Some(s) = eps {
                cfg.eps_grid = parse_list(s, "ε")?;
            }
            if let Some(s) = steps {
                cfg.steps_grid = parse_list(s, "steps")?;
            }
            if limit.is_some() {
                cfg.limit = *limit;
            }
            commands::attack_table_cmd(&cfg)?;
        }
        Cmd::Convert {
            style,
            index,
            target,
            image,
            eps,
            steps,
            radius,
        } => {
            if let Some(v) = eps {
                cfg.attack.eps = *v;
            }
            if let Some(v) = steps {
                cfg.attack.steps = *v;
            }
            if let Some(v) = radius {
                cfg.attack.radius = *v;
            }
            commands::convert_cmd(
                &cfg,
                style.as_deref(),
                *index,
                target.as_deref(),
                image.as_deref(),
            )?;
        }
        Cmd::Interpolate {
            style,
            index,
            target,
            alphas,
            mode,
        } => {
            if let Some(s) = alphas {
                cfg.alphas = parse_list(s, "alpha")?;
            }
            if let Some(m) = mode {
                cfg.interp_mode = match m.as_str() {
                    "input-space" | "input" => InterpMode::InputSpace,
                    "loss-space" | "loss" => InterpMode::LossSpace,
                    other => {
                        return Err(CliError::Usage(format!(
                            "--mode: unknown mode '{other}' (input-space | loss-space)"
                        )))
                    }
                };
            }
            commands::interpolate_cmd(&cfg, style.as_deref(), *index, target.as_deref())?;
        }
        Cmd::Uncertainty {
            style,
            index,
            target,
            n_a,
        } => {
            if let Some(n) = n_a {
                cfg.n_a = *n;
            }
            commands::uncertainty_cmd(&cfg, style.as_deref(), *index, target.as_deref())?;
        }
        Cmd::EvalMatrix { models } => commands::eval_matrix_cmd(&cfg, models.as_deref())?,
        Cmd::DistillGain {
            fine_frac,
            n_images,
            size,
            steps,
        } => {
            if let Some(f) = fine_frac {
                cfg.fine_frac = *f;
            }
            if let Some(n) = n_images {
                cfg.corpus.n_images = *n;
            }
            if let Some(s) = size {
                cfg.corpus.image_size = *s;
            }
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
            commands::distill_gain_cmd(&cfg)?;
        }
        Cmd::MixedEval { style, limit } => {
            if limit.is_some() {
                cfg.limit = *limit;
            }
            commands::mixed_eval_cmd(&cfg, style.as_deref())?;
        }
        Cmd::Integrity {
            style,
            target,
            grader_steps,
            limit,
        } => {
            if let Some(s) = grader_steps {
                cfg.grader.steps = *s;
            }
            if limit.is_some() {
                cfg.limit = *limit;
            }
            commands::integrity_cmd(&cfg, style.as_deref(), target.as_deref())?;
        }
        Cmd::Robustness { limit } => {
            if limit.is_some() {
                cfg.limit = *limit;
            }
            commands::robustness_cmd(&cfg)?;
        }
        Cmd::Pipeline { preset } => commands::pipeline(&cfg, preset)?,
    }

    record_timing(&cfg.out, cli.cmd.name(), started.elapsed().as_secs_f64())?;
    write_run_manifest(&cfg)?;
    Ok(())
}

/// Parse and run; returns the process exit code instead of exiting so tests
/// can drive the CLI in-process.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
