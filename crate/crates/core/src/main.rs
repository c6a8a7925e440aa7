use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vireid::checkpoint::Checkpoint;
use vireid::config::{ExperimentConfig, Modality, Platform, CONFIG_KEYS};
use vireid::data::{generate_synthetic, validate_manifest, FrameStore, Manifest, Split, SynthSpec, MANIFEST_FILE};
use vireid::error::{ReidError, Result};
use vireid::eval::{evaluate, select_stream_weights, EvalOptions, ProtocolSpec};
use vireid::fusion::StreamWeights;
use vireid::selftest;
use vireid::trainer::{ablate, default_eval_split, load_model, train, TrainOptions, FINAL_CHECKPOINT};

fn config_help() -> String {
    let mut s = String::from("Config keys (set in a TOML file or with --set key=value):\n");
    for (key, default, meaning) in CONFIG_KEYS {
        s += &format!("  {key:<26} {default:<24} {meaning}\n");
    }
    s
}

#[derive(Parser)]
#[command(name = "vireid", version, about = "Cross-platform visible-infrared video person re-identification")]
#[command(after_help = config_help())]
struct Cli {
    /// Output root; run outputs go here unless --out is given.
    #[arg(long, global = true, env = "VIREID_OUT", default_value = "runs")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic tracklet dataset with a manifest.
    GenData(GenArgs),
    /// Train a model and write the step log and checkpoints.
    #[command(after_help = config_help())]
    Train(TrainArgs),
    /// Evaluate a checkpoint on query/gallery protocols.
    Eval(EvalArgs),
    /// Train and evaluate every stream subset.
    #[command(after_help = config_help())]
    Ablate(AblateArgs),
    /// Run the oracle and property checks.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    ids: usize,
    /// Identities (taken from the end) placed in the test split.
    #[arg(long, default_value_t = 0)]
    test_ids: usize,
    #[arg(long, default_value_t = 0)]
    distractors: usize,
    #[arg(long, default_value_t = 2)]
    tracklets_per_cell: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    /// Restrict to one platform (aerial or ground).
    #[arg(long)]
    platform: Option<Platform>,
    /// Restrict to one modality (visible or infrared).
    #[arg(long)]
    modality: Option<Modality>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set epochs=5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => vireid::config::load_config_with_overrides(p, &self.overrides),
            None => ExperimentConfig::from_str_with_overrides("", &self.overrides),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory holding manifest.tsv.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint written with the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many steps.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file (default: <out>/final.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Protocol such as ground-to-aerial:V2I or aerial-to-ground:I2V+distractors;
    /// repeatable. Default: the eight standard protocols.
    #[arg(long = "protocol")]
    protocols: Vec<ProtocolSpec>,
    /// Split holding queries and galleries (default: test if present, else train).
    #[arg(long)]
    split: Option<Split>,
    /// Choose per-stream fusion weights on a training-split protocol first.
    #[arg(long)]
    select_weights: bool,
    #[arg(long, default_value = "ground-to-ground:V2I")]
    validation: ProtocolSpec,
    /// Fixed fusion weights `w1,w2,w3`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    weights: Option<Vec<f64>>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reported protocols; repeatable. Default: the eight standard protocols.
    #[arg(long = "protocol")]
    protocols: Vec<ProtocolSpec>,
    /// Protocol used to choose each subset's fusion weights.
    #[arg(long, default_value = "ground-to-ground:V2I")]
    validation: ProtocolSpec,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_manifest(dir: &Path) -> Result<Manifest> {
    let manifest = Manifest::load(&dir.join(MANIFEST_FILE))?;
    let report = validate_manifest(&manifest, true);
    if !report.is_valid() {
        return Err(ReidError::Data(format!("{} manifest violations, first: {}", report.violations.len(), report.violations[0])));
    }
    Ok(manifest)
}

/// Standard protocols, dropping distractors when the manifest has none.
fn default_protocols(manifest: &Manifest) -> Vec<ProtocolSpec> {
    let has = manifest.has_split(Split::Distractor);
    ProtocolSpec::standard()
        .into_iter()
        .map(|p| ProtocolSpec { include_distractors: p.include_distractors && has, ..p })
        .collect()
}

fn gen_data(root: &Path, a: &GenArgs) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| root.join("data"));
    let spec = SynthSpec {
        num_identities: a.ids,
        num_test_identities: a.test_ids,
        platforms: a.platform.map_or(Platform::ALL.to_vec(), |p| vec![p]),
        modalities: a.modality.map_or(Modality::ALL.to_vec(), |m| vec![m]),
        tracklets_per_cell: a.tracklets_per_cell,
        frames_per_tracklet: a.frames,
        image_size: [a.height, a.width],
        num_distractors: a.distractors,
    };
    let manifest = generate_synthetic(&spec, a.seed, &out)?;
    print!("{}", validate_manifest(&manifest, false));
    println!("wrote {} tracklets to {}", manifest.len(), out.display());
    Ok(())
}

fn run_train(root: &Path, a: &TrainArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let manifest = load_manifest(&a.data)?;
    let out = a.out.clone().unwrap_or_else(|| root.to_path_buf());
    let opts = TrainOptions { out_dir: Some(out.clone()), resume: a.resume.clone(), max_steps: a.max_steps };
    let outcome = train(&cfg, &manifest, &opts)?;
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        println!("steps {}..={}: total loss {:.4} -> {:.4}", first.step, last.step, first.losses.total, last.losses.total);
    }
    println!("checkpoint {}", out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn run_eval(root: &Path, a: &EvalArgs) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| root.to_path_buf());
    let ck_path = a.checkpoint.clone().unwrap_or_else(|| out.join(FINAL_CHECKPOINT));
    let ck = Checkpoint::load(&ck_path)?;
    let model = load_model(&ck)?;
    let manifest = load_manifest(&a.data)?;
    let specs = if a.protocols.is_empty() { default_protocols(&manifest) } else { a.protocols.clone() };
    let mut frames = FrameStore::new(model.cfg.image_size);
    let weights: StreamWeights = if a.select_weights {
        let (w, scored) = select_stream_weights(&model, &mut frames, &manifest, &a.validation, Split::Train, model.cfg.camera_filter)?;
        for (g, map) in scored {
            println!("weights {g:?}: validation mAP {:.4}", map);
        }
        println!("selected weights {w:?}");
        w
    } else if let Some(w) = &a.weights {
        [w[0], w[1], w[2]]
    } else {
        ck.stream_weights
    };
    let opts = EvalOptions {
        split: a.split.unwrap_or_else(|| default_eval_split(&manifest)),
        weights,
        camera_filter: model.cfg.camera_filter,
    };
    let table = evaluate(&model, &mut frames, &manifest, &specs, &opts)?;
    table.write(&out, "results")?;
    print!("{}", table.render());
    println!("results in {}", out.join("results.csv").display());
    Ok(())
}

fn run_ablate(root: &Path, a: &AblateArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let manifest = load_manifest(&a.data)?;
    let out = a.out.clone().unwrap_or_else(|| root.join("ablation"));
    let specs = if a.protocols.is_empty() { default_protocols(&manifest) } else { a.protocols.clone() };
    let opts = TrainOptions { out_dir: Some(out.clone()), resume: None, max_steps: a.max_steps };
    let table = ablate(&cfg, &manifest, &specs, &a.validation, &opts)?;
    table.write(&out, "ablation")?;
    print!("{}", table.render());
    println!("ablation table in {}", out.join("ablation.csv").display());
    Ok(())
}

fn run_selftest(a: &SelftestArgs) -> Result<bool> {
    let results = selftest::run_all(a.seed);
    for r in &results {
        println!("{}", r.line());
    }
    Ok(results.iter().all(|r| r.passed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = cli.out_root.as_path();
    let outcome = match &cli.command {
        Command::GenData(a) => gen_data(root, a).map(|_| true),
        Command::Train(a) => run_train(root, a).map(|_| true),
        Command::Eval(a) => run_eval(root, a).map(|_| true),
        Command::Ablate(a) => run_ablate(root, a).map(|_| true),
        Command::Selftest(a) => run_selftest(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
