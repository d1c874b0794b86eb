//! `shubert`: one binary driving the whole pipeline — mixture simulation,
//! pseudo-label construction, masked pre-training, checkpoint probing, and a
//! numerical gradient audit.
//!
//! Config precedence is defaults < file < flags, and the base seed must come
//! from the file or `--seed` — never the clock.  Every subcommand echoes the
//! effective config into its output directory and is byte-identical on rerun
//! with the same inputs; timestamps appear only in log lines on stderr.
//!
//! Exit codes: 0 success, 1 validation or threshold failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use shubert_core::config::Config;
use shubert_core::evalsuite::{gradcheck_config, run_loss_gradcheck, selectivity_probe, ProbeReport};
use shubert_core::mixsim::{read_manifest, simulate_corpus};
use shubert_core::model::{load_snapshot, snapshot_dtype, Model, Snapshot};
use shubert_core::quantizer::{assign_labels, build_labels, load_codebook};
use shubert_core::trainer::{load_training_set, Trainer};
use shubert_core::Real;

/// Steps per `Trainer::run` slice; only sets how often progress is logged.
const PROGRESS_CHUNK: u64 = 100;

#[derive(Parser)]
#[command(name = "shubert", version, about = "Selective speech pre-training pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a mixture corpus: manifest plus per-example audio.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output directory for the corpus.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a codebook on clean-target features and label a corpus, or label
    /// it with an existing codebook.
    Labels {
        #[command(flatten)]
        common: Common,
        /// Manifest of the corpus to label.
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for codebook and labels.
        #[arg(long)]
        out: PathBuf,
        /// Previous labels directory (or codebook file) whose codebook is
        /// reused instead of fitting a new one; required for held-out sets
        /// that must live in the training codebook's cluster space.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Masked-prediction pre-training on dual corrupted views.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Manifest of the training corpus.
        #[arg(long)]
        manifest: PathBuf,
        /// Labels directory (or labels file) for the same corpus.
        #[arg(long)]
        labels: PathBuf,
        /// Output directory for checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Total optimizer steps to reach (overrides the config).
        #[arg(long)]
        steps: Option<u64>,
        /// Train on view A only and drop the cross-correlation loss.
        #[arg(long)]
        one_path: bool,
        /// Checkpoint to resume from (must carry optimizer state).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: masked-prediction selectivity and view cosine.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Manifest of the evaluation corpus.
        #[arg(long)]
        manifest: PathBuf,
        /// Labels directory (or labels file) for the same corpus.
        #[arg(long)]
        labels: PathBuf,
        /// Checkpoint to evaluate, or the literal `random-init` for an
        /// untrained model (chance baseline).
        #[arg(long)]
        checkpoint: String,
        /// Output directory for the report.
        #[arg(long)]
        out: PathBuf,
        /// TOML file of report thresholds; any violation exits 1.
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
    /// Audit reverse-mode gradients of the full loss against central
    /// differences on a small model, in 64-bit.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Optional output directory for the report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config file; missing sections fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed for every derived stream; mandatory here or in the file.
    #[arg(long)]
    seed: Option<u64>,
}

/// Failure carrying its exit code: 1 validation/threshold, 2 usage.
struct Failure {
    code: u8,
    msg: String,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure { code: 1, msg: msg.into() }
}

impl From<shubert_core::Error> for Failure {
    fn from(e: shubert_core::Error) -> Failure {
        invalid(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = worker_cap().and_then(|_| match cli.cmd {
        Cmd::Simulate { common, out } => run_simulate(&common, &out),
        Cmd::Labels { common, manifest, out, labels } => run_labels(&common, &manifest, &out, labels.as_deref()),
        Cmd::Pretrain { common, manifest, labels, out, steps, one_path, checkpoint } => {
            run_pretrain(&common, &manifest, &labels, &out, steps, one_path, checkpoint.as_deref())
        }
        Cmd::Probe { common, manifest, labels, checkpoint, out, thresholds } => {
            run_probe(&common, &manifest, &labels, &checkpoint, &out, thresholds.as_deref())
        }
        Cmd::Gradcheck { common, out } => run_gradcheck(&common, out.as_deref()),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

/// `SHUBERT_NUM_THREADS` caps worker threads.  Every stage here is
/// single-threaded by design (bitwise determinism), so any valid cap is
/// honored as-is; the variable still has to parse.
fn worker_cap() -> Result<usize, Failure> {
    match std::env::var("SHUBERT_NUM_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(usage(format!("SHUBERT_NUM_THREADS: {e}"))),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(1),
            _ => Err(usage(format!("SHUBERT_NUM_THREADS must be a positive integer, got {s:?}"))),
        },
    }
}

/// defaults < file < `--seed`; the seed must appear in the file or the flag.
fn resolve_config(common: &Common) -> Result<Config, Failure> {
    let mut file_has_seed = false;
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
            // A loose parse first: the typed one fills `seed` from defaults,
            // hiding whether the file actually set it.
            let loose: toml::Value =
                toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            file_has_seed = loose.get("seed").is_some();
            Config::from_toml_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?
        }
        None => Config::default(),
    };
    match common.seed {
        Some(seed) => cfg.seed = seed,
        None if !file_has_seed => {
            return Err(usage("a seed is required: pass --seed or set `seed` in the config file"))
        }
        None => {}
    }
    Ok(cfg)
}

/// Every output directory records the exact configuration that produced it.
fn echo_config(cfg: &Config, dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| invalid(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml_string())
        .map_err(|e| invalid(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// Accept either a labels/codebook directory or the file itself.
fn file_in(path: &Path, name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(name)
    } else {
        path.to_path_buf()
    }
}

fn run_simulate(common: &Common, out: &Path) -> Result<(), Failure> {
    let cfg = resolve_config(common)?;
    let manifest = simulate_corpus(&cfg, out)?;
    echo_config(&cfg, out)?;
    let n = read_manifest(&manifest)?.len();
    eprintln!("wrote {} ({n} examples)", manifest.display());
    Ok(())
}

fn run_labels(common: &Common, manifest: &Path, out: &Path, reuse: Option<&Path>) -> Result<(), Failure> {
    let cfg = resolve_config(common)?;
    // Feature extraction for labeling always runs in f64: the codebook is
    // fitted once and must not depend on the training dtype.
    let model = Model::<f64>::init(&cfg)?;
    match reuse {
        Some(src) => {
            let codebook = load_codebook(&file_in(src, "codebook.bin"))?;
            let labels_path = assign_labels(&cfg, manifest, &model, &codebook, out)?;
            echo_config(&cfg, out)?;
            eprintln!("wrote {} (codebook reused from {})", labels_path.display(), src.display());
        }
        None => {
            let built = build_labels(&cfg, manifest, &model, out)?;
            echo_config(&cfg, out)?;
            eprintln!(
                "wrote {} (k = {}, label entropy {:.3} nats, {} fit frames)",
                built.labels_path.display(),
                cfg.quantizer.k,
                built.entropy,
                built.fit_frames_used
            );
        }
    }
    Ok(())
}

fn run_pretrain(
    common: &Common,
    manifest: &Path,
    labels: &Path,
    out: &Path,
    steps: Option<u64>,
    one_path: bool,
    checkpoint: Option<&Path>,
) -> Result<(), Failure> {
    let mut cfg = resolve_config(common)?;
    if let Some(s) = steps {
        cfg.trainer.steps = s;
    }
    if one_path {
        cfg.trainer.one_path = true;
    }
    match cfg.trainer.dtype.as_str() {
        "f32" => pretrain_impl::<f32>(&cfg, manifest, labels, out, checkpoint),
        _ => pretrain_impl::<f64>(&cfg, manifest, labels, out, checkpoint),
    }
}

fn pretrain_impl<S: Real>(
    cfg: &Config,
    manifest: &Path,
    labels: &Path,
    out: &Path,
    checkpoint: Option<&Path>,
) -> Result<(), Failure> {
    let data = load_training_set::<S>(manifest, &file_in(labels, "labels.jsonl"))?;
    let mut trainer = match checkpoint {
        Some(path) => Trainer::<S>::from_snapshot_file(cfg, path)?,
        None => Trainer::<S>::new(cfg)?,
    };
    echo_config(cfg, out)?;
    let target = cfg.trainer.steps;
    if trainer.step > target {
        return Err(invalid(format!(
            "checkpoint is at step {} but the target is {target}; raise --steps",
            trainer.step
        )));
    }
    let t0 = Instant::now();
    eprintln!(
        "training to step {target} from step {} ({} examples, batch {}, {})",
        trainer.step,
        data.len(),
        cfg.trainer.batch_size,
        S::DTYPE,
    );
    while trainer.step < target {
        let next = (trainer.step + PROGRESS_CHUNK).min(target);
        let written = trainer.run(&data, out, next)?;
        if let Some(m) = written.last() {
            eprintln!(
                "step {}/{target}  loss {:.4}  lr {:.2e}  [{:.1} s]",
                m.step,
                m.loss,
                m.lr,
                t0.elapsed().as_secs_f64()
            );
        }
    }
    eprintln!("wrote {}", out.join("checkpoints").join("final.bin").display());
    Ok(())
}

fn run_probe(
    common: &Common,
    manifest: &Path,
    labels: &Path,
    checkpoint: &str,
    out: &Path,
    thresholds: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = resolve_config(common)?;
    let report = if checkpoint == "random-init" {
        match cfg.trainer.dtype.as_str() {
            "f32" => probe_impl::<f32>(&cfg, manifest, labels, None)?,
            _ => probe_impl::<f64>(&cfg, manifest, labels, None)?,
        }
    } else {
        let path = Path::new(checkpoint);
        match snapshot_dtype(path)?.as_str() {
            "f32" => probe_impl::<f32>(&cfg, manifest, labels, Some(path))?,
            "f64" => probe_impl::<f64>(&cfg, manifest, labels, Some(path))?,
            other => return Err(invalid(format!("unsupported checkpoint dtype {other:?}"))),
        }
    };
    echo_config(&cfg, out)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| invalid(e.to_string()))?;
    let report_path = out.join("probe.json");
    std::fs::write(&report_path, format!("{json}\n"))
        .map_err(|e| invalid(format!("cannot write {}: {e}", report_path.display())))?;
    println!("{json}");
    eprintln!("wrote {}", report_path.display());
    if let Some(path) = thresholds {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read thresholds {}: {e}", path.display())))?;
        let th: Thresholds =
            toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let violations = th.violations(&report);
        if !violations.is_empty() {
            return Err(invalid(format!("thresholds not met: {}", violations.join("; "))));
        }
        eprintln!("thresholds met");
    }
    Ok(())
}

fn probe_impl<S: Real>(
    cfg: &Config,
    manifest: &Path,
    labels: &Path,
    checkpoint: Option<&Path>,
) -> Result<ProbeReport, Failure> {
    let mut model = Model::<S>::init(cfg)?;
    if let Some(path) = checkpoint {
        let snap: Snapshot<S> = load_snapshot(path)?;
        model.load_values(&snap)?;
    }
    Ok(selectivity_probe(&model, cfg, manifest, &file_in(labels, "labels.jsonl"), cfg.seed)?)
}

/// Report floors/ceilings; any violated bound fails the probe with exit 1.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Thresholds {
    min_target_accuracy: Option<f64>,
    /// Floor on target minus interferer masked accuracy.
    min_accuracy_gap: Option<f64>,
    min_swap_consistency: Option<f64>,
    min_mean_view_cosine: Option<f64>,
    max_collision_rate: Option<f64>,
}

impl Thresholds {
    fn violations(&self, r: &ProbeReport) -> Vec<String> {
        let mut out = Vec::new();
        let mut floor = |name: &str, bound: Option<f64>, value: Option<f64>| match (bound, value) {
            (Some(b), Some(v)) if v < b => out.push(format!("{name} {v:.4} < {b:.4}")),
            (Some(_), None) => out.push(format!("{name} unavailable (no two-talker examples)")),
            _ => {}
        };
        floor("target_masked_accuracy", self.min_target_accuracy, Some(r.target_masked_accuracy));
        let gap = r.interferer_masked_accuracy.map(|i| r.target_masked_accuracy - i);
        floor("accuracy_gap", self.min_accuracy_gap, gap);
        floor("swap_consistency", self.min_swap_consistency, r.swap_consistency);
        floor("mean_view_cosine", self.min_mean_view_cosine, Some(r.mean_view_cosine));
        match (self.max_collision_rate, r.collision_rate) {
            (Some(b), Some(v)) if v > b => out.push(format!("collision_rate {v:.4} > {b:.4}")),
            (Some(_), None) => out.push("collision_rate unavailable (no two-talker examples)".into()),
            _ => {}
        }
        out
    }
}

fn run_gradcheck(common: &Common, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = resolve_config(common)?;
    let t0 = Instant::now();
    let report = run_loss_gradcheck(cfg.seed, 1e-4, 1e-4)?;
    // The stored report must be byte-identical across reruns; elapsed time
    // belongs in the log lines only.
    let mut stored = serde_json::to_value(&report).map_err(|e| invalid(e.to_string()))?;
    stored.as_object_mut().map(|o| o.remove("elapsed_ms"));
    let json = serde_json::to_string_pretty(&stored).map_err(|e| invalid(e.to_string()))?;
    if let Some(dir) = out {
        echo_config(&gradcheck_config(cfg.seed), dir)?;
        let path = dir.join("gradcheck.json");
        std::fs::write(&path, format!("{json}\n"))
            .map_err(|e| invalid(format!("cannot write {}: {e}", path.display())))?;
        eprintln!("wrote {}", path.display());
    }
    println!("{json}");
    eprintln!(
        "max relative error {:.3e} over {} parameters [{:.1} s]",
        report.max_rel_err,
        report.checked_scalars,
        t0.elapsed().as_secs_f64()
    );
    if !report.pass {
        return Err(invalid(format!(
            "gradient audit failed: max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_err, report.tolerance
        )));
    }
    Ok(())
}
