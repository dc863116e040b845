//! `m2m`: dataset generation, training, evaluation, ablation sweeps, and
//! report rendering for the two-stage vectorized BEV map pipeline.
//!
//! Exit codes: 0 on success, 2 for configuration/input errors, 3 for runtime
//! aborts (for example a non-finite loss). `M2M_SEED` overrides the seed of
//! any command that reads a `--config` file.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use m2m_core::ablate::{ablate, ablation_splits, summarize, Axis};
use m2m_core::config::RunConfig;
use m2m_core::metrics::chamfer_pr_curves;
use m2m_core::report::{
    generate_report, save_json, SampleDump, CHECKPOINT_FILE, CONFIG_FILE, CURVE_FILE,
    METRICS_FILE, OVERLAY_SAMPLES, PR_EXPORT_THRESHOLD_M, PR_FILE, SAMPLES_FILE,
};
use m2m_core::scenegen::{
    generate_dataset, load_dataset, save_dataset, SceneSample, DATASET_FILE,
};
use m2m_core::train::{evaluate_full, load_checkpoint, save_checkpoint, train, EvalOutput};
use m2m_core::{CoreError, Result};

#[derive(Parser)]
#[command(
    name = "m2m",
    version,
    about = "Two-stage vectorized BEV map construction on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a scene dataset into a directory.
    Generate {
        /// Run config (JSON; keys are the RunConfig field names).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the dataset.
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes.
        #[arg(long)]
        n: usize,
    },
    /// Train a model and write run artifacts (config, curve, checkpoint).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory produced by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained run on a dataset, writing metrics into the run dir.
    Eval {
        /// Run directory produced by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and evaluate every setting along one ablation axis.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// One of: components, pqg_gfe, denoising, map_noise, n_s,
        /// max_survival, tau_p, tau_g.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Combine evaluated run directories into a JSON table and plots.
    Report {
        /// One or more run directories.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CoreError::InvalidConfig(_)
                | CoreError::Parse { .. }
                | CoreError::Json(_)
                | CoreError::UnsupportedSchema(_)
                | CoreError::ConfigHashMismatch
                | CoreError::MissingRun(_)
                | CoreError::InfeasibleSceneConfig(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

/// Loads a config file and applies the `M2M_SEED` override.
fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CoreError::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
    })?;
    let mut cfg: RunConfig = serde_json::from_str(&text)?;
    if let Ok(seed) = std::env::var("M2M_SEED") {
        cfg.seed = seed.trim().parse().map_err(|_| {
            CoreError::InvalidConfig(format!("M2M_SEED must be an unsigned integer, got '{seed}'"))
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads `<dir>/dataset.jsonl` and checks it matches the config's geometry.
fn load_data(dir: &Path, cfg: &RunConfig) -> Result<Vec<SceneSample>> {
    let path = dir.join(DATASET_FILE);
    if !path.is_file() {
        return Err(CoreError::InvalidConfig(format!(
            "dataset not found: {}",
            path.display()
        )));
    }
    let (header, samples) = load_dataset(&path)?;
    if header.grid != cfg.grid || header.n_p != cfg.n_p {
        return Err(CoreError::InvalidConfig(format!(
            "dataset geometry ({}x{} grid, {} points) does not match config ({}x{}, {})",
            header.grid.height_px,
            header.grid.width_px,
            header.n_p,
            cfg.grid.height_px,
            cfg.grid.width_px,
            cfg.n_p
        )));
    }
    Ok(samples)
}

/// Writes the evaluation artifacts (metrics, PR curves, overlay samples)
/// into a run directory.
fn write_eval_artifacts(
    run_dir: &Path,
    cfg: &RunConfig,
    dataset: &[SceneSample],
    eval: &EvalOutput,
) -> Result<()> {
    let gts: Vec<Vec<m2m_core::geometry::MapInstance>> =
        dataset.iter().map(|s| s.instances.clone()).collect();
    let pr = chamfer_pr_curves(&eval.predictions, &gts, &cfg.grid, PR_EXPORT_THRESHOLD_M);
    let samples: Vec<SampleDump> = dataset
        .iter()
        .zip(&eval.predictions)
        .take(OVERLAY_SAMPLES)
        .map(|(s, p)| SampleDump {
            gt: s.instances.clone(),
            preds: p.clone(),
        })
        .collect();
    save_json(&run_dir.join(METRICS_FILE), &eval.report)?;
    save_json(&run_dir.join(PR_FILE), &pr)?;
    save_json(&run_dir.join(SAMPLES_FILE), &samples)?;
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Generate { config, out, n } => {
            let cfg = load_config(&config)?;
            let samples = generate_dataset(&cfg.scene_config(), n)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join(DATASET_FILE);
            save_dataset(&samples, &cfg.grid, cfg.n_p, &path)?;
            save_json(&out.join(CONFIG_FILE), &cfg)?;
            println!("wrote {n} scenes to {}", path.display());
        }
        Cmd::Train { config, data, out } => {
            let cfg = load_config(&config)?;
            let dataset = load_data(&data, &cfg)?;
            let result = train(&cfg, &dataset)?;
            std::fs::create_dir_all(&out)?;
            save_json(&out.join(CONFIG_FILE), &cfg)?;
            save_json(&out.join(CURVE_FILE), &result.curve)?;
            save_checkpoint(&result.checkpoint, &out.join(CHECKPOINT_FILE))?;
            for p in &result.curve {
                println!("{}", serde_json::to_string(p)?);
            }
            println!("trained {} steps into {}", cfg.steps, out.display());
        }
        Cmd::Eval { run, data } => {
            let cfg: RunConfig = m2m_core::report::load_json(&run.join(CONFIG_FILE))?;
            cfg.validate()?;
            let ck_path = run.join(CHECKPOINT_FILE);
            if !ck_path.is_file() {
                return Err(CoreError::MissingRun(ck_path.display().to_string()));
            }
            let ck = load_checkpoint(&ck_path)?;
            if ck.config_hash != cfg.hash() {
                return Err(CoreError::ConfigHashMismatch);
            }
            let dataset = load_data(&data, &cfg)?;
            let eval = evaluate_full(&cfg, &ck.params, &dataset)?;
            write_eval_artifacts(&run, &cfg, &dataset, &eval)?;
            println!("{}", serde_json::to_string(&eval.report)?);
        }
        Cmd::Ablate { config, axis, out } => {
            let cfg = load_config(&config)?;
            let axis: Axis = axis.parse()?;
            let (train_set, eval_set) = ablation_splits(&cfg)?;
            let runs = ablate(&cfg, axis, &train_set, &eval_set)?;
            std::fs::create_dir_all(&out)?;
            for (i, r) in runs.iter().enumerate() {
                let dir = out.join(format!("{i:02}_{}", r.name));
                std::fs::create_dir_all(&dir)?;
                save_json(&dir.join(CONFIG_FILE), &r.config)?;
                save_json(&dir.join(CURVE_FILE), &r.result.curve)?;
                save_checkpoint(&r.result.checkpoint, &dir.join(CHECKPOINT_FILE))?;
                write_eval_artifacts(&dir, &r.config, &eval_set, &r.eval)?;
            }
            let table = summarize(axis, &runs);
            let table_path = out.join(format!("ablation_{}.json", axis.name()));
            save_json(&table_path, &table)?;
            println!("{}", serde_json::to_string(&table)?);
            println!("wrote {} rows to {}", runs.len(), out.display());
        }
        Cmd::Report { runs, out } => {
            let paths = generate_report(&runs, &out)?;
            println!("wrote {}", paths.table.display());
            for p in &paths.images {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}
