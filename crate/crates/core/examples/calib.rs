//! Scratch calibration driver (not part of the shipped API).

use std::time::Instant;

use m2m_core::ablate::{ablate, Axis};
use m2m_core::config::RunConfig;
use m2m_core::scenegen::generate_dataset;
use m2m_core::train::{evaluate, train, train_from};
use m2m_core::model;

fn desk(steps: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.grid.height_px = 32;
    cfg.grid.width_px = 16;
    cfg.s = 2;
    cfg.d = 32;
    cfg.heads = 4;
    cfg.enc_layers = 1;
    cfg.m = 2;
    cfg.k = 3;
    cfg.n_i = 12;
    cfg.n_p = 8;
    cfg.n_s = 8;
    cfg.g = 2;
    cfg.batch_size = 4;
    cfg.steps = steps;
    cfg.log_every = 25;
    cfg.validate().unwrap();
    cfg
}

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn apply_env(cfg: &mut RunConfig) {
    cfg.grid.height_px = env_usize("GH", cfg.grid.height_px);
    cfg.grid.width_px = env_usize("GW", cfg.grid.width_px);
    cfg.d = env_usize("D", cfg.d);
    cfg.s = env_usize("S", cfg.s);
    cfg.enc_layers = env_usize("EL", cfg.enc_layers);
    cfg.m = env_usize("M", cfg.m);
    cfg.k = env_usize("K", cfg.k);
    cfg.n_i = env_usize("NI", cfg.n_i);
    cfg.n_p = env_usize("NP", cfg.n_p);
    cfg.n_s = env_usize("NS", cfg.n_s);
    cfg.batch_size = env_usize("BS", cfg.batch_size);
    cfg.steps = env_usize("STEPS", cfg.steps);
    cfg.optimizer.lr = env_f64("LR", cfg.optimizer.lr);
    cfg.seed = env_usize("SEED", cfg.seed as usize) as u64;
    cfg.log_every = env_usize("LOGE", cfg.log_every);
    cfg.validate().unwrap();
}

fn main() {
    let cmd = std::env::args().nth(1).unwrap_or_else(|| "time".into());
    match cmd.as_str() {
        "time" => {
            let mut cfg = desk(3);
            apply_env(&mut cfg);
            let data = generate_dataset(&cfg.scene_config(), 16).unwrap();
            let t0 = Instant::now();
            let r = train(&cfg, &data).unwrap();
            let t_train = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            let rep = evaluate(&cfg, &r.checkpoint.params, &data).unwrap();
            let t_eval = t1.elapsed().as_secs_f64();
            println!(
                "steps={} train_total={t_train:.2}s per_step={:.3}s eval16={t_eval:.2}s per_scene={:.4}s map={:.3}",
                cfg.steps,
                t_train / cfg.steps as f64,
                t_eval / 16.0,
                rep.map_chamfer
            );
        }
        "overfit" => {
            let mut cfg = desk(env_usize("STEPS", 200));
            apply_env(&mut cfg);
            let data = generate_dataset(&cfg.scene_config(), env_usize("SCENES", 16)).unwrap();
            let t0 = Instant::now();
            let r = train_from(&cfg, &data, None).unwrap();
            let rep = evaluate(&cfg, &r.checkpoint.params, &data).unwrap();
            let first = r.curve.first().unwrap();
            let last = r.curve.last().unwrap();
            println!(
                "steps={} lr={} loss0={:.3} loss={:.4} util={:?} mapC={:.4} mapR={:.4} elapsed={:.0}s",
                cfg.steps, cfg.optimizer.lr, first.total, last.total, last.util,
                rep.map_chamfer, rep.map_raster,
                t0.elapsed().as_secs_f64()
            );
        }
        "dn" => {
            // Criterion 7 shape: denoising on/off across seeds on one fixed benchmark.
            let mut cfg = desk(env_usize("STEPS", 300));
            apply_env(&mut cfg);
            let scenes = env_usize("SCENES", 512);
            let seeds = env_usize("SEEDS", 3);
            let data = generate_dataset(&cfg.scene_config(), scenes).unwrap();
            for seed in 0..seeds as u64 {
                let mut base = cfg.clone();
                base.seed = seed;
                let t0 = Instant::now();
                let runs = ablate(&base, Axis::Denoising, &data, &data).unwrap();
                for r in &runs {
                    println!(
                        "seed={seed} dn={} util={:.4} mapC={:.4} loss={:.4} t={:.0}s",
                        r.name,
                        r.eval.report.util,
                        r.eval.report.map_chamfer,
                        r.result.curve.last().unwrap().total,
                        t0.elapsed().as_secs_f64()
                    );
                }
            }
        }
        "comp" => {
            // Criterion 8 shape: cumulative component rows across seeds on one fixed benchmark.
            let mut cfg = desk(env_usize("STEPS", 300));
            apply_env(&mut cfg);
            let scenes = env_usize("SCENES", 512);
            let seeds = env_usize("SEEDS", 3);
            let data = generate_dataset(&cfg.scene_config(), scenes).unwrap();
            for seed in 0..seeds as u64 {
                let mut base = cfg.clone();
                base.seed = seed;
                let t0 = Instant::now();
                let runs = ablate(&base, Axis::Components, &data, &data).unwrap();
                for r in &runs {
                    println!(
                        "seed={seed} row={} util={:.4} mapC={:.4} loss={:.4} t={:.0}s",
                        r.name,
                        r.eval.report.util,
                        r.eval.report.map_chamfer,
                        r.result.curve.last().unwrap().total,
                        t0.elapsed().as_secs_f64()
                    );
                }
            }
        }
        "defaulttime" => {
            let cfg = RunConfig::default();
            let data = generate_dataset(&cfg.scene_config(), 2).unwrap();
            let params = model::init_params(&cfg, 0);
            let t0 = Instant::now();
            let rep = evaluate(&cfg, &params, &data[..1]).unwrap();
            println!(
                "default-config single-scene inference: {:.2}s (map={:.3})",
                t0.elapsed().as_secs_f64(),
                rep.map_chamfer
            );
        }
        other => panic!("unknown calib command {other}"),
    }
}
