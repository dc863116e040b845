// Scratch analyzer for the finite-difference gradient check (deleted before release).
use m2m_core::assign_loss::total_loss;
use m2m_core::config::RunConfig;
use m2m_core::graph::Tape;
use m2m_core::impnet::build_denoise_batch;
use m2m_core::model;
use m2m_core::nn::{Binder, GradMap, ParamStore};
use m2m_core::scenegen::{generate_dataset, SceneSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro_cfg() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.grid.height_px = 8;
    cfg.grid.width_px = 8;
    cfg.s = 2;
    cfg.d = 8;
    cfg.heads = 2;
    cfg.enc_layers = 1;
    cfg.m = 2;
    cfg.k = 2;
    cfg.n_i = 4;
    cfg.n_p = 4;
    cfg.n_s = 4;
    cfg.g = 2;
    cfg.validate().unwrap();
    cfg
}

fn full_loss(
    cfg: &RunConfig,
    params: &ParamStore,
    sample: &SceneSample,
    noise_seed: u64,
    with_grads: bool,
) -> (f64, GradMap) {
    let mut tape = Tape::new();
    let mut binder = Binder::new(params);
    let input = model::scene_input(&mut tape, sample);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let dn = build_denoise_batch(&sample.instances, cfg, &mut rng);
    let out = model::forward(&mut tape, &mut binder, cfg, input, Some(&dn)).unwrap();
    let loss = total_loss(
        &mut tape,
        cfg,
        out.imp.as_ref(),
        out.mmp.as_ref(),
        &sample.instances,
        Some(&dn),
    );
    let total = tape.value(loss.total)[[0, 0]];
    if !with_grads {
        return (total, GradMap::new());
    }
    let mut grads = tape.backward(loss.total);
    (total, binder.collect_grads(&mut grads))
}

fn main() {
    let steps: usize = std::env::var("TSTEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(60);
    let probes: usize = std::env::var("PROBES").ok().and_then(|v| v.parse().ok()).unwrap_or(2);
    let mut cfg = micro_cfg();
    cfg.steps = steps.max(1);
    cfg.batch_size = 2;
    let data = generate_dataset(&cfg.scene_config(), 6).unwrap();
    let mut stores = Vec::new();
    for s in 0..4u64 {
        let mut tc = cfg.clone();
        tc.seed = 1000 + s;
        stores.push(m2m_core::train::train(&tc, &data).unwrap().checkpoint.params);
    }
    for seed in 0..(stores.len() as u64 * data.len() as u64) {
        let mut params = stores[(seed as usize) / data.len()].clone();
        let sample = &data[(seed as usize) % data.len()];
        let noise_seed = 77 + seed;
        let (_, analytic) = full_loss(&cfg, &params, sample, noise_seed, true);

        // Two-step-size consistency: how many probes straddle a switch?
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
        let mut inconsistent = 0usize;
        let mut n_probes = 0usize;
        let mut worst_valid: (f64, String) = (0.0, String::new());
        for (name, grad) in &analytic {
            let (rows, cols) = grad.dim();
            for _ in 0..probes {
                let (r, c) = (rng.gen_range(0..rows), rng.gen_range(0..cols));
                let w0 = params.map[name][[r, c]];
                let an = grad[[r, c]];
                let mut fd_at = |h: f64| {
                    params.map.get_mut(name).unwrap()[[r, c]] = w0 + h;
                    let (fp, _) = full_loss(&cfg, &params, sample, noise_seed, false);
                    params.map.get_mut(name).unwrap()[[r, c]] = w0 - h;
                    let (fm, _) = full_loss(&cfg, &params, sample, noise_seed, false);
                    params.map.get_mut(name).unwrap()[[r, c]] = w0;
                    (fp - fm) / (2.0 * h)
                };
                let h = 1e-5 * w0.abs().max(1.0);
                let fd1 = fd_at(h);
                let fd2 = fd_at(h / 8.0);
                n_probes += 1;
                if (fd1 - fd2).abs() > 1e-4 * fd1.abs().max(fd2.abs()).max(1e-2) {
                    inconsistent += 1;
                    continue;
                }
                let rel = (fd2 - an).abs() / fd2.abs().max(an.abs()).max(1e-2);
                if rel > worst_valid.0 {
                    worst_valid = (rel, format!("{name}[{r},{c}] fd={fd2} an={an}"));
                }
            }
        }
        let store_id = 1000 + (seed as usize) / data.len();
        let sample_id = (seed as usize) % data.len();
        println!(
            "store={store_id} sample={sample_id} noise={noise_seed}: {inconsistent}/{n_probes} straddle; worst valid rel={:.3e} at {}",
            worst_valid.0, worst_valid.1
        );
    }
}
