// Scratch reproducer for the ordering-invariance failure (deleted before release).
use m2m_core::assign_loss::{best_ordering_l1, total_loss};
use m2m_core::config::RunConfig;
use m2m_core::geometry::{equivalent_orderings, MapInstance};
use m2m_core::graph::Tape;
use m2m_core::model;
use m2m_core::nn::Binder;
use m2m_core::scenegen::generate_dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
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
    let data = generate_dataset(&cfg.scene_config(), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(505);

    let mut done = 0usize;
    'outer: for round in 0.. {
        for sample in &data {
            if done > 40 {
                break 'outer;
            }
            if sample.instances.is_empty() {
                continue;
            }
            let which = rng.gen_range(0..sample.instances.len());
            let inst = &sample.instances[which];
            let orderings = equivalent_orderings(inst);
            let pick = (round + rng.gen_range(0..orderings.len())) % orderings.len();
            let mut reordered = sample.instances.clone();
            reordered[which] = MapInstance::new(inst.class_id, orderings[pick].clone());
            // burn the rng draws the test makes
            let _pts = ndarray::Array2::<f64>::from_shape_fn((4 * cfg.n_p, 2), |_| {
                rng.gen_range(0.0..1.0)
            });
            let _lg =
                ndarray::Array2::<f64>::from_shape_fn((4, 4), |_| rng.gen_range(-2.0..2.0));

            if done == 28 {
                println!(
                    "case 28: which={which} class={:?} closed={} pick={pick}",
                    inst.class_id, inst.closed
                );
                println!("points {:?}", inst.points);
                let params = model::init_params(&cfg, 42);
                for (tag, gtl) in [("orig", &sample.instances), ("reord", &reordered)] {
                    let mut tape = Tape::new();
                    let mut b = Binder::new(&params);
                    let input = model::scene_input(&mut tape, sample);
                    let out = model::forward(&mut tape, &mut b, &cfg, input, None).unwrap();
                    let loss = total_loss(
                        &mut tape,
                        &cfg,
                        out.imp.as_ref(),
                        out.mmp.as_ref(),
                        gtl,
                        None,
                    );
                    println!(
                        "{tag}: l_map={:.12} terms={:?}",
                        tape.value(loss.l_map)[[0, 0]],
                        loss.terms.values(&tape)
                    );
                    // Chosen-ordering diagnostics per decoder layer.
                    let mmp = out.mmp.as_ref().unwrap();
                    for (li, layer) in mmp.layers.iter().enumerate() {
                        let pts = tape.value(layer.points).clone();
                        let ords: Vec<_> = gtl.iter().map(equivalent_orderings).collect();
                        for q in 0..cfg.n_i {
                            let block: Vec<[f64; 2]> = (0..cfg.n_p)
                                .map(|j| [pts[[q * cfg.n_p + j, 0]], pts[[q * cfg.n_p + j, 1]]])
                                .collect();
                            for (g, o) in ords.iter().enumerate() {
                                let (v, oi) = best_ordering_l1(&block, o);
                                print!(" L{li}q{q}g{g}:oi={oi},v={v:.9}");
                            }
                        }
                        println!();
                    }
                }
            }
            done += 1;
        }
    }
}
