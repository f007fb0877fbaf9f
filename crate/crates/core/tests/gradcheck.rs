//! Gradients of every training loss against central finite differences on
//! randomized small instances.

mod common;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cgcd_core::embedding::normalize;
use cgcd_core::evt::WeibullParams;
use cgcd_core::losses::{evt_loss_graph, kd_loss_graph, pa_loss_graph, LossConfig};
use cgcd_core::numerics::{evaluate_with_grad, Tape, Var};

const INSTANCES: usize = 60;

struct Instance {
    dim: usize,
    n_embeddings: usize,
    n_classes: usize,
    labels: Vec<usize>,
    classes: Vec<usize>,
    flat: Vec<f64>,
    cfg: LossConfig,
    weibulls: Vec<WeibullParams>,
}

/// Random instance: `n_embeddings` raw embedding vectors followed by one
/// proxy per class, all flattened. Moderate alpha keeps the exponent away
/// from the clamp window so finite differences see a smooth function.
fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let dim = rng.gen_range(3..=16);
    let n_classes = rng.gen_range(2..=4);
    let n_embeddings = rng.gen_range(2..=6);
    let labels: Vec<usize> = (0..n_embeddings)
        .map(|_| rng.gen_range(0..n_classes))
        .collect();
    let classes: Vec<usize> = (0..n_classes).collect();
    let mut flat = Vec::new();
    for _ in 0..n_embeddings + n_classes {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        flat.extend(normalize(&v));
    }
    let cfg = LossConfig {
        alpha: rng.gen_range(1.0..8.0),
        delta: rng.gen_range(0.05..0.3),
        ..Default::default()
    };
    let weibulls = (0..n_classes)
        .map(|_| WeibullParams {
            shape: rng.gen_range(0.5..5.0),
            scale: rng.gen_range(0.3..1.5),
            tail_size_used: 10,
        })
        .collect();
    Instance {
        dim,
        n_embeddings,
        n_classes,
        labels,
        classes,
        flat,
        cfg,
        weibulls,
    }
}

/// Registers the flat vector as embedding params (normalized on the tape,
/// matching the extractor's output stage) followed by raw proxy params.
fn register(
    tape: &mut Tape,
    flat: &[f64],
    inst: &Instance,
) -> cgcd_core::Result<(Vec<Var>, Vec<Var>)> {
    let mut off = 0;
    let mut embeddings = Vec::new();
    for _ in 0..inst.n_embeddings {
        let p = tape.param(&flat[off..off + inst.dim])?;
        embeddings.push(tape.normalize(p)?);
        off += inst.dim;
    }
    let mut proxies = Vec::new();
    for _ in 0..inst.n_classes {
        proxies.push(tape.param(&flat[off..off + inst.dim])?);
        off += inst.dim;
    }
    Ok((embeddings, proxies))
}

fn check_loss<F>(name: &str, build: F)
where
    F: Fn(&mut Tape, &Instance, &[Var], &[Var]) -> cgcd_core::Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    for trial in 0..INSTANCES {
        let inst = random_instance(&mut rng);
        let eval = |flat: &[f64]| -> (f64, Vec<f64>) {
            evaluate_with_grad(|tape| {
                let (z, p) = register(tape, flat, &inst)?;
                build(tape, &inst, &z, &p)
            })
            .unwrap()
        };
        let (_, grad) = eval(&inst.flat);
        let f = |x: &[f64]| eval(x).0;
        common::assert_grad_matches(&f, &grad, &inst.flat, &format!("{name} trial {trial}"));
    }
}

#[test]
fn pa_loss_gradient() {
    check_loss("pa_loss", |tape, inst, z, p| {
        pa_loss_graph(tape, z, &inst.labels, p, &inst.classes, &inst.cfg)
    });
}

#[test]
fn evt_loss_gradient() {
    check_loss("evt_loss", |tape, inst, z, p| {
        evt_loss_graph(tape, z, &inst.labels, p, &inst.classes, &inst.weibulls)
    });
}

#[test]
fn kd_loss_gradient() {
    // teacher embeddings are fixed targets; perturb only the student side
    let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF);
    for trial in 0..INSTANCES {
        let inst = random_instance(&mut rng);
        let teacher: Vec<Vec<f64>> = (0..inst.n_embeddings)
            .map(|_| {
                let v: Vec<f64> = (0..inst.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                normalize(&v)
            })
            .collect();
        let eval = |flat: &[f64]| -> (f64, Vec<f64>) {
            evaluate_with_grad(|tape| {
                let (z, _) = register(tape, flat, &inst)?;
                kd_loss_graph(tape, &teacher, &z, false)
            })
            .unwrap()
        };
        let (_, grad) = eval(&inst.flat);
        let f = |x: &[f64]| eval(x).0;
        common::assert_grad_matches(&f, &grad, &inst.flat, &format!("kd_loss trial {trial}"));
    }
}

#[test]
fn feature_replay_loss_gradient() {
    // replayed features are constants; only the proxies carry gradient
    let mut rng = ChaCha8Rng::seed_from_u64(0xFEED);
    for trial in 0..INSTANCES {
        let inst = random_instance(&mut rng);
        let replay: Vec<Vec<f64>> = (0..inst.n_embeddings)
            .map(|_| {
                let v: Vec<f64> = (0..inst.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                normalize(&v)
            })
            .collect();
        let proxy_flat = inst.flat[inst.n_embeddings * inst.dim..].to_vec();
        let eval = |flat: &[f64]| -> (f64, Vec<f64>) {
            evaluate_with_grad(|tape| {
                let z: Vec<Var> = replay
                    .iter()
                    .map(|e| tape.constant(e))
                    .collect::<cgcd_core::Result<_>>()?;
                let p: Vec<Var> = flat
                    .chunks(inst.dim)
                    .map(|c| tape.param(c))
                    .collect::<cgcd_core::Result<_>>()?;
                pa_loss_graph(tape, &z, &inst.labels, &p, &inst.classes, &inst.cfg)
            })
            .unwrap()
        };
        let (_, grad) = eval(&proxy_flat);
        let f = |x: &[f64]| eval(x).0;
        common::assert_grad_matches(&f, &grad, &proxy_flat, &format!("replay trial {trial}"));
    }
}

#[test]
fn total_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xABAD);
    for trial in 0..INSTANCES {
        let inst = random_instance(&mut rng);
        let teacher: Vec<Vec<f64>> = (0..inst.n_embeddings)
            .map(|_| {
                let v: Vec<f64> = (0..inst.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                normalize(&v)
            })
            .collect();
        let replay: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let v: Vec<f64> = (0..inst.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                normalize(&v)
            })
            .collect();
        let replay_labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..inst.n_classes)).collect();
        let eval = |flat: &[f64]| -> (f64, Vec<f64>) {
            evaluate_with_grad(|tape| {
                let (z, p) = register(tape, flat, &inst)?;
                let pa = pa_loss_graph(tape, &z, &inst.labels, &p, &inst.classes, &inst.cfg)?;
                let zr: Vec<Var> = replay
                    .iter()
                    .map(|e| tape.constant(e))
                    .collect::<cgcd_core::Result<_>>()?;
                let fr = pa_loss_graph(tape, &zr, &replay_labels, &p, &inst.classes, &inst.cfg)?;
                let kd = kd_loss_graph(tape, &teacher, &z, false)?;
                let s1 = tape.add(pa, fr)?;
                tape.add(s1, kd)
            })
            .unwrap()
        };
        let (_, grad) = eval(&inst.flat);
        let f = |x: &[f64]| eval(x).0;
        common::assert_grad_matches(&f, &grad, &inst.flat, &format!("total trial {trial}"));
    }
}
