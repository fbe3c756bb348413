//! Seed-driven invariant checks shared by the property suite and the
//! acceptance run. Each returns `Err` describing the first violation.

use braintap::data::{derive_free_mask, PriorSet, Subject};
use braintap::encoder::{embed_tokens, encoder_layer};
use braintap::metrics::auc;
use braintap::model::BrainTap;
use braintap::tensor::{kl_div, row_softmax, sym0, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{perturb, random_symmetric, random_tensor, tiny_model_config};

pub type Check = fn(u64) -> Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_priors(rng: &mut ChaCha8Rng, n: usize, k: usize) -> PriorSet {
    let masks = (0..k)
        .map(|_| {
            let density = rng.random_range(0.05..0.6);
            let mut m = Tensor::zeros(n, n);
            for i in 0..n {
                for j in (i + 1)..n {
                    if rng.random_bool(density) {
                        m.set(i, j, 1.0);
                        m.set(j, i, 1.0);
                    }
                }
            }
            m
        })
        .collect();
    PriorSet::new(n, (1..=k).map(|i| format!("p{i}")).collect(), masks).unwrap()
}

fn random_model(rng: &mut ChaCha8Rng, n_priors: usize) -> BrainTap {
    let mut cfg = tiny_model_config();
    cfg.n_priors = n_priors;
    let mut model = BrainTap::new(cfg, rng.random()).unwrap();
    perturb(&mut model.params, rng.random(), 0.5);
    model
}

fn random_subject(rng: &mut ChaCha8Rng, n: usize) -> Subject {
    Subject {
        id: "r".into(),
        fc: random_symmetric(rng, n, 1.0),
        sc: random_symmetric(rng, n, 1.0).map(f64::abs),
        label: rng.random_range(0..2),
    }
}

pub fn gate_in_unit_interval_and_symmetric(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(1..4);
    let priors = random_priors(&mut rng, 6, k);
    let model = random_model(&mut rng, k);
    let g = model
        .gate_matrix(&random_subject(&mut rng, 6), &priors)
        .map_err(|e| e.to_string())?
        .unwrap();
    ensure(g.gate.data().iter().all(|v| *v > 0.0 && *v < 1.0), || {
        "gate entry outside (0,1)".into()
    })?;
    ensure(g.gate.asymmetry() <= 1e-12, || {
        format!("gate asymmetry {}", g.gate.asymmetry())
    })?;
    ensure(g.score.asymmetry() == 0.0, || "score not symmetric".into())?;
    ensure((0..6).all(|i| g.score.get(i, i) == 0.0), || {
        "score diagonal nonzero".into()
    })
}

pub fn sym0_properties(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..9);
    let m = random_tensor(&mut rng, n, n, 5.0);
    let s = sym0(&m).map_err(|e| e.to_string())?;
    ensure(s.asymmetry() == 0.0, || "sym0 output asymmetric".into())?;
    ensure((0..n).all(|i| s.get(i, i) == 0.0), || {
        "sym0 diagonal nonzero".into()
    })?;
    let twice = sym0(&s).unwrap();
    ensure(twice.max_abs_diff(&s) <= 1e-14, || {
        "sym0 not idempotent".into()
    })
}

pub fn kl_properties(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..12);
    let logits = random_tensor(&mut rng, 2, d, 4.0);
    let p = row_softmax(&logits, 1.0).unwrap();
    let (a, b) = (p.row(0), p.row(1));
    let kl = kl_div(a, b).map_err(|e| e.to_string())?;
    ensure(kl >= 0.0, || format!("KL {kl} < 0"))?;
    let self_kl = kl_div(a, a).unwrap();
    ensure(self_kl.abs() < 1e-14, || format!("KL(p,p) = {self_kl}"))?;

    // tape version agrees and is non-negative row by row
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let y = tape.constant(Tensor::from_fn(2, d, |i, j| logits.get(1 - i, j)));
    let rows = tape.softmax_kl(x, y, 1.0).unwrap();
    let v = tape.value(rows);
    ensure(v.data().iter().all(|r| *r >= 0.0), || "row KL < 0".into())?;
    ensure((v.get(0, 0) - kl).abs() < 1e-12, || {
        "tape KL disagrees".into()
    })
}

pub fn ratios_in_unit_interval(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = random_model(&mut rng, 2);
    for amd in model.layout.amd.clone() {
        for id in [amd.beta_raw, amd.gamma_raw] {
            *model.params.get_mut(id) = Tensor::scalar(rng.random_range(-30.0..30.0));
        }
    }
    for (b, g) in model.ratios() {
        ensure(b > 0.0 && b < 1.0 && g > 0.0 && g < 1.0, || {
            format!("ratio ({b}, {g})")
        })?;
    }
    Ok(())
}

pub fn free_mask_disjoint(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..12);
    let k = rng.random_range(0..5);
    let priors = random_priors(&mut rng, n, k.max(1));
    let masks = if k == 0 {
        Vec::new()
    } else {
        priors.masks.clone()
    };
    let free = derive_free_mask(&masks, n);
    for m in &masks {
        ensure(
            free.data().iter().zip(m.data()).all(|(a, b)| a * b == 0.0),
            || "free mask overlaps a prior".into(),
        )?;
    }
    for i in 0..n {
        for j in 0..n {
            let covered = masks.iter().any(|m| m.get(i, j) == 1.0) || free.get(i, j) == 1.0;
            ensure(covered == (i != j), || {
                format!("coverage wrong at ({i},{j})")
            })?;
        }
    }
    Ok(())
}

pub fn attention_rows_sum_to_one(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_model(&mut rng, 2);
    let subject = random_subject(&mut rng, 6);
    let bias = random_symmetric(&mut rng, 6, 3.0);
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let adj = tape.constant(subject.fc.clone());
    let x = embed_tokens(&mut tape, &p, &model.layout.encoder_fc, adj).unwrap();
    let b = tape.constant(bias);
    let out = encoder_layer(
        &mut tape,
        &p,
        &model.layout.encoder_fc.layers[0],
        x,
        Some(b),
        1.0,
        false,
    )
    .map_err(|e| e.to_string())?;
    for a in out.attention {
        let a = tape.value(a);
        for i in 0..a.rows() {
            let s: f64 = a.row(i).iter().sum();
            ensure((s - 1.0).abs() <= 1e-9, || {
                format!("attention row sums to {s}")
            })?;
        }
    }
    Ok(())
}

/// `#{pos > neg} + ½ #{pos = neg}` over all pairs.
pub fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let (mut pos, mut neg) = (0usize, 0usize);
    for (i, &li) in labels.iter().enumerate() {
        if li == 1 {
            pos += 1;
        } else {
            neg += 1;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / (pos as f64 * neg as f64)
}

pub fn auc_matches_brute_force(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..60);
    // a coarse grid forces plenty of ties
    let scores: Vec<f64> = (0..n)
        .map(|_| f64::from(rng.random_range(0..8)) / 4.0)
        .collect();
    let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let fast = auc(&scores, &labels).map_err(|e| e.to_string())?;
    let slow = brute_force_auc(&scores, &labels);
    ensure(fast == slow, || format!("auc {fast} vs brute force {slow}"))?;
    let shifted: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 1.0).collect();
    ensure(auc(&shifted, &labels).unwrap() == fast, || {
        "AUC changed under a monotone map".into()
    })
}
