#![allow(dead_code)]

pub mod invariants;

use braintap::config::TrainConfig;
use braintap::data::{synthesize_cohort, Cohort, GeneratorConfig, PriorSet, Subject};
use braintap::model::{BrainTap, ModelConfig};
use braintap::params::ParamStore;
use braintap::tensor::{Tape, Tensor, Var};
use braintap::train::{subject_gradients, total_loss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// N=6, d=8, H=2, L=2, K=2, d_distill=8, z=4.
pub fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        d_model: 8,
        layers: 2,
        heads: 2,
        d_ff: Some(16),
        d_distill: Some(8),
        z_dim: 4,
        hyper_hidden: 8,
        ..TrainConfig::default()
    }
}

pub fn tiny_model_config() -> ModelConfig {
    tiny_train_config().model_config(6, 2).unwrap()
}

pub fn tiny_cohort(n_subjects: usize, seed: u64) -> Cohort {
    synthesize_cohort(&GeneratorConfig::new(n_subjects, 6, 2, 0.4, 0.2, seed)).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

pub fn random_symmetric(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Tensor {
    let mut m = Tensor::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = rng.random_range(-scale..scale);
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    m
}

/// Adds uniform noise to every parameter so that zero-initialised groups
/// (global masks, ratio scalars, α outputs) are exercised off their init.
pub fn perturb(params: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-scale..scale);
        }
    }
}

pub fn loss_value(model: &BrainTap, subject: &Subject, priors: &PriorSet, lambda: f64) -> f64 {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let out = model
        .forward(&mut tape, &p, &subject.fc, &subject.sc, priors)
        .unwrap();
    let loss = total_loss(&mut tape, out.logit, subject.label, &out.distill, lambda).unwrap();
    tape.scalar(loss).unwrap()
}

/// Worst entry of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
    /// Entries that needed a smaller step because the stencil straddled a
    /// ReLU kink.
    pub refined: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn distill_values(model: &BrainTap, subject: &Subject, priors: &PriorSet) -> Vec<f64> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let out = model
        .forward(&mut tape, &p, &subject.fc, &subject.sc, priors)
        .unwrap();
    out.distill
        .iter()
        .map(|d| tape.scalar(*d).unwrap())
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Derivative of `λ · w · K̄` with respect to the raw ratio scalar at
/// `(layer, is_beta)`, where `w` is the ratio used as a loss weight and `K̄`
/// the mean KL it multiplies. The layer loss is linear in its own weight,
/// so `K̄` is recovered from two evaluations with that scalar moved.
fn weight_path_derivative(
    model: &BrainTap,
    subject: &Subject,
    priors: &PriorSet,
    lambda: f64,
    layer: usize,
    tensor: usize,
) -> f64 {
    let mut probe = model.clone();
    let raw = probe.params.tensors()[tensor].data()[0];
    let eval = |probe: &mut BrainTap, v: f64| {
        probe.params.tensors_mut()[tensor].data_mut()[0] = v;
        distill_values(probe, subject, priors)[layer]
    };
    let (lo, hi) = (raw - 0.5, raw + 0.5);
    let kbar = (eval(&mut probe, hi) - eval(&mut probe, lo)) / (sigmoid(hi) - sigmoid(lo));
    let s = sigmoid(raw);
    lambda * s * (1.0 - s) * kbar
}

/// Compares the analytic gradient of the total loss against central
/// differences for every scalar parameter.
///
/// The ratio scalars enter the distillation loss only as detached weights,
/// so for them the finite difference is taken of the loss with that weight
/// path removed.
pub fn check_model_gradient(
    model: &BrainTap,
    subject: &Subject,
    priors: &PriorSet,
    lambda: f64,
    h: f64,
) -> GradCheck {
    let (_, grads) = subject_gradients(model, subject, priors, lambda).unwrap();
    let exchanged = distill_values(model, subject, priors).len();
    let mut weight_path = vec![0.0; grads.len()];
    for (layer, amd) in model.layout.amd.iter().enumerate().take(exchanged) {
        for id in [amd.beta_raw, amd.gamma_raw] {
            weight_path[id.0] = weight_path_derivative(model, subject, priors, lambda, layer, id.0);
        }
    }
    let mut probe = model.clone();
    let mut result = GradCheck {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
        refined: 0,
    };
    let central = |probe: &mut BrainTap, t: usize, e: usize, h: f64| {
        let orig = probe.params.tensors()[t].data()[e];
        probe.params.tensors_mut()[t].data_mut()[e] = orig + h;
        let up = loss_value(probe, subject, priors, lambda);
        probe.params.tensors_mut()[t].data_mut()[e] = orig - h;
        let down = loss_value(probe, subject, priors, lambda);
        probe.params.tensors_mut()[t].data_mut()[e] = orig;
        (up - down) / (2.0 * h)
    };
    for (t, grad) in grads.iter().enumerate() {
        for e in 0..grad.len() {
            let mut numeric = central(&mut probe, t, e, h) - weight_path[t];
            let mut err = rel_err(grad.data()[e], numeric, 1e-3);
            if err >= 1e-4 {
                for small in [h / 10.0, h / 100.0] {
                    let n = central(&mut probe, t, e, small) - weight_path[t];
                    let e2 = rel_err(grad.data()[e], n, 1e-3);
                    if e2 < err {
                        err = e2;
                        numeric = n;
                    }
                }
                result.refined += 1;
            }
            result.checked += 1;
            if err > result.max_rel_err {
                result.max_rel_err = err;
                result.worst = format!(
                    "{}[{e}] analytic {:.3e} numeric {:.3e}",
                    model.params.iter().nth(t).unwrap().1,
                    grad.data()[e],
                    numeric
                );
            }
        }
    }
    result
}

/// Finite-difference check of an op: the scalar loss is `Σ f(inputs) ⊙ R`
/// for a fixed random `R`.
pub fn check_op(inputs: &[Tensor], seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |vals: &[Tensor], weights: Option<&Tensor>| -> (f64, Tensor, Vec<Option<Tensor>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&mut tape, &vars);
        let out_val = tape.value(out).clone();
        let Some(w) = weights else {
            return (0.0, out_val, Vec::new());
        };
        let wv = tape.constant(w.clone());
        let prod = tape.hadamard(out, wv).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let grads = vars.iter().map(|v| tape.grad(*v).cloned()).collect();
        (tape.scalar(loss).unwrap(), out_val, grads)
    };
    let (_, out, _) = eval(inputs, None);
    let weights = random_tensor(&mut rng, out.rows(), out.cols(), 1.0);
    let (_, _, grads) = eval(inputs, Some(&weights));
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let mut shifted = inputs.to_vec();
            shifted[k].data_mut()[e] += h;
            let up = eval(&shifted, Some(&weights)).0;
            shifted[k].data_mut()[e] -= 2.0 * h;
            let down = eval(&shifted, Some(&weights)).0;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[k].as_ref().map_or(0.0, |g| g.data()[e]);
            worst = worst.max(rel_err(analytic, numeric, 1.0));
        }
    }
    worst
}
