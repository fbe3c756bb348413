//! Loss assembly, the AdamW optimizer, the training loop with best-val
//! checkpointing, evaluation, and the ablation protocol.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::{Cohort, PriorSet, Split, Subject};
use crate::error::{Error, Result};
use crate::metrics::{auc, mean_sd};
use crate::model::BrainTap;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

/// `BCE(logit, y) + λ · Σ_ℓ L_distill^ℓ`.
pub fn total_loss(
    tape: &mut Tape,
    logit: Var,
    label: u8,
    distill: &[Var],
    lambda: f64,
) -> Result<Var> {
    if label > 1 {
        return Err(Error::Parameter(format!("label {label} is not binary")));
    }
    let mut loss = tape.bce_with_logits(logit, f64::from(label))?;
    if lambda != 0.0 && !distill.is_empty() {
        let mut sum = distill[0];
        for d in &distill[1..] {
            sum = tape.add(sum, *d)?;
        }
        let weighted = tape.scale(sum, lambda);
        loss = tape.add(loss, weighted)?;
    }
    Ok(loss)
}

/// Per-subject loss value and gradient for every parameter.
pub fn subject_gradients(
    model: &BrainTap,
    subject: &Subject,
    priors: &PriorSet,
    lambda: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let out = model.forward(&mut tape, &p, &subject.fc, &subject.sc, priors)?;
    let loss = total_loss(&mut tape, out.logit, subject.label, &out.distill, lambda)?;
    let value = tape.scalar(loss)?;
    if !value.is_finite() {
        let culprit = tape
            .first_non_finite()
            .unwrap_or_else(|| "loss".to_string());
        return Err(Error::NonFinite(format!(
            "subject '{}': {culprit}",
            subject.id
        )));
    }
    tape.backward(loss)?;
    let grads = p
        .vars()
        .iter()
        .zip(model.params.tensors())
        .map(|(v, t)| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect();
    Ok((value, grads))
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.len()])
                .collect()
        };
        Self {
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr = self.learning_rate;
        for (((param, grad), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &g), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
    }
}

/// Scores and metrics for one group of subjects.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitEval {
    pub logits: Vec<f64>,
    pub labels: Vec<u8>,
    pub mean_loss: f64,
    /// `None` when the split is empty or single-class.
    pub auc: Option<f64>,
}

pub fn evaluate(
    model: &BrainTap,
    subjects: &[&Subject],
    priors: &PriorSet,
    lambda: f64,
) -> Result<SplitEval> {
    let mut logits = Vec::with_capacity(subjects.len());
    let mut total = 0.0;
    for s in subjects {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let out = model.forward(&mut tape, &p, &s.fc, &s.sc, priors)?;
        let loss = total_loss(&mut tape, out.logit, s.label, &out.distill, lambda)?;
        logits.push(tape.scalar(out.logit)?);
        total += tape.scalar(loss)?;
    }
    let labels: Vec<u8> = subjects.iter().map(|s| s.label).collect();
    let auc = auc(&logits, &labels).ok();
    Ok(SplitEval {
        mean_loss: if subjects.is_empty() {
            f64::NAN
        } else {
            total / subjects.len() as f64
        },
        logits,
        labels,
        auc,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: Option<f64>,
}

/// Result of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub seed: u64,
    /// Epoch (1-based) whose parameters were kept; 0 means the initial ones.
    pub best_epoch: usize,
    pub train_auc: Option<f64>,
    pub val_auc: Option<f64>,
    pub test_auc: Option<f64>,
    pub history: Vec<EpochRecord>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    /// One CSV record per epoch, with a header line.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_auc\n");
        for r in &self.history {
            out.push_str(&format!(
                "{},{:.8},{:.8},{}\n",
                r.epoch,
                r.train_loss,
                r.val_loss,
                fmt_opt(r.val_auc)
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        format!(
            "seed,best_epoch,train_auc,val_auc,test_auc\n{},{},{},{},{}\n",
            self.seed,
            self.best_epoch,
            fmt_opt(self.train_auc),
            fmt_opt(self.val_auc),
            fmt_opt(self.test_auc)
        )
    }
}

/// Trains one model on the cohort's train split, keeps the parameters with
/// the best validation AUC (ties broken by lower validation loss), and
/// reports AUC on every split.
pub fn train(cfg: &TrainConfig, cohort: &Cohort) -> Result<(BrainTap, EvalReport)> {
    train_with_observer(cfg, cohort, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_observer(
    cfg: &TrainConfig,
    cohort: &Cohort,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<(BrainTap, EvalReport)> {
    cfg.validate()?;
    let train_set = cohort.split(Split::Train);
    if train_set.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let val_set = cohort.split(Split::Val);
    let test_set = cohort.split(Split::Test);
    let priors = &cohort.priors;
    let model_cfg = cfg.model_config(cohort.n_rois(), priors.len())?;
    let mut model = BrainTap::new(model_cfg, cfg.seed)?;
    let mut opt = AdamW::new(&model.params, cfg);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));

    let mut best_params = model.params.clone();
    let mut best_epoch = 0;
    let mut best_auc = f64::NEG_INFINITY;
    let mut best_loss = f64::INFINITY;
    let mut since_best = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut sum: Option<Vec<Tensor>> = None;
            for &i in batch {
                let (loss, grads) =
                    subject_gradients(&model, train_set[i], priors, cfg.lambda_distill).map_err(
                        |e| match e {
                            Error::NonFinite(msg) => {
                                Error::NonFinite(format!("epoch {epoch}, {msg}"))
                            }
                            other => other,
                        },
                    )?;
                epoch_loss += loss;
                match sum.as_mut() {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            opt.step(&mut model.params, &grads);
        }

        let val = evaluate(&model, &val_set, priors, cfg.lambda_distill)?;
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            val_loss: val.mean_loss,
            val_auc: val.auc,
        };
        observer(&record);
        history.push(record);

        match val.auc {
            // equal AUC (typically a saturated 1.0) falls back to validation loss
            Some(a) if a > best_auc || (a == best_auc && val.mean_loss < best_loss) => {
                best_auc = a;
                best_loss = val.mean_loss;
                best_epoch = epoch;
                best_params = model.params.clone();
                since_best = 0;
            }
            Some(_) => {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
            None => {
                // no usable validation signal: keep the latest parameters
                best_epoch = epoch;
                best_params = model.params.clone();
            }
        }
    }

    model.params = best_params;
    let train_auc = evaluate(&model, &train_set, priors, cfg.lambda_distill)?.auc;
    let val_auc = evaluate(&model, &val_set, priors, cfg.lambda_distill)?.auc;
    let test_auc = evaluate(&model, &test_set, priors, cfg.lambda_distill)?.auc;
    Ok((
        model,
        EvalReport {
            seed: cfg.seed,
            best_epoch,
            train_auc,
            val_auc,
            test_auc,
            history,
        },
    ))
}

/// Configurations compared by the ablation protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoAmd,
    NoGlobalSpf,
    NoPersonalSpf,
    /// Both encoders with neither distillation nor prior fusion.
    NoFusion,
}

impl Variant {
    pub const ABLATION: [Variant; 4] = [
        Variant::Full,
        Variant::NoAmd,
        Variant::NoGlobalSpf,
        Variant::NoPersonalSpf,
    ];

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoAmd => c.amd_enabled = false,
            Variant::NoGlobalSpf => c.gspf_enabled = false,
            Variant::NoPersonalSpf => c.pspf_enabled = false,
            Variant::NoFusion => {
                c.amd_enabled = false;
                c.gspf_enabled = false;
                c.pspf_enabled = false;
            }
        }
        c
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAmd => "w/o AMD",
            Variant::NoGlobalSpf => "w/o G-SPF",
            Variant::NoPersonalSpf => "w/o P-SPF",
            Variant::NoFusion => "no fusion",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Test AUC of one configuration over several seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub test_aucs: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

pub fn train_seeds(cfg: &TrainConfig, cohort: &Cohort) -> Result<SeedSummary> {
    let mut test_aucs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let run_cfg = TrainConfig {
            seed,
            ..cfg.clone()
        };
        let (_, report) = train(&run_cfg, cohort)?;
        let auc = report
            .test_auc
            .ok_or_else(|| Error::Metric("test split has no AUC (empty or single-class)".into()))?;
        test_aucs.push(auc);
    }
    let (mean, sd) = mean_sd(&test_aucs);
    Ok(SeedSummary {
        seeds: cfg.seeds.clone(),
        test_aucs,
        mean,
        sd,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub summary: SeedSummary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, variant: Variant) -> Option<&SeedSummary> {
        self.rows
            .iter()
            .find(|r| r.variant == variant)
            .map(|r| &r.summary)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,mean_auc,sd_auc,seed_aucs\n");
        for r in &self.rows {
            let aucs: Vec<String> = r
                .summary
                .test_aucs
                .iter()
                .map(|a| format!("{a:.6}"))
                .collect();
            out.push_str(&format!(
                "{},{:.6},{:.6},{}\n",
                r.variant,
                r.summary.mean,
                r.summary.sd,
                aucs.join(";")
            ));
        }
        out
    }
}

/// Trains every variant over the configured seeds.
pub fn run_variants(
    cfg: &TrainConfig,
    cohort: &Cohort,
    variants: &[Variant],
) -> Result<AblationTable> {
    let rows = variants
        .iter()
        .map(|&variant| {
            Ok(AblationRow {
                variant,
                summary: train_seeds(&variant.apply(cfg), cohort)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationTable { rows })
}

/// Full model plus the three single-component removals.
pub fn run_ablation(cfg: &TrainConfig, cohort: &Cohort) -> Result<AblationTable> {
    run_variants(cfg, cohort, &Variant::ABLATION)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_cohort, GeneratorConfig};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            d_model: 8,
            layers: 2,
            heads: 2,
            z_dim: 4,
            hyper_hidden: 8,
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn total_loss_cases() {
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::scalar(0.0));
        let l = total_loss(&mut tape, zero, 1, &[], 1.0).unwrap();
        assert!((tape.scalar(l).unwrap() - 2f64.ln()).abs() < 1e-15);

        let d1 = tape.constant(Tensor::scalar(0.1));
        let d2 = tape.constant(Tensor::scalar(0.2));
        let l0 = total_loss(&mut tape, zero, 1, &[d1, d2], 0.0).unwrap();
        assert_eq!(tape.scalar(l0).unwrap(), 2f64.ln());

        // logit with BCE exactly 0.5 for y = 1: softplus(-x) = 0.5
        let x = -((0.5f64).exp() - 1.0).ln();
        let logit = tape.constant(Tensor::scalar(x));
        let l = total_loss(&mut tape, logit, 1, &[d1, d2], 1.0).unwrap();
        assert!((tape.scalar(l).unwrap() - 0.8).abs() < 1e-12);

        assert!(total_loss(&mut tape, zero, 2, &[], 1.0).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_params_bitwise() {
        let model = BrainTap::new(tiny_cfg().model_config(6, 2).unwrap(), 0).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..tiny_cfg()
        };
        let mut params = model.params.clone();
        let mut opt = AdamW::new(&params, &cfg);
        let grads: Vec<Tensor> = params.tensors().iter().map(|t| t.map(|_| 0.3)).collect();
        opt.step(&mut params, &grads);
        opt.step(&mut params, &grads);
        assert_eq!(params, model.params);
    }

    #[test]
    fn adamw_first_step_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row_vector(vec![1.0, -1.0]));
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&store, &cfg);
        opt.step(&mut store, &[Tensor::row_vector(vec![2.0, -0.5])]);
        let w = store.tensors()[0].data();
        // first bias-corrected Adam step has magnitude lr
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn empty_train_split_is_an_error() {
        let mut cohort = synthesize_cohort(&GeneratorConfig::new(4, 6, 2, 0.4, 0.2, 0)).unwrap();
        for r in &mut cohort.manifest.subjects {
            r.split = Split::Test;
        }
        assert!(matches!(
            train(&tiny_cfg(), &cohort),
            Err(Error::EmptySplit(_))
        ));
    }

    #[test]
    fn two_subject_smoke_run() {
        let mut cohort = synthesize_cohort(&GeneratorConfig::new(2, 6, 2, 0.4, 0.2, 0)).unwrap();
        for r in &mut cohort.manifest.subjects {
            r.split = Split::Train;
        }
        let cfg = TrainConfig {
            epochs: 1,
            ..tiny_cfg()
        };
        let (_, report) = train(&cfg, &cohort).unwrap();
        assert_eq!(report.history.len(), 1);
        assert!(report.history[0].train_loss.is_finite());
        assert_eq!(report.train_auc.is_some(), true);
        assert_eq!(report.test_auc, None);
    }

    #[test]
    fn non_finite_loss_names_tensor() {
        let cohort = synthesize_cohort(&GeneratorConfig::new(4, 6, 2, 0.4, 0.2, 0)).unwrap();
        let mut model = BrainTap::new(tiny_cfg().model_config(6, 2).unwrap(), 0).unwrap();
        let id = model.layout.head.output.bias.unwrap();
        *model.params.get_mut(id) = Tensor::scalar(f64::NAN);
        let err = subject_gradients(&model, &cohort.subjects[0], &cohort.priors, 1.0).unwrap_err();
        assert!(err.to_string().contains("head.1.bias"), "{err}");
    }

    #[test]
    fn variant_switches() {
        let base = TrainConfig::default();
        let c = Variant::NoAmd.apply(&base);
        assert!(!c.amd_enabled && c.gspf_enabled && c.pspf_enabled);
        let c = Variant::NoFusion.apply(&base);
        assert!(!c.amd_enabled && !c.gspf_enabled && !c.pspf_enabled);
        assert_eq!(Variant::ABLATION.len(), 4);
    }
}
