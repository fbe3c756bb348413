//! The full dual-encoder model: embeddings, gated encoder layers for both
//! modalities, per-layer mutual distillation and the pooled classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amd::{amd_exchange, AmdLayerParams};
use crate::data::{PriorSet, Subject};
use crate::encoder::{classify, embed_tokens, encoder_layer, EncoderParams, EncoderShape};
use crate::error::{Error, Result};
use crate::params::{Bound, Mlp, ParamStore};
use crate::spf::{
    gate, personalized_masks, score_matrix, subject_embedding, GateMatrix, SpfParams,
};
use crate::tensor::{Tape, Tensor, Var};

/// Architecture and ablation switches. Stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_rois: usize,
    pub n_priors: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub d_distill: usize,
    pub z_dim: usize,
    pub hyper_hidden: usize,
    pub tau_amd: f64,
    pub tau_spf: f64,
    pub eta: f64,
    pub amd_enabled: bool,
    pub gspf_enabled: bool,
    pub pspf_enabled: bool,
    pub final_layer_exchange: bool,
    pub zero_gate_diagonal: bool,
    pub layer_norm: bool,
    pub gate_fc: bool,
    pub gate_sc: bool,
}

impl ModelConfig {
    /// Defaults for a cohort with `n_rois` ROIs and `n_priors` priors.
    pub fn new(n_rois: usize, n_priors: usize) -> Self {
        Self {
            n_rois,
            n_priors,
            d_model: 64,
            layers: 3,
            heads: 4,
            d_ff: 128,
            d_distill: 64,
            z_dim: 32,
            hyper_hidden: 64,
            tau_amd: 1.0,
            tau_spf: 1.0,
            eta: 1.0,
            amd_enabled: true,
            gspf_enabled: true,
            pspf_enabled: true,
            final_layer_exchange: true,
            zero_gate_diagonal: true,
            layer_norm: false,
            gate_fc: true,
            gate_sc: true,
        }
    }

    pub fn spf_enabled(&self) -> bool {
        self.gspf_enabled || self.pspf_enabled
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Parameter(m));
        if self.n_rois < 2 {
            return fail(format!("n_rois must be >= 2, got {}", self.n_rois));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("d_distill", self.d_distill),
            ("z_dim", self.z_dim),
            ("hyper_hidden", self.hyper_hidden),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        for (name, v) in [("tau_amd", self.tau_amd), ("tau_spf", self.tau_spf)] {
            if !(v > 0.0) || !v.is_finite() {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !self.eta.is_finite() {
            return fail("eta must be finite".into());
        }
        Ok(())
    }
}

/// Parameter layout of the model; every field indexes the [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Layout {
    pub encoder_fc: EncoderParams,
    pub encoder_sc: EncoderParams,
    pub amd: Vec<AmdLayerParams>,
    pub spf: SpfParams,
    pub head: Mlp,
}

/// A model instance: configuration, layout and parameter values.
#[derive(Clone, Debug)]
pub struct BrainTap {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: ParamStore,
}

/// Handles produced by one forward pass.
pub struct ForwardOutput {
    pub logit: Var,
    /// One distillation loss per executed exchange.
    pub distill: Vec<Var>,
    pub gate: Option<GateVars>,
    pub tokens_fc: Var,
    pub tokens_sc: Var,
}

#[derive(Clone, Copy)]
pub struct GateVars {
    pub score: Var,
    pub gate: Var,
    /// The additive bias actually injected (before η scaling).
    pub bias: Var,
}

impl BrainTap {
    /// Builds a freshly initialised model. The parameter layout depends on
    /// the architecture only, never on the ablation flags.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let shape = EncoderShape {
            n_rois: config.n_rois,
            d_model: config.d_model,
            layers: config.layers,
            heads: config.heads,
            d_ff: config.d_ff,
        };
        let encoder_fc = EncoderParams::new(&mut store, &mut rng, "fc", shape)?;
        let encoder_sc = EncoderParams::new(&mut store, &mut rng, "sc", shape)?;
        let amd = (0..config.layers)
            .map(|l| {
                AmdLayerParams::new(
                    &mut store,
                    &mut rng,
                    &format!("amd{l}"),
                    config.d_model,
                    config.d_distill,
                )
            })
            .collect();
        let spf = SpfParams::new(
            &mut store,
            &mut rng,
            config.n_rois,
            config.n_priors,
            config.d_model,
            config.z_dim,
            config.hyper_hidden,
        );
        let head = Mlp::new(
            &mut store,
            &mut rng,
            "head",
            config.d_model,
            config.d_model,
            1,
        );
        Ok(Self {
            config,
            layout: Layout {
                encoder_fc,
                encoder_sc,
                amd,
                spf,
                head,
            },
            params: store,
        })
    }

    fn check_inputs(&self, fc: &Tensor, sc: &Tensor, priors: &PriorSet) -> Result<()> {
        let n = self.config.n_rois;
        if fc.shape() != [n, n] || sc.shape() != [n, n] {
            return Err(Error::dim(
                "forward",
                format!(
                    "fc {:?}, sc {:?}, model expects {n}x{n}",
                    fc.shape(),
                    sc.shape()
                ),
            ));
        }
        if priors.n_rois() != n || priors.len() != self.config.n_priors {
            return Err(Error::dim(
                "forward",
                format!(
                    "{} priors over {} ROIs, model expects {} over {n}",
                    priors.len(),
                    priors.n_rois(),
                    self.config.n_priors
                ),
            ));
        }
        Ok(())
    }

    /// Records the gate for one subject from its layer-0 tokens.
    fn gate_on_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x_fc0: Var,
        x_sc0: Var,
        priors: &PriorSet,
    ) -> Result<Option<GateVars>> {
        let cfg = &self.config;
        if !cfg.spf_enabled() {
            return Ok(None);
        }
        let spf = &self.layout.spf;
        let masks: Vec<Var> = priors
            .all_masks()
            .map(|m| tape.constant(m.clone()))
            .collect();
        let global: Option<Vec<Var>> = cfg
            .gspf_enabled
            .then(|| spf.global.iter().map(|id| p.var(*id)).collect());
        let personal = if cfg.pspf_enabled {
            let z = subject_embedding(tape, p, spf, x_fc0, x_sc0)?;
            Some(personalized_masks(tape, p, spf, z)?)
        } else {
            None
        };
        let score = score_matrix(tape, &masks, global.as_deref(), personal.as_deref())?;
        let g = gate(tape, score, cfg.tau_spf)?;
        let bias = if cfg.zero_gate_diagonal {
            let n = cfg.n_rois;
            let off = tape.constant(Tensor::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 }));
            tape.hadamard(g, off)?
        } else {
            g
        };
        Ok(Some(GateVars {
            score,
            gate: g,
            bias,
        }))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        fc: &Tensor,
        sc: &Tensor,
        priors: &PriorSet,
    ) -> Result<ForwardOutput> {
        self.check_inputs(fc, sc, priors)?;
        let cfg = &self.config;
        let lay = &self.layout;

        let a_fc = tape.constant(fc.clone());
        let a_sc = tape.constant(sc.clone());
        let mut x_fc = embed_tokens(tape, p, &lay.encoder_fc, a_fc)?;
        let mut x_sc = embed_tokens(tape, p, &lay.encoder_sc, a_sc)?;

        let gate = self.gate_on_tape(tape, p, x_fc, x_sc, priors)?;
        let bias = gate.map(|g| g.bias);
        let bias_fc = bias.filter(|_| cfg.gate_fc);
        let bias_sc = bias.filter(|_| cfg.gate_sc);

        let mut distill = Vec::new();
        for l in 0..cfg.layers {
            x_fc = encoder_layer(
                tape,
                p,
                &lay.encoder_fc.layers[l],
                x_fc,
                bias_fc,
                cfg.eta,
                cfg.layer_norm,
            )?
            .tokens;
            x_sc = encoder_layer(
                tape,
                p,
                &lay.encoder_sc.layers[l],
                x_sc,
                bias_sc,
                cfg.eta,
                cfg.layer_norm,
            )?
            .tokens;
            let last = l + 1 == cfg.layers;
            if cfg.amd_enabled && (!last || cfg.final_layer_exchange) {
                let out = amd_exchange(tape, p, &lay.amd[l], x_fc, x_sc, cfg.tau_amd)?;
                x_fc = out.x_fc;
                x_sc = out.x_sc;
                distill.push(out.loss);
            }
        }
        let logit = classify(tape, p, &lay.head, x_fc, x_sc)?;
        Ok(ForwardOutput {
            logit,
            distill,
            gate,
            tokens_fc: x_fc,
            tokens_sc: x_sc,
        })
    }

    /// Logit for one subject.
    pub fn logit(&self, subject: &Subject, priors: &PriorSet) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &p, &subject.fc, &subject.sc, priors)?;
        tape.scalar(out.logit)
    }

    /// The subject's gate, or `None` when prior fusion is disabled.
    pub fn gate_matrix(&self, subject: &Subject, priors: &PriorSet) -> Result<Option<GateMatrix>> {
        self.check_inputs(&subject.fc, &subject.sc, priors)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let a_fc = tape.constant(subject.fc.clone());
        let a_sc = tape.constant(subject.sc.clone());
        let x_fc = embed_tokens(&mut tape, &p, &self.layout.encoder_fc, a_fc)?;
        let x_sc = embed_tokens(&mut tape, &p, &self.layout.encoder_sc, a_sc)?;
        Ok(self
            .gate_on_tape(&mut tape, &p, x_fc, x_sc, priors)?
            .map(|g| GateMatrix {
                gate: tape.value(g.gate).clone(),
                score: tape.value(g.score).clone(),
            }))
    }

    /// Per-layer `(β, γ)`; both zero when distillation is disabled.
    pub fn ratios(&self) -> Vec<(f64, f64)> {
        self.layout
            .amd
            .iter()
            .map(|a| {
                if self.config.amd_enabled {
                    a.ratios(&self.params)
                } else {
                    (0.0, 0.0)
                }
            })
            .collect()
    }
}
