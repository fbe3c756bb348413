//! Selective prior fusion: learned global and subject-personalized scores
//! over the prior regions, turned into a symmetric sigmoid gate that biases
//! attention logits.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, Mlp, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct SpfParams {
    /// One `N × N` global score matrix per region, free region last.
    pub global: Vec<ParamId>,
    /// z → per-region `[α, u_A, u_B]`, concatenated.
    pub hyper: Mlp,
    /// pooled layer-0 tokens of both modalities (2d) → z.
    pub subject: Mlp,
    pub n_rois: usize,
    pub z_dim: usize,
}

impl SpfParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        n_rois: usize,
        n_priors: usize,
        d_model: usize,
        z_dim: usize,
        hyper_hidden: usize,
    ) -> Self {
        let n_regions = n_priors + 1;
        let global = (0..n_regions)
            .map(|k| store.add(format!("spf.global{k}"), Tensor::zeros(n_rois, n_rois)))
            .collect();
        let subject = Mlp::new(store, rng, "spf.subject", 2 * d_model, z_dim, z_dim);
        let per_region = 2 * n_rois + 1;
        let hyper = Mlp::new(
            store,
            rng,
            "spf.hyper",
            z_dim,
            hyper_hidden,
            n_regions * per_region,
        );
        // α starts at zero so every personalized mask starts at zero; the
        // factor columns keep their random init so ∂L/∂α is nonzero.
        let w = store.get_mut(hyper.output.weight);
        for r in 0..hyper_hidden {
            for k in 0..n_regions {
                w.set(r, k * per_region, 0.0);
            }
        }
        Self {
            global,
            hyper,
            subject,
            n_rois,
            z_dim,
        }
    }

    pub fn n_regions(&self) -> usize {
        self.global.len()
    }
}

/// Subject embedding from the mean-pooled layer-0 tokens of both modalities.
pub fn subject_embedding(
    tape: &mut Tape,
    p: &Bound,
    params: &SpfParams,
    x_fc0: Var,
    x_sc0: Var,
) -> Result<Var> {
    let (sf, ss) = (tape.value(x_fc0).shape(), tape.value(x_sc0).shape());
    if sf != ss || 2 * sf[1] != params.subject.hidden.fan_in {
        return Err(Error::dim(
            "subject_embedding",
            format!("{sf:?} and {ss:?}"),
        ));
    }
    let pf = tape.mean_rows(x_fc0)?;
    let ps = tape.mean_rows(x_sc0)?;
    let pooled = tape.hcat(&[pf, ps])?;
    params.subject.forward(tape, p, pooled)
}

/// `(α/2)·(u_A u_Bᵀ + u_B u_Aᵀ)` for a `1 × 1` α and `1 × N` factors.
pub fn personalized_mask_from_factors(
    tape: &mut Tape,
    alpha: Var,
    u_a: Var,
    u_b: Var,
) -> Result<Var> {
    let ua_col = tape.transpose(u_a);
    let outer = tape.matmul(ua_col, u_b)?;
    let outer_t = tape.transpose(outer);
    let both = tape.add(outer, outer_t)?;
    let half = tape.scale(alpha, 0.5);
    tape.scalar_mul(half, both)
}

/// Personalized masks `W_k^(r)(z)` for every region.
pub fn personalized_masks(
    tape: &mut Tape,
    p: &Bound,
    params: &SpfParams,
    z: Var,
) -> Result<Vec<Var>> {
    if tape.value(z).shape() != [1, params.z_dim] {
        return Err(Error::dim(
            "personalized_masks",
            format!(
                "z {:?}, expected [1, {}]",
                tape.value(z).shape(),
                params.z_dim
            ),
        ));
    }
    let out = params.hyper.forward(tape, p, z)?;
    let n = params.n_rois;
    let per_region = 2 * n + 1;
    (0..params.n_regions())
        .map(|k| {
            let base = k * per_region;
            let alpha = tape.slice_cols(out, base, 1)?;
            let u_a = tape.slice_cols(out, base + 1, n)?;
            let u_b = tape.slice_cols(out, base + 1 + n, n)?;
            personalized_mask_from_factors(tape, alpha, u_a, u_b)
        })
        .collect()
}

/// `sym0(Σ_k (W_k^(g) + W_k^(r)) ⊙ Π_k)`. Either term may be absent; with
/// neither the result is the zero matrix.
pub fn score_matrix(
    tape: &mut Tape,
    region_masks: &[Var],
    global: Option<&[Var]>,
    personal: Option<&[Var]>,
) -> Result<Var> {
    let n = match region_masks.first() {
        Some(m) => tape.value(*m).rows(),
        None => return Err(Error::dim("score_matrix", "no region masks")),
    };
    for terms in [global, personal].into_iter().flatten() {
        if terms.len() != region_masks.len() {
            return Err(Error::dim(
                "score_matrix",
                format!(
                    "{} score terms for {} regions",
                    terms.len(),
                    region_masks.len()
                ),
            ));
        }
    }
    let mut acc: Option<Var> = None;
    for (k, &mask) in region_masks.iter().enumerate() {
        if tape.value(mask).shape() != [n, n] {
            return Err(Error::dim(
                "score_matrix",
                format!("mask {k} is not {n}x{n}"),
            ));
        }
        let term = match (global, personal) {
            (Some(g), Some(r)) => tape.add(g[k], r[k])?,
            (Some(g), None) => g[k],
            (None, Some(r)) => r[k],
            (None, None) => continue,
        };
        let masked = tape.hadamard(term, mask)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, masked)?,
            None => masked,
        });
    }
    match acc {
        Some(a) => tape.sym0(a),
        None => Ok(tape.constant(Tensor::zeros(n, n))),
    }
}

/// `σ(S / τ)` elementwise.
pub fn gate(tape: &mut Tape, score: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "gate temperature must be positive, got {temperature}"
        )));
    }
    let scaled = tape.scale(score, 1.0 / temperature);
    Ok(tape.sigmoid(scaled))
}

/// A subject's evaluated gate together with the score it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMatrix {
    pub gate: Tensor,
    pub score: Tensor,
}
