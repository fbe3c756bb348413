//! Adaptive mutual distillation between the FC and SC token streams.
//!
//! After each encoder layer both modalities are projected into a shared
//! distillation space, aligned with a symmetric KL loss over softened
//! channel distributions, and each modality receives a learned fraction of
//! the other's projected content through a convex residual update.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, Mlp, ParamId, ParamStore};
use crate::tensor::{sigmoid, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct AmdLayerParams {
    pub g_fc: Mlp,
    pub g_sc: Mlp,
    pub h_fc: Mlp,
    pub h_sc: Mlp,
    /// Unconstrained logit of β (FC → SC injection weight).
    pub beta_raw: ParamId,
    /// Unconstrained logit of γ (SC → FC injection weight).
    pub gamma_raw: ParamId,
}

impl AmdLayerParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_model: usize,
        d_distill: usize,
    ) -> Self {
        let mut mlp = |name: &str, fan_in, fan_out| {
            Mlp::new(
                store,
                rng,
                &format!("{prefix}.{name}"),
                fan_in,
                d_distill,
                fan_out,
            )
        };
        let g_fc = mlp("g_fc", d_model, d_distill);
        let g_sc = mlp("g_sc", d_model, d_distill);
        let h_fc = mlp("h_fc", d_distill, d_model);
        let h_sc = mlp("h_sc", d_distill, d_model);
        Self {
            g_fc,
            g_sc,
            h_fc,
            h_sc,
            beta_raw: store.add(format!("{prefix}.beta_raw"), Tensor::scalar(0.0)),
            gamma_raw: store.add(format!("{prefix}.gamma_raw"), Tensor::scalar(0.0)),
        }
    }

    /// Current `(β, γ)`.
    pub fn ratios(&self, store: &ParamStore) -> (f64, f64) {
        let raw = |id| store.get(id).data()[0];
        (sigmoid(raw(self.beta_raw)), sigmoid(raw(self.gamma_raw)))
    }
}

pub struct AmdLayerOutput {
    pub x_fc: Var,
    pub x_sc: Var,
    pub loss: Var,
    pub beta: Var,
    pub gamma: Var,
}

/// One exchange step.
///
/// β and γ enter the distillation loss as detached weights: the loss alone
/// is minimised by β = γ = 0, so they are trained only through the token
/// update and the task loss.
pub fn amd_exchange(
    tape: &mut Tape,
    p: &Bound,
    params: &AmdLayerParams,
    x_fc: Var,
    x_sc: Var,
    temperature: f64,
) -> Result<AmdLayerOutput> {
    let (sf, ss) = (tape.value(x_fc).shape(), tape.value(x_sc).shape());
    if sf != ss {
        return Err(Error::dim("amd_exchange", format!("{sf:?} vs {ss:?}")));
    }
    let n = sf[0] as f64;

    let z_fc = params.g_fc.forward(tape, p, x_fc)?;
    let z_sc = params.g_sc.forward(tape, p, x_sc)?;

    let beta = tape.sigmoid(p.var(params.beta_raw));
    let gamma = tape.sigmoid(p.var(params.gamma_raw));

    let kl_fs = tape.softmax_kl(z_fc, z_sc, temperature)?;
    let kl_sf = tape.softmax_kl(z_sc, z_fc, temperature)?;
    let kl_fs = tape.sum(kl_fs);
    let kl_sf = tape.sum(kl_sf);
    let beta_w = tape.detach(beta);
    let gamma_w = tape.detach(gamma);
    let a = tape.scalar_mul(beta_w, kl_fs)?;
    let b = tape.scalar_mul(gamma_w, kl_sf)?;
    let total = tape.add(a, b)?;
    let loss = tape.scale(total, 1.0 / n);

    let x_fc = convex_update(tape, p, &params.h_fc, gamma, x_fc, z_sc)?;
    let x_sc = convex_update(tape, p, &params.h_sc, beta, x_sc, z_fc)?;
    Ok(AmdLayerOutput {
        x_fc,
        x_sc,
        loss,
        beta,
        gamma,
    })
}

/// `(1 − w)·x + w·h(z)`.
fn convex_update(tape: &mut Tape, p: &Bound, h: &Mlp, w: Var, x: Var, z: Var) -> Result<Var> {
    let injected = h.forward(tape, p, z)?;
    let keep = tape.affine(w, -1.0, 1.0);
    let kept = tape.scalar_mul(keep, x)?;
    let delta = tape.scalar_mul(w, injected)?;
    tape.add(kept, delta)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::tensor::row_softmax;

    fn setup(seed: u64) -> (ParamStore, AmdLayerParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = AmdLayerParams::new(&mut store, &mut rng, "amd0", 8, 8);
        (store, params, rng)
    }

    fn random(rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(6, 8, |_, _| rng.random_range(-1.0..1.0))
    }

    fn set_raw(store: &mut ParamStore, params: &AmdLayerParams, b: f64, c: f64) {
        *store.get_mut(params.beta_raw) = Tensor::scalar(b);
        *store.get_mut(params.gamma_raw) = Tensor::scalar(c);
    }

    struct Run {
        x_fc: Tensor,
        x_sc: Tensor,
        loss: f64,
        h_fc_of_zsc: Tensor,
        z_fc: Tensor,
        z_sc: Tensor,
    }

    fn run(store: &ParamStore, params: &AmdLayerParams, xf: &Tensor, xs: &Tensor) -> Run {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let (f, s) = (tape.constant(xf.clone()), tape.constant(xs.clone()));
        let out = amd_exchange(&mut tape, &p, params, f, s, 1.0).unwrap();
        let zf = params.g_fc.forward(&mut tape, &p, f).unwrap();
        let zs = params.g_sc.forward(&mut tape, &p, s).unwrap();
        let hf = params.h_fc.forward(&mut tape, &p, zs).unwrap();
        Run {
            x_fc: tape.value(out.x_fc).clone(),
            x_sc: tape.value(out.x_sc).clone(),
            loss: tape.scalar(out.loss).unwrap(),
            h_fc_of_zsc: tape.value(hf).clone(),
            z_fc: tape.value(zf).clone(),
            z_sc: tape.value(zs).clone(),
        }
    }

    #[test]
    fn near_zero_ratios_keep_tokens() {
        let (mut store, params, mut rng) = setup(0);
        set_raw(&mut store, &params, -30.0, -30.0);
        let (xf, xs) = (random(&mut rng), random(&mut rng));
        let r = run(&store, &params, &xf, &xs);
        assert!(r.x_fc.max_abs_diff(&xf) < 1e-9);
        assert!(r.x_sc.max_abs_diff(&xs) < 1e-9);
        assert!(r.loss.abs() < 1e-9);
    }

    #[test]
    fn identical_streams_have_zero_loss() {
        let (mut store, params, mut rng) = setup(1);
        // tie g_sc to g_fc
        for (a, b) in [
            (params.g_fc.hidden.weight, params.g_sc.hidden.weight),
            (params.g_fc.output.weight, params.g_sc.output.weight),
        ] {
            let v = store.get(a).clone();
            *store.get_mut(b) = v;
        }
        let x = random(&mut rng);
        let r = run(&store, &params, &x, &x);
        assert!(r.loss.abs() < 1e-14);
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        let (mut store, params, mut rng) = setup(2);
        set_raw(&mut store, &params, 0.3, -1.1);
        let (xf, xs) = (random(&mut rng), random(&mut rng));
        let r = run(&store, &params, &xf, &xs);

        let (beta, gamma) = (1.0 / (1.0 + (-0.3f64).exp()), 1.0 / (1.0 + 1.1f64.exp()));
        let pf = row_softmax(&r.z_fc, 1.0).unwrap();
        let ps = row_softmax(&r.z_sc, 1.0).unwrap();
        let mut total = 0.0;
        for i in 0..6 {
            let mut kl_fs = 0.0;
            let mut kl_sf = 0.0;
            for j in 0..8 {
                let (a, b) = (pf.get(i, j), ps.get(i, j));
                kl_fs += a * (a / b).ln();
                kl_sf += b * (b / a).ln();
            }
            total += beta * kl_fs + gamma * kl_sf;
        }
        let expected = total / 6.0;
        assert!(
            (r.loss - expected).abs() < 1e-12,
            "{} vs {expected}",
            r.loss
        );
        assert!(r.loss >= 0.0);
    }

    #[test]
    fn update_is_convex_combination() {
        let (mut store, params, mut rng) = setup(3);
        set_raw(&mut store, &params, 0.8, -0.4);
        let (xf, xs) = (random(&mut rng), random(&mut rng));
        let r = run(&store, &params, &xf, &xs);
        let gamma = sigmoid(-0.4);
        for i in 0..6 {
            for j in 0..8 {
                let expected = (1.0 - gamma) * xf.get(i, j) + gamma * r.h_fc_of_zsc.get(i, j);
                assert!((r.x_fc.get(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ratio_gradient_flows_through_residual() {
        let (store, params, mut rng) = setup(4);
        let (xf, xs) = (random(&mut rng), random(&mut rng));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let (f, s) = (tape.constant(xf), tape.constant(xs));
        let out = amd_exchange(&mut tape, &p, &params, f, s, 1.0).unwrap();
        let sf = tape.sum(out.x_fc);
        let ss = tape.sum(out.x_sc);
        let obj = tape.add(sf, ss).unwrap();
        let obj = tape.add(obj, out.loss).unwrap();
        tape.backward(obj).unwrap();
        assert!(
            tape.grad(p.var(params.beta_raw))
                .unwrap()
                .item()
                .unwrap()
                .abs()
                > 0.0
        );
        assert!(
            tape.grad(p.var(params.gamma_raw))
                .unwrap()
                .item()
                .unwrap()
                .abs()
                > 0.0
        );
    }

    #[test]
    fn distill_loss_alone_gives_no_ratio_gradient() {
        let (store, params, mut rng) = setup(5);
        let (xf, xs) = (random(&mut rng), random(&mut rng));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let (f, s) = (tape.constant(xf), tape.constant(xs));
        let out = amd_exchange(&mut tape, &p, &params, f, s, 1.0).unwrap();
        tape.backward(out.loss).unwrap();
        assert!(tape.grad(p.var(params.beta_raw)).is_none());
        assert!(tape.grad(p.var(params.g_fc.output.weight)).is_some());
    }

    #[test]
    fn ratios_at_zero_are_half() {
        let (store, params, _) = setup(6);
        assert_eq!(params.ratios(&store), (0.5, 0.5));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (store, params, _) = setup(7);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let f = tape.constant(Tensor::zeros(6, 8));
        let s = tape.constant(Tensor::zeros(5, 8));
        assert!(amd_exchange(&mut tape, &p, &params, f, s, 1.0).is_err());
    }
}
