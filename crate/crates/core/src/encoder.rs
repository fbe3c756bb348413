//! Per-modality token embedding, transformer encoder layers with an
//! optional additive attention bias, and the pooled classifier head.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, Linear, Mlp, ParamStore};
use crate::tensor::{Tape, Var};

/// Weights of one encoder layer. Each head owns its query, key and value
/// projections (`d × d_head`, no bias).
#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub query: Vec<Linear>,
    pub key: Vec<Linear>,
    pub value: Vec<Linear>,
    pub output: Linear,
    pub mlp: Mlp,
}

/// Embedding map plus `L` encoder layers for one modality.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub embed: Mlp,
    pub layers: Vec<EncoderLayerParams>,
    pub n_rois: usize,
    pub d_model: usize,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderShape {
    pub n_rois: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl EncoderParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        shape: EncoderShape,
    ) -> Result<Self> {
        let EncoderShape {
            n_rois,
            d_model,
            layers,
            heads,
            d_ff,
        } = shape;
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Parameter(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        let d_head = d_model / heads;
        let embed = Mlp::new(
            store,
            rng,
            &format!("{prefix}.embed"),
            n_rois,
            d_model,
            d_model,
        );
        let layers = (0..layers)
            .map(|l| {
                let name = format!("{prefix}.layer{l}");
                let mut proj = |kind: &str| -> Vec<Linear> {
                    (0..heads)
                        .map(|h| {
                            Linear::new(
                                store,
                                rng,
                                &format!("{name}.{kind}{h}"),
                                d_model,
                                d_head,
                                false,
                            )
                        })
                        .collect()
                };
                let query = proj("q");
                let key = proj("k");
                let value = proj("v");
                EncoderLayerParams {
                    query,
                    key,
                    value,
                    output: Linear::new(
                        store,
                        rng,
                        &format!("{name}.out"),
                        d_model,
                        d_model,
                        false,
                    ),
                    mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d_model, d_ff, d_model),
                }
            })
            .collect();
        Ok(Self {
            embed,
            layers,
            n_rois,
            d_model,
            heads,
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Tokens after one layer together with each head's attention map.
pub struct LayerOutput {
    pub tokens: Var,
    pub attention: Vec<Var>,
}

/// Row `i` of the result is the embedding of row `i` of `adj`.
pub fn embed_tokens(tape: &mut Tape, p: &Bound, params: &EncoderParams, adj: Var) -> Result<Var> {
    let shape = tape.value(adj).shape();
    if shape != [params.n_rois, params.n_rois] {
        return Err(Error::dim(
            "embed_tokens",
            format!("adjacency {shape:?}, expected {n}x{n}", n = params.n_rois),
        ));
    }
    params.embed.forward(tape, p, adj)
}

/// One pre-bias multi-head self-attention block followed by the MLP block,
/// both with residual connections. `bias`, when present, is scaled by `eta`
/// and added to every head's logits.
pub fn encoder_layer(
    tape: &mut Tape,
    p: &Bound,
    layer: &EncoderLayerParams,
    tokens: Var,
    bias: Option<Var>,
    eta: f64,
    layer_norm: bool,
) -> Result<LayerOutput> {
    let [n, d] = tape.value(tokens).shape();
    let d_model = layer.output.fan_in;
    if d != d_model {
        return Err(Error::dim(
            "encoder_layer",
            format!("tokens {n}x{d}, model width {d_model}"),
        ));
    }
    let bias = match bias {
        Some(b) if eta != 0.0 => {
            if tape.value(b).shape() != [n, n] {
                return Err(Error::dim(
                    "encoder_layer",
                    format!("bias {:?} for {n} tokens", tape.value(b).shape()),
                ));
            }
            Some(tape.scale(b, eta))
        }
        _ => None,
    };

    let d_head = layer.query[0].fan_out;
    let inv_sqrt = 1.0 / (d_head as f64).sqrt();
    let mut heads = Vec::with_capacity(layer.query.len());
    let mut attention = Vec::with_capacity(layer.query.len());
    for ((wq, wk), wv) in layer.query.iter().zip(&layer.key).zip(&layer.value) {
        let q = wq.forward(tape, p, tokens)?;
        let k = wk.forward(tape, p, tokens)?;
        let v = wv.forward(tape, p, tokens)?;
        let kt = tape.transpose(k);
        let logits = tape.matmul(q, kt)?;
        let mut logits = tape.scale(logits, inv_sqrt);
        if let Some(b) = bias {
            logits = tape.add(logits, b)?;
        }
        let probs = tape.row_softmax(logits, 1.0)?;
        heads.push(tape.matmul(probs, v)?);
        attention.push(probs);
    }
    let concat = tape.hcat(&heads)?;
    let attended = layer.output.forward(tape, p, concat)?;
    let mut z = tape.add(tokens, attended)?;
    if layer_norm {
        z = tape.layer_norm(z);
    }
    let ff = layer.mlp.forward(tape, p, z)?;
    let mut x = tape.add(z, ff)?;
    if layer_norm {
        x = tape.layer_norm(x);
    }
    Ok(LayerOutput {
        tokens: x,
        attention,
    })
}

/// `MLP_head((mean_rows(x_fc) + mean_rows(x_sc)) / 2)` as a `1 × 1` logit.
pub fn classify(tape: &mut Tape, p: &Bound, head: &Mlp, x_fc: Var, x_sc: Var) -> Result<Var> {
    let (sf, ss) = (tape.value(x_fc).shape(), tape.value(x_sc).shape());
    if sf != ss || sf[1] != head.hidden.fan_in {
        return Err(Error::dim("classify", format!("{sf:?} and {ss:?}")));
    }
    let pf = tape.mean_rows(x_fc)?;
    let ps = tape.mean_rows(x_sc)?;
    let sum = tape.add(pf, ps)?;
    let pooled = tape.scale(sum, 0.5);
    head.forward(tape, p, pooled)
}
