use super::encode::{FeatureSchema, Target};
use super::{LayerKind, LayerParams, NptConfig, NptParams};
use crate::error::{ensure, Result};
use crate::masking::MaskMatrix;
use crate::numerics::{rng_for, Mode, Rng, Tape, Tensor, Var};

/// `[n, sum(w_j + 1)] -> [n, d, e]`: per-feature linear maps plus the
/// feature-index and feature-type embeddings.
pub fn in_embed(tape: &mut Tape, params: &NptParams<Var>, schema: &FeatureSchema, input: Var) -> Result<Var> {
    let widths: Vec<usize> = schema.widths().iter().map(|w| w + 1).collect();
    let h = tape.grouped_linear_in(input, params.in_w, params.in_b, &widths)?;
    tape.group_embeddings(h, params.index_emb, params.type_emb, &schema.type_indices())
}

/// One attention block on `[rows, h]`, attending within consecutive groups
/// of `group` rows:
///
/// ```text
/// res = H W_res + MHSelfAtt(LN(H))
/// out = res + rFF(LN(res))
/// ```
#[allow(clippy::too_many_arguments)]
pub fn mhsa_block(
    tape: &mut Tape,
    h: Var,
    p: &LayerParams<Var>,
    group: usize,
    heads: usize,
    dropout_p: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    let x = tape.layer_norm(h, p.ln1_g, p.ln1_b)?;
    let q = tape.matmul(x, p.w_q)?;
    let k = tape.matmul(x, p.w_k)?;
    let v = tape.matmul(x, p.w_v)?;
    let att = tape.attention(q, k, v, group, heads, dropout_p, mode, rng)?;
    let att = tape.matmul(att, p.w_o)?;
    let skip = tape.matmul(h, p.w_res)?;
    let res = tape.add(skip, att)?;

    let y = tape.layer_norm(res, p.ln2_g, p.ln2_b)?;
    let f = tape.matmul(y, p.ff1_w)?;
    let f = tape.add_row(f, p.ff1_b)?;
    let f = tape.gelu(f);
    let f = tape.dropout(f, dropout_p, mode, rng)?;
    let f = tape.matmul(f, p.ff2_w)?;
    let f = tape.add_row(f, p.ff2_b)?;
    tape.add(res, f)
}

fn dims3(tape: &Tape, h: Var) -> Result<(usize, usize, usize)> {
    let s = tape.value(h).shape();
    ensure!(s.len() == 3, Dimension, "expected [n, d, e], got {s:?}");
    Ok((s[0], s[1], s[2]))
}

/// Attention between datapoints: every row flattened to `d * e` and attending
/// over all rows.
pub fn abd(
    tape: &mut Tape,
    h: Var,
    p: &LayerParams<Var>,
    config: &NptConfig,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    let (n, d, e) = dims3(tape, h)?;
    let flat = tape.reshape(h, &[n, d * e])?;
    let out = mhsa_block(tape, flat, p, n, config.heads, config.dropout_p, mode, rng)?;
    tape.reshape(out, &[n, d, e])
}

/// Attention between attributes: each row's `d` feature embeddings attend to
/// each other, independently per row.
pub fn aba(
    tape: &mut Tape,
    h: Var,
    p: &LayerParams<Var>,
    config: &NptConfig,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    let (n, d, e) = dims3(tape, h)?;
    let flat = tape.reshape(h, &[n * d, e])?;
    let out = mhsa_block(tape, flat, p, d, config.heads, config.dropout_p, mode, rng)?;
    tape.reshape(out, &[n, d, e])
}

/// Full reconstruction `[n, sum(w_j + 1)] -> [n, sum(w_j)]`: numerical
/// predictions in standardized units and raw categorical logits.
#[allow(clippy::too_many_arguments)]
pub fn npt_forward(
    tape: &mut Tape,
    params: &NptParams<Var>,
    config: &NptConfig,
    schema: &FeatureSchema,
    input: Var,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    let s = tape.value(input).shape();
    ensure!(
        s.len() == 2 && s[1] == schema.input_width(),
        Contract,
        "input shape {s:?} does not match the schema (width {})",
        schema.input_width()
    );
    ensure!(
        params.layers.len() == config.depth,
        Contract,
        "{} layers for depth {}",
        params.layers.len(),
        config.depth
    );
    let mut h = in_embed(tape, params, schema, input)?;
    for (layer, kind) in params.layers.iter().zip(config.layer_kinds()) {
        h = match kind {
            LayerKind::Abd => abd(tape, h, layer, config, mode, rng)?,
            LayerKind::Aba => aba(tape, h, layer, config, mode, rng)?,
        };
    }
    tape.grouped_linear_out(h, params.out_w, params.out_b, &schema.widths())
}

/// Inference-mode reconstruction without gradient tracking.
pub fn reconstruct(
    params: &NptParams,
    config: &NptConfig,
    schema: &FeatureSchema,
    input: Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let p = params.map(|t| tape.constant(t.clone()));
    let x = tape.constant(input);
    // eval mode draws nothing from this
    let mut rng = rng_for(0, 0);
    let out = npt_forward(&mut tape, &p, config, schema, x, Mode::Eval, &mut rng)?;
    Ok(tape.take_value(out))
}

pub struct LossOutput {
    /// Mean loss over every masked entry, 0 when nothing is masked.
    pub loss: Var,
    /// Mean loss over each row's masked entries, 0 for rows with none.
    pub per_sample: Vec<f64>,
}

/// Per-entry loss for the masked entries of one row, with its gradient with
/// respect to that row's reconstruction written into `grad`.
fn row_losses(
    recon: &[f64],
    targets: &[Target],
    mask: &[bool],
    widths: &[usize],
    mut grad: Option<&mut [f64]>,
) -> (f64, usize) {
    let mut total = 0.0;
    let mut count = 0;
    let mut off = 0;
    for (j, &w) in widths.iter().enumerate() {
        if mask[j] {
            let z = &recon[off..off + w];
            count += 1;
            match targets[j] {
                Target::Value(t) => {
                    let diff = z[0] - t;
                    total += diff * diff;
                    if let Some(g) = grad.as_deref_mut() {
                        g[off] = 2.0 * diff;
                    }
                }
                target => {
                    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
                    let lse = max + sum.ln();
                    // Unknown categories are scored against the uniform
                    // distribution over known levels.
                    let soft = |k: usize| match target {
                        Target::Class(c) => (k == c) as u8 as f64,
                        _ => 1.0 / w as f64,
                    };
                    total += lse - (0..w).map(|k| soft(k) * z[k]).sum::<f64>();
                    if let Some(g) = grad.as_deref_mut() {
                        for k in 0..w {
                            g[off + k] = (z[k] - max).exp() / sum - soft(k);
                        }
                    }
                }
            }
        }
        off += w;
    }
    (total, count)
}

/// Mean reconstruction loss over masked entries: squared error for numerical
/// features, cross-entropy from logits for categorical ones.
pub fn masked_loss(
    tape: &mut Tape,
    recon: Var,
    targets: &[Target],
    mask: &MaskMatrix,
    widths: &[usize],
) -> Result<LossOutput> {
    let r = tape.value(recon);
    let total_w: usize = widths.iter().sum();
    let (n, d) = (mask.n, mask.d);
    ensure!(
        r.shape() == [n, total_w] && targets.len() == n * d && widths.len() == d,
        Dimension,
        "reconstruction {:?} vs mask {n}x{d} and widths {widths:?}",
        r.shape()
    );
    let mut grad = vec![0.0; n * total_w];
    let mut per_sample = vec![0.0; n];
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        let g = &mut grad[i * total_w..(i + 1) * total_w];
        let (t, c) = row_losses(
            &r.data()[i * total_w..(i + 1) * total_w],
            &targets[i * d..(i + 1) * d],
            mask.row(i),
            widths,
            Some(g),
        );
        if c > 0 {
            per_sample[i] = t / c as f64;
        }
        total += t;
        count += c;
    }
    let (loss, grad) = if count == 0 {
        (0.0, vec![0.0; grad.len()])
    } else {
        let inv = 1.0 / count as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        (total * inv, grad)
    };
    let loss = tape.scalar_with_grad(recon, loss, grad)?;
    Ok(LossOutput { loss, per_sample })
}

/// Per-row mean masked-entry loss of a reconstruction, rows `0..rows` only.
pub fn sample_losses(
    recon: &Tensor,
    targets: &[Target],
    mask: &MaskMatrix,
    widths: &[usize],
    rows: usize,
) -> Vec<f64> {
    let total_w: usize = widths.iter().sum();
    let d = mask.d;
    (0..rows)
        .map(|i| {
            let (t, c) = row_losses(
                &recon.data()[i * total_w..(i + 1) * total_w],
                &targets[i * d..(i + 1) * d],
                mask.row(i),
                widths,
                None,
            );
            if c > 0 {
                t / c as f64
            } else {
                0.0
            }
        })
        .collect()
}
