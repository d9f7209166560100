//! The non-parametric transformer used for masked feature reconstruction.

mod checkpoint;
mod encode;
mod layers;
mod train;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use encode::{Encoded, FeatureKind, FeatureSchema, FeatureSpec, Target};
pub use layers::{
    aba, abd, in_embed, masked_loss, mhsa_block, npt_forward, reconstruct, sample_losses, LossOutput,
};
pub use train::{train, TrainConfig, TrainLog};

use crate::error::{ensure, Result};
use crate::numerics::{Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Alternating attention between datapoints and between attributes.
    Npt,
    /// Attention between attributes only: each sample is processed alone.
    AbaOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Abd,
    Aba,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NptConfig {
    pub depth: usize,
    pub heads: usize,
    /// Per-feature embedding width.
    pub e: usize,
    pub rff_expansion: usize,
    pub dropout_p: f64,
    pub variant: Variant,
}

impl Default for NptConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            heads: 4,
            e: 16,
            rff_expansion: 4,
            dropout_p: 0.1,
            variant: Variant::Npt,
        }
    }
}

impl NptConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.depth >= 1, Config, "depth must be at least 1");
        ensure!(
            self.heads >= 1 && self.e >= 1,
            Config,
            "heads and e must be positive"
        );
        ensure!(
            self.e.is_multiple_of(self.heads),
            Config,
            "embedding width {} is not divisible by {} heads",
            self.e,
            self.heads
        );
        ensure!(self.rff_expansion >= 1, Config, "rff expansion must be positive");
        ensure!(
            (0.0..1.0).contains(&self.dropout_p),
            Config,
            "dropout {} not in [0, 1)",
            self.dropout_p
        );
        Ok(())
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        (0..self.depth)
            .map(|l| match self.variant {
                Variant::Npt if l % 2 == 0 => LayerKind::Abd,
                _ => LayerKind::Aba,
            })
            .collect()
    }
}

/// Weights of one attention block of width `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = Tensor> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
    pub w_res: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub ff1_w: T,
    pub ff1_b: T,
    pub ff2_w: T,
    pub ff2_b: T,
}

const LAYER_FIELDS: [&str; 13] = [
    "ln1_g", "ln1_b", "w_q", "w_k", "w_v", "w_o", "w_res", "ln2_g", "ln2_b", "ff1_w", "ff1_b", "ff2_w",
    "ff2_b",
];

impl<T> LayerParams<T> {
    fn fields(&self) -> [&T; 13] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.w_res,
            &self.ln2_g,
            &self.ln2_b,
            &self.ff1_w,
            &self.ff1_b,
            &self.ff2_w,
            &self.ff2_b,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = T>) -> Self {
        let mut next = || it.next().expect("enough tensors for a layer");
        Self {
            ln1_g: next(),
            ln1_b: next(),
            w_q: next(),
            w_k: next(),
            w_v: next(),
            w_o: next(),
            w_res: next(),
            ln2_g: next(),
            ln2_b: next(),
            ff1_w: next(),
            ff1_b: next(),
            ff2_w: next(),
            ff2_b: next(),
        }
    }
}

/// All trainable tensors. `T` is `Tensor` at rest and `Var` on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct NptParams<T = Tensor> {
    /// Stacked per-feature in-embedding weights, `[sum(w_j + 1), e]`.
    pub in_w: T,
    pub in_b: T,
    pub index_emb: T,
    pub type_emb: T,
    pub layers: Vec<LayerParams<T>>,
    /// Stacked per-feature out-embedding weights, `[e, sum(w_j)]`.
    pub out_w: T,
    pub out_b: T,
}

impl<T> NptParams<T> {
    pub fn tensors(&self) -> Vec<&T> {
        let mut out = vec![&self.in_w, &self.in_b, &self.index_emb, &self.type_emb];
        for l in &self.layers {
            out.extend(l.fields());
        }
        out.push(&self.out_w);
        out.push(&self.out_b);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = ["in_w", "in_b", "index_emb", "type_emb"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for i in 0..self.layers.len() {
            out.extend(LAYER_FIELDS.iter().map(|f| format!("layer{i}.{f}")));
        }
        out.push("out_w".into());
        out.push("out_b".into());
        out
    }

    /// Rebuilds the structure from tensors in [`NptParams::tensors`] order.
    pub fn from_flat(depth: usize, items: Vec<T>) -> Self {
        assert_eq!(items.len(), 6 + 13 * depth, "tensor count for depth {depth}");
        let mut it = items.into_iter();
        let in_w = it.next().unwrap();
        let in_b = it.next().unwrap();
        let index_emb = it.next().unwrap();
        let type_emb = it.next().unwrap();
        let layers = (0..depth).map(|_| LayerParams::from_iter(&mut it)).collect();
        Self {
            in_w,
            in_b,
            index_emb,
            type_emb,
            layers,
            out_w: it.next().unwrap(),
            out_b: it.next().unwrap(),
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> NptParams<U> {
        NptParams::from_flat(
            self.layers.len(),
            self.tensors().into_iter().map(&mut f).collect(),
        )
    }
}

impl NptParams<Tensor> {
    /// Uniform fan-in initialization: weights and biases of every linear map
    /// drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; layer-norm gains 1,
    /// biases 0; embeddings use the same bound with `fan_in = e`.
    pub fn init(schema: &FeatureSchema, config: &NptConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let widths = schema.widths();
        let d = widths.len();
        let e = config.e;
        let in_total: usize = widths.iter().map(|w| w + 1).sum();
        let out_total: usize = widths.iter().sum();

        let mut in_w = Tensor::zeros(&[in_total, e]);
        let mut in_b = Tensor::zeros(&[d, e]);
        let mut off = 0;
        for (j, &w) in widths.iter().enumerate() {
            let bound = 1.0 / ((w + 1) as f64).sqrt();
            for x in &mut in_w.data_mut()[off * e..(off + w + 1) * e] {
                *x = uniform(bound, rng);
            }
            for x in &mut in_b.data_mut()[j * e..(j + 1) * e] {
                *x = uniform(bound, rng);
            }
            off += w + 1;
        }
        let emb_bound = 1.0 / (e as f64).sqrt();
        let index_emb = uniform_tensor(&[d, e], emb_bound, rng);
        let type_emb = uniform_tensor(&[2, e], emb_bound, rng);

        let mut layers = Vec::with_capacity(config.depth);
        for kind in config.layer_kinds() {
            let h = match kind {
                LayerKind::Abd => d * e,
                LayerKind::Aba => e,
            };
            let hf = h * config.rff_expansion;
            let b = 1.0 / (h as f64).sqrt();
            let bf = 1.0 / (hf as f64).sqrt();
            layers.push(LayerParams {
                ln1_g: Tensor::filled(&[h], 1.0),
                ln1_b: Tensor::zeros(&[h]),
                w_q: uniform_tensor(&[h, h], b, rng),
                w_k: uniform_tensor(&[h, h], b, rng),
                w_v: uniform_tensor(&[h, h], b, rng),
                w_o: uniform_tensor(&[h, h], b, rng),
                w_res: uniform_tensor(&[h, h], b, rng),
                ln2_g: Tensor::filled(&[h], 1.0),
                ln2_b: Tensor::zeros(&[h]),
                ff1_w: uniform_tensor(&[h, hf], b, rng),
                ff1_b: uniform_tensor(&[hf], b, rng),
                ff2_w: uniform_tensor(&[hf, h], bf, rng),
                ff2_b: uniform_tensor(&[h], bf, rng),
            });
        }
        Ok(Self {
            in_w,
            in_b,
            index_emb,
            type_emb,
            layers,
            out_w: uniform_tensor(&[e, out_total], emb_bound, rng),
            out_b: uniform_tensor(&[out_total], emb_bound, rng),
        })
    }

    /// Checks every tensor shape against what `schema` and `config` imply.
    pub fn validate(&self, schema: &FeatureSchema, config: &NptConfig) -> Result<()> {
        ensure!(
            self.layers.len() == config.depth,
            Checkpoint,
            "{} layers for depth {}",
            self.layers.len(),
            config.depth
        );
        let mut rng = crate::numerics::rng_for(0, 0);
        let reference = Self::init(schema, config, &mut rng)?;
        for ((name, have), want) in self.names().iter().zip(self.tensors()).zip(reference.tensors()) {
            ensure!(
                have.shape() == want.shape(),
                Checkpoint,
                "tensor {name} has shape {:?}, expected {:?}",
                have.shape(),
                want.shape()
            );
            ensure!(have.all_finite(), Checkpoint, "tensor {name} is not finite");
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Registers every tensor on `tape` as a gradient-tracked leaf.
    pub fn to_tape(&self, tape: &mut Tape) -> NptParams<Var> {
        self.map(|t| tape.param(t.clone()))
    }
}

/// A trained model together with everything needed to run it.
#[derive(Clone, Debug, PartialEq)]
pub struct NptModel {
    pub config: NptConfig,
    pub schema: FeatureSchema,
    pub params: NptParams,
}

impl NptModel {
    pub fn reconstruct(&self, input: Tensor) -> Result<Tensor> {
        reconstruct(&self.params, &self.config, &self.schema, input)
    }
}

fn uniform(bound: f64, rng: &mut Rng) -> f64 {
    rng.random_range(-bound..bound)
}

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| uniform(bound, rng))
}
