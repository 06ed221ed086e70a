//! Parameter containers, initialization, and canonical enumeration order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::tensor::{Element, Parameter};

pub struct LinearParams<E: Element> {
    /// `[in, out]`, applied as `x . weight + bias`.
    pub weight: Parameter<E>,
    pub bias: Parameter<E>,
}

pub struct LayerNormParams<E: Element> {
    pub gain: Parameter<E>,
    pub bias: Parameter<E>,
}

pub struct BlockParams<E: Element> {
    pub ln1: LayerNormParams<E>,
    pub wq: LinearParams<E>,
    pub wk: LinearParams<E>,
    pub wv: LinearParams<E>,
    pub wo: LinearParams<E>,
    pub ln2: LayerNormParams<E>,
    pub fc1: LinearParams<E>,
    pub fc2: LinearParams<E>,
}

pub struct EncoderParams<E: Element> {
    pub patch_proj: LinearParams<E>,
    pub class_token: Parameter<E>,
    pub pos: Parameter<E>,
    pub blocks: Vec<BlockParams<E>>,
    pub final_ln: LayerNormParams<E>,
}

pub struct DecoderParams<E: Element> {
    /// The decoder's own projection of the pristine original's patches.
    pub patch_proj: LinearParams<E>,
    pub pos: Parameter<E>,
    pub blocks: Vec<BlockParams<E>>,
    pub final_ln: LayerNormParams<E>,
    /// Per-patch pixel head, `embed_dim -> patch_dim`.
    pub head: LinearParams<E>,
}

pub struct ScoreHeadParams<E: Element> {
    pub weight: Parameter<E>,
    pub bias: Parameter<E>,
}

pub struct ModelParams<E: Element> {
    pub cfg: ModelConfig,
    pub encoder: EncoderParams<E>,
    pub decoder: DecoderParams<E>,
    pub score_head: ScoreHeadParams<E>,
}

/// Standard normal via Box-Muller (cosine branch).
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Normal(0, std) truncated by resampling at two standard deviations.
fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

const INIT_STD: f64 = 0.02;
/// Reconstruction head starts at mid-gray to keep early losses small.
const RECON_HEAD_BIAS: f64 = 0.5;

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn linear<E: Element>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias_value: f64,
    ) -> LinearParams<E> {
        let weight: Vec<E> = (0..fan_in * fan_out)
            .map(|_| E::from_f64(trunc_normal(&mut self.rng, INIT_STD)))
            .collect();
        LinearParams {
            weight: Parameter::new(format!("{name}.weight"), vec![fan_in, fan_out], weight),
            bias: Parameter::new(
                format!("{name}.bias"),
                vec![fan_out],
                vec![E::from_f64(bias_value); fan_out],
            ),
        }
    }

    fn layer_norm<E: Element>(&mut self, name: &str, dim: usize) -> LayerNormParams<E> {
        LayerNormParams {
            gain: Parameter::new(format!("{name}.gain"), vec![dim], vec![E::ONE; dim]),
            bias: Parameter::new(format!("{name}.bias"), vec![dim], vec![E::ZERO; dim]),
        }
    }

    fn embedding<E: Element>(&mut self, name: &str, shape: Vec<usize>) -> Parameter<E> {
        let numel: usize = shape.iter().product();
        let values: Vec<E> = (0..numel)
            .map(|_| E::from_f64(normal(&mut self.rng) * INIT_STD))
            .collect();
        Parameter::new(name, shape, values)
    }

    fn block<E: Element>(&mut self, name: &str, cfg: &ModelConfig) -> BlockParams<E> {
        let d = cfg.embed_dim;
        let hidden = cfg.mlp_hidden();
        BlockParams {
            ln1: self.layer_norm(&format!("{name}.ln1"), d),
            wq: self.linear(&format!("{name}.attn.wq"), d, d, 0.0),
            wk: self.linear(&format!("{name}.attn.wk"), d, d, 0.0),
            wv: self.linear(&format!("{name}.attn.wv"), d, d, 0.0),
            wo: self.linear(&format!("{name}.attn.wo"), d, d, 0.0),
            ln2: self.layer_norm(&format!("{name}.ln2"), d),
            fc1: self.linear(&format!("{name}.mlp.fc1"), d, hidden, 0.0),
            fc2: self.linear(&format!("{name}.mlp.fc2"), hidden, d, 0.0),
        }
    }
}

impl<E: Element> ModelParams<E> {
    /// Deterministic initialization: linear weights from a truncated normal,
    /// embeddings from a plain normal, biases zero except the reconstruction
    /// head's.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d = cfg.embed_dim;
        let seq = cfg.seq_len();
        let patch_dim = cfg.patch_dim();
        let encoder = EncoderParams {
            patch_proj: init.linear("encoder.patch_proj", patch_dim, d, 0.0),
            class_token: init.embedding("encoder.cls", vec![d]),
            pos: init.embedding("encoder.pos", vec![seq, d]),
            blocks: (0..cfg.encoder_depth)
                .map(|i| init.block(&format!("encoder.block{i}"), cfg))
                .collect(),
            final_ln: init.layer_norm("encoder.final_ln", d),
        };
        let decoder = DecoderParams {
            patch_proj: init.linear("decoder.patch_proj", patch_dim, d, 0.0),
            pos: init.embedding("decoder.pos", vec![seq, d]),
            blocks: (0..cfg.decoder_depth)
                .map(|i| init.block(&format!("decoder.block{i}"), cfg))
                .collect(),
            final_ln: init.layer_norm("decoder.final_ln", d),
            head: init.linear("decoder.head", d, patch_dim, RECON_HEAD_BIAS),
        };
        let score_head = ScoreHeadParams {
            weight: Parameter::new(
                "score.weight",
                vec![d],
                (0..d)
                    .map(|_| E::from_f64(trunc_normal(&mut init.rng, INIT_STD)))
                    .collect(),
            ),
            bias: Parameter::new("score.bias", vec![1], vec![E::ZERO]),
        };
        ModelParams {
            cfg: cfg.clone(),
            encoder,
            decoder,
            score_head,
        }
    }

    /// Every parameter in canonical (checkpoint) order.
    pub fn parameters(&self) -> Vec<&Parameter<E>> {
        let mut out = self.encoder_parameters();
        out.extend(self.decoder_parameters());
        out.extend(self.score_parameters());
        out
    }

    pub fn encoder_parameters(&self) -> Vec<&Parameter<E>> {
        let mut out = vec![
            &self.encoder.patch_proj.weight,
            &self.encoder.patch_proj.bias,
            &self.encoder.class_token,
            &self.encoder.pos,
        ];
        for b in &self.encoder.blocks {
            push_block(&mut out, b);
        }
        out.push(&self.encoder.final_ln.gain);
        out.push(&self.encoder.final_ln.bias);
        out
    }

    pub fn decoder_parameters(&self) -> Vec<&Parameter<E>> {
        let mut out = vec![
            &self.decoder.patch_proj.weight,
            &self.decoder.patch_proj.bias,
            &self.decoder.pos,
        ];
        for b in &self.decoder.blocks {
            push_block(&mut out, b);
        }
        out.push(&self.decoder.final_ln.gain);
        out.push(&self.decoder.final_ln.bias);
        out.push(&self.decoder.head.weight);
        out.push(&self.decoder.head.bias);
        out
    }

    pub fn score_parameters(&self) -> Vec<&Parameter<E>> {
        vec![&self.score_head.weight, &self.score_head.bias]
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for p in self.parameters() {
            p.clear_grad();
        }
    }

    /// Freeze or unfreeze the reconstruction towers (encoder + decoder),
    /// leaving the score head trainable.
    pub fn set_towers_trainable(&self, trainable: bool) {
        for p in self.encoder_parameters() {
            p.set_trainable(trainable);
        }
        for p in self.decoder_parameters() {
            p.set_trainable(trainable);
        }
    }

    /// Raw little-endian bytes of the encoder parameters, for frozen-encoder
    /// verification.
    pub fn encoder_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.encoder_parameters() {
            for v in p.values().iter() {
                out.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        }
        out
    }
}

fn push_block<'a, E: Element>(out: &mut Vec<&'a Parameter<E>>, b: &'a BlockParams<E>) {
    out.extend([
        &b.ln1.gain,
        &b.ln1.bias,
        &b.wq.weight,
        &b.wq.bias,
        &b.wk.weight,
        &b.wk.bias,
        &b.wv.weight,
        &b.wv.bias,
        &b.wo.weight,
        &b.wo.bias,
        &b.ln2.gain,
        &b.ln2.bias,
        &b.fc1.weight,
        &b.fc1.bias,
        &b.fc2.weight,
        &b.fc2.bias,
    ]);
}
