//! Forward passes: patch embedding, pre-norm transformer blocks, the two
//! towers, and the linear score head.
//!
//! Every function takes an optional trace handle. With `Some`, trainable
//! parameters are bound as differentiable leaves; with `None`, the same code
//! runs as a pure evaluation.

use std::rc::Rc;

use super::params::{BlockParams, DecoderParams, EncoderParams, LinearParams, ScoreHeadParams};
use super::{CrossDecoderInput, EncoderOutput, ModelConfig, ModelError};
use crate::image::Image;
use crate::tensor::{concat, Element, Tensor, Trace};

type Tr<'a, E> = Option<&'a Rc<Trace<E>>>;

/// Flatten non-overlapping `patch_size`-square windows in row-major patch
/// order; within a patch, values keep the image's (row, col, channel) order.
pub fn patchify<E: Element>(img: &Image, patch_size: usize) -> Result<Tensor<E>, ModelError> {
    if patch_size == 0 || img.height % patch_size != 0 || img.width % patch_size != 0 {
        return Err(ModelError::IndivisibleDimensions {
            image: img.height.max(img.width),
            patch: patch_size,
        });
    }
    let rows = img.height / patch_size;
    let cols = img.width / patch_size;
    let patch_dim = patch_size * patch_size * img.channels;
    let mut data = Vec::with_capacity(rows * cols * patch_dim);
    for pr in 0..rows {
        for pc in 0..cols {
            for r in 0..patch_size {
                let row = pr * patch_size + r;
                let start = (row * img.width + pc * patch_size) * img.channels;
                data.extend(
                    img.data[start..start + patch_size * img.channels]
                        .iter()
                        .map(|&v| E::from_f64(v as f64)),
                );
            }
        }
    }
    Ok(Tensor::from_vec(vec![rows * cols, patch_dim], data)?)
}

/// Exact inverse of [`patchify`] on raw values, clamped into an [`Image`].
pub fn unpatchify_image<E: Element>(
    patches: &[E],
    cfg: &ModelConfig,
    reference_id: &str,
) -> Image {
    let side = cfg.image_size / cfg.patch_size;
    let p = cfg.patch_size;
    let ch = cfg.channels;
    let mut data = vec![0.0f32; cfg.image_size * cfg.image_size * ch];
    let patch_dim = cfg.patch_dim();
    for pr in 0..side {
        for pc in 0..side {
            let patch = &patches[(pr * side + pc) * patch_dim..(pr * side + pc + 1) * patch_dim];
            for r in 0..p {
                for c in 0..p {
                    for k in 0..ch {
                        let row = pr * p + r;
                        let col = pc * p + c;
                        let v = patch[(r * p + c) * ch + k].to_f64() as f32;
                        data[(row * cfg.image_size + col) * ch + k] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Image {
        height: cfg.image_size,
        width: cfg.image_size,
        channels: ch,
        data,
        reference_id: reference_id.to_string(),
    }
}

fn linear<E: Element>(
    x: &Tensor<E>,
    params: &LinearParams<E>,
    tr: Tr<E>,
) -> Result<Tensor<E>, ModelError> {
    Ok(x.matmul(&params.weight.bind(tr))?.add(&params.bias.bind(tr))?)
}

/// `[class_token; projected patches] + positional embeddings`.
pub fn embed<E: Element>(
    patches: &Tensor<E>,
    projection: &LinearParams<E>,
    pos: &Tensor<E>,
    class_token: &Tensor<E>,
    tr: Tr<E>,
) -> Result<Tensor<E>, ModelError> {
    let projected = patches
        .matmul(&projection.weight.bind(tr))?
        .add(&projection.bias.bind(tr))?;
    let dim = class_token.numel();
    let class_row = class_token.reshape(vec![1, dim])?;
    let sequence = concat(&[&class_row, &projected], 0)?;
    Ok(sequence.add(pos)?)
}

/// Multi-head scaled dot-product attention over an already-normalized
/// sequence. Returns the output and the attention probabilities
/// (`num_heads x len x len`).
pub fn attention<E: Element>(
    normed: &Tensor<E>,
    block: &BlockParams<E>,
    num_heads: usize,
    tr: Tr<E>,
) -> Result<(Tensor<E>, Tensor<E>), ModelError> {
    let len = normed.shape()[0];
    let dim = normed.shape()[1];
    let head_dim = dim / num_heads;
    let split = |t: Tensor<E>| -> Result<Tensor<E>, ModelError> {
        // [len, dim] -> [heads, len, head_dim]
        Ok(t.reshape(vec![len, num_heads, head_dim])?.transpose(0, 1)?)
    };
    let q = split(linear(normed, &block.wq, tr)?)?;
    let k = split(linear(normed, &block.wk, tr)?)?;
    let v = split(linear(normed, &block.wv, tr)?)?;
    let scale = E::from_f64(1.0 / (head_dim as f64).sqrt());
    let scores = q.matmul(&k.transpose(1, 2)?)?.scale(scale);
    let probs = scores.softmax(2)?;
    let context = probs.matmul(&v)?; // [heads, len, head_dim]
    let merged = context.transpose(0, 1)?.reshape(vec![len, dim])?;
    let out = linear(&merged, &block.wo, tr)?;
    Ok((out, probs))
}

/// Pre-norm block: `x + MHSA(LN(x))`, then `y + MLP(LN(y))`.
pub fn transformer_block<E: Element>(
    x: &Tensor<E>,
    block: &BlockParams<E>,
    num_heads: usize,
    tr: Tr<E>,
) -> Result<Tensor<E>, ModelError> {
    let normed = x.layer_norm(&block.ln1.gain.bind(tr), &block.ln1.bias.bind(tr), 1e-5)?;
    let (attn_out, _) = attention(&normed, block, num_heads, tr)?;
    let x = x.add(&attn_out)?;
    let normed = x.layer_norm(&block.ln2.gain.bind(tr), &block.ln2.bias.bind(tr), 1e-5)?;
    let hidden = linear(&normed, &block.fc1, tr)?.gelu();
    let mlp_out = linear(&hidden, &block.fc2, tr)?;
    Ok(x.add(&mlp_out)?)
}

/// Encode an image: patchify, embed, `encoder_depth` blocks, final norm,
/// split off the class position. Pure given (parameters, image).
pub fn encode<E: Element>(
    img: &Image,
    encoder: &EncoderParams<E>,
    cfg: &ModelConfig,
    tr: Tr<E>,
) -> Result<EncoderOutput<E>, ModelError> {
    if img.height != cfg.image_size || img.width != cfg.image_size || img.channels != cfg.channels
    {
        return Err(ModelError::ConfigMismatch(format!(
            "image {}x{}x{} does not match configured {}x{}x{}",
            img.height, img.width, img.channels, cfg.image_size, cfg.image_size, cfg.channels
        )));
    }
    let patches = patchify::<E>(img, cfg.patch_size)?;
    let mut x = embed(
        &patches,
        &encoder.patch_proj,
        &encoder.pos.bind(tr),
        &encoder.class_token.bind(tr),
        tr,
    )?;
    for block in &encoder.blocks {
        x = transformer_block(&x, block, cfg.num_heads, tr)?;
    }
    let x = x.layer_norm(
        &encoder.final_ln.gain.bind(tr),
        &encoder.final_ln.bias.bind(tr),
        1e-5,
    )?;
    let n = cfg.num_patches();
    Ok(EncoderOutput {
        class_token: x.narrow(0, 0, 1)?.reshape(vec![cfg.embed_dim])?,
        patch_tokens: x.narrow(0, 1, n)?,
    })
}

/// Build the decoder input: the degraded image's class token in front of the
/// decoder-side linear projection of the pristine original, plus decoder
/// positional embeddings.
pub fn assemble_cross_input<E: Element>(
    enc_out: &EncoderOutput<E>,
    original: &Image,
    decoder: &DecoderParams<E>,
    cfg: &ModelConfig,
    tr: Tr<E>,
) -> Result<CrossDecoderInput<E>, ModelError> {
    let patches = patchify::<E>(original, cfg.patch_size)?;
    let content = linear(&patches, &decoder.patch_proj, tr)?;
    let token_row = enc_out.class_token.reshape(vec![1, cfg.embed_dim])?;
    let sequence = concat(&[&token_row, &content], 0)?.add(&decoder.pos.bind(tr))?;
    Ok(CrossDecoderInput { sequence })
}

/// Run the decoder tower and pixel head; returns raw (unclamped) patch
/// values, `num_patches x patch_dim`. The class position's output is
/// discarded.
pub fn decode_tokens<E: Element>(
    input: &CrossDecoderInput<E>,
    decoder: &DecoderParams<E>,
    cfg: &ModelConfig,
    tr: Tr<E>,
) -> Result<Tensor<E>, ModelError> {
    if input.sequence.shape() != [cfg.seq_len(), cfg.embed_dim] {
        return Err(ModelError::ConfigMismatch(format!(
            "decoder input {:?}, expected [{}, {}]",
            input.sequence.shape(),
            cfg.seq_len(),
            cfg.embed_dim
        )));
    }
    let mut x = input.sequence.clone();
    for block in &decoder.blocks {
        x = transformer_block(&x, block, cfg.num_heads, tr)?;
    }
    let x = x.layer_norm(
        &decoder.final_ln.gain.bind(tr),
        &decoder.final_ln.bias.bind(tr),
        1e-5,
    )?;
    let patch_tokens = x.narrow(0, 1, cfg.num_patches())?;
    linear(&patch_tokens, &decoder.head, tr)
}

/// Decode and materialize as an image (values clamped to `[0,1]`).
pub fn decode_reconstruct<E: Element>(
    input: &CrossDecoderInput<E>,
    decoder: &DecoderParams<E>,
    cfg: &ModelConfig,
    reference_id: &str,
) -> Result<Image, ModelError> {
    let patches = decode_tokens(input, decoder, cfg, None)?;
    Ok(unpatchify_image(patches.data(), cfg, reference_id))
}

/// `score = w . class_token + b`; patch tokens are unused.
pub fn regress_score<E: Element>(
    enc_out: &EncoderOutput<E>,
    head: &ScoreHeadParams<E>,
    tr: Tr<E>,
) -> Result<Tensor<E>, ModelError> {
    let dim = enc_out.class_token.numel();
    if head.weight.numel() != dim {
        return Err(ModelError::ConfigMismatch(format!(
            "score head width {} vs embed dim {dim}",
            head.weight.numel()
        )));
    }
    let token = enc_out.class_token.reshape(vec![1, dim])?;
    let w = head.weight.bind(tr).reshape(vec![dim, 1])?;
    let score = token.matmul(&w)?.add(&head.bias.bind(tr))?;
    Ok(score.reshape(vec![])?)
}

#[cfg(test)]
mod tests {
    use super::super::ModelParams;
    use super::*;
    use crate::tensor::Parameter;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeded_image(size: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(size, size, 3, format!("img{seed}"), |_, _, _| rng.gen())
    }

    #[test]
    fn patchify_shapes() {
        let img = seeded_image(32, 1);
        let p = patchify::<f32>(&img, 8).unwrap();
        assert_eq!(p.shape(), &[16, 192]);

        let img = seeded_image(224, 2);
        let p = patchify::<f32>(&img, 16).unwrap();
        assert_eq!(p.shape(), &[196, 768]);

        assert!(matches!(
            patchify::<f32>(&seeded_image(30, 3), 8),
            Err(ModelError::IndivisibleDimensions { .. })
        ));
    }

    #[test]
    fn patchify_unpatchify_is_exact() {
        let cfg = ModelConfig::desk();
        let img = seeded_image(32, 4);
        let p = patchify::<f32>(&img, cfg.patch_size).unwrap();
        let back = unpatchify_image(p.data(), &cfg, &img.reference_id);
        assert_eq!(back, img);
    }

    #[test]
    fn embed_layout_and_shape() {
        let cfg = ModelConfig::desk();
        let params = ModelParams::<f64>::init(&cfg, 0);
        let img = seeded_image(32, 5);
        let patches = patchify::<f64>(&img, 8).unwrap();
        let seq = embed(
            &patches,
            &params.encoder.patch_proj,
            &params.encoder.pos.bind(None),
            &params.encoder.class_token.bind(None),
            None,
        )
        .unwrap();
        assert_eq!(seq.shape(), &[17, 64]);

        // with zero patches and zero pos, row 0 is exactly the class token
        let zero_patches = Tensor::<f64>::zeros(vec![16, 192]);
        let zero_pos = Tensor::<f64>::zeros(vec![17, 64]);
        let seq = embed(
            &zero_patches,
            &params.encoder.patch_proj,
            &zero_pos,
            &params.encoder.class_token.bind(None),
            None,
        )
        .unwrap();
        let cls = params.encoder.class_token.values().clone();
        assert_eq!(&seq.data()[..64], &cls[..]);
    }

    #[test]
    fn embed_depends_on_patch_order_through_positions() {
        let cfg = ModelConfig::desk();
        let params = ModelParams::<f64>::init(&cfg, 0);
        let img = seeded_image(32, 6);
        let patches = patchify::<f64>(&img, 8).unwrap();
        // swap two patch rows
        let mut swapped = patches.to_vec();
        for j in 0..192 {
            swapped.swap(j, 192 + j);
        }
        let swapped = Tensor::from_vec(vec![16, 192], swapped).unwrap();
        let a = embed(
            &patches,
            &params.encoder.patch_proj,
            &params.encoder.pos.bind(None),
            &params.encoder.class_token.bind(None),
            None,
        )
        .unwrap();
        let b = embed(
            &swapped,
            &params.encoder.patch_proj,
            &params.encoder.pos.bind(None),
            &params.encoder.class_token.bind(None),
            None,
        )
        .unwrap();
        // rows 1 and 2 must differ beyond a pure permutation because the
        // positional embedding pins each slot
        let row = |t: &Tensor<f64>, i: usize| t.data()[i * 64..(i + 1) * 64].to_vec();
        assert_ne!(row(&a, 1), row(&b, 1));
        assert_ne!(row(&a, 1), row(&b, 2));
    }

    #[test]
    fn zeroed_output_projections_make_block_identity() {
        let cfg = ModelConfig::desk();
        let params = ModelParams::<f64>::init(&cfg, 7);
        let block = &params.encoder.blocks[0];
        block.wo.weight.set_values(vec![0.0; 64 * 64]);
        block.fc2.weight.set_values(vec![0.0; 256 * 64]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::from_vec(vec![17, 64], (0..17 * 64).map(|_| rng.gen::<f64>()).collect())
            .unwrap();
        let y = transformer_block(&x, block, cfg.num_heads, None).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = ModelConfig::desk();
        let params = ModelParams::<f64>::init(&cfg, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::from_vec(vec![17, 64], (0..17 * 64).map(|_| rng.gen::<f64>()).collect())
            .unwrap();
        for block in &params.encoder.blocks {
            let normed = x
                .layer_norm(&block.ln1.gain.bind(None), &block.ln1.bias.bind(None), 1e-5)
                .unwrap();
            let (_, probs) = attention(&normed, block, cfg.num_heads, None).unwrap();
            assert_eq!(probs.shape(), &[4, 17, 17]);
            for h in 0..4 {
                for i in 0..17 {
                    let row = &probs.data()[(h * 17 + i) * 17..(h * 17 + i + 1) * 17];
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6, "head {h} token {i}: {sum}");
                }
            }
        }
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let cfg = ModelConfig::desk();
        let params = ModelParams::<f64>::init(&cfg, 11);
        let block = &params.encoder.blocks[0];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x =
            Tensor::from_vec(vec![1, 64], (0..64).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let (out, probs) = attention(&x, block, cfg.num_heads, None).unwrap();
        assert!(probs.data().iter().all(|&p| (p - 1.0).abs() < 1e-12));
        // with a single token the context is exactly the value projection,
        // so out = wo(v(x))
        let v = x
            .matmul(&block.wv.weight.bind(None))
            .unwrap()
            .add(&block.wv.bias.bind(None))
            .unwrap();
        let expect = v
            .matmul(&block.wo.weight.bind(None))
            .unwrap()
            .add(&block.wo.bias.bind(None))
            .unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn block_is_permutation_equivariant_without_positions() {
        let cfg = ModelConfig::desk();
        let params = ModelParams::<f64>::init(&cfg, 13);
        let block = &params.encoder.blocks[1];
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..64).map(|_| rng.gen()).collect()).collect();
        let perm = [3usize, 0, 4, 1, 5, 2];
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| rows[i].clone()).collect();
        let y = transformer_block(
            &Tensor::from_vec(vec![6, 64], flat).unwrap(),
            block,
            cfg.num_heads,
            None,
        )
        .unwrap();
        let yp = transformer_block(
            &Tensor::from_vec(vec![6, 64], permuted).unwrap(),
            block,
            cfg.num_heads,
            None,
        )
        .unwrap();
        for (out_row, &src) in perm.iter().enumerate().map(|(i, s)| (i, s)) {
            for j in 0..64 {
                let a = y.data()[src * 64 + j];
                let b = yp.data()[out_row * 64 + j];
                assert!((a - b).abs() < 1e-5, "row {src}->{out_row} col {j}");
            }
        }
    }

    #[test]
    fn encode_is_deterministic_with_shared_parameters() {
        let cfg = ModelConfig::desk();
        let params = ModelParams::<f32>::init(&cfg, 15);
        let img = seeded_image(32, 16);
        let a = encode(&img, &params.encoder, &cfg, None).unwrap();
        let b = encode(&img, &params.encoder, &cfg, None).unwrap();
        assert_eq!(a.class_token.data(), b.class_token.data());
        assert_eq!(a.patch_tokens.data(), b.patch_tokens.data());
        assert_eq!(a.class_token.shape(), &[64]);
        assert_eq!(a.patch_tokens.shape(), &[16, 64]);
    }

    #[test]
    fn encode_class_token_matches_straight_line_oracle() {
        // tiny config so the oracle stays readable: 1 block, 1 head
        let cfg = ModelConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 6,
            num_heads: 1,
            encoder_depth: 1,
            decoder_depth: 1,
            mlp_ratio: 2.0,
        };
        let params = ModelParams::<f64>::init(&cfg, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let img = Image::from_fn(8, 8, 1, "tiny", |_, _, _| rng.gen());
        let got = encode(&img, &params.encoder, &cfg, None).unwrap();

        // independent re-evaluation with plain loops
        let d = 6usize;
        let n = 4usize;
        let pd = 16usize;
        let val = |p: &Parameter<f64>| p.values().clone();
        let w = val(&params.encoder.patch_proj.weight);
        let b = val(&params.encoder.patch_proj.bias);
        let cls = val(&params.encoder.class_token);
        let pos = val(&params.encoder.pos);
        // embed
        let mut seq = vec![vec![0.0f64; d]; n + 1];
        seq[0][..d].copy_from_slice(&cls);
        for patch in 0..n {
            let pr = patch / 2;
            let pc = patch % 2;
            let mut flat = vec![0.0f64; pd];
            for r in 0..4 {
                for c in 0..4 {
                    flat[r * 4 + c] = img.at(pr * 4 + r, pc * 4 + c, 0) as f64;
                }
            }
            for j in 0..d {
                seq[patch + 1][j] = (0..pd).map(|i| flat[i] * w[i * d + j]).sum::<f64>() + b[j];
            }
        }
        for (i, row) in seq.iter_mut().enumerate() {
            for j in 0..d {
                row[j] += pos[i * d + j];
            }
        }
        let ln = |row: &[f64], g: &[f64], bb: &[f64]| -> Vec<f64> {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
            row.iter()
                .enumerate()
                .map(|(j, v)| g[j] * (v - mean) / (var + 1e-5).sqrt() + bb[j])
                .collect()
        };
        let matvec = |row: &[f64], w: &[f64], b: &[f64], out: usize| -> Vec<f64> {
            (0..out)
                .map(|j| (0..row.len()).map(|i| row[i] * w[i * out + j]).sum::<f64>() + b[j])
                .collect()
        };
        let block = &params.encoder.blocks[0];
        let (g1, b1) = (val(&block.ln1.gain), val(&block.ln1.bias));
        let normed: Vec<Vec<f64>> = seq.iter().map(|r| ln(r, &g1, &b1)).collect();
        let q: Vec<Vec<f64>> = normed
            .iter()
            .map(|r| matvec(r, &val(&block.wq.weight), &val(&block.wq.bias), d))
            .collect();
        let k: Vec<Vec<f64>> = normed
            .iter()
            .map(|r| matvec(r, &val(&block.wk.weight), &val(&block.wk.bias), d))
            .collect();
        let v: Vec<Vec<f64>> = normed
            .iter()
            .map(|r| matvec(r, &val(&block.wv.weight), &val(&block.wv.bias), d))
            .collect();
        let scale = 1.0 / (d as f64).sqrt();
        let mut attn_rows = vec![vec![0.0f64; d]; n + 1];
        for i in 0..=n {
            let scores: Vec<f64> = (0..=n)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..=n {
                let p = exps[j] / sum;
                for c in 0..d {
                    attn_rows[i][c] += p * v[j][c];
                }
            }
        }
        let mut x1 = vec![vec![0.0f64; d]; n + 1];
        for i in 0..=n {
            let o = matvec(&attn_rows[i], &val(&block.wo.weight), &val(&block.wo.bias), d);
            for j in 0..d {
                x1[i][j] = seq[i][j] + o[j];
            }
        }
        let (g2, b2) = (val(&block.ln2.gain), val(&block.ln2.bias));
        let hidden_dim = 12usize;
        let gelu = |x: f64| 0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh());
        let mut x2 = vec![vec![0.0f64; d]; n + 1];
        for i in 0..=n {
            let nrm = ln(&x1[i], &g2, &b2);
            let h: Vec<f64> = matvec(&nrm, &val(&block.fc1.weight), &val(&block.fc1.bias), hidden_dim)
                .into_iter()
                .map(gelu)
                .collect();
            let m = matvec(&h, &val(&block.fc2.weight), &val(&block.fc2.bias), d);
            for j in 0..d {
                x2[i][j] = x1[i][j] + m[j];
            }
        }
        let (gf, bf) = (val(&params.encoder.final_ln.gain), val(&params.encoder.final_ln.bias));
        let class_oracle = ln(&x2[0], &gf, &bf);
        for (a, b) in got.class_token.data().iter().zip(&class_oracle) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn assemble_cross_input_layout() {
        let cfg = ModelConfig::desk();
        let params = ModelParams::<f64>::init(&cfg, 19);
        let img = seeded_image(32, 20);
        let enc_out = encode(&img, &params.encoder, &cfg, None).unwrap();
        let input = assemble_cross_input(&enc_out, &img, &params.decoder, &cfg, None).unwrap();
        assert_eq!(input.sequence.shape(), &[17, 64]);

        // zero class token: position 0 equals decoder pos row 0
        let zeroed = EncoderOutput {
            class_token: Tensor::zeros(vec![64]),
            patch_tokens: enc_out.patch_tokens.clone(),
        };
        let input = assemble_cross_input(&zeroed, &img, &params.decoder, &cfg, None).unwrap();
        let pos0 = params.decoder.pos.values()[..64].to_vec();
        assert_eq!(&input.sequence.data()[..64], &pos0[..]);

        // swapping the inserted token changes only position 0 pre-attention
        let other = EncoderOutput {
            class_token: Tensor::from_vec(vec![64], vec![0.5; 64]).unwrap(),
            patch_tokens: enc_out.patch_tokens.clone(),
        };
        let swapped = assemble_cross_input(&other, &img, &params.decoder, &cfg, None).unwrap();
        assert_ne!(&swapped.sequence.data()[..64], &input.sequence.data()[..64]);
        assert_eq!(&swapped.sequence.data()[64..], &input.sequence.data()[64..]);
    }

    #[test]
    fn decode_shapes_and_head_bias_passthrough() {
        let cfg = ModelConfig::desk();
        let params = ModelParams::<f64>::init(&cfg, 21);
        let img = seeded_image(32, 22);
        let enc_out = encode(&img, &params.encoder, &cfg, None).unwrap();
        let input = assemble_cross_input(&enc_out, &img, &params.decoder, &cfg, None).unwrap();
        let rec = decode_reconstruct(&input, &params.decoder, &cfg, "rec").unwrap();
        assert_eq!(rec.shape(), (32, 32, 3));

        // zero head weight leaves only the 0.5 bias
        params.decoder.head.weight.set_values(vec![0.0; 64 * 192]);
        let rec = decode_reconstruct(&input, &params.decoder, &cfg, "rec").unwrap();
        assert!(rec.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn regress_score_cases() {
        let cfg = ModelConfig::desk();
        let params = ModelParams::<f64>::init(&cfg, 23);
        let enc_out = EncoderOutput {
            class_token: Tensor::from_vec(vec![64], (0..64).map(|i| i as f64 / 64.0).collect())
                .unwrap(),
            patch_tokens: Tensor::zeros(vec![16, 64]),
        };
        // w = 0 -> score = b
        params.score_head.weight.set_values(vec![0.0; 64]);
        params.score_head.bias.set_values(vec![2.5]);
        let s = regress_score(&enc_out, &params.score_head, None).unwrap();
        assert_eq!(s.item(), 2.5);

        // w = e_k -> score = token[k] + b
        let mut w = vec![0.0; 64];
        w[7] = 1.0;
        params.score_head.weight.set_values(w);
        let s = regress_score(&enc_out, &params.score_head, None).unwrap();
        assert_eq!(s.item(), 7.0 / 64.0 + 2.5);

        // seeded head: hand dot product
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let w: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        params.score_head.weight.set_values(w.clone());
        params.score_head.bias.set_values(vec![-0.3]);
        let expect: f64 =
            w.iter().zip(enc_out.class_token.data()).map(|(a, b)| a * b).sum::<f64>() - 0.3;
        let s = regress_score(&enc_out, &params.score_head, None).unwrap();
        assert!((s.item() - expect).abs() < 1e-12);
    }

    #[test]
    fn encode_rejects_wrong_image_size() {
        let cfg = ModelConfig::desk();
        let params = ModelParams::<f32>::init(&cfg, 25);
        let img = seeded_image(64, 26);
        assert!(matches!(
            encode(&img, &params.encoder, &cfg, None),
            Err(ModelError::ConfigMismatch(_))
        ));
    }
}
