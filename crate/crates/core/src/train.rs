//! Pretext training (cross class-token reconstruction of degraded images)
//! and frozen-encoder fine-tuning of the linear score head.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointMeta};
use crate::image::{crop_at, hflip, random_crop, random_hflip, Image, ImageError};
use crate::manifest::{DatasetManifest, ManifestError};
use crate::model::{
    assemble_cross_input, decode_tokens, encode, patchify, regress_score, CrossWiring,
    ModelConfig, ModelError, ModelParams,
};
use crate::optim::{AdamWConfig, OptimState};
use crate::tensor::{l1_loss, mae_metric, mse_loss, Element, Tensor, TensorError, Trace};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no gradient for parameter {0}")]
    MissingGradient(String),
    #[error("content mismatch: {0}")]
    ContentMismatch(String),
    #[error("reference {0} has fewer than 2 degraded variants")]
    InsufficientVariants(String),
    #[error("reference {0} has no level-0 (pristine) rendition")]
    MissingPristine(String),
    #[error("manifest rows are missing quality scores")]
    MissingScores,
    #[error("incompatible configuration: {0}")]
    IncompatibleConfig(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How the two degraded variants of a reference are drawn each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairSampling {
    /// Two distinct variants, uniformly without replacement.
    #[default]
    Uniform,
    /// The pristine (level 0) rendition plus one uniformly drawn degraded
    /// variant: every step contrasts a passthrough branch with a degraded
    /// branch, which maximizes the per-step signal on the class token.
    Anchored,
}

/// Training hyperparameters shared by pretext and fine-tune loops.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Explicit learning rate; `None` applies `0.0001 * batch_size / 256`.
    pub lr: Option<f64>,
    pub epochs: usize,
    pub seed: u64,
    /// Square crop applied during training; must equal the model input size.
    pub crop: usize,
    pub flip_prob: f64,
    pub weight_decay: f64,
    /// Linear learning-rate warmup over this many steps; 0 disables it.
    pub warmup_steps: usize,
    pub wiring: CrossWiring,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub pair_sampling: PairSampling,
}

impl TrainConfig {
    /// Companion to [`ModelConfig::desk`]: small enough for CPU minutes.
    /// The default-rule learning rate (6.25e-6 at batch 16) moves nothing in
    /// a thousand desk-scale steps, so the desk preset pins 1e-3. Batch 1
    /// maximizes optimizer steps per epoch, and the faster-forgetting second
    /// moment (0.95) lets the token pathway take off within the short run.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 1,
            lr: Some(1e-3),
            epochs: 50,
            seed: 0,
            crop: 32,
            flip_prob: 0.5,
            weight_decay: 0.05,
            warmup_steps: 0,
            wiring: CrossWiring::Transfer,
            finetune_epochs: 150,
            finetune_lr: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            pair_sampling: PairSampling::Anchored,
        }
    }

    /// Full-scale defaults: batch 16, the batch-scaled rate rule, 200 epochs.
    pub fn full() -> Self {
        TrainConfig {
            batch_size: 16,
            lr: None,
            epochs: 200,
            seed: 0,
            crop: 224,
            flip_prob: 0.5,
            weight_decay: 0.05,
            warmup_steps: 0,
            wiring: CrossWiring::Transfer,
            finetune_epochs: 150,
            finetune_lr: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            pair_sampling: PairSampling::Uniform,
        }
    }

    pub fn effective_lr(&self) -> f64 {
        self.lr.unwrap_or(1e-4 * self.batch_size as f64 / 256.0)
    }
}

/// Per-branch losses of one pretext forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub mse_a: f64,
    pub mse_b: f64,
    pub mae_a: f64,
    pub mae_b: f64,
}

/// One optimizer-step row of the loss trace CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub loss: f64,
    pub mse_a: f64,
    pub mse_b: f64,
    pub mae_a: f64,
    pub mae_b: f64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "step,loss,mse_a,mse_b,mae_a,mae_b";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss, self.mse_a, self.mse_b, self.mae_a, self.mae_b
        )
    }
}

/// Both reconstruction branches through the shared parameter set.
///
/// Branch i encodes degraded image i; its class token is combined with the
/// pristine original's patch projections and decoded against degraded image i
/// as the target (under [`CrossWiring::Swap`] the two tokens trade places).
/// Returns `mse_a + mse_b` and the per-branch MSE/MAE monitors.
pub fn pretext_loss<E: Element>(
    model: &ModelParams<E>,
    original: &Image,
    deg_a: &Image,
    deg_b: &Image,
    wiring: CrossWiring,
    tr: Option<&Rc<Trace<E>>>,
) -> Result<(Tensor<E>, StepReport), TrainError> {
    let cfg = &model.cfg;
    let enc_a = encode(deg_a, &model.encoder, cfg, tr)?;
    let enc_b = encode(deg_b, &model.encoder, cfg, tr)?;
    let (enc_for_a, enc_for_b) = match wiring {
        CrossWiring::Transfer => (&enc_a, &enc_b),
        CrossWiring::Swap => (&enc_b, &enc_a),
    };
    let rec_a = decode_tokens(
        &assemble_cross_input(enc_for_a, original, &model.decoder, cfg, tr)?,
        &model.decoder,
        cfg,
        tr,
    )?;
    let rec_b = decode_tokens(
        &assemble_cross_input(enc_for_b, original, &model.decoder, cfg, tr)?,
        &model.decoder,
        cfg,
        tr,
    )?;
    let target_a = patchify::<E>(deg_a, cfg.patch_size)?;
    let target_b = patchify::<E>(deg_b, cfg.patch_size)?;
    let mse_a = mse_loss(&rec_a, &target_a)?;
    let mse_b = mse_loss(&rec_b, &target_b)?;
    let report = StepReport {
        loss: mse_a.item().to_f64() + mse_b.item().to_f64(),
        mse_a: mse_a.item().to_f64(),
        mse_b: mse_b.item().to_f64(),
        mae_a: mae_metric(&rec_a, &target_a)?.to_f64(),
        mae_b: mae_metric(&rec_b, &target_b)?.to_f64(),
    };
    Ok((mse_a.add(&mse_b)?, report))
}

fn check_triple(original: &Image, deg_a: &Image, deg_b: &Image) -> Result<(), TrainError> {
    for (name, img) in [("deg_a", deg_a), ("deg_b", deg_b)] {
        if img.reference_id != original.reference_id {
            return Err(TrainError::ContentMismatch(format!(
                "{name} has reference {} but the original is {}",
                img.reference_id, original.reference_id
            )));
        }
        if img.shape() != original.shape() {
            return Err(TrainError::IncompatibleConfig(format!(
                "{name} shape {:?} differs from original {:?}",
                img.shape(),
                original.shape()
            )));
        }
    }
    Ok(())
}

/// One pretext optimizer step on a single (original, degraded, degraded)
/// triple: forward both branches, backward, AdamW. MAE values are logged in
/// the report, never added to the loss.
pub fn pretrain_step(
    original: &Image,
    deg_a: &Image,
    deg_b: &Image,
    model: &ModelParams<f32>,
    opt: &mut OptimState<f32>,
    wiring: CrossWiring,
) -> Result<StepReport, TrainError> {
    check_triple(original, deg_a, deg_b)?;
    model.zero_grads();
    let trace = Trace::new();
    let (loss, report) = pretext_loss(model, original, deg_a, deg_b, wiring, Some(&trace))?;
    if !report.loss.is_finite() {
        return Err(TrainError::NonFiniteLoss(opt.step_count));
    }
    loss.backward()?;
    let towers: Vec<_> = model
        .encoder_parameters()
        .into_iter()
        .chain(model.decoder_parameters())
        .collect();
    opt.step(&towers)?;
    model.zero_grads();
    Ok(report)
}

/// Images from a manifest, in row order, with each image's reference id
/// overridden by the manifest's (file stems are per-rendition, the manifest
/// knows the content identity).
pub fn load_manifest_images(manifest: &DatasetManifest) -> Result<Vec<Image>, TrainError> {
    manifest
        .rows
        .iter()
        .map(|row| {
            let mut img = crate::image::load_image(&manifest.resolve(row))?;
            img.reference_id = row.reference_id.clone();
            Ok(img)
        })
        .collect()
}

/// Pretext training over a manifest. Per epoch, reference groups are
/// shuffled; each group contributes one triple (the pristine rendition plus
/// two distinct variants drawn per [`PairSampling`]) with a shared
/// crop/flip; triples are batched `batch_size` per optimizer step.
pub fn pretrain_run(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<(Checkpoint, Vec<TraceRow>), TrainError> {
    model_cfg.validate()?;
    if cfg.crop != model_cfg.image_size {
        return Err(TrainError::IncompatibleConfig(format!(
            "crop {} must equal the model input size {}",
            cfg.crop, model_cfg.image_size
        )));
    }
    let images = load_manifest_images(manifest)?;
    let groups = manifest.groups_by_reference();
    let mut pristine = Vec::with_capacity(groups.len());
    for (id, rows) in &groups {
        if rows.len() < 2 {
            return Err(TrainError::InsufficientVariants(id.clone()));
        }
        let p = rows
            .iter()
            .copied()
            .find(|&i| manifest.rows[i].level == 0)
            .ok_or_else(|| TrainError::MissingPristine(id.clone()))?;
        pristine.push(p);
    }

    let model = ModelParams::<f32>::init(model_cfg, cfg.seed);
    let towers: Vec<_> = model
        .encoder_parameters()
        .into_iter()
        .chain(model.decoder_parameters())
        .collect();
    let base_lr = cfg.effective_lr();
    let mut opt = OptimState::new(&towers, {
        let mut c = AdamWConfig::new(base_lr, cfg.weight_decay);
        c.beta1 = cfg.adam_beta1;
        c.beta2 = cfg.adam_beta2;
        c.eps = cfg.adam_eps;
        c
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace_rows = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            // all rng draws happen here, before any forward work
            let mut triples = Vec::with_capacity(chunk.len());
            for &gi in chunk {
                let rows = &groups[gi].1;
                let (ia, ib) = match cfg.pair_sampling {
                    PairSampling::Uniform => {
                        let picked = rand::seq::index::sample(&mut rng, rows.len(), 2);
                        (rows[picked.index(0)], rows[picked.index(1)])
                    }
                    PairSampling::Anchored => {
                        let degraded: Vec<usize> = rows
                            .iter()
                            .copied()
                            .filter(|&i| manifest.rows[i].level > 0)
                            .collect();
                        if degraded.is_empty() {
                            let picked = rand::seq::index::sample(&mut rng, rows.len(), 2);
                            (rows[picked.index(0)], rows[picked.index(1)])
                        } else {
                            (pristine[gi], degraded[rng.gen_range(0..degraded.len())])
                        }
                    }
                };
                let orig = &images[pristine[gi]];
                if orig.height < cfg.crop || orig.width < cfg.crop {
                    return Err(TrainError::IncompatibleConfig(format!(
                        "image {} is smaller than the {} crop",
                        orig.reference_id, cfg.crop
                    )));
                }
                let row0 = rng.gen_range(0..=orig.height - cfg.crop);
                let col0 = rng.gen_range(0..=orig.width - cfg.crop);
                let flip = rng.gen::<f64>() < cfg.flip_prob;
                let prep = |img: &Image| {
                    let c = crop_at(img, row0, col0, cfg.crop);
                    if flip {
                        hflip(&c)
                    } else {
                        c
                    }
                };
                triples.push((prep(orig), prep(&images[ia]), prep(&images[ib])));
            }
            if cfg.warmup_steps > 0 {
                let ramp = ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0);
                opt.cfg.lr = base_lr * ramp;
            }
            model.zero_grads();
            let inv = 1.0 / triples.len() as f64;
            let mut batch = StepReport {
                loss: 0.0,
                mse_a: 0.0,
                mse_b: 0.0,
                mae_a: 0.0,
                mae_b: 0.0,
            };
            for (orig, da, db) in &triples {
                check_triple(orig, da, db)?;
                let trace = Trace::new();
                let (loss, report) =
                    pretext_loss(&model, orig, da, db, cfg.wiring, Some(&trace))?;
                loss.scale(inv as f32).backward()?;
                batch.loss += report.loss * inv;
                batch.mse_a += report.mse_a * inv;
                batch.mse_b += report.mse_b * inv;
                batch.mae_a += report.mae_a * inv;
                batch.mae_b += report.mae_b * inv;
            }
            if !batch.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss(step));
            }
            opt.step(&towers)?;
            model.zero_grads();
            step += 1;
            epoch_loss += batch.loss;
            epoch_steps += 1;
            trace_rows.push(TraceRow {
                step,
                loss: batch.loss,
                mse_a: batch.mse_a,
                mse_b: batch.mse_b,
                mae_a: batch.mae_a,
                mae_b: batch.mae_b,
            });
        }
        epoch_losses.push((epoch_loss / epoch_steps.max(1) as f64) as f32);
    }

    let meta = CheckpointMeta {
        epoch: cfg.epochs as u32,
        loss_history: epoch_losses,
        score_norm: None,
        split: None,
        extra: vec![
            ("phase".into(), "pretrain".into()),
            ("lr".into(), base_lr.to_string()),
            ("weight_decay".into(), cfg.weight_decay.to_string()),
            ("wiring".into(), cfg.wiring.to_string()),
            ("batch_size".into(), cfg.batch_size.to_string()),
            ("seed".into(), cfg.seed.to_string()),
        ],
    };
    Ok((Checkpoint::capture(&model, Some(&opt), &rng, meta), trace_rows))
}

/// Worker count for read-only forward passes, capped by `XIQA_THREADS`.
pub(crate) fn worker_threads() -> usize {
    let hw = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    match std::env::var("XIQA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        Some(n) if n >= 1 => n.min(hw),
        _ => hw.min(8),
    }
}

/// Encode a batch of images with frozen parameters, in parallel, returning
/// each image's class token. Each worker owns a full copy of the parameters,
/// so results are independent of scheduling.
pub(crate) fn encode_class_tokens(
    model: &ModelParams<f32>,
    images: &[Image],
) -> Result<Vec<Vec<f32>>, TrainError> {
    let threads = worker_threads().min(images.len().max(1));
    if threads <= 1 {
        return images
            .iter()
            .map(|img| {
                Ok(encode(img, &model.encoder, &model.cfg, None)?
                    .class_token
                    .to_vec())
            })
            .collect();
    }
    let snapshot: Vec<Vec<f32>> = model.parameters().iter().map(|p| p.values().clone()).collect();
    let cfg = model.cfg.clone();
    let chunk_len = images.len().div_ceil(threads);
    let results: Vec<Result<Vec<Vec<f32>>, TrainError>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for chunk in images.chunks(chunk_len) {
            let snapshot = &snapshot;
            let cfg = &cfg;
            handles.push(scope.spawn(move || {
                let local = ModelParams::<f32>::init(cfg, 0);
                for (p, values) in local.parameters().iter().zip(snapshot) {
                    p.set_values(values.clone());
                }
                chunk
                    .iter()
                    .map(|img| {
                        Ok(encode(img, &local.encoder, cfg, None)?.class_token.to_vec())
                    })
                    .collect()
            }));
        }
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut tokens = Vec::with_capacity(images.len());
    for r in results {
        tokens.extend(r?);
    }
    Ok(tokens)
}

/// Fine-tune the linear score head on a labeled manifest with the
/// reconstruction towers frozen. Scores are z-normalized; the normalization
/// is stored in the returned checkpoint so predictions can be mapped back.
pub fn finetune_run(
    labeled: &DatasetManifest,
    checkpoint: &Checkpoint,
    cfg: &TrainConfig,
) -> Result<Checkpoint, TrainError> {
    if !labeled.all_scored() {
        return Err(TrainError::MissingScores);
    }
    let model = checkpoint.build_model()?;
    model.cfg.validate()?;
    if cfg.crop != model.cfg.image_size {
        return Err(TrainError::IncompatibleConfig(format!(
            "crop {} must equal the model input size {}",
            cfg.crop, model.cfg.image_size
        )));
    }
    model.set_towers_trainable(false);
    let images = load_manifest_images(labeled)?;
    let scores: Vec<f64> = labeled.rows.iter().map(|r| r.score.unwrap()).collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / scores.len() as f64;
    let std = if var == 0.0 { 1.0 } else { var.sqrt() };
    let targets: Vec<f32> = scores.iter().map(|s| ((s - mean) / std) as f32).collect();

    let head = model.score_parameters();
    let mut opt = OptimState::new(&head, {
        let mut c = AdamWConfig::new(cfg.finetune_lr, cfg.weight_decay);
        c.beta1 = cfg.adam_beta1;
        c.beta2 = cfg.adam_beta2;
        c
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epoch_losses = Vec::with_capacity(cfg.finetune_epochs);

    for _epoch in 0..cfg.finetune_epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng);
        // augment sequentially (deterministic rng order), encode in parallel
        let mut augmented = Vec::with_capacity(order.len());
        for &i in &order {
            let img = random_crop(&images[i], cfg.crop, &mut rng)?;
            augmented.push(random_hflip(&img, cfg.flip_prob, &mut rng));
        }
        let tokens = encode_class_tokens(&model, &augmented)?;
        let mut epoch_loss = 0.0;
        for (chunk_rows, chunk_tokens) in order
            .chunks(cfg.batch_size)
            .zip(tokens.chunks(cfg.batch_size))
        {
            model.zero_grads();
            let inv = 1.0 / chunk_rows.len() as f32;
            for (&i, token) in chunk_rows.iter().zip(chunk_tokens) {
                let enc_out = crate::model::EncoderOutput {
                    class_token: Tensor::from_vec(vec![token.len()], token.clone())?,
                    patch_tokens: Tensor::zeros(vec![0, token.len()]),
                };
                let trace = Trace::new();
                let pred = regress_score(&enc_out, &model.score_head, Some(&trace))?;
                let target = Tensor::scalar(targets[i]);
                let loss = l1_loss(&pred, &target)?;
                epoch_loss += loss.item() as f64;
                loss.scale(inv).backward()?;
            }
            opt.step(&head)?;
            model.zero_grads();
        }
        let mean_loss = epoch_loss / images.len() as f64;
        if !mean_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss(opt.step_count));
        }
        epoch_losses.push(mean_loss as f32);
    }

    let meta = CheckpointMeta {
        epoch: cfg.finetune_epochs as u32,
        loss_history: epoch_losses,
        score_norm: Some((mean, std)),
        split: checkpoint.meta.split.clone(),
        extra: vec![
            ("phase".into(), "finetune".into()),
            ("finetune_lr".into(), cfg.finetune_lr.to_string()),
            ("seed".into(), cfg.seed.to_string()),
        ],
    };
    Ok(Checkpoint::capture(&model, None, &rng, meta))
}
