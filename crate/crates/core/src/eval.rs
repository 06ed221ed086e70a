//! Split-by-reference protocol and end-to-end model evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::image::{center_crop, ImageError};
use crate::manifest::DatasetManifest;
use crate::metrics::{plcc, srocc, MetricError, RunMetrics, ScorePairs};
use crate::model::{EncoderOutput, ModelError};
use crate::tensor::Tensor;
use crate::train::{encode_class_tokens, finetune_run, load_manifest_images, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 2 distinct references, got {0}")]
    TooFewReferences(usize),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// A train/test partition of reference ids. Every distorted rendition
/// follows its reference, so content never leaks across the split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub train_refs: Vec<String>,
    pub test_refs: Vec<String>,
    pub fraction: f64,
    pub seed: u64,
}

impl SplitPlan {
    pub fn is_train(&self, reference_id: &str) -> bool {
        self.train_refs.iter().any(|r| r == reference_id)
    }

    pub fn is_test(&self, reference_id: &str) -> bool {
        self.test_refs.iter().any(|r| r == reference_id)
    }
}

/// Shuffle the distinct reference ids by `seed` and send the first
/// `round(fraction * total)` (clamped so both sides are non-empty) to the
/// training side.
pub fn split_by_reference(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<SplitPlan, EvalError> {
    let mut refs = manifest.reference_ids();
    if refs.len() < 2 {
        return Err(EvalError::TooFewReferences(refs.len()));
    }
    refs.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    refs.shuffle(&mut rng);
    let total = refs.len();
    let n_train = ((fraction * total as f64).round() as usize).clamp(1, total - 1);
    let mut train_refs: Vec<String> = refs[..n_train].to_vec();
    let mut test_refs: Vec<String> = refs[n_train..].to_vec();
    train_refs.sort();
    test_refs.sort();
    Ok(SplitPlan {
        train_refs,
        test_refs,
        fraction,
        seed,
    })
}

/// One predicted/actual pair of the evaluation dump.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub path: String,
    pub predicted: f64,
    pub ground_truth: f64,
}

impl ScoreRow {
    pub const CSV_HEADER: &'static str = "path,predicted,ground_truth";

    pub fn csv_line(&self) -> String {
        format!("{},{},{}", self.path, self.predicted, self.ground_truth)
    }
}

/// Score every labeled test image with the checkpoint's head (deterministic
/// center crop, no augmentation), de-normalize predictions, and return both
/// correlation metrics plus the per-image dump.
pub fn evaluate_model(
    checkpoint: &Checkpoint,
    test: &DatasetManifest,
) -> Result<(RunMetrics, Vec<ScoreRow>), EvalError> {
    if !test.all_scored() {
        return Err(EvalError::Train(TrainError::MissingScores));
    }
    let model = checkpoint.build_model()?;
    let (mean, std) = checkpoint.meta.score_norm.unwrap_or((0.0, 1.0));
    let images = load_manifest_images(test)?;
    let cropped: Vec<_> = images
        .iter()
        .map(|img| center_crop(img, model.cfg.image_size))
        .collect::<Result<_, _>>()?;
    let tokens = encode_class_tokens(&model, &cropped)?;
    let mut rows = Vec::with_capacity(tokens.len());
    for (token, manifest_row) in tokens.into_iter().zip(&test.rows) {
        let enc_out = EncoderOutput {
            class_token: Tensor::from_vec(vec![token.len()], token).map_err(ModelError::from)?,
            patch_tokens: Tensor::zeros(vec![0, model.cfg.embed_dim]),
        };
        let raw = crate::model::regress_score(&enc_out, &model.score_head, None)?;
        rows.push(ScoreRow {
            path: manifest_row.path.clone(),
            predicted: raw.item() as f64 * std + mean,
            ground_truth: manifest_row.score.unwrap(),
        });
    }
    let pairs = ScorePairs::new(
        rows.iter().map(|r| r.predicted).collect(),
        rows.iter().map(|r| r.ground_truth).collect(),
    )?;
    let metrics = RunMetrics {
        plcc: plcc(&pairs)?,
        srocc: srocc(&pairs)?,
    };
    Ok((metrics, rows))
}

/// One full protocol repeat: split by reference, fine-tune the head on the
/// train side (fresh from `pretrained`), evaluate on the held-out side.
/// The split seed also seeds the fine-tune shuffling, so a repeat is fully
/// determined by (pretrained checkpoint, manifest, cfg, split_seed).
pub fn finetune_and_evaluate(
    pretrained: &Checkpoint,
    labeled: &DatasetManifest,
    cfg: &TrainConfig,
    split_seed: u64,
) -> Result<(RunMetrics, Checkpoint), EvalError> {
    let split = split_by_reference(labeled, 0.8, split_seed)?;
    let train_manifest = labeled.filter_refs(|id| split.is_train(id));
    let test_manifest = labeled.filter_refs(|id| split.is_test(id));
    let mut run_cfg = cfg.clone();
    run_cfg.seed = split_seed;
    let mut tuned = finetune_run(&train_manifest, pretrained, &run_cfg)?;
    tuned.meta.split = Some(split);
    let (metrics, _) = evaluate_model(&tuned, &test_manifest)?;
    Ok((metrics, tuned))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::DegradationKind;
    use crate::manifest::ManifestRow;
    use std::collections::HashSet;
    use std::path::PathBuf;

    fn manifest_with_refs(n: usize) -> DatasetManifest {
        let rows = (0..n)
            .flat_map(|i| {
                (0..3u8).map(move |level| ManifestRow {
                    path: format!("r{i}_l{level}.ppm"),
                    reference_id: format!("r{i}"),
                    kind: DegradationKind::GaussianBlur,
                    level,
                    score: Some(-(level as f64)),
                })
            })
            .collect();
        DatasetManifest::new(rows, PathBuf::from("/tmp"))
    }

    #[test]
    fn split_counts_for_25_and_29_references() {
        let plan = split_by_reference(&manifest_with_refs(25), 0.8, 1).unwrap();
        assert_eq!(plan.train_refs.len(), 20);
        assert_eq!(plan.test_refs.len(), 5);

        let plan = split_by_reference(&manifest_with_refs(29), 0.8, 1).unwrap();
        assert_eq!(plan.train_refs.len(), 23);
        assert_eq!(plan.test_refs.len(), 6);
    }

    #[test]
    fn split_is_disjoint_and_covering_across_seeds() {
        let manifest = manifest_with_refs(13);
        for seed in 0..200 {
            let plan = split_by_reference(&manifest, 0.8, seed).unwrap();
            let train: HashSet<_> = plan.train_refs.iter().collect();
            let test: HashSet<_> = plan.test_refs.iter().collect();
            assert!(train.is_disjoint(&test), "seed {seed}");
            assert_eq!(train.len() + test.len(), 13);
        }
    }

    #[test]
    fn split_never_empties_either_side() {
        let manifest = manifest_with_refs(2);
        for seed in 0..20 {
            let plan = split_by_reference(&manifest, 0.8, seed).unwrap();
            assert_eq!(plan.train_refs.len(), 1);
            assert_eq!(plan.test_refs.len(), 1);
        }
    }

    #[test]
    fn split_rejects_single_reference() {
        assert!(matches!(
            split_by_reference(&manifest_with_refs(1), 0.8, 0),
            Err(EvalError::TooFewReferences(1))
        ));
    }

    #[test]
    fn split_is_seed_deterministic() {
        let manifest = manifest_with_refs(10);
        let a = split_by_reference(&manifest, 0.8, 7).unwrap();
        let b = split_by_reference(&manifest, 0.8, 7).unwrap();
        assert_eq!(a, b);
        let c = split_by_reference(&manifest, 0.8, 8).unwrap();
        assert_ne!(a.train_refs, c.train_refs);
    }
}
