use std::fmt::Write as _;

use super::classifier::{fine_tune, train_classifier, ClassifierConfig};
use crate::error::{Error, Result};
use crate::signal::EpochedData;

/// Test accuracies of one transfer run.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferResult {
    pub pretrain_trials: usize,
    /// Trained on the fine-tuning set only.
    pub direct: f64,
    /// Pretrained head applied to the test set without further training.
    pub zero_shot: f64,
    /// Pretrained, then trained on the fine-tuning set.
    pub finetuned: f64,
}

/// Pretrains on `pretrain` (e.g. generated trials), evaluates zero-shot on
/// `test`, fine-tunes on `finetune` and evaluates again. A classifier trained
/// on `finetune` alone is the reference.
pub fn transfer_experiment(
    pretrain: &EpochedData,
    finetune: &EpochedData,
    test: &EpochedData,
    cfg: &ClassifierConfig,
) -> Result<TransferResult> {
    let classes = finetune.condition_set();
    if pretrain.condition_set() != classes || test.condition_set() != classes {
        return Err(Error::invalid(format!(
            "condition sets differ: pretrain {:?}, finetune {classes:?}, test {:?}",
            pretrain.condition_set(),
            test.condition_set()
        )));
    }
    if pretrain.n_channels() != finetune.n_channels() || pretrain.epoch_len() != finetune.epoch_len() {
        return Err(Error::shape("pretraining and fine-tuning epochs differ in shape"));
    }
    let direct = train_classifier(finetune, cfg)?.classifier.accuracy(test)?;
    let pre = train_classifier(pretrain, cfg)?;
    let zero_shot = pre.classifier.accuracy(test)?;
    let finetuned = fine_tune(pre.classifier, finetune, cfg)?.classifier.accuracy(test)?;
    Ok(TransferResult {
        pretrain_trials: pretrain.n_trials(),
        direct,
        zero_shot,
        finetuned,
    })
}

/// Tab-separated accuracy table: one reference row, then one row per pretraining set.
pub fn transfer_table(results: &[TransferResult]) -> String {
    let mut s = String::from("setting\tpretrain_trials\tzero_shot_pct\tfinal_pct\n");
    if let Some(first) = results.first() {
        let _ = writeln!(s, "real_only\t0\t-\t{:.2}", 100.0 * first.direct);
    }
    for r in results {
        let _ = writeln!(
            s,
            "pretrained\t{}\t{:.2}\t{:.2}",
            r.pretrain_trials,
            100.0 * r.zero_shot,
            100.0 * r.finetuned
        );
    }
    s
}
