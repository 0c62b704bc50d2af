//! Condition decoding: a Bayes-rule decoder built from any conditional
//! forecaster, a linear classifier on epochs, and the transfer harness.

mod bayes;
mod classifier;
mod transfer;

pub use bayes::{
    bayes_posterior, binomial_tail, decode_trials, posterior_from_increments, ConditionalForecaster, DecodeTrial,
    GenerativeDecoding, PosteriorTrace,
};
pub use classifier::{
    fine_tune, split_per_condition, train_classifier, ClassifierConfig, ClassifierOutcome, LinearClassifier,
};
pub use transfer::{transfer_experiment, transfer_table, TransferResult};

#[cfg(test)]
mod tests;
