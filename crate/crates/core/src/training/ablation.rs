use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::ModelSpec;

/// Label and embedding ablations applied at training time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablations {
    /// Permute the condition of every trial at random.
    pub shuffle_condition_labels: bool,
    /// Relabel every trial as condition 1.
    pub single_condition_label: bool,
    pub disable_channel_embedding: bool,
    pub disable_condition_embedding: bool,
}

impl Ablations {
    pub fn validate(&self) -> Result<()> {
        if self.shuffle_condition_labels && self.single_condition_label {
            return Err(Error::invalid(
                "shuffle_condition_labels and single_condition_label are exclusive",
            ));
        }
        Ok(())
    }

    /// The spec with the embedding ablations switched on.
    pub fn apply_to_spec(&self, spec: &ModelSpec) -> ModelSpec {
        let mut spec = spec.clone();
        match &mut spec {
            ModelSpec::Ar(_) => {}
            ModelSpec::Wavenet(s) => {
                if self.disable_condition_embedding {
                    s.condition_embed = 0;
                }
            }
            ModelSpec::ChannelGpt(s) => {
                if self.disable_channel_embedding {
                    s.use_channel_embedding = false;
                }
                if self.disable_condition_embedding {
                    s.use_condition_embedding = false;
                }
            }
            ModelSpec::FlatGpt(s) => {
                if self.disable_condition_embedding {
                    s.use_condition_embedding = false;
                }
            }
        }
        spec
    }

    /// Condition track with the label ablations applied.
    pub fn relabel(&self, track: &[u32], seed: u64) -> Vec<u32> {
        if self.single_condition_label {
            track.iter().map(|&c| u32::from(c != 0)).collect()
        } else if self.shuffle_condition_labels {
            shuffle_trial_labels(track, seed)
        } else {
            track.to_vec()
        }
    }
}

/// Runs of one nonzero condition, as (start, end, condition).
pub fn trial_blocks(track: &[u32]) -> Vec<(usize, usize, u32)> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < track.len() {
        let k = track[t];
        let start = t;
        while t < track.len() && track[t] == k {
            t += 1;
        }
        if k != 0 {
            out.push((start, t, k));
        }
    }
    out
}

/// Reassigns trial conditions by a random permutation; trial timing is kept.
pub fn shuffle_trial_labels(track: &[u32], seed: u64) -> Vec<u32> {
    let blocks = trial_blocks(track);
    let mut labels: Vec<u32> = blocks.iter().map(|b| b.2).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = track.to_vec();
    for (&(s, e, _), &k) in blocks.iter().zip(&labels) {
        out[s..e].fill(k);
    }
    out
}
