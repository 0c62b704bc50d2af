use std::collections::BTreeMap;
use std::ops::Range;

use super::{find_onsets, Recording};
use crate::error::{Error, Result};

/// One split: the concatenated recording and the source ranges it was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPart {
    pub recording: Recording,
    pub ranges: Vec<Range<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: SplitPart,
    pub val: SplitPart,
    pub test: SplitPart,
}

/// Splits a recording into train/validation/test by whole trials.
///
/// Each trial owns the samples from its onset up to the next onset. For every
/// condition the last `test_trials` trials go to test, the `val_trials` before
/// them to validation, and everything else (including the lead-in before the
/// first onset) to training. With block-randomised schedules this yields one
/// contiguous block per split.
pub fn split_dataset(rec: &Recording, val_trials: usize, test_trials: usize) -> Result<DatasetSplit> {
    let onsets = find_onsets(&rec.condition);
    let t = rec.n_samples();
    let mut by_condition: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &(_, k)) in onsets.iter().enumerate() {
        by_condition.entry(k).or_default().push(i);
    }
    // 0 = train, 1 = val, 2 = test
    let mut owner = vec![0u8; onsets.len()];
    for (k, trials) in &by_condition {
        if trials.len() < val_trials + test_trials {
            return Err(Error::invalid(format!(
                "condition {k} has {} trials, need {} for validation and test",
                trials.len(),
                val_trials + test_trials
            )));
        }
        let n = trials.len();
        for &i in &trials[n - test_trials..] {
            owner[i] = 2;
        }
        for &i in &trials[n - test_trials - val_trials..n - test_trials] {
            owner[i] = 1;
        }
    }
    let mut ranges: [Vec<Range<usize>>; 3] = Default::default();
    let mut push = |who: usize, r: Range<usize>| {
        if r.is_empty() {
            return;
        }
        match ranges[who].last_mut() {
            Some(last) if last.end == r.start => last.end = r.end,
            _ => ranges[who].push(r),
        }
    };
    let first = onsets.first().map_or(t, |o| o.0);
    push(0, 0..first);
    for (i, &(start, _)) in onsets.iter().enumerate() {
        let end = onsets.get(i + 1).map_or(t, |o| o.0);
        push(owner[i] as usize, start..end);
    }
    let [train, val, test] = ranges;
    Ok(DatasetSplit {
        train: part(rec, train)?,
        val: part(rec, val)?,
        test: part(rec, test)?,
    })
}

fn part(rec: &Recording, ranges: Vec<Range<usize>>) -> Result<SplitPart> {
    let recording = if ranges.is_empty() {
        rec.slice(0..0)?
    } else {
        let pieces = ranges
            .iter()
            .map(|r| rec.slice(r.clone()))
            .collect::<Result<Vec<_>>>()?;
        Recording::concat(&pieces)?
    };
    Ok(SplitPart { recording, ranges })
}
