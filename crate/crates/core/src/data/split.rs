use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::{Basket, Dataset, TimeIndex, UserSequence};
use crate::error::{Error, Result};

/// Half-open calendar range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub start: TimeIndex,
    pub end: TimeIndex,
}

impl TimeRange {
    pub fn new(start: TimeIndex, end: TimeIndex) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, t: TimeIndex) -> bool {
        self.start <= t && t < self.end
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Chronological train / validation / test boundaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: TimeRange,
    pub validation: TimeRange,
    pub test: TimeRange,
}

impl DatasetSplit {
    pub fn new(train: TimeRange, validation: TimeRange, test: TimeRange) -> Result<Self> {
        for (name, r) in [("train", train), ("validation", validation), ("test", test)] {
            if r.end < r.start {
                return Err(Error::contract(format!(
                    "{name} range [{}, {}) is inverted",
                    r.start, r.end
                )));
            }
        }
        if train.end > validation.start || validation.end > test.start {
            return Err(Error::contract(format!(
                "split ranges overlap or are out of order: train {train:?}, validation {validation:?}, test {test:?}"
            )));
        }
        Ok(Self {
            train,
            validation,
            test,
        })
    }

    /// Contiguous split: train `[start, train_end)`, validation up to
    /// `valid_end`, test up to `test_end`.
    pub fn contiguous(
        start: TimeIndex,
        train_end: TimeIndex,
        valid_end: TimeIndex,
        test_end: TimeIndex,
    ) -> Result<Self> {
        Self::new(
            TimeRange::new(start, train_end),
            TimeRange::new(train_end, valid_end),
            TimeRange::new(valid_end, test_end),
        )
    }
}

/// One prediction problem: everything observed before `target`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalInstance {
    pub context: UserSequence,
    pub target: Basket,
}

#[derive(Clone, Debug, Default)]
pub struct SplitViews {
    /// Training-range sequences with at least two baskets.
    pub train: Vec<UserSequence>,
    pub validation: Vec<EvalInstance>,
    pub test: Vec<EvalInstance>,
}

fn instances(data: &Dataset, range: TimeRange, all_steps: bool, label: &str) -> Vec<EvalInstance> {
    let mut out = Vec::new();
    for u in &data.users {
        let targets: Vec<&Basket> = u
            .baskets
            .iter()
            .filter(|b| range.contains(b.time_index))
            .collect();
        let chosen: Vec<&Basket> = if all_steps {
            targets
        } else {
            targets.last().copied().into_iter().collect()
        };
        for target in chosen {
            let t = target.time_index;
            let baskets: Vec<Basket> = u
                .baskets
                .iter()
                .filter(|b| b.time_index < t)
                .cloned()
                .collect();
            if baskets.is_empty() {
                debug!(
                    "user {} skipped in {label}: no context before step {t}",
                    u.user_id
                );
                continue;
            }
            let attributes = u
                .attributes
                .iter()
                .filter(|a| a.time_index < t)
                .cloned()
                .collect();
            out.push(EvalInstance {
                context: UserSequence {
                    user_id: u.user_id,
                    baskets,
                    attributes,
                },
                target: target.clone(),
            });
        }
    }
    out
}

/// Partitions each user's baskets by calendar range.
///
/// The training view keeps baskets inside the training range and drops users
/// left with fewer than two (no shifted target exists). Evaluation views
/// hold one instance per user at the final basket inside the range, or one
/// per basket with `all_steps`; their context is every earlier basket.
pub fn chronological_split(data: &Dataset, split: &DatasetSplit, all_steps: bool) -> SplitViews {
    if let Some((lo, hi)) = data.time_span() {
        if split.train.start > hi || split.test.end <= lo {
            warn!("split {split:?} lies outside the data span [{lo}, {hi}]");
        }
    }
    let mut train = Vec::new();
    for u in &data.users {
        let baskets: Vec<Basket> = u
            .baskets
            .iter()
            .filter(|b| split.train.contains(b.time_index))
            .cloned()
            .collect();
        if baskets.len() < 2 {
            continue;
        }
        let attributes = u
            .attributes
            .iter()
            .filter(|a| a.time_index < split.train.end)
            .cloned()
            .collect();
        train.push(UserSequence {
            user_id: u.user_id,
            baskets,
            attributes,
        });
    }
    SplitViews {
        train,
        validation: instances(data, split.validation, all_steps, "validation"),
        test: instances(data, split.test, all_steps, "test"),
    }
}
