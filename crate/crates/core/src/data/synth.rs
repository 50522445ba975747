//! Seeded generator of basket sequences with planted, recoverable patterns.
//!
//! Three patterns can be mixed:
//!
//! * **periodic** – each user repurchases a few items every `period` steps,
//!   each at its own phase;
//! * **co-purchase** – when items `a` and `b` share a basket, the paired
//!   item `c` appears in the next basket. A lone `a` or `b` implies nothing,
//!   or, with `solo_items`, its own item `s` instead of `c`;
//! * **attribute switch** – a categorical `segment` attribute picks which of
//!   two item clusters the next basket is drawn from, and it flips at random
//!   steps.
//!
//! Item ids are assigned to pattern pools through a seeded permutation, so
//! pool membership does not correlate with id order.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    AttributeRecord, AttributeSchema, Basket, CategoricalAttribute, Dataset, TimeIndex,
    UserSequence,
};
use crate::error::{Error, Result};

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    /// Calendar steps `0..num_steps` per user.
    pub num_steps: usize,
    /// Chance a user shops at a step with no planted event.
    #[serde(default = "one")]
    pub basket_prob: f64,
    /// Uniform random items added to every basket.
    #[serde(default)]
    pub noise_items: usize,
    #[serde(default)]
    pub periodic: Option<PeriodicPattern>,
    #[serde(default)]
    pub copurchase: Option<CopurchasePattern>,
    #[serde(default)]
    pub attribute_switch: Option<SwitchPattern>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeriodicPattern {
    pub period: usize,
    pub items_per_user: usize,
    pub pool_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CopurchasePattern {
    pub num_pairs: usize,
    /// Chance per step of planting a complete pair.
    pub pair_prob: f64,
    /// Chance per draw of planting a lone half of a pair.
    #[serde(default)]
    pub decoy_prob: f64,
    /// Decoy draws per step. A decoy never completes a pair.
    #[serde(default = "one_draw")]
    pub decoys: usize,
    /// Give each pair a fourth item that follows a lone half.
    #[serde(default)]
    pub solo_items: bool,
}

fn one_draw() -> usize {
    1
}

impl CopurchasePattern {
    fn group(&self) -> usize {
        if self.solo_items {
            4
        } else {
            3
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchPattern {
    pub cluster_size: usize,
    pub items_per_basket: usize,
    /// Chance per step that the segment value flips.
    pub switch_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicAssignment {
    pub user_id: u64,
    /// `(item, phase)`: the item appears at steps `t ≡ phase (mod period)`.
    pub items: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopurchaseTriple {
    pub first: usize,
    pub second: usize,
    pub implied: usize,
    /// Follows a lone `first` or `second`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solo: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchTrace {
    pub user_id: u64,
    pub initial_segment: usize,
    pub switch_steps: Vec<TimeIndex>,
}

/// Ground truth describing what was planted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthMetadata {
    pub seed: u64,
    pub config: SynthConfig,
    pub periodic_period: Option<usize>,
    pub periodic: Vec<PeriodicAssignment>,
    pub copurchase: Vec<CopurchaseTriple>,
    pub clusters: Vec<Vec<usize>>,
    pub switches: Vec<SwitchTrace>,
    pub noise_pool: Vec<usize>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_items == 0 || self.num_steps == 0 {
            return Err(Error::contract("synth sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.basket_prob) {
            return Err(Error::contract("basket_prob must lie in [0, 1]"));
        }
        if let Some(p) = &self.periodic {
            if p.period == 0 || p.period > self.num_steps {
                return Err(Error::contract(format!(
                    "periodic period {} must lie in 1..={} (the number of steps)",
                    p.period, self.num_steps
                )));
            }
            if p.items_per_user > p.pool_size {
                return Err(Error::contract("periodic items_per_user exceeds pool_size"));
            }
        }
        if self.copurchase.as_ref().is_some_and(|c| c.num_pairs == 0) {
            return Err(Error::contract("copurchase needs at least one pair"));
        }
        if let Some(s) = &self.attribute_switch {
            if s.items_per_basket == 0 || s.items_per_basket > s.cluster_size {
                return Err(Error::contract(
                    "switch items_per_basket must lie in 1..=cluster_size",
                ));
            }
        }
        if self.reserved_items() > self.num_items {
            return Err(Error::contract(format!(
                "patterns need {} items but the catalog has {}",
                self.reserved_items(),
                self.num_items
            )));
        }
        Ok(())
    }

    fn reserved_items(&self) -> usize {
        self.periodic.as_ref().map_or(0, |p| p.pool_size)
            + self
                .copurchase
                .as_ref()
                .map_or(0, |c| c.group() * c.num_pairs)
            + self
                .attribute_switch
                .as_ref()
                .map_or(0, |s| 2 * s.cluster_size)
    }

    pub fn schema(&self) -> AttributeSchema {
        if self.attribute_switch.is_none() {
            return AttributeSchema::default();
        }
        AttributeSchema {
            categorical: vec![CategoricalAttribute {
                name: "segment".into(),
                values: vec!["a".into(), "b".into()],
            }],
            numerical: vec!["activity".into()],
        }
    }
}

/// Generates a dataset and the metadata of everything planted in it.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<(Dataset, SynthMetadata)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = (0..config.num_items).collect();
    ids.shuffle(&mut rng);
    let mut pool = ids.into_iter();
    let mut take = |n: usize| -> Vec<usize> { pool.by_ref().take(n).collect() };

    let periodic_pool = config
        .periodic
        .as_ref()
        .map(|p| take(p.pool_size))
        .unwrap_or_default();
    let triples: Vec<CopurchaseTriple> = config
        .copurchase
        .as_ref()
        .map(|c| {
            take(c.group() * c.num_pairs)
                .chunks(c.group())
                .map(|t| CopurchaseTriple {
                    first: t[0],
                    second: t[1],
                    implied: t[2],
                    solo: t.get(3).copied(),
                })
                .collect()
        })
        .unwrap_or_default();
    let clusters: Vec<Vec<usize>> = config
        .attribute_switch
        .as_ref()
        .map(|s| vec![take(s.cluster_size), take(s.cluster_size)])
        .unwrap_or_default();
    let mut noise_pool: Vec<usize> = pool.collect();
    if noise_pool.is_empty() {
        noise_pool = (0..config.num_items).collect();
    }
    noise_pool.sort_unstable();

    let schema = config.schema();
    let steps = config.num_steps as TimeIndex;
    let mut users = Vec::with_capacity(config.num_users);
    let mut periodic_meta = Vec::new();
    let mut switch_meta = Vec::new();

    for uid in 0..config.num_users as u64 {
        let mut planned: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); config.num_steps];
        let mut forced = vec![false; config.num_steps];

        if let Some(p) = &config.periodic {
            let items: Vec<(usize, usize)> = periodic_pool
                .choose_multiple(&mut rng, p.items_per_user)
                .map(|&i| (i, rng.gen_range(0..p.period)))
                .collect();
            for &(item, phase) in &items {
                for t in (phase..config.num_steps).step_by(p.period) {
                    planned[t].insert(item);
                    forced[t] = true;
                }
            }
            periodic_meta.push(PeriodicAssignment {
                user_id: uid,
                items,
            });
        }

        let mut segment = vec![0usize; config.num_steps];
        let mut records = Vec::new();
        if let Some(s) = &config.attribute_switch {
            let initial = rng.gen_range(0..2);
            let mut current = initial;
            let mut switch_steps = Vec::new();
            for t in 0..config.num_steps {
                if t > 0 && rng.gen_bool(s.switch_prob) {
                    current ^= 1;
                    switch_steps.push(t as TimeIndex);
                }
                segment[t] = current;
                records.push(AttributeRecord {
                    time_index: t as TimeIndex,
                    categorical: vec![current],
                    numerical: vec![rng.gen_range(0.0..100.0)],
                });
            }
            switch_meta.push(SwitchTrace {
                user_id: uid,
                initial_segment: initial,
                switch_steps,
            });
        }

        let mut baskets = Vec::new();
        for t in 0..config.num_steps {
            let shops = forced[t] || rng.gen_bool(config.basket_prob);
            if !shops {
                continue;
            }
            let mut items = std::mem::take(&mut planned[t]);
            if let Some(c) = &config.copurchase {
                let mut used = BTreeSet::new();
                if rng.gen_bool(c.pair_prob) {
                    let k = rng.gen_range(0..triples.len());
                    let tr = &triples[k];
                    used.insert(k);
                    items.insert(tr.first);
                    items.insert(tr.second);
                    if t + 1 < config.num_steps {
                        planned[t + 1].insert(tr.implied);
                        forced[t + 1] = true;
                    }
                }
                for _ in 0..c.decoys {
                    if c.decoy_prob > 0.0 && rng.gen_bool(c.decoy_prob) {
                        let k = rng.gen_range(0..triples.len());
                        if used.insert(k) {
                            let tr = &triples[k];
                            items.insert(if rng.gen_bool(0.5) {
                                tr.first
                            } else {
                                tr.second
                            });
                            if let (Some(s), true) = (tr.solo, t + 1 < config.num_steps) {
                                planned[t + 1].insert(s);
                                forced[t + 1] = true;
                            }
                        }
                    }
                }
            }
            if let Some(s) = &config.attribute_switch {
                let cluster = &clusters[segment[t.saturating_sub(1)]];
                items.extend(
                    cluster
                        .choose_multiple(&mut rng, s.items_per_basket)
                        .copied(),
                );
            }
            for _ in 0..config.noise_items {
                items.insert(*noise_pool.choose(&mut rng).expect("non-empty pool"));
            }
            if items.is_empty() {
                items.insert(*noise_pool.choose(&mut rng).expect("non-empty pool"));
            }
            baskets.push(Basket::new(
                t as TimeIndex,
                items.into_iter().collect(),
                config.num_items,
            )?);
        }
        debug_assert!(baskets.iter().all(|b| b.time_index < steps));
        users.push(UserSequence {
            user_id: uid,
            baskets,
            attributes: records,
        });
    }

    let dataset = Dataset {
        num_items: config.num_items,
        schema,
        users,
    };
    let meta = SynthMetadata {
        seed,
        config: config.clone(),
        periodic_period: config.periodic.as_ref().map(|p| p.period),
        periodic: periodic_meta,
        copurchase: triples,
        clusters,
        switches: switch_meta,
        noise_pool,
    };
    Ok((dataset, meta))
}
