//! User basket sequences with time-varying attributes.

mod io;
mod scaler;
mod split;
pub mod synth;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    load_csv, load_dataset_config, save_csv, Boundary, DatasetConfig, DatasetFiles, Granularity,
    SplitBoundaries,
};
pub use scaler::{fit_transform_numerical, MinMaxScaler};
pub use split::{chronological_split, DatasetSplit, EvalInstance, SplitViews, TimeRange};

/// Index on the dataset's calendar grid (whole days or months since epoch).
pub type TimeIndex = i64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalAttribute {
    pub name: String,
    pub values: Vec<String>,
}

/// Names and vocabularies of the dynamic user attributes.
///
/// Categorical values share one global id space: attribute `a`'s value `v`
/// has id `offset(a) + position of v in a's vocabulary`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSchema {
    #[serde(default)]
    pub categorical: Vec<CategoricalAttribute>,
    #[serde(default)]
    pub numerical: Vec<String>,
}

impl AttributeSchema {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for name in self
            .categorical
            .iter()
            .map(|c| &c.name)
            .chain(&self.numerical)
        {
            if !seen.insert(name) {
                return Err(Error::contract(format!(
                    "duplicate attribute name `{name}`"
                )));
            }
        }
        for c in &self.categorical {
            if c.values.is_empty() {
                return Err(Error::contract(format!(
                    "categorical attribute `{}` has an empty vocabulary",
                    c.name
                )));
            }
            let unique: HashSet<_> = c.values.iter().collect();
            if unique.len() != c.values.len() {
                return Err(Error::contract(format!(
                    "categorical attribute `{}` repeats a value",
                    c.name
                )));
            }
        }
        Ok(())
    }

    pub fn num_categorical_attrs(&self) -> usize {
        self.categorical.len()
    }

    /// Total distinct categorical values across all attributes.
    pub fn num_categorical_values(&self) -> usize {
        self.categorical.iter().map(|c| c.values.len()).sum()
    }

    pub fn num_numerical(&self) -> usize {
        self.numerical.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.categorical.len() + self.numerical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.num_attributes() == 0
    }

    pub fn offset(&self, attr: usize) -> usize {
        self.categorical[..attr]
            .iter()
            .map(|c| c.values.len())
            .sum()
    }

    pub fn value_id(&self, attr: usize, value: &str) -> Result<usize> {
        let c = &self.categorical[attr];
        c.values
            .iter()
            .position(|v| v == value)
            .map(|p| self.offset(attr) + p)
            .ok_or_else(|| {
                Error::Vocabulary(format!(
                    "unknown value `{value}` for attribute `{}`",
                    c.name
                ))
            })
    }

    /// Inverse of [`value_id`](Self::value_id).
    pub fn value_name(&self, attr: usize, id: usize) -> &str {
        &self.categorical[attr].values[id - self.offset(attr)]
    }
}

/// Items one user interacted with at one calendar step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Basket {
    pub time_index: TimeIndex,
    items: Vec<usize>,
}

impl Basket {
    /// Builds a basket, deduplicating and sorting item ids ascending.
    pub fn new(time_index: TimeIndex, mut items: Vec<usize>, num_items: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::contract(format!(
                "empty basket at step {time_index}"
            )));
        }
        if let Some(&bad) = items.iter().find(|&&i| i >= num_items) {
            return Err(Error::Lookup {
                index: bad,
                rows: num_items,
            });
        }
        items.sort_unstable();
        items.dedup();
        Ok(Self { time_index, items })
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, item: usize) -> bool {
        self.items.binary_search(&item).is_ok()
    }
}

/// Attribute values observed for one user at one calendar step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeRecord {
    pub time_index: TimeIndex,
    /// One global categorical value id per categorical attribute.
    pub categorical: Vec<usize>,
    pub numerical: Vec<f64>,
}

impl AttributeRecord {
    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        if self.categorical.len() != schema.num_categorical_attrs()
            || self.numerical.len() != schema.num_numerical()
        {
            return Err(Error::contract(format!(
                "attribute record at step {} does not match the schema",
                self.time_index
            )));
        }
        for (a, &id) in self.categorical.iter().enumerate() {
            let lo = schema.offset(a);
            if id < lo || id >= lo + schema.categorical[a].values.len() {
                return Err(Error::Vocabulary(format!(
                    "value id {id} does not belong to attribute `{}`",
                    schema.categorical[a].name
                )));
            }
        }
        if self.numerical.iter().any(|x| !x.is_finite()) {
            return Err(Error::contract(format!(
                "non-finite numerical value at step {}",
                self.time_index
            )));
        }
        Ok(())
    }
}

/// Time-ordered baskets and attribute records of one user. The two lists
/// share the calendar grid but need not be aligned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: u64,
    pub baskets: Vec<Basket>,
    pub attributes: Vec<AttributeRecord>,
}

impl UserSequence {
    pub fn validate(&self) -> Result<()> {
        let increasing = |ts: &mut dyn Iterator<Item = TimeIndex>| {
            let v: Vec<_> = ts.collect();
            v.windows(2).all(|w| w[0] < w[1])
        };
        if !increasing(&mut self.baskets.iter().map(|b| b.time_index))
            || !increasing(&mut self.attributes.iter().map(|a| a.time_index))
        {
            return Err(Error::contract(format!(
                "user {} has non-increasing time indices",
                self.user_id
            )));
        }
        Ok(())
    }

    pub fn last_time(&self) -> Option<TimeIndex> {
        self.baskets.last().map(|b| b.time_index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub num_items: usize,
    pub schema: AttributeSchema,
    pub users: Vec<UserSequence>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        for u in &self.users {
            u.validate()?;
            for b in &u.baskets {
                if b.is_empty() {
                    return Err(Error::contract("empty basket"));
                }
                if let Some(&bad) = b.items().iter().find(|&&i| i >= self.num_items) {
                    return Err(Error::Lookup {
                        index: bad,
                        rows: self.num_items,
                    });
                }
            }
            for r in &u.attributes {
                r.validate(&self.schema)?;
            }
        }
        Ok(())
    }

    /// Earliest and latest calendar step with any observation.
    pub fn time_span(&self) -> Option<(TimeIndex, TimeIndex)> {
        let times = self.users.iter().flat_map(|u| {
            u.baskets
                .iter()
                .map(|b| b.time_index)
                .chain(u.attributes.iter().map(|a| a.time_index))
        });
        times.fold(None, |acc, t| match acc {
            None => Some((t, t)),
            Some((lo, hi)) => Some((lo.min(t), hi.max(t))),
        })
    }

    /// Largest basket observed in any of `users`.
    pub fn max_basket_size(users: &[UserSequence]) -> usize {
        users
            .iter()
            .flat_map(|u| u.baskets.iter().map(Basket::len))
            .max()
            .unwrap_or(0)
    }
}

/// Indicator vector with a one at every id.
pub fn multi_hot(ids: &[usize], vocab_size: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; vocab_size];
    for &i in ids {
        if i >= vocab_size {
            return Err(Error::Lookup {
                index: i,
                rows: vocab_size,
            });
        }
        v[i] = 1.0;
    }
    Ok(v)
}
