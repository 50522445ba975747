use log::warn;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSplit};
use crate::error::{Error, Result};

/// Per-attribute min-max statistics mapping the training range onto [-1, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    /// Fits on every numerical record whose step lies in the training range.
    pub fn fit(data: &Dataset, split: &DatasetSplit) -> Result<Self> {
        let n = data.schema.num_numerical();
        let mut min = vec![f64::INFINITY; n];
        let mut max = vec![f64::NEG_INFINITY; n];
        for r in data
            .users
            .iter()
            .flat_map(|u| &u.attributes)
            .filter(|r| split.train.contains(r.time_index))
        {
            for (j, &x) in r.numerical.iter().enumerate() {
                min[j] = min[j].min(x);
                max[j] = max[j].max(x);
            }
        }
        for j in 0..n {
            let name = &data.schema.numerical[j];
            if !min[j].is_finite() {
                return Err(Error::contract(format!(
                    "numerical attribute `{name}` has no training-range records"
                )));
            }
            if min[j] == max[j] {
                warn!("numerical attribute `{name}` is constant in training; it maps to 0");
            }
        }
        Ok(Self { min, max })
    }

    pub fn transform_value(&self, attr: usize, x: f64) -> f64 {
        let (lo, hi) = (self.min[attr], self.max[attr]);
        if hi <= lo {
            return 0.0;
        }
        (2.0 * (x - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
    }

    pub fn transform(&self, data: &Dataset) -> Dataset {
        let mut out = data.clone();
        for r in out.users.iter_mut().flat_map(|u| u.attributes.iter_mut()) {
            for (j, x) in r.numerical.iter_mut().enumerate() {
                *x = self.transform_value(j, *x);
            }
        }
        out
    }
}

/// Fits a scaler on the training range and applies it to the whole dataset.
pub fn fit_transform_numerical(
    data: &Dataset,
    split: &DatasetSplit,
) -> Result<(Dataset, MinMaxScaler)> {
    let scaler = MinMaxScaler::fit(data, split)?;
    Ok((scaler.transform(data), scaler))
}
