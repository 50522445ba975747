use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Months, NaiveDate};
use serde::{Deserialize, Serialize};

use super::{
    AttributeRecord, AttributeSchema, Basket, Dataset, DatasetSplit, TimeIndex, TimeRange,
    UserSequence,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Day,
    Month,
}

impl Granularity {
    pub fn index(self, epoch: NaiveDate, date: NaiveDate) -> TimeIndex {
        match self {
            Granularity::Day => (date - epoch).num_days(),
            Granularity::Month => {
                let m = |d: NaiveDate| d.year() as i64 * 12 + d.month0() as i64;
                m(date) - m(epoch)
            }
        }
    }

    pub fn date(self, epoch: NaiveDate, index: TimeIndex) -> NaiveDate {
        match self {
            Granularity::Day => epoch + chrono::Duration::days(index),
            Granularity::Month => {
                let first = epoch.with_day(1).expect("day 1 exists");
                if index >= 0 {
                    first + Months::new(index as u32)
                } else {
                    first - Months::new((-index) as u32)
                }
            }
        }
    }

    /// Normalises an epoch to the start of its period.
    pub fn align(self, epoch: NaiveDate) -> NaiveDate {
        match self {
            Granularity::Day => epoch,
            Granularity::Month => epoch.with_day(1).expect("day 1 exists"),
        }
    }
}

/// A split boundary given either as a calendar index or an ISO date.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Boundary {
    Index(TimeIndex),
    Date(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitBoundaries {
    pub train: [Boundary; 2],
    pub validation: [Boundary; 2],
    pub test: [Boundary; 2],
}

/// On-disk description of a CSV dataset. Relative paths resolve against the
/// directory containing the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub catalog_size: usize,
    #[serde(default)]
    pub schema: AttributeSchema,
    pub granularity: Granularity,
    #[serde(default)]
    pub epoch: Option<String>,
    pub interactions: PathBuf,
    #[serde(default)]
    pub attributes: Option<PathBuf>,
    pub split: SplitBoundaries,
}

/// A dataset loaded through a [`DatasetConfig`].
#[derive(Clone, Debug)]
pub struct DatasetFiles {
    pub dataset: Dataset,
    pub split: DatasetSplit,
    pub epoch: NaiveDate,
    pub granularity: Granularity,
}

pub(crate) fn parse_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    let head = s.split([' ', 'T']).next().unwrap_or(s);
    ["%Y-%m-%d", "%Y/%m/%d", "%m/%d/%Y"]
        .iter()
        .find_map(|f| NaiveDate::parse_from_str(head, f).ok())
}

fn read_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file))
}

struct RawRow {
    line: usize,
    user: u64,
    date: NaiveDate,
    fields: Vec<String>,
}

fn read_rows(path: &Path, expected_header: &[&str]) -> Result<Vec<RawRow>> {
    let mut rdr = read_csv(path)?;
    let display = path.display().to_string();
    let header = rdr.headers()?.clone();
    let got: Vec<&str> = header.iter().collect();
    if got != expected_header {
        return Err(Error::Parse {
            path: display,
            line: 1,
            message: format!("expected columns {expected_header:?}, found {got:?}"),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let perr = |message: String| Error::Parse {
            path: display.clone(),
            line,
            message,
        };
        if rec.len() != expected_header.len() {
            return Err(perr(format!(
                "expected {} fields, found {}",
                expected_header.len(),
                rec.len()
            )));
        }
        let user = rec[0]
            .parse::<u64>()
            .map_err(|_| perr(format!("bad user_id `{}`", &rec[0])))?;
        let date =
            parse_date(&rec[1]).ok_or_else(|| perr(format!("bad time_stamp `{}`", &rec[1])))?;
        rows.push(RawRow {
            line,
            user,
            date,
            fields: rec.iter().skip(2).map(str::to_owned).collect(),
        });
    }
    Ok(rows)
}

/// Reads interaction rows (`user_id,time_stamp,item_id`) and optional
/// attribute rows (`user_id,time_stamp,<attribute columns in schema order>`).
///
/// Rows sharing a user and calendar step merge into one basket. Users come
/// out sorted by id, baskets and records by time. Without an explicit
/// `epoch`, the earliest date in either file (aligned to the period start)
/// is index 0.
pub fn load_csv(
    interactions: &Path,
    attributes: Option<&Path>,
    schema: &AttributeSchema,
    num_items: usize,
    granularity: Granularity,
    epoch: Option<NaiveDate>,
) -> Result<(Dataset, NaiveDate)> {
    schema.validate()?;
    let inter_rows = read_rows(interactions, &["user_id", "time_stamp", "item_id"])?;
    let attr_header: Vec<String> = ["user_id", "time_stamp"]
        .iter()
        .map(|s| s.to_string())
        .chain(schema.categorical.iter().map(|c| c.name.clone()))
        .chain(schema.numerical.iter().cloned())
        .collect();
    let attr_rows = match attributes {
        Some(p) => read_rows(
            p,
            &attr_header.iter().map(String::as_str).collect::<Vec<_>>(),
        )?,
        None => Vec::new(),
    };

    let epoch = granularity.align(match epoch {
        Some(e) => e,
        None => inter_rows
            .iter()
            .chain(&attr_rows)
            .map(|r| r.date)
            .min()
            .ok_or_else(|| Error::contract("interaction file has no rows"))?,
    });

    let index_of = |row: &RawRow, path: &Path| -> Result<TimeIndex> {
        let t = granularity.index(epoch, row.date);
        if t < 0 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: row.line,
                message: format!("date {} precedes epoch {epoch}", row.date),
            });
        }
        Ok(t)
    };

    let mut baskets: BTreeMap<u64, BTreeMap<TimeIndex, Vec<usize>>> = BTreeMap::new();
    for row in &inter_rows {
        let item: usize = row.fields[0].parse().map_err(|_| Error::Parse {
            path: interactions.display().to_string(),
            line: row.line,
            message: format!("bad item_id `{}`", row.fields[0]),
        })?;
        if item >= num_items {
            return Err(Error::Vocabulary(format!(
                "item {item} on line {} is outside the catalog of {num_items} items",
                row.line
            )));
        }
        let t = index_of(row, interactions)?;
        baskets
            .entry(row.user)
            .or_default()
            .entry(t)
            .or_default()
            .push(item);
    }

    let mut records: BTreeMap<u64, BTreeMap<TimeIndex, AttributeRecord>> = BTreeMap::new();
    if let Some(path) = attributes {
        let n_cat = schema.num_categorical_attrs();
        for row in &attr_rows {
            let t = index_of(row, path)?;
            let categorical = (0..n_cat)
                .map(|a| {
                    schema.value_id(a, &row.fields[a]).map_err(|e| match e {
                        Error::Vocabulary(m) => {
                            Error::Vocabulary(format!("{m} (line {})", row.line))
                        }
                        other => other,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let numerical = row.fields[n_cat..]
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| Error::Parse {
                            path: path.display().to_string(),
                            line: row.line,
                            message: format!("bad numerical value `{s}`"),
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            let prev = records.entry(row.user).or_default().insert(
                t,
                AttributeRecord {
                    time_index: t,
                    categorical,
                    numerical,
                },
            );
            if prev.is_some() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: row.line,
                    message: format!(
                        "duplicate attribute record for user {} at step {t}",
                        row.user
                    ),
                });
            }
        }
    }

    let mut user_ids: Vec<u64> = baskets.keys().chain(records.keys()).copied().collect();
    user_ids.sort_unstable();
    user_ids.dedup();
    let mut users = Vec::with_capacity(user_ids.len());
    for uid in user_ids {
        let bs = baskets
            .remove(&uid)
            .unwrap_or_default()
            .into_iter()
            .map(|(t, items)| Basket::new(t, items, num_items))
            .collect::<Result<Vec<_>>>()?;
        let rs = records
            .remove(&uid)
            .unwrap_or_default()
            .into_values()
            .collect();
        users.push(UserSequence {
            user_id: uid,
            baskets: bs,
            attributes: rs,
        });
    }
    let dataset = Dataset {
        num_items,
        schema: schema.clone(),
        users,
    };
    Ok((dataset, epoch))
}

/// Writes `interactions.csv` (and `attributes.csv` when the schema is not
/// empty) into `dir`. Returns the written paths.
pub fn save_csv(
    dataset: &Dataset,
    dir: &Path,
    epoch: NaiveDate,
    granularity: Granularity,
) -> Result<(PathBuf, Option<PathBuf>)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let inter_path = dir.join("interactions.csv");
    let mut w = csv::Writer::from_path(&inter_path)?;
    w.write_record(["user_id", "time_stamp", "item_id"])?;
    for u in &dataset.users {
        for b in &u.baskets {
            let date = granularity.date(epoch, b.time_index).to_string();
            for item in b.items() {
                w.write_record([u.user_id.to_string(), date.clone(), item.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&inter_path, e))?;

    if dataset.schema.is_empty() {
        return Ok((inter_path, None));
    }
    let attr_path = dir.join("attributes.csv");
    let mut w = csv::Writer::from_path(&attr_path)?;
    let mut header = vec!["user_id".to_string(), "time_stamp".to_string()];
    header.extend(dataset.schema.categorical.iter().map(|c| c.name.clone()));
    header.extend(dataset.schema.numerical.iter().cloned());
    w.write_record(&header)?;
    for u in &dataset.users {
        for r in &u.attributes {
            let mut row = vec![
                u.user_id.to_string(),
                granularity.date(epoch, r.time_index).to_string(),
            ];
            row.extend(
                r.categorical
                    .iter()
                    .enumerate()
                    .map(|(a, &id)| dataset.schema.value_name(a, id).to_string()),
            );
            row.extend(r.numerical.iter().map(|x| format!("{x}")));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(&attr_path, e))?;
    Ok((inter_path, Some(attr_path)))
}

fn resolve_boundary(b: &Boundary, epoch: NaiveDate, g: Granularity) -> Result<TimeIndex> {
    match b {
        Boundary::Index(i) => Ok(*i),
        Boundary::Date(s) => parse_date(s)
            .map(|d| g.index(epoch, d))
            .ok_or_else(|| Error::contract(format!("bad split date `{s}`"))),
    }
}

pub fn load_dataset_config(path: &Path) -> Result<DatasetFiles> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: DatasetConfig = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let epoch = cfg
        .epoch
        .as_deref()
        .map(|s| parse_date(s).ok_or_else(|| Error::contract(format!("bad epoch `{s}`"))))
        .transpose()?;
    let inter = resolve(&cfg.interactions);
    let attrs = cfg.attributes.as_deref().map(resolve);
    let (dataset, epoch) = load_csv(
        &inter,
        attrs.as_deref(),
        &cfg.schema,
        cfg.catalog_size,
        cfg.granularity,
        epoch,
    )?;
    let range = |pair: &[Boundary; 2]| -> Result<TimeRange> {
        Ok(TimeRange {
            start: resolve_boundary(&pair[0], epoch, cfg.granularity)?,
            end: resolve_boundary(&pair[1], epoch, cfg.granularity)?,
        })
    };
    let split = DatasetSplit::new(
        range(&cfg.split.train)?,
        range(&cfg.split.validation)?,
        range(&cfg.split.test)?,
    )?;
    Ok(DatasetFiles {
        dataset,
        split,
        epoch,
        granularity: cfg.granularity,
    })
}
