//! Dataset records: parsing the two JSON-lines flavors and the TSV
//! fallback, plus the deterministic three-way split.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One review: who wrote it, about what, the star rating, and the text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub user_id: String,
    pub item_id: String,
    /// Star rating in [1, 5].
    pub rating: f64,
    pub text: String,
    /// Unique within a dataset. Synthesized from the line number for
    /// formats that carry no id of their own.
    pub review_id: String,
}

/// Supported input flavors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// JSON lines with `reviewerID`, `asin`, `overall`, `reviewText`.
    AmazonJsonLines,
    /// JSON lines with `user_id`, `business_id`, `stars`, `text` and an
    /// optional `review_id`.
    YelpJsonLines,
    /// `user \t item \t rating \t text` (text may contain further tabs).
    Tsv,
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetFormat::AmazonJsonLines => write!(f, "amazon"),
            DatasetFormat::YelpJsonLines => write!(f, "yelp"),
            DatasetFormat::Tsv => write!(f, "tsv"),
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<DatasetFormat> {
        match s {
            "amazon" | "amazon_json_lines" => Ok(DatasetFormat::AmazonJsonLines),
            "yelp" | "yelp_json_lines" => Ok(DatasetFormat::YelpJsonLines),
            "tsv" => Ok(DatasetFormat::Tsv),
            other => Err(Error::Config(format!(
                "unknown dataset format {:?} (expected amazon, yelp or tsv)",
                other
            ))),
        }
    }
}

/// What `parse_dataset` found: the good records plus how many non-blank
/// lines had to be skipped.
#[derive(Debug)]
pub struct ParseOutcome {
    pub records: Vec<ReviewRecord>,
    /// Non-blank lines that failed to parse (bad JSON, missing fields,
    /// rating out of range, duplicate review id).
    pub skipped: usize,
    /// Total non-blank lines seen.
    pub total_lines: usize,
}

fn valid_rating(r: f64) -> bool {
    r.is_finite() && (1.0..=5.0).contains(&r)
}

/// Pull one record out of a line, or `None` if the line is malformed.
fn parse_line(line: &str, format: DatasetFormat, line_no: usize) -> Option<ReviewRecord> {
    match format {
        DatasetFormat::AmazonJsonLines | DatasetFormat::YelpJsonLines => {
            let value: serde_json::Value = serde_json::from_str(line).ok()?;
            let (user_key, item_key, rating_key, text_key) = match format {
                DatasetFormat::AmazonJsonLines => ("reviewerID", "asin", "overall", "reviewText"),
                _ => ("user_id", "business_id", "stars", "text"),
            };
            let user_id = value.get(user_key)?.as_str()?.to_string();
            let item_id = value.get(item_key)?.as_str()?.to_string();
            let rating = value.get(rating_key)?.as_f64()?;
            let text = value.get(text_key)?.as_str()?.to_string();
            if user_id.is_empty() || item_id.is_empty() || !valid_rating(rating) {
                return None;
            }
            // Yelp dumps carry their own review ids; Amazon 5-core does not.
            let review_id = value
                .get("review_id")
                .and_then(|v| v.as_str())
                .map(str::to_string)
                .unwrap_or_else(|| format!("line{}", line_no));
            Some(ReviewRecord { user_id, item_id, rating, text, review_id })
        }
        DatasetFormat::Tsv => {
            let mut parts = line.splitn(4, '\t');
            let user_id = parts.next()?.to_string();
            let item_id = parts.next()?.to_string();
            let rating: f64 = parts.next()?.trim().parse().ok()?;
            let text = parts.next()?.to_string();
            if user_id.is_empty() || item_id.is_empty() || !valid_rating(rating) {
                return None;
            }
            Some(ReviewRecord {
                user_id,
                item_id,
                rating,
                text,
                review_id: format!("line{}", line_no),
            })
        }
    }
}

/// Parse a whole dataset from any buffered reader. Blank lines are ignored;
/// malformed lines are skipped and counted. More than 10% malformed lines
/// means the file is probably in the wrong format, which is an error.
pub fn parse_reader<R: BufRead>(reader: R, format: DatasetFormat) -> Result<ParseOutcome> {
    let mut records = Vec::new();
    let mut seen_ids = HashSet::new();
    let mut skipped = 0usize;
    let mut total = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match parse_line(&line, format, idx + 1) {
            Some(rec) if seen_ids.insert(rec.review_id.clone()) => records.push(rec),
            _ => skipped += 1,
        }
    }
    if skipped * 10 > total {
        return Err(Error::Format(format!(
            "{} of {} lines malformed for format {} (more than 10%)",
            skipped, total, format
        )));
    }
    Ok(ParseOutcome { records, skipped, total_lines: total })
}

/// Parse a dataset file. See [`parse_reader`].
pub fn parse_dataset(path: &Path, format: DatasetFormat) -> Result<ParseOutcome> {
    let file = File::open(path)?;
    parse_reader(BufReader::new(file), format)
}

/// Deterministically split records into train/validation/test.
///
/// The ratios must be nonnegative and sum to 1. The split is an exact
/// partition: every record lands in exactly one part, and part sizes are
/// the rounded ratio shares (within one of `ratio * N`). The same seed
/// always yields the same split.
pub fn split_dataset(
    records: &[ReviewRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<ReviewRecord>, Vec<ReviewRecord>, Vec<ReviewRecord>)> {
    if records.is_empty() {
        return Err(Error::Empty("split_dataset: no records".into()));
    }
    let (r_train, r_val, r_test) = ratios;
    if r_train < 0.0 || r_val < 0.0 || r_test < 0.0 {
        return Err(Error::Config(format!("split ratios must be nonnegative, got {:?}", ratios)));
    }
    if ((r_train + r_val + r_test) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {:?}", ratios)));
    }
    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n_train = ((r_train * n as f64).round() as usize).min(n);
    let n_val = ((r_val * n as f64).round() as usize).min(n - n_train);
    let take = |slice: &[usize]| -> Vec<ReviewRecord> {
        slice.iter().map(|&i| records[i].clone()).collect()
    };
    Ok((
        take(&order[..n_train]),
        take(&order[n_train..n_train + n_val]),
        take(&order[n_train + n_val..]),
    ))
}

/// Group records by user id. `BTreeMap` so iteration order is stable;
/// within a group the input order is preserved.
pub fn group_by_user(records: &[ReviewRecord]) -> BTreeMap<String, Vec<ReviewRecord>> {
    let mut map: BTreeMap<String, Vec<ReviewRecord>> = BTreeMap::new();
    for rec in records {
        map.entry(rec.user_id.clone()).or_default().push(rec.clone());
    }
    map
}

/// Group records by item id; same ordering guarantees as [`group_by_user`].
pub fn group_by_item(records: &[ReviewRecord]) -> BTreeMap<String, Vec<ReviewRecord>> {
    let mut map: BTreeMap<String, Vec<ReviewRecord>> = BTreeMap::new();
    for rec in records {
        map.entry(rec.item_id.clone()).or_default().push(rec.clone());
    }
    map
}
