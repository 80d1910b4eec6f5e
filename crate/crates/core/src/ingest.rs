//! Interaction streams: CSV parsing, canonical serialization, elapsed-time
//! annotation and chronological splitting.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "user_id,item_id,timestamp,state_label,comma_separated_list_of_features";

/// One timestamped user-item event.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub seq_index: usize,
    pub user: usize,
    pub item: usize,
    pub timestamp: f64,
    pub features: Vec<f64>,
    /// True on a user's final interaction before a ban or drop-out.
    pub state_label: bool,
}

/// An interaction before dense id assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub user: String,
    pub item: String,
    pub timestamp: f64,
    pub state_label: bool,
    pub features: Vec<f64>,
}

/// A time-sorted interaction stream with dense ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub interactions: Vec<Interaction>,
    pub num_users: usize,
    pub num_items: usize,
    pub feature_dim: usize,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
}

impl Dataset {
    /// Stable-sorts the records by timestamp and assigns dense ids in order of
    /// first appearance.
    pub fn from_records(mut records: Vec<RawRecord>) -> Result<Dataset> {
        let feature_dim = records.first().map_or(0, |r| r.features.len());
        for (k, r) in records.iter().enumerate() {
            if r.features.len() != feature_dim {
                return Err(Error::FeatureCount {
                    line: k + 2,
                    expected: feature_dim,
                    found: r.features.len(),
                });
            }
            if !(r.timestamp.is_finite() && r.timestamp >= 0.0) {
                return Err(Error::BadTimestamp {
                    line: k + 2,
                    value: r.timestamp.to_string(),
                });
            }
        }
        records.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));

        let mut user_index: HashMap<String, usize> = HashMap::new();
        let mut item_index: HashMap<String, usize> = HashMap::new();
        let mut user_ids = Vec::new();
        let mut item_ids = Vec::new();
        let mut interactions = Vec::with_capacity(records.len());
        for (seq_index, r) in records.into_iter().enumerate() {
            let user = *user_index.entry(r.user.clone()).or_insert_with(|| {
                user_ids.push(r.user.clone());
                user_ids.len() - 1
            });
            let item = *item_index.entry(r.item.clone()).or_insert_with(|| {
                item_ids.push(r.item.clone());
                item_ids.len() - 1
            });
            interactions.push(Interaction {
                seq_index,
                user,
                item,
                timestamp: r.timestamp,
                features: r.features,
                state_label: r.state_label,
            });
        }
        Ok(Dataset {
            num_users: user_ids.len(),
            num_items: item_ids.len(),
            feature_dim,
            interactions,
            user_ids,
            item_ids,
        })
    }

    /// Builds a dataset directly from dense ids; external ids are the decimal
    /// dense ids. Rows are stable-sorted by time.
    pub fn from_dense(
        num_users: usize,
        num_items: usize,
        feature_dim: usize,
        rows: Vec<(usize, usize, f64, bool, Vec<f64>)>,
    ) -> Result<Dataset> {
        let mut interactions = Vec::with_capacity(rows.len());
        for (k, (user, item, timestamp, state_label, features)) in rows.into_iter().enumerate() {
            if user >= num_users {
                return Err(Error::IdOutOfRange { what: "user", id: user, limit: num_users });
            }
            if item >= num_items {
                return Err(Error::IdOutOfRange { what: "item", id: item, limit: num_items });
            }
            if features.len() != feature_dim {
                return Err(Error::FeatureCount {
                    line: k + 2,
                    expected: feature_dim,
                    found: features.len(),
                });
            }
            if !(timestamp.is_finite() && timestamp >= 0.0) {
                return Err(Error::BadTimestamp { line: k + 2, value: timestamp.to_string() });
            }
            interactions.push(Interaction {
                seq_index: 0,
                user,
                item,
                timestamp,
                features,
                state_label,
            });
        }
        interactions.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        for (k, it) in interactions.iter_mut().enumerate() {
            it.seq_index = k;
        }
        Ok(Dataset {
            interactions,
            num_users,
            num_items,
            feature_dim,
            user_ids: (0..num_users).map(|u| u.to_string()).collect(),
            item_ids: (0..num_items).map(|i| i.to_string()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Dense id of the padding item used as "previous item" before a user's
    /// first interaction.
    pub fn sentinel_item(&self) -> usize {
        self.num_items
    }

    pub fn user_external_id(&self, user: usize) -> &str {
        &self.user_ids[user]
    }

    pub fn item_external_id(&self, item: usize) -> &str {
        &self.item_ids[item]
    }

    pub fn has_labels(&self) -> bool {
        self.interactions.iter().any(|it| it.state_label)
    }
}

fn parse_field<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("cannot parse {what} from {s:?}"),
    })
}

/// Parses the interaction CSV layout (`user_id,item_id,timestamp,state_label,features...`).
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.split('\n').enumerate().map(|(k, l)| (k + 1, l.strip_suffix('\r').unwrap_or(l)));
    let (_, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "missing header".into() })?;
    let head: Vec<&str> = header.split(',').map(str::trim).collect();
    if head.len() < 4 || head[..4] != ["user_id", "item_id", "timestamp", "state_label"] {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unexpected header {header:?}"),
        });
    }

    let mut records = Vec::new();
    let mut feature_dim = None;
    for (line, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() < 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected at least 4 fields, found {}", fields.len()),
            });
        }
        let user = fields[0].trim();
        let item = fields[1].trim();
        if user.is_empty() || item.is_empty() {
            return Err(Error::Parse { line, msg: "empty id".into() });
        }
        let timestamp: f64 = parse_field(fields[2], line, "timestamp")?;
        if !(timestamp.is_finite() && timestamp >= 0.0) {
            return Err(Error::BadTimestamp { line, value: fields[2].trim().to_string() });
        }
        let state_label = match fields[3].trim() {
            "0" => false,
            "1" => true,
            other => return Err(Error::BadLabel { line, value: other.to_string() }),
        };
        let features = fields[4..]
            .iter()
            .map(|f| {
                let v: f64 = parse_field(f, line, "feature")?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Parse { line, msg: format!("non-finite feature {f:?}") })
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        match feature_dim {
            None => feature_dim = Some(features.len()),
            Some(expected) if expected != features.len() => {
                return Err(Error::FeatureCount { line, expected, found: features.len() })
            }
            _ => {}
        }
        records.push(RawRecord {
            user: user.to_string(),
            item: item.to_string(),
            timestamp,
            state_label,
            features,
        });
    }
    Dataset::from_records(records)
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_csv(&fs::read_to_string(path)?)
}

/// Formats a float like C's `%.17g`.
pub fn fmt_g17(x: f64) -> String {
    const P: i32 = 17;
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{:.*e}", (P - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..P).contains(&exp) {
        let m = strip_zeros(mantissa);
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        let fixed = format!("{:.*}", (P - 1 - exp) as usize, x);
        strip_zeros(&fixed).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Canonical CSV: LF line endings, `%.17g` floats, time-sorted rows,
/// original external ids.
pub fn serialize_csv(dataset: &Dataset) -> String {
    let mut out = String::with_capacity(dataset.len() * 32);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for it in &dataset.interactions {
        let _ = write!(
            out,
            "{},{},{},{}",
            dataset.user_external_id(it.user),
            dataset.item_external_id(it.item),
            fmt_g17(it.timestamp),
            u8::from(it.state_label)
        );
        for f in &it.features {
            out.push(',');
            out.push_str(&fmt_g17(*f));
        }
        out.push('\n');
    }
    out
}

pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serialize_csv(dataset))?;
    Ok(())
}

/// Elapsed-time context of one interaction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaAnnotation {
    /// Seconds since the user's previous interaction (0 for the first).
    pub delta_u: f64,
    /// Seconds since the item's previous interaction (0 for the first).
    pub delta_i: f64,
    /// Item of the user's previous interaction, or the sentinel item.
    pub prev_item_of_user: usize,
}

pub fn annotate_deltas(dataset: &Dataset) -> Vec<DeltaAnnotation> {
    let mut user_last: Vec<Option<(f64, usize)>> = vec![None; dataset.num_users];
    let mut item_last: Vec<Option<f64>> = vec![None; dataset.num_items];
    dataset
        .interactions
        .iter()
        .map(|it| {
            let (delta_u, prev_item_of_user) = match user_last[it.user] {
                Some((t, item)) => (it.timestamp - t, item),
                None => (0.0, dataset.sentinel_item()),
            };
            let delta_i = item_last[it.item].map_or(0.0, |t| it.timestamp - t);
            user_last[it.user] = Some((it.timestamp, it.item));
            item_last[it.item] = Some(it.timestamp);
            DeltaAnnotation { delta_u, delta_i, prev_item_of_user }
        })
        .collect()
}

/// Fractions of the stream used for training, validation and test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    pub train_frac: f64,
    pub valid_frac: f64,
    pub test_frac: f64,
}

impl SplitConfig {
    pub const INTERACTION: SplitConfig = SplitConfig { train_frac: 0.8, valid_frac: 0.1, test_frac: 0.1 };
    pub const STATE_CHANGE: SplitConfig = SplitConfig { train_frac: 0.6, valid_frac: 0.2, test_frac: 0.2 };

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("train_frac", self.train_frac), ("valid_frac", self.valid_frac), ("test_frac", self.test_frac)] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1], got {f}")));
            }
        }
        if self.train_frac + self.valid_frac + self.test_frac > 1.0 + 1e-9 {
            return Err(Error::Config("split fractions sum to more than 1".into()));
        }
        Ok(())
    }
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig::INTERACTION
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
}

fn portion(frac: f64, n: usize) -> usize {
    // absorb representation error such as 0.29 * 100 = 28.999999999999996
    (frac * n as f64 + 1e-9).floor() as usize
}

/// Contiguous time-ordered ranges; any remainder stays unassigned at the tail.
pub fn chronological_split(num_interactions: usize, cfg: &SplitConfig) -> Result<Splits> {
    cfg.validate()?;
    let n_train = portion(cfg.train_frac, num_interactions);
    let n_valid = portion(cfg.valid_frac, num_interactions);
    let n_test = portion(cfg.test_frac, num_interactions);
    for (name, size) in [("training", n_train), ("validation", n_valid), ("test", n_test)] {
        if size == 0 {
            return Err(Error::EmptySplit(name));
        }
    }
    Ok(Splits {
        train: 0..n_train,
        valid: n_train..n_train + n_valid,
        test: n_train + n_valid..n_train + n_valid + n_test,
    })
}

/// Mean of the nonzero user deltas inside `range`; 1.0 when there are none.
pub fn training_delta_scale(annotations: &[DeltaAnnotation], range: Range<usize>) -> f64 {
    let (sum, count) = annotations[range]
        .iter()
        .filter(|a| a.delta_u > 0.0)
        .fold((0.0, 0usize), |(s, c), a| (s + a.delta_u, c + 1));
    if count == 0 {
        1.0
    } else {
        sum / count as f64
    }
}

pub fn normalize_deltas(deltas: &[f64], scale: f64) -> Result<Vec<f64>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("delta scale must be positive, got {scale}")));
    }
    Ok(deltas.iter().map(|d| d / scale).collect())
}

/// Model-ready elapsed times, already divided by `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeDeltas {
    pub delta_u: Vec<f64>,
    pub delta_i: Vec<f64>,
    pub scale: f64,
}

impl TimeDeltas {
    pub fn with_scale(dataset: &Dataset, scale: f64) -> Result<Self> {
        let ann = annotate_deltas(dataset);
        let du: Vec<f64> = ann.iter().map(|a| a.delta_u).collect();
        let di: Vec<f64> = ann.iter().map(|a| a.delta_i).collect();
        Ok(TimeDeltas { delta_u: normalize_deltas(&du, scale)?, delta_i: normalize_deltas(&di, scale)?, scale })
    }

    /// Scale fitted on `train` when `normalize` is set, otherwise raw seconds.
    pub fn fit(dataset: &Dataset, train: Range<usize>, normalize: bool) -> Result<Self> {
        let scale = if normalize { training_delta_scale(&annotate_deltas(dataset), train) } else { 1.0 };
        TimeDeltas::with_scale(dataset, scale)
    }
}
