//! Plain-text model container.
//!
//! ```text
//! jodie-checkpoint 1
//! <key> <value>            (one per line: dims, loss weights, delta scale, metadata)
//! array <name> <rows> <cols>
//! <cols values, space separated>   (repeated rows times)
//! ```
//! Floats are written with 17 significant digits, so a load reproduces every
//! value exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{EmbeddingBank, LossConfig, ModelDims, ModelParams, NodeRef};
use crate::error::{Error, Result};
use crate::ingest::fmt_g17;

const MAGIC: &str = "jodie-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub loss: LossConfig,
    pub delta_scale: f64,
    /// Bank state and the number of interactions it has consumed.
    pub bank: Option<(EmbeddingBank, usize)>,
    /// Free-form string metadata (task, split fractions, epoch).
    pub meta: BTreeMap<String, String>,
}

fn push_array(out: &mut String, name: &str, rows: usize, cols: usize, data: impl IntoIterator<Item = f64>) {
    let _ = writeln!(out, "array {name} {rows} {cols}");
    let mut it = data.into_iter();
    for _ in 0..rows {
        let line: Vec<String> = (&mut it).take(cols).map(fmt_g17).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
}

impl Checkpoint {
    pub fn new(params: ModelParams, loss: LossConfig, delta_scale: f64) -> Self {
        Checkpoint { params, loss, delta_scale, bank: None, meta: BTreeMap::new() }
    }

    pub fn to_text(&self) -> String {
        let d = self.params.dims;
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (k, v) in [
            ("num_users", d.num_users.to_string()),
            ("num_items", d.num_items.to_string()),
            ("feature_dim", d.feature_dim.to_string()),
            ("user_dim", d.user_dim.to_string()),
            ("item_dim", d.item_dim.to_string()),
            ("lambda_u", fmt_g17(self.loss.lambda_u)),
            ("lambda_i", fmt_g17(self.loss.lambda_i)),
            ("lambda_s", fmt_g17(self.loss.lambda_s)),
            ("squared_loss", u8::from(self.loss.squared).to_string()),
            ("delta_scale", fmt_g17(self.delta_scale)),
        ] {
            let _ = writeln!(out, "{k} {v}");
        }
        if let Some((_, pos)) = &self.bank {
            let _ = writeln!(out, "bank_position {pos}");
        }
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta.{k} {v}");
        }
        for (name, t) in self.params.tensors() {
            push_array(&mut out, name, 1, t.len(), t.iter().copied());
        }
        if let Some((bank, _)) = &self.bank {
            let (u, i) = (bank.num_users(), bank.num_items());
            push_array(&mut out, "bank.dyn_user", u, d.user_dim, bank.dyn_user.as_slice().iter().copied());
            push_array(&mut out, "bank.dyn_item", i + 1, d.item_dim, bank.dyn_item.as_slice().iter().copied());
            push_array(&mut out, "bank.prev_item_snap", u, d.item_dim, bank.prev_item_snap.as_slice().iter().copied());
            push_array(&mut out, "bank.prev_item", 1, u, bank.prev_item.iter().map(|&x| x as f64));
            push_array(&mut out, "bank.user_seen", 1, u, bank.user_seen.iter().map(|&x| f64::from(u8::from(x))));
            push_array(&mut out, "bank.item_seen", 1, i, bank.item_seen.iter().map(|&x| f64::from(u8::from(x))));
            push_array(&mut out, "bank.user_last_time", 1, u, bank.user_last_time.iter().copied());
            push_array(&mut out, "bank.item_last_time", 1, i, bank.item_last_time.iter().copied());
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut lines = text.lines().enumerate().peekable();
        match lines.next() {
            Some((_, l)) if l.trim() == MAGIC => {}
            _ => return Err(bad("missing header line".into())),
        }
        let mut header: BTreeMap<String, String> = BTreeMap::new();
        let mut arrays: BTreeMap<String, (usize, usize, Vec<f64>)> = BTreeMap::new();
        while let Some((no, line)) = lines.next() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            if key == "array" {
                let name = parts.next().ok_or_else(|| bad(format!("line {}: array without name", no + 1)))?;
                let dim = |s: Option<&str>| -> Result<usize> {
                    s.and_then(|v| v.parse().ok())
                        .ok_or_else(|| bad(format!("line {}: bad array shape", no + 1)))
                };
                let rows = dim(parts.next())?;
                let cols = dim(parts.next())?;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (rno, row) = lines
                        .next()
                        .ok_or_else(|| bad(format!("array {name} truncated")))?;
                    for tok in row.split_whitespace() {
                        data.push(
                            tok.parse::<f64>()
                                .map_err(|_| bad(format!("line {}: bad number {tok:?}", rno + 1)))?,
                        );
                    }
                }
                if data.len() != rows * cols {
                    return Err(bad(format!("array {name}: expected {} values, found {}", rows * cols, data.len())));
                }
                arrays.insert(name.to_string(), (rows, cols, data));
            } else {
                let value = parts.collect::<Vec<_>>().join(" ");
                header.insert(key.to_string(), value);
            }
        }

        let get = |k: &str| header.get(k).ok_or_else(|| bad(format!("missing key {k}")));
        let get_usize = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("bad value for {k}"))) };
        let get_f64 = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("bad value for {k}"))) };
        let dims = ModelDims {
            user_dim: get_usize("user_dim")?,
            item_dim: get_usize("item_dim")?,
            num_users: get_usize("num_users")?,
            num_items: get_usize("num_items")?,
            feature_dim: get_usize("feature_dim")?,
        };
        dims.validate()?;
        let loss = LossConfig {
            lambda_u: get_f64("lambda_u")?,
            lambda_i: get_f64("lambda_i")?,
            lambda_s: get_f64("lambda_s")?,
            squared: get_usize("squared_loss")? != 0,
        };
        let delta_scale = get_f64("delta_scale")?;

        let mut params = ModelParams::zeros(dims);
        for (name, t) in params.tensors_mut() {
            let (_, _, data) = arrays.get(name).ok_or_else(|| bad(format!("missing array {name}")))?;
            if data.len() != t.len() {
                return Err(Error::shape("checkpoint array", t.len(), data.len()));
            }
            t.copy_from_slice(data);
        }

        let bank = if header.contains_key("bank_position") {
            let pos = get_usize("bank_position")?;
            let mut bank = EmbeddingBank::new(&params);
            let mut take = |name: &str, len: usize| -> Result<Vec<f64>> {
                let (_, _, data) = arrays.remove(name).ok_or_else(|| bad(format!("missing array {name}")))?;
                if data.len() != len {
                    return Err(Error::shape("checkpoint array", len, data.len()));
                }
                Ok(data)
            };
            let (u, i) = (dims.num_users, dims.num_items);
            bank.dyn_user.as_mut_slice().copy_from_slice(&take("bank.dyn_user", u * dims.user_dim)?);
            bank.dyn_item.as_mut_slice().copy_from_slice(&take("bank.dyn_item", (i + 1) * dims.item_dim)?);
            bank.prev_item_snap.as_mut_slice().copy_from_slice(&take("bank.prev_item_snap", u * dims.item_dim)?);
            bank.prev_item = take("bank.prev_item", u)?.into_iter().map(|x| x as usize).collect();
            if bank.prev_item.iter().any(|&p| p > i) {
                return Err(bad("previous item id out of range".into()));
            }
            bank.user_seen = take("bank.user_seen", u)?.into_iter().map(|x| x != 0.0).collect();
            bank.item_seen = take("bank.item_seen", i)?.into_iter().map(|x| x != 0.0).collect();
            bank.user_last_time = take("bank.user_last_time", u)?;
            bank.item_last_time = take("bank.item_last_time", i)?;
            for (r, &seen) in bank.user_ref.iter_mut().zip(&bank.user_seen) {
                *r = if seen { NodeRef::Const } else { NodeRef::InitUser };
            }
            for (r, &seen) in bank.snap_ref.iter_mut().zip(&bank.user_seen) {
                *r = if seen { NodeRef::Const } else { NodeRef::InitItem };
            }
            for (r, &seen) in bank.item_ref.iter_mut().zip(&bank.item_seen) {
                *r = if seen { NodeRef::Const } else { NodeRef::InitItem };
            }
            Some((bank, pos))
        } else {
            None
        };

        let meta = header
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(Checkpoint { params, loss, delta_scale, bank, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_text(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitConfig;

    fn sample() -> Checkpoint {
        let dims = ModelDims { user_dim: 3, item_dim: 2, num_users: 4, num_items: 3, feature_dim: 1 };
        let mut params = ModelParams::init(dims, InitConfig { seed: 11, weight_std: 0.3 }).unwrap();
        params.init_user = vec![1.0 / 3.0, -2.5e-300, 7.0e20];
        let mut ck = Checkpoint::new(params, LossConfig { squared: true, ..LossConfig::default() }, 0.1 + 0.2);
        ck.meta.insert("task".into(), "interaction".into());
        ck
    }

    #[test]
    fn params_round_trip_exactly() {
        let ck = sample();
        let back = Checkpoint::from_text(&ck.to_text()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn bank_round_trips() {
        let mut ck = sample();
        let mut bank = EmbeddingBank::new(&ck.params);
        bank.dyn_user.set(1, 2, std::f64::consts::PI);
        bank.user_seen[1] = true;
        bank.prev_item[1] = 2;
        bank.user_last_time[1] = 12.5;
        ck.bank = Some((bank, 17));
        let back = Checkpoint::from_text(&ck.to_text()).unwrap();
        let (b2, pos) = back.bank.as_ref().unwrap();
        let (b1, _) = ck.bank.as_ref().unwrap();
        assert_eq!(*pos, 17);
        assert_eq!(b2.dyn_user, b1.dyn_user);
        assert_eq!(b2.dyn_item, b1.dyn_item);
        assert_eq!(b2.prev_item, b1.prev_item);
        assert_eq!(b2.user_seen, b1.user_seen);
        assert_eq!(b2.user_last_time, b1.user_last_time);
        assert_eq!(b2.user_ref[1], NodeRef::Const);
        assert_eq!(b2.user_ref[0], NodeRef::InitUser);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(Checkpoint::from_text("hello").is_err());
        let text = sample().to_text();
        let truncated: String = text.lines().take(20).collect::<Vec<_>>().join("\n");
        assert!(Checkpoint::from_text(&truncated).is_err());
        let garbled = text.replacen("array proj_w 1 3", "array proj_w 1 4", 1);
        assert!(Checkpoint::from_text(&garbled).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
