//! `CONCUR1\n`, a one-line JSON header mapping each parameter name to
//! `{shape, dtype, offset}`, then the raw little-endian arrays. Offsets are
//! relative to the first byte after the header line.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_cls_head, EncoderConfig, ModelError, ModelState, ParamStore};
use crate::adcore::{Real, Stream, Tensor};

const MAGIC: &[u8] = b"CONCUR1\n";
const MOMENTUM: &str = "momentum.";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

pub fn write_checkpoint<F: Real>(store: &ParamStore<F>) -> Vec<u8> {
    let mut header = BTreeMap::new();
    let mut body = Vec::with_capacity(store.num_values() * F::BYTES);
    for (name, t) in store.iter() {
        header.insert(
            name.clone(),
            Entry {
                shape: t.shape().to_vec(),
                dtype: F::DTYPE.to_string(),
                offset: body.len(),
            },
        );
        for &v in t.data() {
            v.write_le(&mut body);
        }
    }
    let mut out = MAGIC.to_vec();
    out.extend(serde_json::to_vec(&header).expect("header serialises"));
    out.push(b'\n');
    out.extend(body);
    out
}

fn decode<F: Real>(bytes: &[u8], dtype: &str) -> Option<F> {
    match dtype {
        "f32" => Some(F::from_f64c(f32::read_le(bytes) as f64)),
        "f64" => Some(F::from_f64c(f64::read_le(bytes))),
        _ => None,
    }
}

pub fn read_checkpoint<F: Real>(bytes: &[u8]) -> Result<ParamStore<F>, ModelError> {
    let fmt = |m: String| ModelError::Format(m);
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| fmt("bad magic".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| fmt("missing header".into()))?;
    let header: BTreeMap<String, Entry> =
        serde_json::from_slice(&rest[..nl]).map_err(|e| fmt(e.to_string()))?;
    let body = &rest[nl + 1..];
    let mut store = ParamStore::new();
    for (name, e) in header {
        let width = match e.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(fmt(format!("{name}: unknown dtype {other}"))),
        };
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * width;
        let raw = body
            .get(e.offset..end)
            .ok_or_else(|| fmt(format!("{name}: data out of bounds")))?;
        let data = raw
            .chunks_exact(width)
            .map(|c| decode(c, &e.dtype).expect("dtype checked"))
            .collect();
        store.insert(
            name.clone(),
            Tensor::new(e.shape, data).map_err(|err| fmt(format!("{name}: {err}")))?,
        );
    }
    Ok(store)
}

/// Flattens every store of a model into one named map.
fn flatten<F: Real>(state: &ModelState<F>) -> ParamStore<F> {
    let mut all = state.online.clone();
    for (k, v) in state.momentum.iter() {
        all.insert(format!("{MOMENTUM}{k}"), v.clone());
    }
    all.extend(state.cs_head.clone());
    if let Some(cls) = &state.cls_head {
        all.extend(cls.clone());
    }
    all
}

pub fn save_checkpoint<F: Real>(path: &Path, state: &ModelState<F>) -> Result<(), ModelError> {
    fs::write(path, write_checkpoint(&flatten(state)))?;
    Ok(())
}

fn check_layout<F: Real>(
    expected: &ParamStore<F>,
    found: &ParamStore<F>,
    prefix: &str,
) -> Result<(), ModelError> {
    for (name, t) in expected.iter() {
        let full = format!("{prefix}{name}");
        match found.get(&full) {
            None => {
                return Err(ModelError::Mismatch {
                    name: full,
                    detail: "missing from checkpoint".into(),
                })
            }
            Some(f) if f.shape() != t.shape() => {
                return Err(ModelError::Mismatch {
                    name: full,
                    detail: format!(
                        "shape {:?} in checkpoint, {:?} expected",
                        f.shape(),
                        t.shape()
                    ),
                })
            }
            _ => {}
        }
    }
    Ok(())
}

/// Loads a checkpoint and checks it against `config`; any missing, extra or
/// reshaped parameter is reported by name.
pub fn load_checkpoint<F: Real>(
    path: &Path,
    config: &EncoderConfig,
) -> Result<ModelState<F>, ModelError> {
    let found: ParamStore<F> = read_checkpoint(&fs::read(path)?)?;
    let template = ModelState::<F>::init(config, Stream::new(0))?;
    check_layout(&template.online, &found, "")?;
    check_layout(&template.online, &found, MOMENTUM)?;
    check_layout(&template.cs_head, &found, "")?;

    let pick = |keys: &ParamStore<F>, prefix: &str| {
        let mut s = ParamStore::new();
        for name in keys.names() {
            s.insert(
                name.clone(),
                found
                    .get(&format!("{prefix}{name}"))
                    .expect("checked")
                    .clone(),
            );
        }
        s
    };
    let online = pick(&template.online, "");
    let momentum = pick(&template.online, MOMENTUM);
    let cs_head = pick(&template.cs_head, "");
    let cls = found.filter_prefix("cls.");
    let cls_head = if cls.is_empty() {
        None
    } else {
        let classes = cls.get("cls.bias").map(|b| b.len()).unwrap_or(0);
        check_layout(
            &init_cls_head::<F>(config, classes.max(1), Stream::new(0)),
            &found,
            "",
        )?;
        Some(cls)
    };
    let known = online.len() * 2 + cs_head.len() + cls_head.as_ref().map_or(0, ParamStore::len);
    if known != found.len() {
        let extra = found
            .names()
            .find(|n| {
                let bare = n.strip_prefix(MOMENTUM).unwrap_or(n);
                online.get(bare).is_none() && cs_head.get(n).is_none() && !n.starts_with("cls.")
            })
            .cloned()
            .unwrap_or_default();
        return Err(ModelError::Mismatch {
            name: extra,
            detail: "not part of this model config".into(),
        });
    }
    Ok(ModelState {
        config: config.clone(),
        online,
        momentum,
        cs_head,
        cls_head,
    })
}
