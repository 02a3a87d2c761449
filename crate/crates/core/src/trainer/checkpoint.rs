//! Full training state in the record container: config, counters, batch
//! stream positions, every network (parameters and running statistics) and
//! every Adam moment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::{Models, OptimizerStates, TrainConfig, Trainer};
use crate::data::BatchPosition;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::networks::{ImageShape, Net};
use crate::records::{self, Record};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct AdamMeta {
    step: u64,
    skipped: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    step: u64,
    image: ImageShape,
    classes: usize,
    n_source: usize,
    n_target: usize,
    source_pos: BatchPosition,
    target_pos: BatchPosition,
    adam: [AdamMeta; 4],
}

const GROUPS: [&str; 4] = ["dae", "gen", "d1", "d2"];

fn nets(m: &Models) -> [&Net<f32>; 4] {
    [&m.dae.net, &m.gen.net, &m.d1.net, &m.d2.net]
}

fn states(o: &OptimizerStates) -> [&AdamState<f32>; 4] {
    [&o.dae, &o.gen, &o.d1, &o.d2]
}

pub fn to_records(tr: &Trainer) -> Result<Vec<Record>> {
    let meta = Meta {
        step: tr.step,
        image: tr.image,
        classes: tr.classes,
        n_source: tr.source_iter.len(),
        n_target: tr.target_iter.len(),
        source_pos: tr.source_iter.position(),
        target_pos: tr.target_iter.position(),
        adam: states(&tr.opt).map(|s| AdamMeta {
            step: s.step,
            skipped: s.skipped,
        }),
    };
    let mut out = vec![
        Record::bytes("config", serde_json::to_vec(&tr.cfg)?),
        Record::bytes("meta", serde_json::to_vec(&meta)?),
    ];
    for (g, net) in GROUPS.iter().zip(nets(&tr.models)) {
        for (name, t) in net.named_tensors(&format!("{g}/")) {
            out.push(Record::tensor(name, t));
        }
    }
    for (g, st) in GROUPS.iter().zip(states(&tr.opt)) {
        for (i, (m, v)) in st.m.iter().zip(&st.v).enumerate() {
            out.push(Record::tensor(format!("adam/{g}/m{i}"), m.clone()));
            out.push(Record::tensor(format!("adam/{g}/v{i}"), v.clone()));
        }
    }
    Ok(out)
}

pub fn save(path: &Path, tr: &Trainer) -> Result<()> {
    let recs = to_records(tr)?;
    records::save(path, &recs)
}

/// Stored training config, without rebuilding anything.
pub fn read_config(path: &Path) -> Result<TrainConfig> {
    let recs = records::load(path)?;
    Ok(serde_json::from_slice(records::find_bytes(
        &recs, "config",
    )?)?)
}

/// Restores a trainer. With `expected`, the stored config must agree on
/// every shape-determining field.
pub fn from_records(recs: &[Record], expected: Option<&TrainConfig>) -> Result<Trainer> {
    let cfg: TrainConfig = serde_json::from_slice(records::find_bytes(recs, "config")?)?;
    if let Some(e) = expected {
        if e.structure() != cfg.structure() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint was trained with {}, requested {}",
                cfg.structure(),
                e.structure()
            )));
        }
    }
    let meta: Meta = serde_json::from_slice(records::find_bytes(recs, "meta")?)?;
    let mut tr = Trainer::new(cfg, meta.image, meta.classes, meta.n_source, meta.n_target)?;
    let lookup = |name: &str| records::find_tensor(recs, name).ok();
    {
        let m = &mut tr.models;
        let nets: [&mut Net<f32>; 4] =
            [&mut m.dae.net, &mut m.gen.net, &mut m.d1.net, &mut m.d2.net];
        for (g, net) in GROUPS.iter().zip(nets) {
            net.load_named(&format!("{g}/"), &lookup)?;
        }
    }
    {
        let o = &mut tr.opt;
        let sts: [&mut AdamState<f32>; 4] = [&mut o.dae, &mut o.gen, &mut o.d1, &mut o.d2];
        for ((g, st), am) in GROUPS.iter().zip(sts).zip(meta.adam) {
            st.step = am.step;
            st.skipped = am.skipped;
            for i in 0..st.m.len() {
                for (kind, dst) in [("m", &mut st.m[i]), ("v", &mut st.v[i])] {
                    let key = format!("adam/{g}/{kind}{i}");
                    let t: Tensor<f32> = lookup(&key)
                        .ok_or_else(|| Error::ConfigMismatch(format!("missing record {key}")))?;
                    if t.shape() != dst.shape() {
                        return Err(Error::ConfigMismatch(format!(
                            "record {key} has shape {:?}",
                            t.shape()
                        )));
                    }
                    *dst = t;
                }
            }
        }
    }
    tr.step = meta.step;
    tr.source_iter.seek(meta.source_pos)?;
    tr.target_iter.seek(meta.target_pos)?;
    Ok(tr)
}

pub fn load(path: &Path, expected: Option<&TrainConfig>) -> Result<Trainer> {
    from_records(&records::load(path)?, expected)
}
