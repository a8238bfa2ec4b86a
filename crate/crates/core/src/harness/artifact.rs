//! Self-contained binary model file.
//!
//! Layout: magic `DNMA`, `u32` format version, `u32` section count, then each
//! section as `u8` name length, name, `u64` payload length, `u32` CRC-32 of
//! the payload, payload. Sections always appear in the order of [`SECTIONS`];
//! `quantiles` is the only optional one. Numbers are little-endian, parameter
//! arrays are `f32`, structured sections are canonical JSON.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::codec::{put_u64, ByteReader};
use crate::confidence::QuantileTable;
use crate::error::{Error, Result};
use crate::heads::{HeadLayout, MappingTable, OutputVariant};
use crate::network::{build_model, ArchitectureSpec, Model, TrainingMeta};
use crate::pipeline::PipelineConfig;

use super::{Classifier, Net};

pub const MAGIC: &[u8; 4] = b"DNMA";
pub const VERSION: u32 = 1;

/// Section names in file order.
pub const SECTIONS: [&str; 7] = [
    "spec",
    "params",
    "norm",
    "layout",
    "table",
    "quantiles",
    "meta",
];

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecSection {
    variant: OutputVariant,
    pipeline: PipelineConfig,
    nets: Vec<ArchitectureSpec>,
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("artifact sections serialize")
}

fn from_json<'a, T: Deserialize<'a>>(section: &'static str, bytes: &'a [u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::format(section, e.to_string()))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_arrays(out: &mut Vec<u8>, arrays: &[DenseArray<f32>]) {
    for a in arrays {
        put_u32(out, a.rank() as u32);
        for &d in a.shape() {
            put_u32(out, d as u32);
        }
        for v in a.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_arrays(r: &mut ByteReader<'_>, into: &mut [DenseArray<f32>], node: &str) -> Result<()> {
    for a in into {
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != a.shape() {
            return Err(r.error(format!(
                "node `{node}`: stored shape {dims:?}, architecture expects {:?}",
                a.shape()
            )));
        }
        let data = r.f32s(a.len())?;
        a.data_mut().copy_from_slice(&data);
    }
    Ok(())
}

fn params_bytes(nets: &[Net]) -> Vec<u8> {
    let mut out = Vec::new();
    for net in nets {
        for node in &net.model.graph.nodes {
            put_arrays(&mut out, &node.params);
            put_arrays(&mut out, &node.buffers);
        }
    }
    out
}

fn quantile_bytes(nets: &[Net]) -> Option<Vec<u8>> {
    if nets.iter().all(|n| n.quantiles.is_none()) {
        return None;
    }
    let mut out = Vec::new();
    for net in nets {
        match &net.quantiles {
            Some(t) => {
                let b = t.to_bytes();
                out.push(1);
                put_u64(&mut out, b.len() as u64);
                out.extend_from_slice(&b);
            }
            None => out.push(0),
        }
    }
    Some(out)
}

pub fn to_bytes(clf: &Classifier) -> Vec<u8> {
    let spec = SpecSection {
        variant: clf.variant,
        pipeline: clf.pipeline.clone(),
        nets: clf.nets.iter().map(|n| n.model.spec.clone()).collect(),
    };
    let norm: Vec<Vec<f64>> = clf
        .nets
        .iter()
        .map(|n| n.model.meta.channel_means.clone())
        .collect();
    let meta: Vec<&TrainingMeta> = clf.nets.iter().map(|n| &n.model.meta).collect();
    let mut sections: Vec<(&str, Vec<u8>)> = vec![
        ("spec", json(&spec)),
        ("params", params_bytes(&clf.nets)),
        ("norm", json(&norm)),
        ("layout", json(&clf.layout)),
        ("table", json(&clf.table)),
    ];
    if let Some(q) = quantile_bytes(&clf.nets) {
        sections.push(("quantiles", q));
    }
    sections.push(("meta", json(&meta)));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, sections.len() as u32);
    for (name, payload) in sections {
        out.push(name.len() as u8);
        out.extend_from_slice(name.as_bytes());
        put_u64(&mut out, payload.len() as u64);
        put_u32(&mut out, crc32fast::hash(&payload));
        out.extend_from_slice(&payload);
    }
    out
}

/// Splits a file into verified section payloads.
fn sections(bytes: &[u8]) -> Result<Vec<(&'static str, &[u8])>> {
    let mut r = ByteReader::new(bytes, "header");
    if r.take(4)? != MAGIC {
        return Err(r.error("not a model artifact (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.error(format!(
            "unsupported artifact version {version} (this build reads version {VERSION})"
        )));
    }
    let count = r.u32()? as usize;
    let mut out: Vec<(&'static str, &[u8])> = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u8()? as usize;
        let raw = r.take(n)?;
        let name = SECTIONS
            .iter()
            .copied()
            .find(|s| s.as_bytes() == raw)
            .ok_or_else(|| {
                r.error(format!(
                    "unknown section `{}`",
                    String::from_utf8_lossy(raw)
                ))
            })?;
        let order = |s: &str| SECTIONS.iter().position(|x| *x == s);
        if let Some((prev, _)) = out.last() {
            if order(prev) >= order(name) {
                return Err(r.error(format!("section `{name}` out of order")));
            }
        }
        let len = r.len().map_err(|_| Error::format(name, "truncated length"))?;
        let crc = r.u32().map_err(|_| Error::format(name, "truncated checksum"))?;
        let payload = r
            .take(len)
            .map_err(|_| Error::Checksum { section: name.into() })?;
        if crc32fast::hash(payload) != crc {
            return Err(Error::Checksum { section: name.into() });
        }
        out.push((name, payload));
    }
    r.finish()?;
    for required in SECTIONS.iter().filter(|s| **s != "quantiles") {
        if !out.iter().any(|(n, _)| n == required) {
            return Err(Error::format(*required, "section missing"));
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Classifier> {
    let secs = sections(bytes)?;
    let get = |name: &str| secs.iter().find(|(n, _)| *n == name).map(|(_, p)| *p);
    let spec: SpecSection = from_json("spec", get("spec").expect("checked"))?;
    let norm: Vec<Vec<f64>> = from_json("norm", get("norm").expect("checked"))?;
    let layout: HeadLayout = from_json("layout", get("layout").expect("checked"))?;
    let table: MappingTable = from_json("table", get("table").expect("checked"))?;
    let meta: Vec<TrainingMeta> = from_json("meta", get("meta").expect("checked"))?;
    let n = spec.nets.len();
    if norm.len() != n || meta.len() != n {
        return Err(Error::format(
            "meta",
            format!("{n} networks in spec but {} norm and {} meta entries", norm.len(), meta.len()),
        ));
    }

    let mut params = ByteReader::new(get("params").expect("checked"), "params");
    let mut quant = get("quantiles").map(|q| ByteReader::new(q, "quantiles"));
    let mut nets = Vec::with_capacity(n);
    for ((arch, means), mut meta) in spec.nets.iter().zip(norm).zip(meta) {
        let mut model: Model<f32> = build_model(arch, 0)?;
        for node in &mut model.graph.nodes {
            read_arrays(&mut params, &mut node.params, &node.name)?;
            read_arrays(&mut params, &mut node.buffers, &node.name)?;
        }
        meta.channel_means = means;
        model.meta = meta;
        let quantiles = match quant.as_mut() {
            None => None,
            Some(q) => match q.u8()? {
                0 => None,
                1 => {
                    let len = q.len()?;
                    Some(QuantileTable::from_bytes(q.take(len)?)?)
                }
                flag => return Err(q.error(format!("bad presence flag {flag}"))),
            },
        };
        nets.push(Net { model, quantiles });
    }
    params.finish()?;
    if let Some(q) = &quant {
        q.finish()?;
    }
    Classifier::new(spec.variant, spec.pipeline, layout, table, nets)
}

pub fn save(path: &Path, clf: &Classifier) -> Result<()> {
    fs::write(path, to_bytes(clf)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Classifier> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Byte range of a section's payload, for corruption tests and tooling.
pub fn section_range(bytes: &[u8], name: &str) -> Option<std::ops::Range<usize>> {
    let mut pos = 12;
    while pos < bytes.len() {
        let n = *bytes.get(pos)? as usize;
        let sname = bytes.get(pos + 1..pos + 1 + n)?;
        let len_at = pos + 1 + n;
        let len = u64::from_le_bytes(bytes.get(len_at..len_at + 8)?.try_into().ok()?) as usize;
        let start = len_at + 12;
        if sname == name.as_bytes() {
            return Some(start..start + len);
        }
        pos = start + len;
    }
    None
}
