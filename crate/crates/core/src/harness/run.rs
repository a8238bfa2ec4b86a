//! The end-to-end commands behind the CLI, driven by a resolved run config.
//!
//! File layout under the config's data directory: `<split>.csv` manifests
//! and `images/`. Under the output directory: the model artifact,
//! `train_log.csv`, `confusion.csv`/`.svg`, `metrics.csv`, `sweep.csv`/`.svg`,
//! `gradcheck.csv` and `experiment.csv`.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::confidence::{default_grid, Decision};
use crate::error::{Error, Result};
use crate::pipeline::Recording;
use crate::synth::{generate_split, load_recordings, write_dataset, SPLITS};

use super::artifact;
use super::checks::{gradcheck_suite, CheckCase};
use super::config::Resolved;
use super::report;
use super::train::{train_classifier, EpochLog, TrainSpec};
use super::{evaluate, Classifier, EvalReport, Prediction};

fn data_error_in(path: &Path, e: Error) -> Error {
    match e {
        Error::Io { .. } => e,
        other => Error::data(format!("{}: {other}", path.display())),
    }
}

pub fn load_split(r: &Resolved, split: &str) -> Result<Vec<Recording>> {
    let path = r.manifest(split);
    if !path.is_file() {
        return Err(Error::config(format!(
            "manifest {} does not exist; run `gen` first",
            path.display()
        )));
    }
    load_recordings(&path).map_err(|e| match e {
        Error::Input { .. } => e,
        other => data_error_in(&path, other),
    })
}

/// Training recordings: train, plus val when the config asks for it.
pub fn training_set(r: &Resolved) -> Result<Vec<Recording>> {
    let mut recs = load_split(r, "train")?;
    if r.config.train.include_val {
        recs.extend(load_split(r, "val")?);
    }
    Ok(recs)
}

/// Writes every split; returns `(split, count)` pairs.
pub fn gen(r: &Resolved) -> Result<Vec<(String, usize)>> {
    let phantom = r.phantom()?;
    let (layout, table) = r.heads()?;
    phantom.check_against(&layout, &table)?;
    let dir = r.data_dir();
    let hash = phantom.hash();
    SPLITS
        .iter()
        .map(|split| {
            let recs = generate_split(&phantom, r.seed, split)?;
            write_dataset(&dir, split, &recs, &hash, r.seed)?;
            Ok((split.to_string(), recs.len()))
        })
        .collect()
}

pub fn train(r: &Resolved, log: &mut dyn FnMut(&EpochLog)) -> Result<(PathBuf, Classifier)> {
    let recs = training_set(r)?;
    let (layout, table) = r.heads()?;
    let arch = r.arch()?;
    let pipeline = r.pipeline()?;
    let spec = TrainSpec {
        variant: r.config.variant,
        arch: &arch,
        pipeline: &pipeline,
        layout: &layout,
        table: &table,
        train: &r.config.train.params,
        seed: r.seed,
        config_hash: r.hash(),
    };
    let mut rows = Vec::new();
    let clf = train_classifier(&spec, &recs, &mut |l| {
        rows.push(l.clone());
        log(l);
    })?;
    let out = r.out_dir();
    let mut csv = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        csv.serialize(row)
            .map_err(|e| Error::Internal(format!("train log: {e}")))?;
    }
    let text = String::from_utf8(
        csv.into_inner()
            .map_err(|e| Error::Internal(format!("train log: {e}")))?,
    )
    .expect("csv is utf-8");
    report::write(&out.join("train_log.csv"), &text)?;
    let path = r.artifact_path();
    artifact::save(&path, &clf)?;
    Ok((path, clf))
}

pub fn load_model(r: &Resolved) -> Result<Classifier> {
    let path = r.artifact_path();
    if !path.is_file() {
        return Err(Error::config(format!(
            "model {} does not exist; run `train` first",
            path.display()
        )));
    }
    artifact::load(&path)
}

/// Fits the quantile tables on the training set and rewrites the artifact.
pub fn calibrate(r: &Resolved) -> Result<Vec<String>> {
    let mut clf = load_model(r)?;
    let recs = training_set(r)?;
    let warnings = clf.calibrate(&recs, &default_grid())?;
    artifact::save(&r.artifact_path(), &clf)?;
    Ok(warnings)
}

pub fn eval(r: &Resolved) -> Result<EvalReport> {
    let clf = load_model(r)?;
    let test = load_split(r, "test")?;
    let rep = evaluate(&clf, &test)?;
    let out = r.out_dir();
    report::write(&out.join("confusion.csv"), &report::confusion_csv(&rep.confusion)?)?;
    report::write(&out.join("confusion.svg"), &report::confusion_svg(&rep.confusion))?;
    report::write(&out.join("metrics.csv"), &report::metrics_csv(&rep)?)?;
    Ok(rep)
}

pub fn sweep(r: &Resolved) -> Result<Vec<crate::confidence::SweepRecord>> {
    let clf = load_model(r)?;
    let mut rows = Vec::new();
    for set in ["test", "unknown", "extra"] {
        rows.extend(clf.sweep(set, &load_split(r, set)?)?);
    }
    let out = r.out_dir();
    report::write(&out.join("sweep.csv"), &report::sweep_csv(&rows)?)?;
    report::write(&out.join("sweep.svg"), &report::sweep_svg(&rows))?;
    Ok(rows)
}

/// One machine-readable prediction line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictLine {
    pub index: usize,
    /// Output class, or `IGNORED`.
    pub output: String,
    pub class: String,
    pub network_class: String,
    pub head: String,
    pub score: f32,
    pub decision: Decision,
    /// The mapping row is flagged hazardous, e.g. a PV prediction under CW.
    pub hazard: bool,
    pub cross_head: bool,
}

impl PredictLine {
    pub fn new(index: usize, p: &Prediction) -> Self {
        PredictLine {
            index,
            output: match p.decision {
                Decision::Accepted => p.output_class.clone(),
                Decision::Ignored => "IGNORED".into(),
            },
            class: p.output_class.clone(),
            network_class: p.network_class.clone(),
            head: p.head.clone(),
            score: p.score,
            decision: p.decision,
            hazard: p.hazard,
            cross_head: p.cross_head,
        }
    }
}

/// JSON lines for a manifest; `q` overrides the config's quantile.
pub fn predict(r: &Resolved, q: Option<f64>) -> Result<String> {
    let clf = load_model(r)?;
    let recs = match &r.config.predict.manifest {
        Some(m) => {
            let path = r.path(m);
            load_recordings(&path).map_err(|e| match e {
                Error::Input { .. } | Error::Io { .. } => e,
                other => data_error_in(&path, other),
            })?
        }
        None => load_split(r, "test")?,
    };
    let q = q.unwrap_or(r.config.predict.quantile);
    let preds = clf.classify(&recs, Some(q))?;
    let mut out = String::new();
    for (i, p) in preds.iter().enumerate() {
        out.push_str(&serde_json::to_string(&PredictLine::new(i, p)).expect("line serializes"));
        out.push('\n');
    }
    Ok(out)
}

pub fn gradcheck(r: &Resolved) -> Result<Vec<CheckCase>> {
    let cases = gradcheck_suite(r.seed, 3)?;
    let mut csv = csv::Writer::from_writer(Vec::new());
    for c in &cases {
        csv.serialize(c)
            .map_err(|e| Error::Internal(format!("gradcheck: {e}")))?;
    }
    let text = String::from_utf8(
        csv.into_inner()
            .map_err(|e| Error::Internal(format!("gradcheck: {e}")))?,
    )
    .expect("csv is utf-8");
    report::write(&r.out_dir().join("gradcheck.csv"), &text)?;
    Ok(cases)
}
