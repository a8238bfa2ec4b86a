//! The five-variant comparison: input channels and output structure.
//!
//! | id | input | output |
//! |----|-------|--------|
//! | E1 | image | separate nets |
//! | E2 | image + heatmap | separate nets |
//! | E3 | image + heatmap | one head |
//! | E4 | image + heatmap | E3's network read per mode |
//! | E5 | image + heatmap | multihead |
//!
//! Every variant of a phantom sees the same generated data.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::heads::OutputVariant;
use crate::pipeline::Recording;
use crate::synth::{generate_split, PhantomConfig};

use super::config::Resolved;
use super::report::{self, ExperimentRow};
use super::train::{train_classifier, EpochLog, TrainSpec};
use super::{evaluate, Classifier, EvalReport};

pub const EXPERIMENTS: [&str; 5] = ["E1", "E2", "E3", "E4", "E5"];

/// Variants compared on the head-overlap phantom.
pub const OVERLAP_EXPERIMENTS: [&str; 3] = ["E3", "E4", "E5"];

fn design(id: &str) -> Result<(bool, OutputVariant)> {
    Ok(match id {
        "E1" => (false, OutputVariant::SeparateNets),
        "E2" => (true, OutputVariant::SeparateNets),
        "E3" => (true, OutputVariant::SingleHead),
        "E4" => (true, OutputVariant::SingleTrainMultiheadTest),
        "E5" => (true, OutputVariant::Multihead),
        other => {
            return Err(Error::config(format!(
                "unknown experiment `{other}` (E1 to E5)"
            )))
        }
    })
}

/// Median wall-clock milliseconds of classifying one recording.
pub fn median_inference_ms(clf: &Classifier, rec: &Recording, runs: usize) -> Result<f64> {
    let one = std::slice::from_ref(rec);
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let t = Instant::now();
        clf.classify(one, None)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

pub struct ExperimentResult {
    pub row: ExperimentRow,
    pub report: EvalReport,
}

/// Runs `ids` on one phantom, training on train (+ val) and testing on test.
pub fn run_on(
    r: &Resolved,
    phantom_name: &str,
    phantom: &PhantomConfig,
    ids: &[&str],
    log: &mut dyn FnMut(&str, &EpochLog),
) -> Result<Vec<ExperimentResult>> {
    let mut train = generate_split(phantom, r.seed, "train")?;
    if r.config.train.include_val {
        train.extend(generate_split(phantom, r.seed, "val")?);
    }
    let test = generate_split(phantom, r.seed, "test")?;
    let (layout, table) = r.heads()?;
    let arch = r.arch()?;
    let base = r.pipeline()?;
    let hash = r.hash();

    let mut e3: Option<Classifier> = None;
    let mut out = Vec::new();
    for &id in ids {
        let (heatmap, variant) = design(id)?;
        let clf = if id == "E4" {
            if e3.is_none() {
                e3 = Some(train_one(r, &arch, &base, &layout, &table, &train, &hash, "E3", log)?);
            }
            e3.as_ref().expect("trained above").reinterpret(variant)?
        } else {
            let mut pipeline = base.clone();
            pipeline.use_heatmap = heatmap;
            let clf = train_one(r, &arch, &pipeline, &layout, &table, &train, &hash, id, log)?;
            if id == "E3" {
                e3 = Some(clf.clone());
            }
            clf
        };
        let rep = evaluate(&clf, &test)?;
        let first = test
            .first()
            .ok_or_else(|| Error::data("empty test split"))?;
        out.push(ExperimentResult {
            row: ExperimentRow {
                experiment: id.into(),
                phantom: phantom_name.into(),
                input: if heatmap { "image+heatmap" } else { "image" }.into(),
                output: format!("{variant:?}"),
                accuracy: rep.accuracy,
                params: clf.param_count(),
                size_bytes: clf.estimated_bytes(),
                infer_ms: median_inference_ms(&clf, first, 100)?,
            },
            report: rep,
        });
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn train_one(
    r: &Resolved,
    arch: &crate::network::ArchitectureSpec,
    pipeline: &crate::pipeline::PipelineConfig,
    layout: &crate::heads::HeadLayout,
    table: &crate::heads::MappingTable,
    train: &[Recording],
    hash: &str,
    id: &str,
    log: &mut dyn FnMut(&str, &EpochLog),
) -> Result<Classifier> {
    let (_, variant) = design(id)?;
    let spec = TrainSpec {
        variant,
        arch,
        pipeline,
        layout,
        table,
        train: &r.config.train.params,
        seed: r.seed,
        config_hash: hash.to_string(),
    };
    train_classifier(&spec, train, &mut |l| log(id, l))
}

/// The configured matrix on the main phantom, then the overlap comparison.
/// Writes `experiment.csv` and one confusion CSV per row.
pub fn run_experiments(
    r: &Resolved,
    log: &mut dyn FnMut(&str, &EpochLog),
) -> Result<Vec<ExperimentResult>> {
    let ids: Vec<&str> = r.config.experiment.variants.iter().map(|s| s.as_str()).collect();
    for id in &ids {
        design(id)?;
    }
    let mut results = run_on(r, &r.config.data.phantom, &r.phantom()?, &ids, log)?;
    let overlap = &r.config.experiment.overlap_phantom;
    if !overlap.is_empty() {
        let mut p = PhantomConfig::preset(overlap)?;
        if let Some(c) = &r.config.data.counts {
            p.counts = c.clone();
        }
        let oids: Vec<&str> = ids
            .iter()
            .copied()
            .filter(|id| OVERLAP_EXPERIMENTS.contains(id))
            .collect();
        if !oids.is_empty() {
            results.extend(run_on(r, overlap, &p, &oids, log)?);
        }
    }
    let out = r.out_dir();
    let rows: Vec<ExperimentRow> = results.iter().map(|x| x.row.clone()).collect();
    report::write(&out.join("experiment.csv"), &report::experiment_csv(&rows)?)?;
    for x in &results {
        let name = format!("experiment_{}_{}_confusion.csv", x.row.experiment, x.row.phantom);
        report::write(&out.join(name), &report::confusion_csv(&x.report.confusion)?)?;
    }
    Ok(results)
}
