//! Training, evaluation, calibration, experiments, persistence and reports.

pub mod artifact;
pub mod checks;
pub mod config;
pub mod experiment;
pub mod report;
pub mod run;
pub mod train;

use std::collections::BTreeSet;

use serde::Serialize;

use crate::array::DenseArray;
use crate::confidence::{
    fit_quantiles, record_scores, sweep, Decision, LabeledRecord, QuantileTable, ScoreOptions,
    ScoreRecord, SweepRecord,
};
use crate::engine::Phase;
use crate::error::{Error, Result};
use crate::heads::{
    bucket_baseline, configure_output, map_output, HeadLayout, MappingTable, NetOutput,
    OutputConfig, OutputVariant, SHARED_NO,
};
use crate::network::Model;
use crate::pipeline::{assemble_input, crop, CropMode, Mode, PipelineConfig, Recording};

pub use train::{train_classifier, EpochLog, TrainConfig, TrainSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct Net {
    pub model: Model<f32>,
    pub quantiles: Option<QuantileTable>,
}

/// A trained variant: one or more networks plus everything needed to read
/// their outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub variant: OutputVariant,
    /// Pipeline with the fitted channel means.
    pub pipeline: PipelineConfig,
    pub layout: HeadLayout,
    pub table: MappingTable,
    pub nets: Vec<Net>,
    output: OutputConfig,
}

/// Result of classifying one recording.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub output_class: String,
    pub network_class: String,
    pub head: String,
    /// Pre-softmax score of the predicted class.
    pub score: f32,
    pub hazard: bool,
    /// The predicted class belongs to a head that does not serve the mode.
    pub cross_head: bool,
    pub decision: Decision,
    #[serde(skip)]
    pub record: ScoreRecord,
    #[serde(skip)]
    pub net: usize,
}

impl Classifier {
    pub fn new(
        variant: OutputVariant,
        pipeline: PipelineConfig,
        layout: HeadLayout,
        table: MappingTable,
        nets: Vec<Net>,
    ) -> Result<Self> {
        let output = configure_output(variant, &layout)?;
        if output.nets.len() != nets.len() {
            return Err(Error::config(format!(
                "variant {variant:?} needs {} networks, got {}",
                output.nets.len(),
                nets.len()
            )));
        }
        for (o, n) in output.nets.iter().zip(&nets) {
            if o.num_classes() != n.model.num_classes() {
                return Err(Error::config(format!(
                    "network emits {} classes, layout expects {}",
                    n.model.num_classes(),
                    o.num_classes()
                )));
            }
        }
        Ok(Classifier {
            variant,
            pipeline,
            layout,
            table,
            nets,
            output,
        })
    }

    pub fn output(&self) -> &OutputConfig {
        &self.output
    }

    /// Same networks read out under another variant (E4 reuses the E3 model).
    pub fn reinterpret(&self, variant: OutputVariant) -> Result<Self> {
        Classifier::new(
            variant,
            self.pipeline.clone(),
            self.layout.clone(),
            self.table.clone(),
            self.nets.clone(),
        )
    }

    pub fn net_output(&self, i: usize) -> &NetOutput {
        &self.output.nets[i]
    }

    pub fn param_count(&self) -> usize {
        self.nets.iter().map(|n| n.model.report().param_count).sum()
    }

    pub fn estimated_bytes(&self) -> usize {
        self.nets.iter().map(|n| n.model.report().estimated_bytes).sum()
    }

    /// Center-cropped network input for a recording.
    pub fn encode(&self, rec: &Recording) -> Result<DenseArray<f32>> {
        let enc = assemble_input(rec, &self.pipeline)?;
        Ok(crop(&enc, self.pipeline.crop, CropMode::Center)?.0)
    }

    /// Output class for a network class name under a mode and baseline.
    pub fn map_class(&self, name: &str, mode: Mode, baseline: f64) -> Result<(String, bool, bool)> {
        if name == SHARED_NO && self.layout.class_index(SHARED_NO).is_none() {
            return Ok((self.table.no_output.clone(), false, false));
        }
        let bucket = bucket_baseline(baseline)?;
        if let Ok(m) = map_output(name, mode, bucket, &self.table) {
            return Ok((m.output.to_string(), m.hazard, false));
        }
        // class from a head that does not serve this mode: read it under its own head
        let idx = self
            .layout
            .class_index(name)
            .ok_or_else(|| Error::Internal(format!("class `{name}` not in layout")))?;
        let head = self.layout.head_of_class(idx).expect("class has a head");
        let own_mode = self.layout.heads[head].modes[0];
        let m = map_output(name, own_mode, bucket, &self.table)?;
        Ok((m.output.to_string(), m.hazard, true))
    }

    /// Scores every recording; `q` applies each net's quantile table.
    pub fn classify(&self, recs: &[Recording], q: Option<f64>) -> Result<Vec<Prediction>> {
        if let Some(q) = q.filter(|&q| q > 0.0) {
            if self.nets.iter().any(|n| n.quantiles.is_none()) {
                return Err(Error::usage(format!(
                    "quantile {q} requested but the model has no quantile table; run `calibrate` first"
                )));
            }
        }
        let mut out: Vec<Option<Prediction>> = vec![None; recs.len()];
        for (ni, net) in self.nets.iter().enumerate() {
            let spec = &self.output.nets[ni];
            let idx: Vec<usize> = (0..recs.len())
                .filter(|&i| spec.modes.contains(&recs[i].mode))
                .collect();
            if idx.is_empty() {
                continue;
            }
            let inputs = idx
                .iter()
                .map(|&i| self.encode(&recs[i]))
                .collect::<Result<Vec<_>>>()?;
            let modes: Vec<Mode> = idx.iter().map(|&i| recs[i].mode).collect();
            let records = record_scores(&net.model, spec, &inputs, &modes, &ScoreOptions::default())?;
            for (&i, record) in idx.iter().zip(records) {
                let name = spec
                    .layout
                    .class_name(record.predicted)
                    .expect("predicted class in layout")
                    .to_string();
                let head = spec
                    .layout
                    .head_of_class(record.predicted)
                    .map(|h| spec.layout.heads[h].name.clone())
                    .unwrap_or_default();
                let (output_class, hazard, cross_head) =
                    self.map_class(&name, recs[i].mode, recs[i].baseline)?;
                let decision = match (q, &net.quantiles) {
                    (Some(q), Some(t)) => crate::confidence::decide(&record, q, t)?,
                    (Some(q), None) if q > 0.0 => unreachable!("checked above"),
                    _ => Decision::Accepted,
                };
                out[i] = Some(Prediction {
                    output_class,
                    network_class: name,
                    head,
                    score: record.own_score() as f32,
                    hazard,
                    cross_head,
                    decision,
                    record,
                    net: ni,
                });
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(i, p)| {
                p.ok_or_else(|| {
                    Error::config(format!("no network serves mode {} (record {})", recs[i].mode, i + 1))
                })
            })
            .collect()
    }

    /// Fits every net's quantile table on the given (training) recordings.
    pub fn calibrate(&mut self, recs: &[Recording], grid: &[f64]) -> Result<Vec<String>> {
        let preds = self.classify(recs, None)?;
        let mut warnings = Vec::new();
        for ni in 0..self.nets.len() {
            let records: Vec<ScoreRecord> = preds
                .iter()
                .filter(|p| p.net == ni)
                .map(|p| p.record.clone())
                .collect();
            let k = self.nets[ni].model.num_classes();
            let (table, w) = fit_quantiles(
                &records,
                k,
                grid,
                crate::confidence::ScoreSource::Presoftmax,
            )?;
            warnings.extend(w.into_iter().map(|w| format!("net {ni}: {w}")));
            self.nets[ni].quantiles = Some(table);
        }
        Ok(warnings)
    }

    /// Ignored and error rates of a set at every grid point, pooled over nets.
    pub fn sweep(&self, dataset: &str, recs: &[Recording]) -> Result<Vec<SweepRecord>> {
        let preds = self.classify(recs, None)?;
        let mut pooled: Option<Vec<SweepRecord>> = None;
        for (ni, net) in self.nets.iter().enumerate() {
            let table = net.quantiles.as_ref().ok_or_else(|| {
                Error::usage("sweep needs a calibrated model; run `calibrate` first")
            })?;
            let labeled: Vec<LabeledRecord> = preds
                .iter()
                .zip(recs)
                .filter(|(p, _)| p.net == ni)
                .map(|(p, r)| LabeledRecord {
                    record: p.record.clone(),
                    correct: known_label(r).map(|l| l == p.output_class),
                })
                .collect();
            let part = sweep(dataset, &labeled, table);
            pooled = Some(match pooled {
                None => part,
                Some(acc) => acc
                    .into_iter()
                    .zip(part)
                    .map(|(a, b)| merge_sweep(a, b))
                    .collect(),
            });
        }
        Ok(pooled.unwrap_or_default())
    }
}

fn merge_sweep(a: SweepRecord, b: SweepRecord) -> SweepRecord {
    let total = a.total + b.total;
    let ignored = a.ignored + b.ignored;
    let errors = match (a.errors, b.errors) {
        (Some(x), Some(y)) => Some(x + y),
        (x, None) if b.total == 0 => x,
        (None, y) if a.total == 0 => y,
        _ => None,
    };
    let denom = total.max(1) as f64;
    SweepRecord {
        dataset: a.dataset,
        q: a.q,
        total,
        ignored,
        ignored_rate: ignored as f64 / denom,
        errors,
        error_rate: errors.map(|e| e as f64 / denom),
    }
}

/// Output-class label, unless the recording belongs to an unlabeled set.
fn known_label(r: &Recording) -> Option<&str> {
    r.label
        .as_deref()
        .filter(|l| *l != crate::synth::UNKNOWN_LABEL && *l != crate::synth::EXTRA_LABEL)
}

/// Confusion matrix over output classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    pub classes: Vec<String>,
    /// `counts[true][pred]`.
    pub counts: Vec<Vec<usize>>,
    /// Cells a mode-restricted readout can never fill.
    pub structural: Vec<Vec<bool>>,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let diag: usize = (0..self.classes.len()).map(|i| self.counts[i][i]).sum();
        diag as f64 / self.total().max(1) as f64
    }

    /// Row-normalized percentages; empty rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n: usize = row.iter().sum();
                row.iter()
                    .map(|&c| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 })
                    .collect()
            })
            .collect()
    }

    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect()
    }

    pub fn structural_count(&self) -> usize {
        self.counts
            .iter()
            .flatten()
            .zip(self.structural.iter().flatten())
            .filter(|(_, &s)| s)
            .map(|(&c, _)| c)
            .sum()
    }
}

/// Output classes each mode can produce under the base layout.
pub fn outputs_by_mode(layout: &HeadLayout, table: &MappingTable) -> Vec<(Mode, BTreeSet<String>)> {
    Mode::ALL
        .iter()
        .map(|&m| {
            let mut set = BTreeSet::new();
            if let Ok(h) = layout.head_for_mode(m) {
                for class in &layout.heads[h].classes {
                    for b in crate::heads::BaselineBucket::ALL {
                        if let Ok(o) = map_output(class, m, b, table) {
                            set.insert(o.output.to_string());
                        }
                    }
                }
            }
            (m, set)
        })
        .collect()
}

/// Metrics of one labeled set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub total: usize,
    pub accuracy: f64,
    pub confusion: Confusion,
}

pub fn evaluate(clf: &Classifier, recs: &[Recording]) -> Result<EvalReport> {
    let labeled: Vec<&Recording> = recs.iter().filter(|r| known_label(r).is_some()).collect();
    let owned: Vec<Recording> = labeled.iter().map(|r| (*r).clone()).collect();
    let preds = clf.classify(&owned, None)?;
    let classes = clf.table.universe.clone();
    let index = |name: &str| {
        classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::data(format!("label `{name}` outside the output universe")))
    };
    let k = classes.len();
    let mut counts = vec![vec![0usize; k]; k];
    for (r, p) in owned.iter().zip(&preds) {
        let t = index(known_label(r).expect("filtered"))?;
        let q = index(&p.output_class)?;
        counts[t][q] += 1;
    }
    let by_mode = outputs_by_mode(&clf.layout, &clf.table);
    let structural = classes
        .iter()
        .map(|t| {
            classes
                .iter()
                .map(|p| {
                    !by_mode
                        .iter()
                        .any(|(_, set)| set.contains(t) && set.contains(p))
                })
                .collect()
        })
        .collect();
    let confusion = Confusion {
        classes,
        counts,
        structural,
    };
    Ok(EvalReport {
        total: owned.len(),
        accuracy: confusion.accuracy(),
        confusion,
    })
}

/// Forward pass of a single stacked batch, for timing and tests.
pub fn forward_batch(model: &Model<f32>, inputs: &[DenseArray<f32>]) -> Result<DenseArray<f32>> {
    let refs: Vec<&DenseArray<f32>> = inputs.iter().collect();
    model.forward(&DenseArray::stack(&refs)?, Phase::Eval)
}
