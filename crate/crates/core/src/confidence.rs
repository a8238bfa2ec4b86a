//! Per-class quantile cutoffs over recorded scores, and the MC-dropout comparator.
//!
//! After training, every training sample's scores are recorded and grouped by
//! the class the network predicts. For a quantile `q` the cutoff of class `c`
//! is `v[floor(q * N_c)]` of that class's sorted scores; at inference a
//! prediction whose own score is strictly below the cutoff is ignored.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::codec::{put_f64s, put_u64, ByteReader};
use crate::engine::{layer_forward, softmax, ForwardCtx, LayerKind, LayerNode};
use crate::error::{Error, Result};
use crate::heads::NetOutput;
use crate::network::Model;
use crate::pipeline::Mode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    Presoftmax,
    Softmax,
    McMeanPresoftmax,
    McVarPresoftmax,
    McMeanSoftmax,
    McVarSoftmax,
}

impl ScoreSource {
    pub const ALL: [ScoreSource; 6] = [
        ScoreSource::Presoftmax,
        ScoreSource::Softmax,
        ScoreSource::McMeanPresoftmax,
        ScoreSource::McVarPresoftmax,
        ScoreSource::McMeanSoftmax,
        ScoreSource::McVarSoftmax,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreSource::Presoftmax => "presoftmax",
            ScoreSource::Softmax => "softmax",
            ScoreSource::McMeanPresoftmax => "mc_mean_presoftmax",
            ScoreSource::McVarPresoftmax => "mc_var_presoftmax",
            ScoreSource::McMeanSoftmax => "mc_mean_softmax",
            ScoreSource::McVarSoftmax => "mc_var_softmax",
        }
    }

    /// High values mean low confidence; the grid applies to the descending order.
    pub fn descending(self) -> bool {
        matches!(self, ScoreSource::McVarPresoftmax | ScoreSource::McVarSoftmax)
    }

    pub fn needs_mc(self) -> bool {
        !matches!(self, ScoreSource::Presoftmax | ScoreSource::Softmax)
    }

    /// Maps a raw score onto the axis where "low" means "ignore".
    pub fn orient(self, score: f64) -> f64 {
        if self.descending() {
            -score
        } else {
            score
        }
    }

    fn code(self) -> u8 {
        ScoreSource::ALL.iter().position(|&s| s == self).unwrap_or(0) as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        ScoreSource::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::format("table", format!("unknown score source code {code}")))
    }
}

impl fmt::Display for ScoreSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreSource::ALL
            .iter()
            .copied()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown score source `{s}`")))
    }
}

/// 0% to 10% in 0.5% steps.
pub fn default_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.005).collect()
}

/// Index of `q` on the grid; an off-grid value names the nearest point.
pub fn grid_index(grid: &[f64], q: f64) -> Result<usize> {
    if let Some(i) = grid.iter().position(|&g| (g - q).abs() < 1e-9) {
        return Ok(i);
    }
    let nearest = grid
        .iter()
        .copied()
        .min_by(|a, b| (a - q).abs().total_cmp(&(b - q).abs()))
        .unwrap_or(0.0);
    Err(Error::usage(format!(
        "quantile {q} is not on the calibration grid; nearest grid point is {nearest}"
    )))
}

/// `floor(q * n)`, robust to `q` values like `0.035` that are not exact in binary.
pub fn cutoff_index(q: f64, n: usize) -> usize {
    let x = q * n as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.floor() };
    (k as usize).min(n.saturating_sub(1))
}

/// Scores of one sample under one source, plus the predicted network class.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub values: Vec<f64>,
    pub predicted: usize,
}

impl ScoreRecord {
    pub fn own_score(&self) -> f64 {
        self.values[self.predicted]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassCutoffs {
    /// Oriented scores, ascending.
    pub sorted: Vec<f64>,
    /// One cutoff per grid point; `-inf` accepts everything.
    pub cutoffs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantileTable {
    pub source: ScoreSource,
    pub grid: Vec<f64>,
    pub classes: Vec<ClassCutoffs>,
}

/// Groups records by predicted class and derives every grid cutoff.
///
/// Returns the table and one warning per class that received no records
/// (such classes accept everything).
pub fn fit_quantiles(
    records: &[ScoreRecord],
    num_classes: usize,
    grid: &[f64],
    source: ScoreSource,
) -> Result<(QuantileTable, Vec<String>)> {
    if grid.is_empty() || grid[0] != 0.0 {
        return Err(Error::config("quantile grid must start at 0"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) || grid.iter().any(|&q| !(0.0..1.0).contains(&q)) {
        return Err(Error::config("quantile grid must increase within [0, 1)"));
    }
    let mut groups = vec![Vec::new(); num_classes];
    for (i, r) in records.iter().enumerate() {
        if r.predicted >= num_classes {
            return Err(Error::data(format!(
                "record {i} predicts class {} of {num_classes}",
                r.predicted
            )));
        }
        let s = source.orient(r.own_score());
        if !s.is_finite() {
            return Err(Error::data(format!("record {i} has a non-finite score")));
        }
        groups[r.predicted].push(s);
    }
    let mut warnings = Vec::new();
    let classes = groups
        .into_iter()
        .enumerate()
        .map(|(c, mut sorted)| {
            sorted.sort_by(f64::total_cmp);
            let cutoffs = grid
                .iter()
                .map(|&q| {
                    if q == 0.0 || sorted.is_empty() {
                        f64::NEG_INFINITY
                    } else {
                        sorted[cutoff_index(q, sorted.len())]
                    }
                })
                .collect();
            if sorted.is_empty() {
                warnings.push(format!(
                    "class {c} received no calibration records; it always accepts"
                ));
            }
            ClassCutoffs { sorted, cutoffs }
        })
        .collect();
    Ok((
        QuantileTable {
            source,
            grid: grid.to_vec(),
            classes,
        },
        warnings,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accepted,
    Ignored,
}

impl QuantileTable {
    pub fn cutoff(&self, class: usize, q: f64) -> Result<f64> {
        let qi = grid_index(&self.grid, q)?;
        let c = self
            .classes
            .get(class)
            .ok_or_else(|| Error::usage(format!("class {class} not in quantile table")))?;
        Ok(c.cutoffs[qi])
    }

    fn decide_at(&self, record: &ScoreRecord, qi: usize) -> Decision {
        let cut = self.classes[record.predicted].cutoffs[qi];
        if self.source.orient(record.own_score()) < cut {
            Decision::Ignored
        } else {
            Decision::Accepted
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![self.source.code()];
        put_f64s(&mut out, &self.grid);
        put_u64(&mut out, self.classes.len() as u64);
        for c in &self.classes {
            put_f64s(&mut out, &c.sorted);
            put_f64s(&mut out, &c.cutoffs);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "table");
        let source = ScoreSource::from_code(r.u8()?)?;
        let grid = r.f64s()?;
        let n = r.len()?;
        let mut classes = Vec::new();
        for _ in 0..n {
            let sorted = r.f64s()?;
            let cutoffs = r.f64s()?;
            if cutoffs.len() != grid.len() {
                return Err(r.error("cutoff count differs from grid"));
            }
            classes.push(ClassCutoffs { sorted, cutoffs });
        }
        r.finish()?;
        Ok(QuantileTable {
            source,
            grid,
            classes,
        })
    }
}

/// Ignored iff the predicted class's score is strictly below its cutoff at `q`.
pub fn decide(record: &ScoreRecord, q: f64, table: &QuantileTable) -> Result<Decision> {
    let qi = grid_index(&table.grid, q)?;
    if record.predicted >= table.classes.len() {
        return Err(Error::usage(format!(
            "class {} not in quantile table",
            record.predicted
        )));
    }
    Ok(table.decide_at(record, qi))
}

/// Per-sample MC-dropout statistics, each `(N, K)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct McStats {
    pub classes: usize,
    pub mean_presoftmax: Vec<f64>,
    pub var_presoftmax: Vec<f64>,
    pub mean_softmax: Vec<f64>,
    pub var_softmax: Vec<f64>,
}

impl McStats {
    pub fn row(&self, source: ScoreSource, i: usize) -> Option<&[f64]> {
        let k = self.classes;
        let v = match source {
            ScoreSource::McMeanPresoftmax => &self.mean_presoftmax,
            ScoreSource::McVarPresoftmax => &self.var_presoftmax,
            ScoreSource::McMeanSoftmax => &self.mean_softmax,
            ScoreSource::McVarSoftmax => &self.var_softmax,
            _ => return None,
        };
        Some(&v[i * k..(i + 1) * k])
    }
}

/// Forced dropout on `features` followed by `dense`, repeated `runs` times.
///
/// `subsets[i]` names the classes sample `i`'s softmax runs over; softmax
/// entries outside it are 0. Variances use the population estimator.
pub fn mc_dropout_head(
    dense: &LayerNode<f32>,
    features: &DenseArray<f32>,
    subsets: &[&[usize]],
    rate: f64,
    runs: usize,
    seed: u64,
) -> Result<McStats> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("MC-dropout rate {rate} outside [0, 1)")));
    }
    if runs == 0 {
        return Err(Error::config("MC-dropout needs at least one run"));
    }
    let k = match dense.kind {
        LayerKind::Dense { out_features, .. } => out_features,
        _ => return Err(Error::config("MC-dropout head must be a dense layer")),
    };
    let (n, _) = features.dims2()?;
    if subsets.len() != n {
        return Err(Error::config("one softmax subset per sample is required"));
    }
    let drop = LayerNode::<f32>::new("mc.dropout", LayerKind::Dropout { rate });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pre = vec![Vec::with_capacity(n * k); runs];
    let mut soft = vec![vec![0.0f64; n * k]; runs];
    for r in 0..runs {
        let mut ctx = ForwardCtx::mc_dropout(rate, &mut rng);
        let dropped = layer_forward(&drop, &[features], &mut ctx)?.value;
        let logits = layer_forward(dense, &[&dropped], &mut ctx)?.value;
        for i in 0..n {
            let row = logits.item(i);
            pre[r].extend(row.iter().map(|&v| v as f64));
            let p = softmax(row, subsets[i])?;
            for (&c, &pv) in subsets[i].iter().zip(&p) {
                soft[r][i * k + c] = pv as f64;
            }
        }
    }
    let moments = |runs_data: &[Vec<f64>]| {
        let m = runs_data.len() as f64;
        let mut mean = vec![0.0; n * k];
        for run in runs_data {
            for (a, &v) in mean.iter_mut().zip(run) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= m);
        let mut var = vec![0.0; n * k];
        for run in runs_data {
            for ((a, &v), &mu) in var.iter_mut().zip(run).zip(&mean) {
                *a += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|a| *a /= m);
        (mean, var)
    };
    let (mean_presoftmax, var_presoftmax) = moments(&pre);
    let (mean_softmax, var_softmax) = moments(&soft);
    Ok(McStats {
        classes: k,
        mean_presoftmax,
        var_presoftmax,
        mean_softmax,
        var_softmax,
    })
}

/// MC-dropout on the final dense layer's inputs of a frozen model.
pub fn mc_dropout_infer(
    model: &Model<f32>,
    batch: &DenseArray<f32>,
    subsets: &[&[usize]],
    rate: f64,
    runs: usize,
    seed: u64,
) -> Result<McStats> {
    let features = model.features(batch)?;
    mc_dropout_head(model.final_dense(), &features, subsets, rate, runs, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreOptions {
    pub source: ScoreSource,
    #[serde(default = "half")]
    pub mc_rate: f64,
    #[serde(default = "hundred")]
    pub mc_runs: usize,
    #[serde(default)]
    pub mc_seed: u64,
    #[serde(default = "sixty_four")]
    pub batch: usize,
}

fn half() -> f64 {
    0.5
}

fn hundred() -> usize {
    100
}

fn sixty_four() -> usize {
    64
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions {
            source: ScoreSource::Presoftmax,
            mc_rate: 0.5,
            mc_runs: 100,
            mc_seed: 0,
            batch: 64,
        }
    }
}

/// Records the chosen score source for each input (`C x H x W`, already cropped).
///
/// The predicted class always comes from the deterministic forward pass; the
/// source only changes the score attached to it. MC seeds derive from the
/// sample index so batching does not change the result.
pub fn record_scores(
    model: &Model<f32>,
    net: &NetOutput,
    inputs: &[DenseArray<f32>],
    modes: &[Mode],
    opts: &ScoreOptions,
) -> Result<Vec<ScoreRecord>> {
    if inputs.len() != modes.len() {
        return Err(Error::config("one mode per input is required"));
    }
    let k = model.num_classes();
    let mut out = Vec::with_capacity(inputs.len());
    let batch = opts.batch.max(1);
    for start in (0..inputs.len()).step_by(batch) {
        let end = (start + batch).min(inputs.len());
        let refs: Vec<&DenseArray<f32>> = inputs[start..end].iter().collect();
        let x = DenseArray::stack(&refs)?;
        let logits = model.forward(&x, crate::engine::Phase::Eval)?;
        let subsets: Vec<&[usize]> = modes[start..end]
            .iter()
            .map(|m| {
                net.eval_sets
                    .get(m)
                    .map(Vec::as_slice)
                    .ok_or_else(|| Error::config(format!("network does not serve mode {m}")))
            })
            .collect::<Result<_>>()?;
        let features = if opts.source.needs_mc() {
            Some(model.features(&x)?)
        } else {
            None
        };
        for (j, i) in (start..end).enumerate() {
            let row = logits.item(j);
            let predicted = net.predict(row, modes[i])?;
            let values = match opts.source {
                ScoreSource::Presoftmax => row.iter().map(|&v| v as f64).collect(),
                ScoreSource::Softmax => {
                    let mut v = vec![0.0; k];
                    for (&c, &p) in subsets[j].iter().zip(&softmax(row, subsets[j])?) {
                        v[c] = p as f64;
                    }
                    v
                }
                source => {
                    let f = features.as_ref().expect("features computed for MC sources");
                    let one = DenseArray::from_vec(&[1, f.shape()[1]], f.item(j).to_vec())?;
                    let stats = mc_dropout_head(
                        model.final_dense(),
                        &one,
                        &[subsets[j]],
                        opts.mc_rate,
                        opts.mc_runs,
                        opts.mc_seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                    )?;
                    stats.row(source, 0).expect("MC source").to_vec()
                }
            };
            out.push(ScoreRecord { values, predicted });
        }
    }
    Ok(out)
}

/// A record with its ground truth, when known.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledRecord {
    pub record: ScoreRecord,
    /// `None` for sets without labels (unknown, extra).
    pub correct: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub dataset: String,
    pub q: f64,
    pub total: usize,
    pub ignored: usize,
    pub ignored_rate: f64,
    /// Misclassified and accepted samples.
    pub errors: Option<usize>,
    /// `errors / total`.
    pub error_rate: Option<f64>,
}

/// Ignored and error rates of one dataset at every grid point.
pub fn sweep(dataset: &str, records: &[LabeledRecord], table: &QuantileTable) -> Vec<SweepRecord> {
    let total = records.len();
    let labeled = records.iter().all(|r| r.correct.is_some()) && total > 0;
    (0..table.grid.len())
        .map(|qi| {
            let mut ignored = 0;
            let mut wrong_accepted = 0;
            for r in records {
                match table.decide_at(&r.record, qi) {
                    Decision::Ignored => ignored += 1,
                    Decision::Accepted => {
                        if r.correct == Some(false) {
                            wrong_accepted += 1
                        }
                    }
                }
            }
            let denom = total.max(1) as f64;
            SweepRecord {
                dataset: dataset.to_string(),
                q: table.grid[qi],
                total,
                ignored,
                ignored_rate: ignored as f64 / denom,
                errors: labeled.then_some(wrong_accepted),
                error_rate: labeled.then(|| wrong_accepted as f64 / denom),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(score: f64, predicted: usize) -> ScoreRecord {
        let mut values = vec![0.0; 2];
        values[predicted] = score;
        ScoreRecord { values, predicted }
    }

    fn one_to_200() -> QuantileTable {
        let records: Vec<ScoreRecord> = (1..=200).map(|s| rec(s as f64, 0)).collect();
        fit_quantiles(&records, 1, &default_grid(), ScoreSource::Presoftmax)
            .unwrap()
            .0
    }

    #[test]
    fn five_percent_of_two_hundred() {
        let t = one_to_200();
        assert_eq!(t.cutoff(0, 0.05).unwrap(), 11.0);
        assert_eq!(decide(&rec(10.5, 0), 0.05, &t).unwrap(), Decision::Ignored);
        assert_eq!(decide(&rec(11.0, 0), 0.05, &t).unwrap(), Decision::Accepted);
    }

    #[test]
    fn zero_quantile_accepts_anything() {
        let t = one_to_200();
        assert_eq!(
            decide(&rec(-1e30, 0), 0.0, &t).unwrap(),
            Decision::Accepted
        );
    }

    #[test]
    fn off_grid_names_nearest() {
        let t = one_to_200();
        let err = decide(&rec(5.0, 0), 0.051, &t).unwrap_err().to_string();
        assert!(err.contains("0.05"), "{err}");
    }

    #[test]
    fn grid_indices_are_exact_floors() {
        for n in 1..400usize {
            for (i, q) in default_grid().into_iter().enumerate() {
                let exact = (i * n) / 200;
                assert_eq!(cutoff_index(q, n), exact.min(n - 1), "q={q} n={n}");
            }
        }
    }

    #[test]
    fn empty_class_always_accepts() {
        let records = vec![rec(1.0, 0)];
        let (t, warn) = fit_quantiles(&records, 2, &default_grid(), ScoreSource::Presoftmax).unwrap();
        assert_eq!(warn.len(), 1);
        assert_eq!(decide(&rec(-5.0, 1), 0.1, &t).unwrap(), Decision::Accepted);
    }

    #[test]
    fn variance_sources_ignore_high_values() {
        let records: Vec<ScoreRecord> = (1..=100).map(|s| rec(s as f64, 0)).collect();
        let (t, _) = fit_quantiles(&records, 1, &default_grid(), ScoreSource::McVarSoftmax).unwrap();
        assert_eq!(decide(&rec(100.0, 0), 0.05, &t).unwrap(), Decision::Ignored);
        assert_eq!(decide(&rec(1.0, 0), 0.05, &t).unwrap(), Decision::Accepted);
    }

    #[test]
    fn table_bytes_round_trip() {
        let t = one_to_200();
        let back = QuantileTable::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back, t);
        let bytes = t.to_bytes();
        assert!(QuantileTable::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    fn unit_dense(w: f32) -> LayerNode<f32> {
        let mut d = LayerNode::new(
            "fc",
            LayerKind::Dense {
                in_features: 1,
                out_features: 1,
            },
        );
        d.params[0] = DenseArray::from_vec(&[1, 1], vec![w]).unwrap();
        d
    }

    #[test]
    fn rate_zero_is_deterministic_forward() {
        let d = unit_dense(1.7);
        let a = DenseArray::from_vec(&[1, 1], vec![0.9f32]).unwrap();
        let s = mc_dropout_head(&d, &a, &[&[0]], 0.0, 10, 3).unwrap();
        assert_eq!(s.mean_presoftmax[0], (1.7f32 * 0.9f32) as f64);
        assert_eq!(s.var_presoftmax[0], 0.0);
        assert!(mc_dropout_head(&d, &a, &[&[0]], 1.0, 10, 3).is_err());
    }

    #[test]
    fn sweep_at_zero_is_plain_error() {
        let t = one_to_200();
        let recs: Vec<LabeledRecord> = (0..10)
            .map(|i| LabeledRecord {
                record: rec(i as f64, 0),
                correct: Some(i % 2 == 0),
            })
            .collect();
        let s = sweep("test", &recs, &t);
        assert_eq!(s[0].ignored, 0);
        assert_eq!(s[0].error_rate, Some(0.5));
        assert!(s.windows(2).all(|w| w[1].ignored >= w[0].ignored));
    }
}
