//! Mode-partitioned output heads and the post-processing class mapping.
//!
//! The final dense layer's units are split into heads, one per group of
//! acquisition modes. Training back-propagates only through the head that
//! serves a sample's mode; inference reads only that head. The winning
//! network class is then mapped, together with the mode and the baseline
//! bucket, to an output class through a declarative [`MappingTable`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::engine::cross_entropy_loss;
use crate::error::{Error, Result};
use crate::pipeline::Mode;

/// The shipped head layout and mapping table.
pub const DEFAULT_HEADS_TOML: &str = include_str!("../configs/heads.toml");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Head {
    pub name: String,
    pub modes: Vec<Mode>,
    pub classes: Vec<String>,
    /// This head's "no organ" class, if it has one.
    #[serde(default)]
    pub no_class: Option<String>,
}

/// Ordered heads; network class indices run through the heads in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadLayout {
    pub heads: Vec<Head>,
}

impl HeadLayout {
    pub fn num_classes(&self) -> usize {
        self.heads.iter().map(|h| h.classes.len()).sum()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.heads.iter().flat_map(|h| h.classes.clone()).collect()
    }

    pub fn class_name(&self, index: usize) -> Option<&str> {
        self.heads
            .iter()
            .flat_map(|h| h.classes.iter())
            .nth(index)
            .map(String::as_str)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.heads
            .iter()
            .flat_map(|h| h.classes.iter())
            .position(|c| c == name)
    }

    /// Network-class index range of head `h`.
    pub fn range(&self, h: usize) -> Range<usize> {
        let start: usize = self.heads[..h].iter().map(|x| x.classes.len()).sum();
        start..start + self.heads[h].classes.len()
    }

    pub fn head_of_class(&self, index: usize) -> Option<usize> {
        (0..self.heads.len()).find(|&h| self.range(h).contains(&index))
    }

    pub fn head_for_mode(&self, mode: Mode) -> Result<usize> {
        let mut found = self
            .heads
            .iter()
            .enumerate()
            .filter(|(_, h)| h.modes.contains(&mode))
            .map(|(i, _)| i);
        match (found.next(), found.next()) {
            (Some(h), None) => Ok(h),
            (None, _) => Err(Error::config(format!("no head serves mode {mode}"))),
            (Some(_), Some(_)) => Err(Error::config(format!(
                "more than one head serves mode {mode}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::config("head layout has no heads"));
        }
        let mut seen = BTreeSet::new();
        for h in &self.heads {
            if h.classes.is_empty() {
                return Err(Error::config(format!("head `{}` has no classes", h.name)));
            }
            for c in &h.classes {
                if !seen.insert(c.as_str()) {
                    return Err(Error::config(format!(
                        "network class `{c}` appears in more than one place"
                    )));
                }
            }
            if let Some(no) = &h.no_class {
                if !h.classes.contains(no) {
                    return Err(Error::config(format!(
                        "head `{}` declares no-class `{no}` it does not contain",
                        h.name
                    )));
                }
            }
        }
        for m in Mode::ALL {
            self.head_for_mode(m)?;
        }
        Ok(())
    }
}

/// Baseline position relative to the unshifted default 0.5.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BaselineBucket {
    Negative,
    Zero,
    Positive,
}

impl BaselineBucket {
    pub const ALL: [BaselineBucket; 3] = [
        BaselineBucket::Negative,
        BaselineBucket::Zero,
        BaselineBucket::Positive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineBucket::Negative => "NEG",
            BaselineBucket::Zero => "ZERO",
            BaselineBucket::Positive => "POS",
        }
    }
}

/// `[0, 0.5)` → Negative, `0.5` → Zero, `(0.5, 1]` → Positive.
pub fn bucket_baseline(b: f64) -> Result<BaselineBucket> {
    bucket_baseline_eps(b, 0.0)
}

/// Like [`bucket_baseline`], widening Zero to `|b - 0.5| <= eps` for noisy sources.
pub fn bucket_baseline_eps(b: f64, eps: f64) -> Result<BaselineBucket> {
    if !(0.0..=1.0).contains(&b) {
        return Err(Error::input("baseline", format!("{b} outside [0, 1]")));
    }
    Ok(if (b - 0.5).abs() <= eps {
        BaselineBucket::Zero
    } else if b < 0.5 {
        BaselineBucket::Negative
    } else {
        BaselineBucket::Positive
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModePattern {
    Any,
    Is(Mode),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BucketPattern {
    Any,
    Is(BaselineBucket),
}

impl ModePattern {
    fn matches(self, m: Mode) -> bool {
        matches!(self, ModePattern::Any) || self == ModePattern::Is(m)
    }
}

impl BucketPattern {
    fn matches(self, b: BaselineBucket) -> bool {
        matches!(self, BucketPattern::Any) || self == BucketPattern::Is(b)
    }
}

impl fmt::Display for ModePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModePattern::Any => f.write_str("ANY"),
            ModePattern::Is(m) => f.write_str(m.as_str()),
        }
    }
}

impl fmt::Display for BucketPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BucketPattern::Any => f.write_str("ANY"),
            BucketPattern::Is(b) => f.write_str(b.as_str()),
        }
    }
}

impl FromStr for ModePattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ANY" {
            Ok(ModePattern::Any)
        } else {
            Ok(ModePattern::Is(s.parse()?))
        }
    }
}

impl FromStr for BucketPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ANY" => BucketPattern::Any,
            "NEG" => BucketPattern::Is(BaselineBucket::Negative),
            "ZERO" => BucketPattern::Is(BaselineBucket::Zero),
            "POS" => BucketPattern::Is(BaselineBucket::Positive),
            other => {
                return Err(Error::config(format!(
                    "unknown baseline pattern `{other}` (NEG, ZERO, POS or ANY)"
                )))
            }
        })
    }
}

macro_rules! string_serde {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(ModePattern);
string_serde!(BucketPattern);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingRow {
    pub class: String,
    pub mode: ModePattern,
    pub baseline: BucketPattern,
    pub output: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub hazard: bool,
}

impl MappingRow {
    fn specificity(&self) -> u8 {
        u8::from(self.mode != ModePattern::Any) + u8::from(self.baseline != BucketPattern::Any)
    }

    fn matches(&self, class: &str, mode: Mode, bucket: BaselineBucket) -> bool {
        self.class == class && self.mode.matches(mode) && self.baseline.matches(bucket)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingTable {
    /// Output class every head's no-class maps to.
    pub no_output: String,
    /// Every output class the table may produce.
    pub universe: Vec<String>,
    pub rows: Vec<MappingRow>,
}

/// Result of a table lookup.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mapped<'a> {
    pub output: &'a str,
    pub hazard: bool,
    pub row: usize,
}

impl MappingTable {
    /// Indices of the most specific matching rows.
    fn best_matches(&self, class: &str, mode: Mode, bucket: BaselineBucket) -> Vec<usize> {
        let matching: Vec<usize> = self
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.matches(class, mode, bucket))
            .map(|(i, _)| i)
            .collect();
        let top = matching
            .iter()
            .map(|&i| self.rows[i].specificity())
            .max()
            .unwrap_or(0);
        matching
            .into_iter()
            .filter(|&i| self.rows[i].specificity() == top)
            .collect()
    }

    pub fn output_index(&self, name: &str) -> Option<usize> {
        self.universe.iter().position(|u| u == name)
    }
}

/// Output class for a network class under a mode and baseline bucket.
pub fn map_output<'t>(
    class: &str,
    mode: Mode,
    bucket: BaselineBucket,
    table: &'t MappingTable,
) -> Result<Mapped<'t>> {
    match table.best_matches(class, mode, bucket)[..] {
        [row] => Ok(Mapped {
            output: &table.rows[row].output,
            hazard: table.rows[row].hazard,
            row,
        }),
        [] => Err(Error::Internal(format!(
            "mapping table has no row for ({class}, {mode}, {})",
            bucket.as_str()
        ))),
        _ => Err(Error::Internal(format!(
            "mapping table is ambiguous for ({class}, {mode}, {})",
            bucket.as_str()
        ))),
    }
}

/// Network class in the head serving `mode` whose mapping yields `label`.
pub fn network_class_for(
    label: &str,
    mode: Mode,
    bucket: BaselineBucket,
    layout: &HeadLayout,
    table: &MappingTable,
) -> Result<usize> {
    let h = layout.head_for_mode(mode)?;
    let hits: Vec<usize> = layout
        .range(h)
        .filter(|&i| {
            let name = layout.class_name(i).unwrap_or_default();
            map_output(name, mode, bucket, table)
                .map(|m| m.output == label && !m.hazard)
                .unwrap_or(false)
        })
        .collect();
    match hits[..] {
        [i] => Ok(i),
        [] => Err(Error::data(format!(
            "label `{label}` is not produced by head `{}` under mode {mode}, baseline {}",
            layout.heads[h].name,
            bucket.as_str()
        ))),
        _ => Err(Error::data(format!(
            "label `{label}` is produced by several classes of head `{}`",
            layout.heads[h].name
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Uncovered {
        class: String,
        mode: Mode,
        bucket: BaselineBucket,
    },
    Ambiguous {
        class: String,
        mode: Mode,
        bucket: BaselineBucket,
        rows: Vec<usize>,
    },
    UnknownClass { row: usize, class: String },
    UnknownOutput { row: usize, output: String },
    Unreachable { output: String },
    NoMergeBroken { class: String, output: String },
    NoOutputMisused { class: String },
    NotInvertible {
        output: String,
        mode: Mode,
        bucket: BaselineBucket,
        classes: Vec<String>,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Uncovered { class, mode, bucket } => write!(
                f,
                "uncovered combination ({class}, {mode}, {})",
                bucket.as_str()
            ),
            Violation::Ambiguous {
                class,
                mode,
                bucket,
                rows,
            } => write!(
                f,
                "ambiguous combination ({class}, {mode}, {}): colliding rows {rows:?}",
                bucket.as_str()
            ),
            Violation::UnknownClass { row, class } => {
                write!(f, "row {row} names unknown network class `{class}`")
            }
            Violation::UnknownOutput { row, output } => {
                write!(f, "row {row} produces `{output}` outside the output universe")
            }
            Violation::Unreachable { output } => {
                write!(f, "output class `{output}` is never produced")
            }
            Violation::NoMergeBroken { class, output } => {
                write!(f, "no-class `{class}` maps to `{output}` instead of the shared no output")
            }
            Violation::NoOutputMisused { class } => {
                write!(f, "non-no class `{class}` maps to the shared no output")
            }
            Violation::NotInvertible {
                output,
                mode,
                bucket,
                classes,
            } => write!(
                f,
                "output `{output}` under ({mode}, {}) comes from several classes {classes:?}",
                bucket.as_str()
            ),
        }
    }
}

/// Exhaustive check over every (class, mode served by its head, bucket).
///
/// An empty list means the table is total, unambiguous, merges the no-classes,
/// reaches its whole universe, and can be inverted to recover training labels.
pub fn validate_table(table: &MappingTable, layout: &HeadLayout) -> Vec<Violation> {
    let mut v = Vec::new();
    let known: BTreeSet<String> = layout.class_names().into_iter().collect();
    let universe: BTreeSet<&str> = table.universe.iter().map(String::as_str).collect();
    for (i, r) in table.rows.iter().enumerate() {
        if !known.contains(&r.class) {
            v.push(Violation::UnknownClass {
                row: i,
                class: r.class.clone(),
            });
        }
        if !universe.contains(r.output.as_str()) {
            v.push(Violation::UnknownOutput {
                row: i,
                output: r.output.clone(),
            });
        }
    }
    let mut produced = BTreeSet::new();
    for head in &layout.heads {
        for &mode in &head.modes {
            for bucket in BaselineBucket::ALL {
                let mut by_output: BTreeMap<&str, Vec<String>> = BTreeMap::new();
                for class in &head.classes {
                    let hits = table.best_matches(class, mode, bucket);
                    match hits[..] {
                        [] => v.push(Violation::Uncovered {
                            class: class.clone(),
                            mode,
                            bucket,
                        }),
                        [row] => {
                            let r = &table.rows[row];
                            produced.insert(r.output.as_str());
                            let is_no = head.no_class.as_deref() == Some(class.as_str());
                            if is_no && r.output != table.no_output {
                                v.push(Violation::NoMergeBroken {
                                    class: class.clone(),
                                    output: r.output.clone(),
                                });
                            }
                            if !is_no && r.output == table.no_output {
                                v.push(Violation::NoOutputMisused {
                                    class: class.clone(),
                                });
                            }
                            if !r.hazard {
                                by_output
                                    .entry(r.output.as_str())
                                    .or_default()
                                    .push(class.clone());
                            }
                        }
                        _ => v.push(Violation::Ambiguous {
                            class: class.clone(),
                            mode,
                            bucket,
                            rows: hits,
                        }),
                    }
                }
                for (output, classes) in by_output {
                    if classes.len() > 1 {
                        v.push(Violation::NotInvertible {
                            output: output.to_string(),
                            mode,
                            bucket,
                            classes,
                        });
                    }
                }
            }
        }
    }
    for u in &table.universe {
        if !produced.contains(u.as_str()) {
            v.push(Violation::Unreachable { output: u.clone() });
        }
    }
    v
}

/// Head layout and mapping table as one config document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadsConfig {
    pub heads: Vec<Head>,
    pub mapping: MappingTable,
}

impl HeadsConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("heads config: {e}")))
    }

    pub fn shipped() -> Self {
        Self::parse(DEFAULT_HEADS_TOML).expect("shipped heads config parses")
    }

    pub fn layout(&self) -> HeadLayout {
        HeadLayout {
            heads: self.heads.clone(),
        }
    }

    /// Parses and checks the layout and the table against each other.
    pub fn load(text: &str) -> Result<(HeadLayout, MappingTable)> {
        let cfg = Self::parse(text)?;
        let layout = cfg.layout();
        layout.validate()?;
        let violations = validate_table(&cfg.mapping, &layout);
        if !violations.is_empty() {
            let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(Error::config(format!(
                "mapping table rejected: {}",
                list.join("; ")
            )));
        }
        Ok((layout, cfg.mapping))
    }
}

/// Cross-entropy over the head serving `mode`; zero gradient everywhere else.
pub fn masked_loss(
    logits: &[f32],
    true_class: usize,
    mode: Mode,
    layout: &HeadLayout,
) -> Result<(f32, Vec<f32>)> {
    let h = layout.head_for_mode(mode)?;
    let subset: Vec<usize> = layout.range(h).collect();
    if !subset.contains(&true_class) {
        return Err(Error::data(format!(
            "class {} is not in head `{}` serving mode {mode}",
            layout
                .class_name(true_class)
                .map_or_else(|| true_class.to_string(), str::to_string),
            layout.heads[h].name
        )));
    }
    cross_entropy_loss(logits, true_class, &subset)
}

/// Argmax over the given indices, lowest index on ties.
pub fn restricted_argmax(logits: &[f32], subset: &[usize]) -> usize {
    let mut best = subset[0];
    for &i in &subset[1..] {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    best
}

/// Network class and head for a sample: argmax over the head serving `mode`.
pub fn predict(logits: &[f32], mode: Mode, layout: &HeadLayout) -> Result<(usize, usize)> {
    let h = layout.head_for_mode(mode)?;
    let subset: Vec<usize> = layout.range(h).collect();
    Ok((restricted_argmax(logits, &subset), h))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputVariant {
    SeparateNets,
    SingleHead,
    Multihead,
    SingleTrainMultiheadTest,
}

impl FromStr for OutputVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separate_nets" => Ok(OutputVariant::SeparateNets),
            "single_head" => Ok(OutputVariant::SingleHead),
            "multihead" => Ok(OutputVariant::Multihead),
            "single_train_multihead_test" => Ok(OutputVariant::SingleTrainMultiheadTest),
            other => Err(Error::config(format!("unknown output variant `{other}`"))),
        }
    }
}

/// How one network is trained and read out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetOutput {
    /// Loss partition used in training.
    pub layout: HeadLayout,
    /// Sample modes this network sees.
    pub modes: Vec<Mode>,
    /// Argmax candidates per mode at evaluation.
    pub eval_sets: BTreeMap<Mode, Vec<usize>>,
}

impl NetOutput {
    pub fn num_classes(&self) -> usize {
        self.layout.num_classes()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.layout.class_names()
    }

    pub fn predict(&self, logits: &[f32], mode: Mode) -> Result<usize> {
        let set = self
            .eval_sets
            .get(&mode)
            .ok_or_else(|| Error::config(format!("network does not serve mode {mode}")))?;
        Ok(restricted_argmax(logits, set))
    }

    /// Class index in this network's naming for a base-layout class name.
    pub fn translate(&self, base_name: &str, base: &HeadLayout) -> Result<usize> {
        let name = if base
            .heads
            .iter()
            .any(|h| h.no_class.as_deref() == Some(base_name))
            && self.layout.class_index(base_name).is_none()
        {
            SHARED_NO
        } else {
            base_name
        };
        self.layout
            .class_index(name)
            .ok_or_else(|| Error::data(format!("class `{base_name}` unknown to this network")))
    }
}

/// Name of the single no-class used by one-head variants.
pub const SHARED_NO: &str = "NO";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutputConfig {
    pub variant: OutputVariant,
    pub nets: Vec<NetOutput>,
}

impl OutputConfig {
    pub fn net_for_mode(&self, mode: Mode) -> Result<usize> {
        self.nets
            .iter()
            .position(|n| n.modes.contains(&mode))
            .ok_or_else(|| Error::config(format!("no network serves mode {mode}")))
    }
}

fn full_sets(layout: &HeadLayout, modes: &[Mode]) -> BTreeMap<Mode, Vec<usize>> {
    let all: Vec<usize> = (0..layout.num_classes()).collect();
    modes.iter().map(|&m| (m, all.clone())).collect()
}

/// Derives the training/readout setup of an output variant from the base layout.
pub fn configure_output(variant: OutputVariant, base: &HeadLayout) -> Result<OutputConfig> {
    base.validate()?;
    let nets = match variant {
        OutputVariant::Multihead => {
            let eval_sets = Mode::ALL
                .iter()
                .map(|&m| Ok((m, base.range(base.head_for_mode(m)?).collect())))
                .collect::<Result<_>>()?;
            vec![NetOutput {
                layout: base.clone(),
                modes: Mode::ALL.to_vec(),
                eval_sets,
            }]
        }
        OutputVariant::SeparateNets => base
            .heads
            .iter()
            .map(|h| {
                let layout = HeadLayout {
                    heads: vec![h.clone()],
                };
                NetOutput {
                    eval_sets: full_sets(&layout, &h.modes),
                    modes: h.modes.clone(),
                    layout,
                }
            })
            .collect(),
        OutputVariant::SingleHead | OutputVariant::SingleTrainMultiheadTest => {
            let mut classes: Vec<String> = base
                .heads
                .iter()
                .flat_map(|h| {
                    h.classes
                        .iter()
                        .filter(|c| h.no_class.as_deref() != Some(c.as_str()))
                        .cloned()
                })
                .collect();
            classes.push(SHARED_NO.to_string());
            let layout = HeadLayout {
                heads: vec![Head {
                    name: "ALL".into(),
                    modes: Mode::ALL.to_vec(),
                    classes,
                    no_class: Some(SHARED_NO.into()),
                }],
            };
            let eval_sets = if variant == OutputVariant::SingleHead {
                full_sets(&layout, &Mode::ALL)
            } else {
                let mut sets = BTreeMap::new();
                for m in Mode::ALL {
                    let h = &base.heads[base.head_for_mode(m)?];
                    let mut idx: Vec<usize> = h
                        .classes
                        .iter()
                        .filter(|c| h.no_class.as_deref() != Some(c.as_str()))
                        .map(|c| layout.class_index(c).expect("class present"))
                        .collect();
                    idx.push(layout.class_index(SHARED_NO).expect("shared no present"));
                    idx.sort_unstable();
                    sets.insert(m, idx);
                }
                sets
            };
            vec![NetOutput {
                layout,
                modes: Mode::ALL.to_vec(),
                eval_sets,
            }]
        }
    };
    Ok(OutputConfig { variant, nets })
}

/// Everything known about one classified sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OutputDecision {
    pub network_class: usize,
    pub network_class_name: String,
    pub head: String,
    pub presoftmax: Vec<f32>,
    pub output_class: String,
    /// CW recording classified as pulmonary vein (or any row marked hazard).
    pub hazard: bool,
    /// `None` until a confidence decision has been made.
    pub accepted: Option<bool>,
}

/// Restricted prediction followed by the table lookup.
pub fn decide_output(
    logits: &[f32],
    mode: Mode,
    baseline: f64,
    layout: &HeadLayout,
    table: &MappingTable,
) -> Result<OutputDecision> {
    let (class, head) = predict(logits, mode, layout)?;
    let name = layout.class_name(class).unwrap_or_default().to_string();
    let mapped = map_output(&name, mode, bucket_baseline(baseline)?, table)?;
    Ok(OutputDecision {
        network_class: class,
        network_class_name: name,
        head: layout.heads[head].name.clone(),
        presoftmax: logits.to_vec(),
        output_class: mapped.output.to_string(),
        hazard: mapped.hazard,
        accepted: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shipped() -> (HeadLayout, MappingTable) {
        HeadsConfig::load(DEFAULT_HEADS_TOML).unwrap()
    }

    #[test]
    fn buckets_at_boundaries() {
        assert_eq!(bucket_baseline(0.5).unwrap(), BaselineBucket::Zero);
        assert_eq!(bucket_baseline(0.0).unwrap(), BaselineBucket::Negative);
        assert_eq!(bucket_baseline(1.0).unwrap(), BaselineBucket::Positive);
        assert!(bucket_baseline(1.01).is_err());
        assert!(bucket_baseline(-0.01).is_err());
        assert_eq!(
            bucket_baseline_eps(0.501, 0.01).unwrap(),
            BaselineBucket::Zero
        );
    }

    #[test]
    fn heads_for_modes() {
        let (layout, _) = shipped();
        let name = |m| layout.heads[layout.head_for_mode(m).unwrap()].name.as_str();
        assert_eq!(name(Mode::Cw), "CWPW");
        assert_eq!(name(Mode::Pw), "CWPW");
        assert_eq!(name(Mode::Tvd), "TVD");
        let partial = HeadLayout {
            heads: vec![layout.heads[0].clone()],
        };
        assert!(matches!(
            partial.head_for_mode(Mode::Tvd),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn restricted_prediction_ignores_other_head() {
        let (layout, _) = shipped();
        let logits = [5.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 9.0, 0.0, 0.0];
        assert_eq!(predict(&logits, Mode::Cw, &layout).unwrap(), (0, 0));
        let flat = [0.0f32; 10];
        assert_eq!(predict(&flat, Mode::Tvd, &layout).unwrap().0, 6);
    }

    #[test]
    fn tvd_sample_has_zero_gradient_on_cwpw_units() {
        let (layout, _) = shipped();
        let logits = [0.3f32, -1.0, 2.0, 0.1, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let (loss, grad) = masked_loss(&logits, 7, Mode::Tvd, &layout).unwrap();
        assert!(grad[..6].iter().all(|g| g.to_bits() == 0));
        assert!((loss - 4f32.ln()).abs() < 1e-6);
        assert!(matches!(
            masked_loss(&logits, 2, Mode::Tvd, &layout),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn no_classes_merge() {
        let (_, table) = shipped();
        for m in Mode::ALL {
            for b in BaselineBucket::ALL {
                assert_eq!(map_output("NO_A", m, b, &table).unwrap().output, "NO");
            }
        }
        assert_eq!(
            map_output("NO_B", Mode::Tvd, BaselineBucket::Zero, &table)
                .unwrap()
                .output,
            "NO"
        );
    }

    #[test]
    fn explicit_lookup_tables() {
        let row = |class: &str, mode: &str, baseline: &str, output: &str| MappingRow {
            class: class.into(),
            mode: mode.parse().unwrap(),
            baseline: baseline.parse().unwrap(),
            output: output.into(),
            hazard: false,
        };
        let t = MappingTable {
            no_output: "NO".into(),
            universe: vec!["P".into(), "Q".into()],
            rows: vec![row("X", "CW", "ANY", "P"), row("X", "PW", "ANY", "Q")],
        };
        assert_eq!(
            map_output("X", Mode::Cw, BaselineBucket::Positive, &t)
                .unwrap()
                .output,
            "P"
        );
        let t = MappingTable {
            no_output: "NO".into(),
            universe: vec!["R".into(), "S".into(), "T".into()],
            rows: vec![
                row("Y", "ANY", "NEG", "R"),
                row("Y", "ANY", "ZERO", "S"),
                row("Y", "ANY", "POS", "T"),
            ],
        };
        assert_eq!(
            map_output("Y", Mode::Tvd, BaselineBucket::Zero, &t)
                .unwrap()
                .output,
            "S"
        );
    }

    #[test]
    fn specific_row_beats_any() {
        let t: MappingTable = toml::from_str(
            r#"
            no_output = "NO"
            universe = ["A", "B"]
            rows = [
              { class = "X", mode = "ANY", baseline = "ANY", output = "A" },
              { class = "X", mode = "CW", baseline = "ANY", output = "B" },
            ]"#,
        )
        .unwrap();
        let at = |m| map_output("X", m, BaselineBucket::Zero, &t).unwrap().output;
        assert_eq!(at(Mode::Cw), "B");
        assert_eq!(at(Mode::Pw), "A");
    }

    #[test]
    fn pv_under_cw_is_flagged() {
        let (layout, table) = shipped();
        let pv = layout.class_index("PV").unwrap();
        let mut logits = [0.0f32; 10];
        logits[pv] = 3.0;
        let d = decide_output(&logits, Mode::Cw, 0.5, &layout, &table).unwrap();
        assert_eq!(d.output_class, "PV");
        assert!(d.hazard);
        let d = decide_output(&logits, Mode::Pw, 0.5, &layout, &table).unwrap();
        assert!(!d.hazard);
    }

    #[test]
    fn labels_invert_to_network_classes() {
        let (layout, table) = shipped();
        let idx = |l, m, b| network_class_for(l, m, b, &layout, &table);
        assert_eq!(idx("AR", Mode::Cw, BaselineBucket::Positive).unwrap(), 0);
        assert_eq!(idx("LVOT", Mode::Pw, BaselineBucket::Zero).unwrap(), 0);
        assert_eq!(idx("NO", Mode::Tvd, BaselineBucket::Zero).unwrap(), 9);
        assert_eq!(idx("NO", Mode::Cw, BaselineBucket::Zero).unwrap(), 5);
        assert!(idx("AR", Mode::Pw, BaselineBucket::Positive).is_err());
        assert!(idx("PV", Mode::Cw, BaselineBucket::Zero).is_err());
    }

    #[test]
    fn variant_class_counts() {
        let (layout, _) = shipped();
        let single = configure_output(OutputVariant::SingleHead, &layout).unwrap();
        assert_eq!(single.nets[0].num_classes(), 9);
        let multi = configure_output(OutputVariant::Multihead, &layout).unwrap();
        assert_eq!(multi.nets[0].num_classes(), 10);
        let sep = configure_output(OutputVariant::SeparateNets, &layout).unwrap();
        let sizes: Vec<usize> = sep.nets.iter().map(|n| n.num_classes()).collect();
        assert_eq!(sizes, vec![6, 4]);
        assert!("two_heads".parse::<OutputVariant>().is_err());
    }

    #[test]
    fn mixed_variant_restricts_tvd_samples() {
        let (layout, _) = shipped();
        let cfg = configure_output(OutputVariant::SingleTrainMultiheadTest, &layout).unwrap();
        let net = &cfg.nets[0];
        let cwpw_only: Vec<usize> = ["ARAVO", "MRMVT", "PRPVO", "TR", "PV"]
            .iter()
            .map(|c| net.layout.class_index(c).unwrap())
            .collect();
        let mut logits = vec![0.0f32; 9];
        for &i in &cwpw_only {
            logits[i] = 100.0;
        }
        let p = net.predict(&logits, Mode::Tvd).unwrap();
        assert!(!cwpw_only.contains(&p));
        assert_eq!(net.layout.class_name(p), Some("TVD_1"));
    }
}
