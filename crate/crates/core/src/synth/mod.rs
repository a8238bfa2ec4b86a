//! Procedural phantom recordings.
//!
//! A "heart" made of four dark chambers and three bright walls sits inside a
//! tissue envelope. Each sample poses it randomly (shift, rotation, scale),
//! multiplies by Rayleigh speckle and smooths. A class template places the
//! ROI at one named anchor of the posed structure, so the class is only
//! recoverable by reading the ROI position against the anatomy.
//!
//! Coordinates in the config are fractions of the frame: `[row, col]`.

mod manifest;

pub use manifest::{
    image_bytes, load_recordings, parse_image, read_image, read_manifest, write_dataset,
    write_image, write_manifest, Manifest, ManifestRecord,
};

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::heads::{bucket_baseline, network_class_for, HeadLayout, MappingTable};
use crate::pipeline::{Image, Mode, Recording, Roi};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipse {
    pub name: String,
    pub center: [f64; 2],
    pub radii: [f64; 2],
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wall {
    pub name: String,
    pub from: [f64; 2],
    pub to: [f64; 2],
    /// Half thickness as a fraction of the frame width.
    pub half_width: f64,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anchor {
    pub name: String,
    pub at: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaselineRule {
    Point { value: f64 },
    Uniform { low: f64, high: f64 },
}

impl BaselineRule {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            BaselineRule::Point { value } => value,
            BaselineRule::Uniform { low, high } => rng.random_range(low..=high),
        }
    }

    fn validate(&self, label: &str) -> Result<()> {
        let ok = match *self {
            BaselineRule::Point { value } => (0.0..=1.0).contains(&value),
            BaselineRule::Uniform { low, high } => {
                // a signed sub-range stays on one side of 0.5
                (0.0..=1.0).contains(&low)
                    && (0.0..=1.0).contains(&high)
                    && low < high
                    && (high < 0.5 || low > 0.5)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "template `{label}` has an invalid baseline rule {self:?}"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    /// Output class this template produces.
    pub label: String,
    pub anchor: String,
    /// ROI jitter standard deviation as a fraction of the frame height.
    pub jitter: f64,
    pub mode: Mode,
    pub baseline: BaselineRule,
    /// Relative share of samples.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoShare {
    pub mode: Mode,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    /// Maximum shift as a fraction of each frame dimension.
    pub translate: f64,
    pub rotate_deg: f64,
    pub scale: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeckleSpec {
    /// Box smoothing radius in native pixels.
    pub smoothing: usize,
    /// 0 = no speckle, 1 = fully multiplicative Rayleigh.
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub unknown: usize,
    pub extra: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Degradation {
    /// Structure contrast multiplier (0.1 = ten times weaker).
    pub contrast: f64,
    pub speckle_strength: f64,
    pub max_bands: usize,
    /// Occlusion band height as a fraction of the frame height.
    pub band_height: f64,
    /// Grey level the whole image is pulled toward.
    pub wash: f64,
}

/// Relative nuisance changes between training and test sites.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteShift {
    pub gain: f64,
    pub pose: f64,
    pub jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub preset: String,
    pub rows: usize,
    pub cols: usize,
    pub background: f64,
    pub tissue: f64,
    pub envelope: [f64; 2],
    pub chambers: Vec<Ellipse>,
    pub walls: Vec<Wall>,
    pub pose: PoseSpec,
    pub intensity_jitter: f64,
    pub gain: f64,
    pub speckle: SpeckleSpec,
    pub anchors: Vec<Anchor>,
    pub held_out_anchors: Vec<Anchor>,
    pub templates: Vec<Template>,
    pub no_label: String,
    pub no_shares: Vec<NoShare>,
    pub counts: Counts,
    pub degradation: Degradation,
    /// Applied to the test split.
    pub test_shift: SiteShift,
}

pub const UNKNOWN_LABEL: &str = "UNKNOWN";
pub const EXTRA_LABEL: &str = "EXTRA";

fn anchor(name: &str, row: f64, col: f64) -> Anchor {
    Anchor {
        name: name.into(),
        at: [row, col],
    }
}

fn template(label: &str, anchor: &str, mode: Mode, baseline: BaselineRule, weight: f64) -> Template {
    Template {
        label: label.into(),
        anchor: anchor.into(),
        jitter: 0.012,
        mode,
        baseline,
        weight,
    }
}

const ZERO: BaselineRule = BaselineRule::Point { value: 0.5 };
const NEG: BaselineRule = BaselineRule::Uniform {
    low: 0.1,
    high: 0.45,
};
const POS: BaselineRule = BaselineRule::Uniform {
    low: 0.55,
    high: 0.9,
};

impl PhantomConfig {
    /// 128x64 frames, 2000/220/700/60/30 samples.
    pub fn desk() -> Self {
        let third = 1.0 / 3.0;
        let half = 0.5;
        use Mode::{Cw, Pw, Tvd};
        PhantomConfig {
            preset: "desk".into(),
            rows: 128,
            cols: 64,
            background: 0.1,
            tissue: 0.36,
            envelope: [0.46, 0.48],
            chambers: vec![
                Ellipse {
                    name: "lv".into(),
                    center: [0.40, 0.66],
                    radii: [0.17, 0.15],
                    intensity: 0.06,
                },
                Ellipse {
                    name: "rv".into(),
                    center: [0.40, 0.33],
                    radii: [0.15, 0.13],
                    intensity: 0.06,
                },
                Ellipse {
                    name: "la".into(),
                    center: [0.71, 0.66],
                    radii: [0.09, 0.14],
                    intensity: 0.08,
                },
                Ellipse {
                    name: "ra".into(),
                    center: [0.71, 0.33],
                    radii: [0.09, 0.12],
                    intensity: 0.08,
                },
            ],
            walls: vec![
                Wall {
                    name: "septum".into(),
                    from: [0.22, 0.50],
                    to: [0.80, 0.50],
                    half_width: 0.035,
                    intensity: 0.85,
                },
                Wall {
                    name: "valve_plane".into(),
                    from: [0.585, 0.17],
                    to: [0.585, 0.83],
                    half_width: 0.03,
                    intensity: 0.8,
                },
                Wall {
                    name: "lateral".into(),
                    from: [0.25, 0.84],
                    to: [0.78, 0.84],
                    half_width: 0.03,
                    intensity: 0.75,
                },
            ],
            pose: PoseSpec {
                translate: 0.15,
                rotate_deg: 20.0,
                scale: [0.85, 1.15],
            },
            intensity_jitter: 0.1,
            gain: 1.0,
            speckle: SpeckleSpec {
                smoothing: 1,
                strength: 0.6,
            },
            anchors: vec![
                anchor("aortic", 0.26, 0.56),
                anchor("mitral", 0.585, 0.66),
                anchor("pulmonic", 0.24, 0.30),
                anchor("tricuspid", 0.585, 0.33),
                anchor("pulm_vein", 0.80, 0.74),
                anchor("septal_annulus", 0.585, 0.50),
                anchor("lateral_annulus", 0.585, 0.84),
                anchor("rv_free_wall", 0.40, 0.17),
            ],
            held_out_anchors: vec![anchor("lv_apex", 0.23, 0.72), anchor("ra_roof", 0.79, 0.30)],
            templates: vec![
                template("AR", "aortic", Cw, POS, third),
                template("AVO", "aortic", Cw, ZERO, third),
                template("LVOT", "aortic", Pw, ZERO, third),
                template("MR", "mitral", Cw, NEG, third),
                template("MVT", "mitral", Cw, ZERO, third),
                template("MVI", "mitral", Pw, ZERO, third),
                template("PR", "pulmonic", Cw, POS, third),
                template("PVO", "pulmonic", Cw, ZERO, third),
                template("RVOT", "pulmonic", Pw, ZERO, third),
                template("TR", "tricuspid", Cw, NEG, half),
                template("TVI", "tricuspid", Pw, ZERO, half),
                template("PV", "pulm_vein", Pw, ZERO, 1.0),
                template("SEPT_E", "septal_annulus", Tvd, ZERO, half),
                template("SEPT_S", "septal_annulus", Tvd, POS, half),
                template("LAT_E", "lateral_annulus", Tvd, ZERO, half),
                template("LAT_S", "lateral_annulus", Tvd, POS, half),
                template("RV_E", "rv_free_wall", Tvd, ZERO, half),
                template("RV_S", "rv_free_wall", Tvd, POS, half),
            ],
            no_label: "NO".into(),
            no_shares: vec![
                NoShare {
                    mode: Cw,
                    weight: 0.5,
                },
                NoShare {
                    mode: Pw,
                    weight: 0.5,
                },
                NoShare {
                    mode: Tvd,
                    weight: 1.0,
                },
            ],
            counts: Counts {
                train: 2000,
                val: 220,
                test: 700,
                unknown: 60,
                extra: 30,
            },
            degradation: Degradation {
                contrast: 0.1,
                speckle_strength: 1.0,
                max_bands: 3,
                band_height: 0.08,
                wash: 0.5,
            },
            test_shift: SiteShift {
                gain: 0.08,
                pose: 0.1,
                jitter: 0.1,
            },
        }
    }

    /// 512x256 frames with the clinical split sizes.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.preset = "paper".into();
        c.rows = 512;
        c.cols = 256;
        c.speckle.smoothing = 4;
        c.counts = Counts {
            train: 3026,
            val: 336,
            test: 1424,
            unknown: 298,
            extra: 30,
        };
        c
    }

    /// Desk geometry with the TVD anchors moved onto CW/PW anchors, so the
    /// ROI position alone cannot tell the two heads apart.
    pub fn overlap() -> Self {
        let mut c = Self::desk();
        c.preset = "overlap".into();
        let at = |c: &PhantomConfig, name: &str| {
            c.anchors
                .iter()
                .find(|a| a.name == name)
                .expect("desk anchor")
                .at
        };
        let moves = [
            ("septal_annulus", "mitral"),
            ("lateral_annulus", "tricuspid"),
            ("rv_free_wall", "aortic"),
        ];
        for (tvd, onto) in moves {
            let dst = at(&c, onto);
            c.anchors
                .iter_mut()
                .find(|a| a.name == tvd)
                .expect("desk anchor")
                .at = dst;
        }
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "overlap" => Ok(Self::overlap()),
            other => Err(Error::config(format!(
                "unknown phantom preset `{other}` (desk, paper, overlap)"
            ))),
        }
    }

    pub fn anchor_at(&self, name: &str) -> Option<[f64; 2]> {
        self.anchors
            .iter()
            .chain(&self.held_out_anchors)
            .find(|a| a.name == name)
            .map(|a| a.at)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows < 8 || self.cols < 8 {
            return Err(Error::config("phantom frame must be at least 8x8"));
        }
        let inside = |p: [f64; 2]| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]);
        // canonical structure bounding box
        let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
        for e in &self.chambers {
            for d in 0..2 {
                lo[d] = lo[d].min(e.center[d] - e.radii[d]);
                hi[d] = hi[d].max(e.center[d] + e.radii[d]);
            }
        }
        for w in &self.walls {
            for d in 0..2 {
                lo[d] = lo[d].min(w.from[d].min(w.to[d]));
                hi[d] = hi[d].max(w.from[d].max(w.to[d]));
            }
        }
        for a in self.anchors.iter().chain(&self.held_out_anchors) {
            if !inside(a.at) || (0..2).any(|d| a.at[d] < lo[d] || a.at[d] > hi[d]) {
                return Err(Error::config(format!(
                    "anchor `{}` lies outside the structure bounding box",
                    a.name
                )));
            }
        }
        let template_anchors: BTreeSet<&str> =
            self.templates.iter().map(|t| t.anchor.as_str()).collect();
        for t in &self.templates {
            if !self.anchors.iter().any(|a| a.name == t.anchor) {
                return Err(Error::config(format!(
                    "template `{}` references unknown anchor `{}`",
                    t.label, t.anchor
                )));
            }
            if !(t.weight > 0.0) || !(t.jitter >= 0.0) {
                return Err(Error::config(format!(
                    "template `{}` needs positive weight and nonnegative jitter",
                    t.label
                )));
            }
            t.baseline.validate(&t.label)?;
        }
        for h in &self.held_out_anchors {
            if template_anchors.contains(h.name.as_str()) {
                return Err(Error::config(format!(
                    "held-out anchor `{}` is used by a template",
                    h.name
                )));
            }
        }
        if self.held_out_anchors.is_empty() {
            return Err(Error::config("at least one held-out anchor is required"));
        }
        if self.no_shares.iter().any(|s| !(s.weight >= 0.0)) {
            return Err(Error::config("NO shares must be nonnegative"));
        }
        let p = &self.pose;
        if !(p.translate >= 0.0 && p.rotate_deg >= 0.0 && 0.0 < p.scale[0] && p.scale[0] <= p.scale[1]) {
            return Err(Error::config("invalid pose ranges"));
        }
        if !(self.gain > 0.0) || !(0.0..=1.0).contains(&self.speckle.strength) {
            return Err(Error::config("gain must be positive and speckle strength in [0,1]"));
        }
        Ok(())
    }

    /// Checks the templates against a mapping table: every universe class
    /// other than the no-output has exactly one template, and every template
    /// maps back to a network class.
    pub fn check_against(&self, layout: &HeadLayout, table: &MappingTable) -> Result<()> {
        for u in &table.universe {
            if *u == table.no_output {
                continue;
            }
            let n = self.templates.iter().filter(|t| &t.label == u).count();
            if n != 1 {
                return Err(Error::config(format!(
                    "output class `{u}` has {n} templates, expected exactly 1"
                )));
            }
        }
        if self.no_label != table.no_output {
            return Err(Error::config(format!(
                "phantom no-label `{}` differs from the table's `{}`",
                self.no_label, table.no_output
            )));
        }
        for t in &self.templates {
            let b = match t.baseline {
                BaselineRule::Point { value } => value,
                BaselineRule::Uniform { low, high } => 0.5 * (low + high),
            };
            network_class_for(&t.label, t.mode, bucket_baseline(b)?, layout, table)?;
        }
        Ok(())
    }

    /// Config used for the shifted test site.
    pub fn site_shift(&self, shift: SiteShift) -> Result<Self> {
        if shift.gain.abs() > 0.2 || shift.pose.abs() > 0.25 || shift.jitter.abs() > 0.3 {
            return Err(Error::config(format!(
                "site shift {shift:?} outside bounds (gain 0.2, pose 0.25, jitter 0.3)"
            )));
        }
        let mut c = self.clone();
        if shift == SiteShift::default() {
            return Ok(c);
        }
        c.gain *= 1.0 + shift.gain;
        c.pose.translate *= 1.0 + shift.pose;
        c.pose.rotate_deg *= 1.0 + shift.pose;
        let mid = 1.0;
        c.pose.scale = [
            mid - (mid - c.pose.scale[0]) * (1.0 + shift.pose),
            mid + (c.pose.scale[1] - mid) * (1.0 + shift.pose),
        ];
        for t in &mut c.templates {
            t.jitter *= 1.0 + shift.jitter;
        }
        Ok(c)
    }
}

/// Deterministic 64-bit mixing of a base seed with a tag and an index.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Splits `n` into integer parts proportional to `weights` (largest remainder).
pub fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..weights.len()).collect();
    rest.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &i in rest.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

#[derive(Clone, Copy, Debug)]
struct Pose {
    shift: [f64; 2],
    cos: f64,
    sin: f64,
    scale: f64,
}

impl Pose {
    fn sample(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Self {
        let t = cfg.pose.translate;
        let sym = |rng: &mut ChaCha8Rng, a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
        let shift = [
            sym(rng, t) * cfg.rows as f64,
            sym(rng, t) * cfg.cols as f64,
        ];
        let theta = sym(rng, cfg.pose.rotate_deg).to_radians();
        let [lo, hi] = cfg.pose.scale;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Pose {
            shift,
            cos: theta.cos(),
            sin: theta.sin(),
            scale,
        }
    }

    /// Canonical pixel position to posed pixel position.
    fn forward(&self, p: [f64; 2], centre: [f64; 2]) -> [f64; 2] {
        let (dy, dx) = (p[0] - centre[0], p[1] - centre[1]);
        [
            centre[0] + self.shift[0] + self.scale * (self.cos * dy - self.sin * dx),
            centre[1] + self.shift[1] + self.scale * (self.sin * dy + self.cos * dx),
        ]
    }

    fn inverse(&self, q: [f64; 2], centre: [f64; 2]) -> [f64; 2] {
        let (dy, dx) = (
            (q[0] - centre[0] - self.shift[0]) / self.scale,
            (q[1] - centre[1] - self.shift[1]) / self.scale,
        );
        [
            centre[0] + self.cos * dy + self.sin * dx,
            centre[1] - self.sin * dy + self.cos * dx,
        ]
    }
}

fn box_blur(data: &[f32], rows: usize, cols: usize, radius: usize) -> Vec<f32> {
    if radius == 0 {
        return data.to_vec();
    }
    let pass = |src: &[f32], along_rows: bool| -> Vec<f32> {
        let mut out = vec![0.0f32; src.len()];
        for r in 0..rows {
            for c in 0..cols {
                let (pos, len) = if along_rows { (c, cols) } else { (r, rows) };
                let lo = pos.saturating_sub(radius);
                let hi = (pos + radius).min(len - 1);
                let mut s = 0.0;
                for k in lo..=hi {
                    s += if along_rows {
                        src[r * cols + k]
                    } else {
                        src[k * cols + c]
                    };
                }
                out[r * cols + c] = s / (hi - lo + 1) as f32;
            }
        }
        out
    };
    pass(&pass(data, true), false)
}

/// `std(blur) / std(image - blur)`: large when coarse structure dominates speckle.
pub fn structure_contrast(image: &Image, radius: usize) -> f64 {
    let blur = box_blur(&image.data, image.rows, image.cols, radius);
    let std = |v: &mut dyn Iterator<Item = f64>| {
        let xs: Vec<f64> = v.collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
    };
    let s_blur = std(&mut blur.iter().map(|&v| v as f64));
    let s_res = std(&mut image.data.iter().zip(&blur).map(|(&a, &b)| (a - b) as f64));
    s_blur / s_res.max(1e-12)
}

/// Radius used by [`structure_contrast`] for a config.
pub fn contrast_radius(cfg: &PhantomConfig) -> usize {
    (cfg.rows / 32).max(2)
}

enum Content<'a> {
    Structure { pose: Pose, jitter: [f64; 3] },
    Blank { level: f64 },
    Degraded { pose: Pose, jitter: [f64; 3], deg: &'a Degradation },
}

fn in_ellipse(p: [f64; 2], c: [f64; 2], r: [f64; 2]) -> bool {
    let (a, b) = ((p[0] - c[0]) / r[0], (p[1] - c[1]) / r[1]);
    a * a + b * b <= 1.0
}

fn near_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2], half: f64) -> bool {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ey, ex) = (p[0] - a[0] - t * d[0], p[1] - a[1] - t * d[1]);
    ey * ey + ex * ex <= half * half
}

/// Noise-free intensity of the canonical structure at a canonical pixel.
fn structure_value(cfg: &PhantomConfig, p: [f64; 2], jitter: [f64; 3]) -> f64 {
    let (h, w) = (cfg.rows as f64, cfg.cols as f64);
    let px = |f: [f64; 2]| [f[0] * h, f[1] * w];
    for wall in &cfg.walls {
        if near_segment(p, px(wall.from), px(wall.to), wall.half_width * w) {
            return wall.intensity * jitter[2];
        }
    }
    for e in &cfg.chambers {
        if in_ellipse(p, px(e.center), [e.radii[0] * h, e.radii[1] * w]) {
            return e.intensity * jitter[1];
        }
    }
    if in_ellipse(p, [0.5 * h, 0.5 * w], [cfg.envelope[0] * h, cfg.envelope[1] * w]) {
        cfg.tissue * jitter[0]
    } else {
        cfg.background
    }
}

fn rayleigh(rng: &mut ChaCha8Rng) -> f64 {
    // unit-mean Rayleigh via the inverse CDF
    let sigma = (2.0 / std::f64::consts::PI).sqrt();
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    sigma * (-2.0 * u.ln()).sqrt()
}

fn render(cfg: &PhantomConfig, content: &Content<'_>, rng: &mut ChaCha8Rng) -> Image {
    let (rows, cols) = (cfg.rows, cfg.cols);
    let centre = [rows as f64 / 2.0, cols as f64 / 2.0];
    let mut base = vec![0.0f64; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let q = [r as f64 + 0.5, c as f64 + 0.5];
            base[r * cols + c] = match content {
                Content::Blank { level } => *level,
                Content::Structure { pose, jitter } => {
                    structure_value(cfg, pose.inverse(q, centre), *jitter)
                }
                Content::Degraded { pose, jitter, deg } => {
                    let v = structure_value(cfg, pose.inverse(q, centre), *jitter);
                    cfg.tissue + deg.contrast * (v - cfg.tissue)
                }
            };
        }
    }
    let strength = match content {
        Content::Degraded { deg, .. } => deg.speckle_strength,
        _ => cfg.speckle.strength,
    };
    let noisy: Vec<f32> = base
        .iter()
        .map(|&b| (b * ((1.0 - strength) + strength * rayleigh(rng))) as f32)
        .collect();
    let mut data = box_blur(&noisy, rows, cols, cfg.speckle.smoothing);
    if let Content::Degraded { deg, .. } = content {
        let bands = rng.random_range(1..=deg.max_bands.max(1));
        let height = ((deg.band_height * rows as f64).round() as usize).max(1);
        for _ in 0..bands {
            let start = rng.random_range(0..rows.saturating_sub(height).max(1));
            for r in start..(start + height).min(rows) {
                for v in &mut data[r * cols..(r + 1) * cols] {
                    *v *= 0.6;
                }
            }
        }
        let wash = deg.wash as f32;
        for v in &mut data {
            *v = wash * 0.5 + (1.0 - wash) * *v;
        }
    }
    let gain = cfg.gain as f32;
    for v in &mut data {
        *v = (*v * gain).clamp(0.0, 1.0);
    }
    Image {
        rows,
        cols,
        data,
    }
}

fn intensity_jitter(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let j = cfg.intensity_jitter;
    let mut draw = || if j > 0.0 { 1.0 + rng.random_range(-j..=j) } else { 1.0 };
    [draw(), draw(), draw()]
}

const POSE_RETRIES: usize = 50;

/// Samples a pose whose posed anchor plus jitter lands inside the frame.
fn place_roi(
    cfg: &PhantomConfig,
    anchor_name: &str,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Pose, Roi)> {
    let at = cfg
        .anchor_at(anchor_name)
        .ok_or_else(|| Error::config(format!("unknown anchor `{anchor_name}`")))?;
    let (h, w) = (cfg.rows as f64, cfg.cols as f64);
    let canon = [at[0] * h, at[1] * w];
    let centre = [h / 2.0, w / 2.0];
    let normal = rand_distr::Normal::new(0.0, jitter * h)
        .map_err(|e| Error::config(format!("bad jitter: {e}")))?;
    for _ in 0..POSE_RETRIES {
        let pose = Pose::sample(cfg, rng);
        let p = pose.forward(canon, centre);
        let row = p[0] + rng.sample(normal);
        let col = p[1] + rng.sample(normal);
        if (0.0..=h - 1.0).contains(&row) && (0.0..=w - 1.0).contains(&col) {
            return Ok((pose, Roi { row, col }));
        }
    }
    Err(Error::config(format!(
        "anchor `{anchor_name}` left the frame in {POSE_RETRIES} pose draws"
    )))
}

/// What one sample of a split is.
#[derive(Clone, Debug, PartialEq)]
enum Slot {
    Template(usize),
    No(Mode),
}

fn split_slots(cfg: &PhantomConfig, n: usize) -> Vec<Slot> {
    let mut weights: Vec<f64> = cfg.templates.iter().map(|t| t.weight).collect();
    weights.extend(cfg.no_shares.iter().map(|s| s.weight));
    let counts = apportion(n, &weights);
    let mut slots = Vec::with_capacity(n);
    for (i, &k) in counts.iter().enumerate() {
        let slot = if i < cfg.templates.len() {
            Slot::Template(i)
        } else {
            Slot::No(cfg.no_shares[i - cfg.templates.len()].mode)
        };
        slots.extend(std::iter::repeat_n(slot, k));
    }
    slots
}

fn shuffle<T>(items: &mut [T], seed: u64) {
    use rand::seq::SliceRandom;
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
}

pub const SPLITS: [&str; 5] = ["train", "val", "test", "unknown", "extra"];

impl Counts {
    pub fn get(&self, split: &str) -> Option<usize> {
        Some(match split {
            "train" => self.train,
            "val" => self.val,
            "test" => self.test,
            "unknown" => self.unknown,
            "extra" => self.extra,
            _ => return None,
        })
    }
}

/// Generates one labeled split in memory.
///
/// The test split renders with `cfg.test_shift` applied. Per-class counts
/// follow the template weights exactly (largest remainder).
pub fn generate_split(cfg: &PhantomConfig, seed: u64, split: &str) -> Result<Vec<Recording>> {
    cfg.validate()?;
    let n = match split {
        "train" | "val" | "test" => cfg.counts.get(split).expect("known split"),
        "unknown" | "extra" => return generate_special(cfg, seed, split),
        other => return Err(Error::config(format!("unknown split `{other}`"))),
    };
    let shifted;
    let gen_cfg = if split == "test" {
        shifted = cfg.site_shift(cfg.test_shift)?;
        &shifted
    } else {
        cfg
    };
    let mut slots = split_slots(cfg, n);
    shuffle(&mut slots, derive_seed(seed, split, u64::MAX));
    slots
        .iter()
        .enumerate()
        .map(|(i, slot)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, split, i as u64));
            match slot {
                Slot::Template(t) => {
                    let t = &gen_cfg.templates[*t];
                    let (pose, roi) = place_roi(gen_cfg, &t.anchor, t.jitter, &mut rng)?;
                    let jitter = intensity_jitter(gen_cfg, &mut rng);
                    let baseline = t.baseline.sample(&mut rng);
                    let image = render(gen_cfg, &Content::Structure { pose, jitter }, &mut rng);
                    Ok(Recording {
                        image,
                        roi,
                        baseline,
                        mode: t.mode,
                        label: Some(t.label.clone()),
                        split: split.to_string(),
                    })
                }
                Slot::No(mode) => {
                    let (h, w) = (gen_cfg.rows as f64, gen_cfg.cols as f64);
                    let roi = Roi {
                        row: rng.random_range(0.0..h - 1.0),
                        col: rng.random_range(0.0..w - 1.0),
                    };
                    let baseline = rng.random_range(0.0..=1.0);
                    let level = gen_cfg.tissue * intensity_jitter(gen_cfg, &mut rng)[0];
                    let image = render(gen_cfg, &Content::Blank { level }, &mut rng);
                    Ok(Recording {
                        image,
                        roi,
                        baseline,
                        mode: *mode,
                        label: Some(gen_cfg.no_label.clone()),
                        split: split.to_string(),
                    })
                }
            }
        })
        .collect()
}

fn generate_special(cfg: &PhantomConfig, seed: u64, split: &str) -> Result<Vec<Recording>> {
    let n = cfg.counts.get(split).expect("known split");
    let mut out = Vec::with_capacity(n);
    if split == "unknown" {
        let weights: Vec<f64> = cfg.templates.iter().map(|t| t.weight).collect();
        let mut slots: Vec<usize> = apportion(n, &weights)
            .into_iter()
            .enumerate()
            .flat_map(|(i, k)| std::iter::repeat_n(i, k))
            .collect();
        shuffle(&mut slots, derive_seed(seed, split, u64::MAX));
        for (i, &t) in slots.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, split, i as u64));
            let t = &cfg.templates[t];
            let (pose, roi) = place_roi(cfg, &t.anchor, t.jitter, &mut rng)?;
            let jitter = intensity_jitter(cfg, &mut rng);
            let baseline = t.baseline.sample(&mut rng);
            let content = Content::Degraded {
                pose,
                jitter,
                deg: &cfg.degradation,
            };
            out.push(Recording {
                image: render(cfg, &content, &mut rng),
                roi,
                baseline,
                mode: t.mode,
                label: Some(UNKNOWN_LABEL.into()),
                split: split.into(),
            });
        }
    } else {
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, split, i as u64));
            let a = &cfg.held_out_anchors[i % cfg.held_out_anchors.len()];
            let jitter = cfg.templates.first().map_or(0.012, |t| t.jitter);
            let (pose, roi) = place_roi(cfg, &a.name, jitter, &mut rng)?;
            let ij = intensity_jitter(cfg, &mut rng);
            let mode = Mode::ALL[rng.random_range(0..Mode::ALL.len())];
            out.push(Recording {
                image: render(cfg, &Content::Structure { pose, jitter: ij }, &mut rng),
                roi,
                baseline: 0.5,
                mode,
                label: Some(EXTRA_LABEL.into()),
                split: split.into(),
            });
        }
    }
    Ok(out)
}

/// The unknown and extra sets.
pub fn generate_special_sets(cfg: &PhantomConfig, seed: u64) -> Result<(Vec<Recording>, Vec<Recording>)> {
    cfg.validate()?;
    Ok((
        generate_special(cfg, seed, "unknown")?,
        generate_special(cfg, seed, "extra")?,
    ))
}

/// Per-split label counts as `(label, mode, count)`, sorted.
pub fn label_counts(recs: &[Recording]) -> Vec<(String, Mode, usize)> {
    let mut map = std::collections::BTreeMap::new();
    for r in recs {
        *map.entry((r.label.clone().unwrap_or_default(), r.mode))
            .or_insert(0usize) += 1;
    }
    map.into_iter().map(|((l, m), n)| (l, m, n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::HeadsConfig;

    fn small() -> PhantomConfig {
        let mut c = PhantomConfig::desk();
        c.counts = Counts {
            train: 42,
            val: 10,
            test: 21,
            unknown: 6,
            extra: 4,
        };
        c
    }

    #[test]
    fn presets_validate_against_shipped_table() {
        let (layout, table) = HeadsConfig::load(crate::heads::DEFAULT_HEADS_TOML).unwrap();
        for name in ["desk", "paper", "overlap"] {
            let c = PhantomConfig::preset(name).unwrap();
            c.validate().unwrap();
            c.check_against(&layout, &table).unwrap();
        }
    }

    #[test]
    fn paper_counts() {
        let c = PhantomConfig::paper().counts;
        assert_eq!(c.train + c.val, 3362);
        assert_eq!((c.test, c.unknown, c.extra), (1424, 298, 30));
    }

    #[test]
    fn generation_is_deterministic() {
        let c = small();
        let a = generate_split(&c, 5, "train").unwrap();
        let b = generate_split(&c, 5, "train").unwrap();
        assert_eq!(a, b);
        let d = generate_split(&c, 6, "train").unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn counts_follow_weights() {
        let c = small();
        let recs = generate_split(&c, 1, "train").unwrap();
        assert_eq!(recs.len(), 42);
        let mut weights: Vec<f64> = c.templates.iter().map(|t| t.weight).collect();
        weights.extend(c.no_shares.iter().map(|s| s.weight));
        let expect = apportion(42, &weights);
        for (i, t) in c.templates.iter().enumerate() {
            let n = recs
                .iter()
                .filter(|r| r.label.as_deref() == Some(&t.label))
                .count();
            assert_eq!(n, expect[i], "{}", t.label);
        }
    }

    #[test]
    fn rois_inside_frame() {
        let c = small();
        for split in SPLITS {
            for r in generate_split(&c, 9, split).unwrap() {
                r.validate().unwrap();
            }
        }
    }

    #[test]
    fn apportion_sums() {
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(apportion(0, &[1.0, 2.0]), vec![0, 0]);
        assert_eq!(apportion(7, &[0.5, 0.5]).iter().sum::<usize>(), 7);
    }

    #[test]
    fn zero_shift_is_identity() {
        let c = PhantomConfig::desk();
        assert_eq!(c.site_shift(SiteShift::default()).unwrap(), c);
        assert!(c
            .site_shift(SiteShift {
                gain: 0.3,
                ..SiteShift::default()
            })
            .is_err());
    }

    #[test]
    fn pose_inverse_round_trips() {
        let p = Pose {
            shift: [3.0, -2.0],
            cos: 0.3f64.cos(),
            sin: 0.3f64.sin(),
            scale: 1.1,
        };
        let c = [64.0, 32.0];
        let q = p.forward([10.0, 20.0], c);
        let back = p.inverse(q, c);
        assert!((back[0] - 10.0).abs() < 1e-9 && (back[1] - 20.0).abs() < 1e-9);
    }

    #[test]
    fn extra_anchors_disjoint_from_templates() {
        let c = PhantomConfig::desk();
        for h in &c.held_out_anchors {
            assert!(c.templates.iter().all(|t| t.anchor != h.name));
        }
    }

    #[test]
    fn bad_template_anchor_rejected() {
        let mut c = PhantomConfig::desk();
        c.templates[0].anchor = "nowhere".into();
        assert!(c.validate().is_err());
    }
}
