//! Turns a [`Recording`] into the network's input.
//!
//! Order of operations: render the ROI heatmap at native resolution, rescale
//! image and heatmap jointly to `S x S` (bilinear), subtract per-channel
//! means, then crop to `C x C`. The heatmap has unit peak; because the native
//! frame is taller than it is wide, the joint rescale squeezes it vertically.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "CW")]
    Cw,
    #[serde(rename = "PW")]
    Pw,
    #[serde(rename = "TVD")]
    Tvd,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Cw, Mode::Pw, Mode::Tvd];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Cw => "CW",
            Mode::Pw => "PW",
            Mode::Tvd => "TVD",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CW" => Ok(Mode::Cw),
            "PW" => Ok(Mode::Pw),
            "TVD" => Ok(Mode::Tvd),
            other => Err(Error::input("mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// Grayscale beam-space image, rows = depth, cols = beams, values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::input(
                "image",
                format!("{rows}x{cols} image with {} pixels", data.len()),
            ));
        }
        Ok(Image { rows, cols, data })
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// ROI cursor position in native pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub row: f64,
    pub col: f64,
}

/// One Doppler acquisition reduced to the inputs the classifier uses.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub image: Image,
    pub roi: Roi,
    /// Spectral baseline position in `[0,1]`; 0.5 is the unshifted default.
    pub baseline: f64,
    pub mode: Mode,
    /// Output-class name; `None` for unlabeled inference inputs.
    pub label: Option<String>,
    pub split: String,
}

impl Recording {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.image.rows as f64, self.image.cols as f64);
        if !(self.roi.row >= 0.0 && self.roi.row < h) {
            return Err(Error::input(
                "roi_row",
                format!("{} outside [0, {h})", self.roi.row),
            ));
        }
        if !(self.roi.col >= 0.0 && self.roi.col < w) {
            return Err(Error::input(
                "roi_col",
                format!("{} outside [0, {w})", self.roi.col),
            ));
        }
        if !(0.0..=1.0).contains(&self.baseline) {
            return Err(Error::input(
                "baseline",
                format!("{} outside [0, 1]", self.baseline),
            ));
        }
        if let Some(i) = self
            .image
            .data
            .iter()
            .position(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::input(
                "image",
                format!("pixel {i} = {} outside [0, 1]", self.image.data[i]),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Heatmap standard deviation in native pixels.
    pub sigma: f64,
    /// Side length after the joint rescale.
    pub size: usize,
    /// Crop side length fed to the network.
    pub crop: usize,
    pub image_mean: f64,
    pub heatmap_mean: f64,
    /// `false` drops the heatmap channel (image-only ablation).
    #[serde(default = "yes")]
    pub use_heatmap: bool,
}

fn yes() -> bool {
    true
}

impl PipelineConfig {
    /// 512x256 native frames, rescale to 256, crop 224.
    pub fn paper() -> Self {
        PipelineConfig {
            sigma: 10.0,
            size: 256,
            crop: 224,
            image_mean: 0.3,
            heatmap_mean: 0.0068,
            use_heatmap: true,
        }
    }

    /// Quarter-scale geometry for 128x64 native frames: rescale to 64, crop 56.
    pub fn desk() -> Self {
        PipelineConfig {
            sigma: 2.5,
            size: 64,
            crop: 56,
            image_mean: 0.3,
            heatmap_mean: 0.0068,
            use_heatmap: true,
        }
    }

    pub fn channels(&self) -> usize {
        if self.use_heatmap {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.size == 0 || self.crop == 0 {
            return Err(Error::config("rescale and crop sizes must be positive"));
        }
        if self.crop > self.size {
            return Err(Error::config(format!(
                "crop {} larger than rescaled size {}",
                self.crop, self.size
            )));
        }
        Ok(())
    }
}

/// `exp(-((r - roi.row)^2 + (c - roi.col)^2) / (2 sigma^2))` over an `H x W` grid.
pub fn render_heatmap(roi: Roi, dims: (usize, usize), sigma: f64) -> Result<DenseArray<f32>> {
    let (h, w) = dims;
    if !(roi.row >= 0.0 && roi.row < h as f64) {
        return Err(Error::input("roi_row", format!("{} outside [0, {h})", roi.row)));
    }
    if !(roi.col >= 0.0 && roi.col < w as f64) {
        return Err(Error::input("roi_col", format!("{} outside [0, {w})", roi.col)));
    }
    if !(sigma > 0.0) {
        return Err(Error::config(format!("sigma must be positive, got {sigma}")));
    }
    let denom = 2.0 * sigma * sigma;
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        let dr = r as f64 - roi.row;
        for c in 0..w {
            let dc = c as f64 - roi.col;
            data.push((-(dr * dr + dc * dc) / denom).exp() as f32);
        }
    }
    DenseArray::from_vec(&[h, w], data)
}

/// Bilinear resize with pixel-centre alignment (edge samples clamp).
pub fn resize_bilinear(src: &[f32], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f32> {
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (pos - i0 as f64) as f32)
            })
            .collect()
    };
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Normalized network input before cropping: `channels x S x S`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedInput {
    pub channels: DenseArray<f32>,
    pub mode: Mode,
}

impl EncodedInput {
    pub fn side(&self) -> usize {
        self.channels.shape()[1]
    }

    pub fn num_channels(&self) -> usize {
        self.channels.shape()[0]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        self.channels.item(c)
    }
}

/// Rescaled but not yet mean-subtracted channels (image, heatmap).
pub fn rescaled_channels(rec: &Recording, cfg: &PipelineConfig) -> Result<(Vec<f32>, Vec<f32>)> {
    cfg.validate()?;
    rec.validate()?;
    let dims = (rec.image.rows, rec.image.cols);
    let heat = render_heatmap(rec.roi, dims, cfg.sigma)?;
    let s = (cfg.size, cfg.size);
    Ok((
        resize_bilinear(&rec.image.data, dims, s),
        resize_bilinear(heat.data(), dims, s),
    ))
}

pub fn assemble_input(rec: &Recording, cfg: &PipelineConfig) -> Result<EncodedInput> {
    let (mut img, mut heat) = rescaled_channels(rec, cfg)?;
    let (im, hm) = (cfg.image_mean as f32, cfg.heatmap_mean as f32);
    img.iter_mut().for_each(|v| *v -= im);
    let mut data = img;
    if cfg.use_heatmap {
        heat.iter_mut().for_each(|v| *v -= hm);
        data.extend_from_slice(&heat);
    }
    Ok(EncodedInput {
        channels: DenseArray::from_vec(&[cfg.channels(), cfg.size, cfg.size], data)?,
        mode: rec.mode,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    Random(u64),
    Center,
}

/// Crop offsets `(row, col)` for a `size` crop out of a `side` square.
pub fn crop_offsets(side: usize, size: usize, mode: CropMode) -> Result<(usize, usize)> {
    if size > side {
        return Err(Error::config(format!("crop {size} larger than input {side}")));
    }
    let span = side - size;
    Ok(match mode {
        CropMode::Center => (span / 2, span / 2),
        CropMode::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (rng.random_range(0..=span), rng.random_range(0..=span))
        }
    })
}

/// Crops every channel identically; returns `channels x size x size` and the offsets.
pub fn crop(
    input: &EncodedInput,
    size: usize,
    mode: CropMode,
) -> Result<(DenseArray<f32>, (usize, usize))> {
    let side = input.side();
    let (oy, ox) = crop_offsets(side, size, mode)?;
    let ch = input.num_channels();
    let mut out = Vec::with_capacity(ch * size * size);
    for c in 0..ch {
        let plane = input.plane(c);
        for r in 0..size {
            let start = (oy + r) * side + ox;
            out.extend_from_slice(&plane[start..start + size]);
        }
    }
    Ok((DenseArray::from_vec(&[ch, size, size], out)?, (oy, ox)))
}

/// Index of the largest value in a plane (first on ties), as `(row, col)`.
pub fn argmax2d(plane: &[f32], cols: usize) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in plane.iter().enumerate() {
        if v > plane[best] {
            best = i;
        }
    }
    (best / cols, best % cols)
}
