//! Synthetic THz-TDS waveform generator for a raster-scanned 3-layer,
//! 6-surface sample with pencil-drawn binary content.
//!
//! Each waveform is a sum of six Ricker-wavelet echoes, one per surface,
//! with
//! - reflectance chosen by the surface's drawn/blank bit,
//! - a two-pass transmission penalty through every anterior surface
//!   (drawn graphite attenuates more: the shadow effect),
//! - one depth-jitter draw per waveform (rigid sample on a vibrating
//!   stage) and i.i.d. Gaussian sensor noise per time sample.
//!
//! Front/back echoes of a layer sit 1.2 pulse widths apart, close enough
//! to overlap. Generation is fully deterministic: every waveform derives
//! its own random stream from `(seed, pixel, scan)`.

use crate::rng::seeded_rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ThzError {
    #[error("pixel ({row}, {col}) outside an {side}x{side} grid")]
    OutOfRangePixel { row: usize, col: usize, side: usize },
    #[error("scan ({row}, {col}) outside an {side}x{side} grid")]
    OutOfRangeScan { row: usize, col: usize, side: usize },
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("malformed scene text: {0}")]
    SceneFormat(String),
}

// stream tags for derived rngs
const TAG_SCENE: u64 = 1;
const TAG_WAVEFORM: u64 = 2;
const TAG_SPLIT: u64 = 3;

/// Geometry, material and noise constants of the synthetic experiment.
/// Times are picoseconds; reflectances and transmissions are unitless.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub n_layers: usize,
    pub pixels_per_side: usize,
    pub scans_per_pixel_side: usize,
    pub samples_per_waveform: usize,
    pub time_window: f64,
    /// Nominal echo arrival times, strictly increasing, one per surface in
    /// order L1-front, L1-back, L2-front, ...
    pub surface_delays: Vec<f64>,
    pub pulse_width: f64,
    pub reflect_blank: f64,
    pub reflect_drawn: f64,
    pub transmit_blank: f64,
    pub transmit_drawn: f64,
    pub depth_jitter_std: f64,
    pub noise_std: f64,
    pub seed: u64,
}

/// Layer fronts every 8 ps starting at 8 ps; backs 1.2 pulse widths later.
fn default_delays(n_layers: usize, pulse_width: f64) -> Vec<f64> {
    let mut delays = Vec::with_capacity(2 * n_layers);
    for layer in 0..n_layers {
        let front = 8.0 + 8.0 * layer as f64;
        delays.push(front);
        delays.push(front + 1.2 * pulse_width);
    }
    delays
}

impl Default for SceneConfig {
    fn default() -> Self {
        let pulse_width = 0.8;
        SceneConfig {
            n_layers: 3,
            pixels_per_side: 8,
            scans_per_pixel_side: 10,
            samples_per_waveform: 196,
            time_window: 40.0,
            surface_delays: default_delays(3, pulse_width),
            pulse_width,
            reflect_blank: 0.15,
            reflect_drawn: 0.45,
            transmit_blank: 0.95,
            transmit_drawn: 0.88,
            depth_jitter_std: 0.05,
            noise_std: 0.015,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn n_surfaces(&self) -> usize {
        2 * self.n_layers
    }

    pub fn n_pixels(&self) -> usize {
        self.pixels_per_side * self.pixels_per_side
    }

    pub fn scans_per_pixel(&self) -> usize {
        self.scans_per_pixel_side * self.scans_per_pixel_side
    }

    /// Uniform time grid over `[0, time_window]`, endpoints included.
    pub fn time_grid(&self) -> Vec<f64> {
        let n = self.samples_per_waveform;
        let dt = self.time_window / (n - 1) as f64;
        (0..n).map(|i| i as f64 * dt).collect()
    }

    /// Per-pixel split sizes: train 60%, validation 10%, test the rest.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let total = self.scans_per_pixel();
        let train = (total as f64 * 0.6).round() as usize;
        let valid = (total as f64 * 0.1).round() as usize;
        (train, valid, total - train - valid)
    }

    pub fn validate(&self) -> Result<(), ThzError> {
        let fail = |msg: &str| Err(ThzError::InvalidConfig(msg.into()));
        if self.n_layers == 0 {
            return fail("need at least one layer");
        }
        if self.pixels_per_side == 0 || self.scans_per_pixel_side == 0 {
            return fail("pixel and scan grids must be nonempty");
        }
        if self.samples_per_waveform < 2 {
            return fail("need at least two time samples");
        }
        if !(self.time_window > 0.0) || !(self.pulse_width > 0.0) {
            return fail("time_window and pulse_width must be positive");
        }
        if self.surface_delays.len() != self.n_surfaces() {
            return fail("surface_delays length must be 2 * n_layers");
        }
        if self.surface_delays.windows(2).any(|w| w[0] >= w[1]) {
            return fail("surface_delays must be strictly increasing");
        }
        for (name, v) in [
            ("reflect_blank", self.reflect_blank),
            ("reflect_drawn", self.reflect_drawn),
            ("transmit_blank", self.transmit_blank),
            ("transmit_drawn", self.transmit_drawn),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(ThzError::InvalidConfig(format!("{name} must be in (0, 1)")));
            }
        }
        // equality is allowed so shadow-free control datasets can be built
        if self.transmit_drawn > self.transmit_blank {
            return fail("transmit_drawn must not exceed transmit_blank (shadow mechanism)");
        }
        if self.depth_jitter_std < 0.0 || self.noise_std < 0.0 {
            return fail("noise deviations must be nonnegative");
        }
        let (train, valid, test) = self.split_counts();
        if train == 0 || valid == 0 || test == 0 {
            return fail("scan grid too small for a 60/10/30 split per pixel");
        }
        Ok(())
    }
}

/// Binary content of the six surfaces; one bit per pixel per surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    bitmaps: Vec<Vec<u8>>,
}

impl Scene {
    /// Wraps explicit bitmaps; every map must be the same square size with
    /// values in {0, 1}.
    pub fn from_bitmaps(bitmaps: Vec<Vec<u8>>) -> Result<Self, ThzError> {
        if bitmaps.is_empty() {
            return Err(ThzError::SceneFormat("no surfaces".into()));
        }
        let len = bitmaps[0].len();
        let side = (len as f64).sqrt().round() as usize;
        if side * side != len {
            return Err(ThzError::SceneFormat("bitmap is not square".into()));
        }
        for (s, map) in bitmaps.iter().enumerate() {
            if map.len() != len {
                return Err(ThzError::SceneFormat(format!("surface {s} has a different size")));
            }
            if map.iter().any(|&b| b > 1) {
                return Err(ThzError::SceneFormat(format!("surface {s} has non-binary values")));
            }
        }
        Ok(Scene { bitmaps })
    }

    pub fn n_surfaces(&self) -> usize {
        self.bitmaps.len()
    }

    pub fn pixels_per_side(&self) -> usize {
        (self.bitmaps[0].len() as f64).sqrt().round() as usize
    }

    pub fn bit(&self, surface: usize, pixel_index: usize) -> u8 {
        self.bitmaps[surface][pixel_index]
    }

    pub fn bitmap(&self, surface: usize) -> &[u8] {
        &self.bitmaps[surface]
    }

    /// Label byte of a pixel: bit `s` set iff surface `s` is drawn there.
    pub fn label_at(&self, pixel_index: usize) -> SurfaceBits {
        let mut bits = 0u8;
        for (s, map) in self.bitmaps.iter().enumerate() {
            bits |= map[pixel_index] << s;
        }
        SurfaceBits(bits)
    }

    /// Plain-text form: one block of `side` lines of '0'/'1' per surface,
    /// blocks separated by a blank line.
    pub fn to_text(&self) -> String {
        let side = self.pixels_per_side();
        let mut out = String::new();
        for (s, map) in self.bitmaps.iter().enumerate() {
            if s > 0 {
                out.push('\n');
            }
            for row in 0..side {
                for col in 0..side {
                    out.push(if map[row * side + col] == 1 { '1' } else { '0' });
                }
                out.push('\n');
            }
        }
        out
    }

    /// Parses the text form, checking it against an expected shape.
    pub fn parse_text(text: &str, n_surfaces: usize, side: usize) -> Result<Self, ThzError> {
        let blocks: Vec<Vec<&str>> = text
            .split("\n\n")
            .map(|b| b.lines().filter(|l| !l.trim().is_empty()).collect())
            .filter(|b: &Vec<&str>| !b.is_empty())
            .collect();
        if blocks.len() != n_surfaces {
            return Err(ThzError::SceneFormat(format!(
                "expected {n_surfaces} surface blocks, found {}",
                blocks.len()
            )));
        }
        let mut bitmaps = Vec::with_capacity(n_surfaces);
        for (s, block) in blocks.iter().enumerate() {
            if block.len() != side {
                return Err(ThzError::SceneFormat(format!(
                    "surface {s}: expected {side} rows, found {}",
                    block.len()
                )));
            }
            let mut map = Vec::with_capacity(side * side);
            for line in block {
                let line = line.trim();
                if line.len() != side {
                    return Err(ThzError::SceneFormat(format!(
                        "surface {s}: row '{line}' is not {side} characters"
                    )));
                }
                for ch in line.chars() {
                    match ch {
                        '0' => map.push(0),
                        '1' => map.push(1),
                        other => {
                            return Err(ThzError::SceneFormat(format!(
                                "surface {s}: unexpected character '{other}'"
                            )))
                        }
                    }
                }
            }
            bitmaps.push(map);
        }
        Ok(Scene { bitmaps })
    }
}

/// Per-pixel 6-bit label, bit `s` = content of surface `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurfaceBits(pub u8);

impl SurfaceBits {
    pub fn bit(&self, surface: usize) -> u8 {
        (self.0 >> surface) & 1
    }

    /// The label as 0.0/1.0 targets for the classifier.
    pub fn to_targets(&self, n_surfaces: usize) -> Vec<f64> {
        (0..n_surfaces).map(|s| f64::from(self.bit(s))).collect()
    }
}

/// Which split a sample was assigned to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_byte(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Split::Train),
            1 => Some(Split::Valid),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// One scan position's waveform with its ground-truth label.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformSample {
    pub waveform: Vec<f64>,
    pub label: SurfaceBits,
    pub pixel: (usize, usize),
    pub scan: (usize, usize),
    pub split: Split,
}

/// The full synthetic experiment: every scan of every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<WaveformSample>,
    pub config: SceneConfig,
    pub scene: Scene,
}

impl Dataset {
    pub fn indices_for(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Ricker wavelet `(1 - (t/w)^2) exp(-t^2 / (2 w^2))`: peak 1 at t = 0,
/// zero crossings at +-w.
pub fn pulse(t: f64, width: f64) -> f64 {
    let u = t / width;
    (1.0 - u * u) * (-0.5 * u * u).exp()
}

/// Seeded random scene: each surface keeps between 20% and 80% of its
/// pixels drawn (degenerate draws are redone).
pub fn make_scene(config: &SceneConfig) -> Result<Scene, ThzError> {
    config.validate()?;
    let n_pixels = config.n_pixels();
    let lo = (n_pixels as f64 * 0.2).ceil() as usize;
    let hi = (n_pixels as f64 * 0.8).floor() as usize;
    let mut bitmaps = Vec::with_capacity(config.n_surfaces());
    for surface in 0..config.n_surfaces() {
        let mut rng = seeded_rng(config.seed, &[TAG_SCENE, surface as u64]);
        loop {
            let map: Vec<u8> = (0..n_pixels).map(|_| u8::from(rng.gen_bool(0.5))).collect();
            let fill: usize = map.iter().map(|&b| b as usize).sum();
            if fill >= lo && fill <= hi {
                bitmaps.push(map);
                break;
            }
        }
    }
    Ok(Scene { bitmaps })
}

/// Synthesizes the waveform for one scan position. The split field is set
/// to `Train` and reassigned by [`synth_dataset`].
///
/// Draw order from `rng`: one depth jitter, then one noise value per time
/// sample.
pub fn synth_waveform<R: Rng>(
    scene: &Scene,
    config: &SceneConfig,
    pixel: (usize, usize),
    scan: (usize, usize),
    rng: &mut R,
) -> Result<WaveformSample, ThzError> {
    let side = config.pixels_per_side;
    if pixel.0 >= side || pixel.1 >= side {
        return Err(ThzError::OutOfRangePixel {
            row: pixel.0,
            col: pixel.1,
            side,
        });
    }
    let scan_side = config.scans_per_pixel_side;
    if scan.0 >= scan_side || scan.1 >= scan_side {
        return Err(ThzError::OutOfRangeScan {
            row: scan.0,
            col: scan.1,
            side: scan_side,
        });
    }
    let pixel_index = pixel.0 * side + pixel.1;
    let label = scene.label_at(pixel_index);

    let jitter: f64 = {
        let z: f64 = StandardNormal.sample(rng);
        z * config.depth_jitter_std
    };

    let grid = config.time_grid();
    let mut waveform = vec![0.0; config.samples_per_waveform];
    let mut transmission = 1.0;
    for surface in 0..config.n_surfaces() {
        let drawn = label.bit(surface) == 1;
        let reflect = if drawn { config.reflect_drawn } else { config.reflect_blank };
        let delay = config.surface_delays[surface] + jitter;
        let amp = transmission * reflect;
        for (y, &t) in waveform.iter_mut().zip(&grid) {
            *y += amp * pulse(t - delay, config.pulse_width);
        }
        // the echo from every deeper surface crosses this one twice
        let transmit = if drawn { config.transmit_drawn } else { config.transmit_blank };
        transmission *= transmit * transmit;
    }
    for y in waveform.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *y += z * config.noise_std;
    }

    Ok(WaveformSample {
        waveform,
        label,
        pixel,
        scan,
        split: Split::Train,
    })
}

/// Builds the full dataset: a seeded scene, one waveform per scan position,
/// and an exact 60/10/30 per-pixel split by seeded shuffle.
pub fn synth_dataset(config: &SceneConfig) -> Result<Dataset, ThzError> {
    let scene = make_scene(config)?;
    synth_dataset_with_scene(config, scene)
}

/// Same as [`synth_dataset`] but with externally supplied content (for
/// letter bitmaps or test scenes).
pub fn synth_dataset_with_scene(config: &SceneConfig, scene: Scene) -> Result<Dataset, ThzError> {
    config.validate()?;
    if scene.n_surfaces() != config.n_surfaces() || scene.pixels_per_side() != config.pixels_per_side
    {
        return Err(ThzError::SceneFormat(format!(
            "scene shape {}x{}^2 does not match config {}x{}^2",
            scene.n_surfaces(),
            scene.pixels_per_side(),
            config.n_surfaces(),
            config.pixels_per_side
        )));
    }
    let side = config.pixels_per_side;
    let scan_side = config.scans_per_pixel_side;
    let scans = config.scans_per_pixel();
    let (n_train, n_valid, _) = config.split_counts();

    let mut samples = Vec::with_capacity(config.n_pixels() * scans);
    for pr in 0..side {
        for pc in 0..side {
            let pixel_index = (pr * side + pc) as u64;

            let mut order: Vec<usize> = (0..scans).collect();
            let mut split_rng = seeded_rng(config.seed, &[TAG_SPLIT, pixel_index]);
            order.shuffle(&mut split_rng);
            let mut splits = vec![Split::Test; scans];
            for &slot in &order[..n_train] {
                splits[slot] = Split::Train;
            }
            for &slot in &order[n_train..n_train + n_valid] {
                splits[slot] = Split::Valid;
            }

            for sr in 0..scan_side {
                for sc in 0..scan_side {
                    let scan_index = sr * scan_side + sc;
                    let mut rng =
                        seeded_rng(config.seed, &[TAG_WAVEFORM, pixel_index, scan_index as u64]);
                    let mut sample = synth_waveform(&scene, config, (pr, pc), (sr, sc), &mut rng)?;
                    sample.split = splits[scan_index];
                    samples.push(sample);
                }
            }
        }
    }
    Ok(Dataset {
        samples,
        config: config.clone(),
        scene,
    })
}
