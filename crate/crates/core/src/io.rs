//! Persistence: the `THZD` binary dataset container, checkpoint documents,
//! metrics CSV/report text, and PGM heatmaps.
//!
//! Dataset files store waveforms as little-endian f32 (the single lossy
//! boundary; everything computes in f64). Checkpoints are JSON with every
//! float printed at 17 significant digits, which round-trips any binary64
//! value exactly. Readers validate magic, version, counts and record
//! contents and return typed errors on any corruption; they never panic.

use crate::pipeline::{Checkpoint, HistoryEntry, Metrics, PipelineError};
use crate::thz::{Dataset, SceneConfig, Scene, Split, SurfaceBits, WaveformSample};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("bad magic {0:?}; not a THZD dataset")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file ends in the middle of a structure")]
    TruncatedFile,
    #[error("unexpected bytes after the last record")]
    TrailingData,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("malformed record {index}: {reason}")]
    MalformedRecord { index: usize, reason: String },
    #[error("checkpoint does not match its schema: {0}")]
    SchemaMismatch(String),
}

const DATASET_MAGIC: [u8; 4] = *b"THZD";
const DATASET_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// dataset container

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        if self.pos + n > self.bytes.len() {
            return Err(IoError::TruncatedFile);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32, IoError> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Serializes a dataset into the binary container.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<(), IoError> {
    let mut out = Vec::new();
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());

    let config_json = serde_json::to_string(&dataset.config)
        .map_err(|e| IoError::MalformedHeader(e.to_string()))?;
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());

    let scene_text = dataset.scene.to_text();
    out.extend_from_slice(&(scene_text.len() as u32).to_le_bytes());
    out.extend_from_slice(scene_text.as_bytes());

    out.extend_from_slice(&(dataset.samples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.config.samples_per_waveform as u32).to_le_bytes());

    for sample in &dataset.samples {
        for &y in &sample.waveform {
            out.extend_from_slice(&(y as f32).to_le_bytes());
        }
        out.push(sample.label.0);
        out.push(sample.pixel.0 as u8);
        out.push(sample.pixel.1 as u8);
        out.push(sample.scan.0 as u8);
        out.push(sample.scan.1 as u8);
        out.push(sample.split.as_byte());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads and fully validates a binary dataset container.
pub fn read_dataset(path: &Path) -> Result<Dataset, IoError> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    let magic = cur.take(4)?;
    if magic != DATASET_MAGIC {
        return Err(IoError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = cur.u32()?;
    if version != DATASET_VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }

    let config_len = cur.u32()? as usize;
    let config_bytes = cur.take(config_len)?;
    let config_text = std::str::from_utf8(config_bytes)
        .map_err(|_| IoError::MalformedHeader("config blob is not UTF-8".into()))?;
    let config: SceneConfig = serde_json::from_str(config_text)
        .map_err(|e| IoError::MalformedHeader(format!("config blob: {e}")))?;
    config
        .validate()
        .map_err(|e| IoError::MalformedHeader(e.to_string()))?;

    let scene_len = cur.u32()? as usize;
    let scene_bytes = cur.take(scene_len)?;
    let scene_text = std::str::from_utf8(scene_bytes)
        .map_err(|_| IoError::MalformedHeader("scene blob is not UTF-8".into()))?;
    let scene = Scene::parse_text(scene_text, config.n_surfaces(), config.pixels_per_side)
        .map_err(|e| IoError::MalformedHeader(e.to_string()))?;

    let n_samples = cur.u32()? as usize;
    let waveform_len = cur.u32()? as usize;
    if n_samples != config.n_pixels() * config.scans_per_pixel() {
        return Err(IoError::MalformedHeader(format!(
            "{n_samples} records for a {}x{} scan plan",
            config.n_pixels(),
            config.scans_per_pixel()
        )));
    }
    if waveform_len != config.samples_per_waveform {
        return Err(IoError::MalformedHeader(format!(
            "waveform length {waveform_len} does not match config ({})",
            config.samples_per_waveform
        )));
    }
    let record_size = waveform_len * 4 + 6;
    match cur.remaining().cmp(&(n_samples * record_size)) {
        std::cmp::Ordering::Less => return Err(IoError::TruncatedFile),
        std::cmp::Ordering::Greater => return Err(IoError::TrailingData),
        std::cmp::Ordering::Equal => {}
    }

    let side = config.pixels_per_side;
    let scan_side = config.scans_per_pixel_side;
    let label_mask: u16 = (1u16 << config.n_surfaces()) - 1;
    let mut samples = Vec::with_capacity(n_samples);
    for index in 0..n_samples {
        let bad = |reason: &str| IoError::MalformedRecord {
            index,
            reason: reason.to_string(),
        };
        let mut waveform = Vec::with_capacity(waveform_len);
        for _ in 0..waveform_len {
            waveform.push(f64::from(cur.f32()?));
        }
        let label = cur.u8()?;
        if u16::from(label) & !label_mask != 0 {
            return Err(bad("label bits beyond the surface count"));
        }
        let pixel = (cur.u8()? as usize, cur.u8()? as usize);
        if pixel.0 >= side || pixel.1 >= side {
            return Err(bad("pixel coordinates out of range"));
        }
        let scan = (cur.u8()? as usize, cur.u8()? as usize);
        if scan.0 >= scan_side || scan.1 >= scan_side {
            return Err(bad("scan coordinates out of range"));
        }
        let split = Split::from_byte(cur.u8()?).ok_or_else(|| bad("unknown split byte"))?;
        let expected = scene.label_at(pixel.0 * side + pixel.1);
        if label != expected.0 {
            return Err(bad("label disagrees with the stored scene"));
        }
        samples.push(WaveformSample {
            waveform,
            label: SurfaceBits(label),
            pixel,
            scan,
            split,
        });
    }
    Ok(Dataset {
        samples,
        config,
        scene,
    })
}

// ---------------------------------------------------------------------------
// checkpoint document

/// JSON formatter that prints every f64 with 17 significant digits, enough
/// to reproduce the exact binary64 value on parse.
struct FullPrecision<'a> {
    inner: serde_json::ser::PrettyFormatter<'a>,
}

impl serde_json::ser::Formatter for FullPrecision<'_> {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + Write,
    {
        write!(writer, "{value:.16e}")
    }

    fn begin_array<W>(&mut self, writer: &mut W) -> std::io::Result<()>
    where
        W: ?Sized + Write,
    {
        self.inner.begin_array(writer)
    }

    fn end_array<W>(&mut self, writer: &mut W) -> std::io::Result<()>
    where
        W: ?Sized + Write,
    {
        self.inner.end_array(writer)
    }

    fn begin_array_value<W>(&mut self, writer: &mut W, first: bool) -> std::io::Result<()>
    where
        W: ?Sized + Write,
    {
        self.inner.begin_array_value(writer, first)
    }

    fn end_array_value<W>(&mut self, writer: &mut W) -> std::io::Result<()>
    where
        W: ?Sized + Write,
    {
        self.inner.end_array_value(writer)
    }

    fn begin_object<W>(&mut self, writer: &mut W) -> std::io::Result<()>
    where
        W: ?Sized + Write,
    {
        self.inner.begin_object(writer)
    }

    fn end_object<W>(&mut self, writer: &mut W) -> std::io::Result<()>
    where
        W: ?Sized + Write,
    {
        self.inner.end_object(writer)
    }

    fn begin_object_key<W>(&mut self, writer: &mut W, first: bool) -> std::io::Result<()>
    where
        W: ?Sized + Write,
    {
        self.inner.begin_object_key(writer, first)
    }

    fn end_object_key<W>(&mut self, writer: &mut W) -> std::io::Result<()>
    where
        W: ?Sized + Write,
    {
        self.inner.end_object_key(writer)
    }

    fn begin_object_value<W>(&mut self, writer: &mut W) -> std::io::Result<()>
    where
        W: ?Sized + Write,
    {
        self.inner.begin_object_value(writer)
    }

    fn end_object_value<W>(&mut self, writer: &mut W) -> std::io::Result<()>
    where
        W: ?Sized + Write,
    {
        self.inner.end_object_value(writer)
    }
}

/// Serializes a checkpoint to its text form.
pub fn checkpoint_to_string(checkpoint: &Checkpoint) -> Result<String, IoError> {
    let mut buf = Vec::new();
    let formatter = FullPrecision {
        inner: serde_json::ser::PrettyFormatter::new(),
    };
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, formatter);
    serde::Serialize::serialize(checkpoint, &mut ser)
        .map_err(|e| IoError::SchemaMismatch(e.to_string()))?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(|e| IoError::SchemaMismatch(e.to_string()))
}

pub fn write_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), IoError> {
    checkpoint
        .validate()
        .map_err(|e: PipelineError| IoError::SchemaMismatch(e.to_string()))?;
    std::fs::write(path, checkpoint_to_string(checkpoint)?)?;
    Ok(())
}

/// Parses and validates a checkpoint document.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    let mut text = String::new();
    std::fs::File::open(path)?.read_to_string(&mut text)?;
    let checkpoint: Checkpoint =
        serde_json::from_str(&text).map_err(|e| IoError::SchemaMismatch(e.to_string()))?;
    checkpoint
        .validate()
        .map_err(|e: PipelineError| IoError::SchemaMismatch(e.to_string()))?;
    Ok(checkpoint)
}

// ---------------------------------------------------------------------------
// metrics history and report

pub const HISTORY_CSV_HEADER: &str = "epoch,lr,train_loss,valid_mean_acc";

/// Writes the per-epoch history as CSV with the canonical header.
pub fn write_history_csv(history: &[HistoryEntry], path: &Path) -> Result<(), IoError> {
    let mut out = String::from(HISTORY_CSV_HEADER);
    out.push('\n');
    for h in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            h.epoch, h.lr, h.train_loss, h.valid_mean_acc
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Key-value text report of final metrics.
pub fn format_metrics_report(kind: &str, split: Split, metrics: &Metrics, n_samples: usize) -> String {
    let mut out = String::new();
    out.push_str(&format!("model_kind = {kind}\n"));
    out.push_str(&format!("split = {split}\n"));
    out.push_str(&format!("n_samples = {n_samples}\n"));
    for (s, acc) in metrics.per_surface_accuracy.iter().enumerate() {
        out.push_str(&format!("surface_{}_accuracy = {acc}\n", s + 1));
    }
    out.push_str(&format!("mean_accuracy = {}\n", metrics.mean_accuracy));
    out.push_str(&format!("exact_match_rate = {}\n", metrics.exact_match_rate));
    out
}

// ---------------------------------------------------------------------------
// heatmaps

/// Writes one P2 PGM per surface (`{prefix}_surface{N}.pgm`, maxval 255,
/// pixel = round(score * 255)) plus a CSV of the raw scores
/// (`{prefix}_scores.csv`). Returns every path written.
pub fn export_heatmaps(
    maps: &[Vec<f64>],
    pixels_per_side: usize,
    path_prefix: &Path,
) -> Result<Vec<PathBuf>, IoError> {
    let prefix = path_prefix.to_string_lossy();
    let mut written = Vec::new();
    for (s, map) in maps.iter().enumerate() {
        let path = PathBuf::from(format!("{prefix}_surface{}.pgm", s + 1));
        let mut out = String::new();
        out.push_str("P2\n");
        out.push_str(&format!("{pixels_per_side} {pixels_per_side}\n255\n"));
        for row in 0..pixels_per_side {
            let line: Vec<String> = (0..pixels_per_side)
                .map(|col| {
                    let v = map[row * pixels_per_side + col];
                    format!("{}", (v * 255.0).round().clamp(0.0, 255.0) as u8)
                })
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        std::fs::write(&path, out)?;
        written.push(path);
    }
    let csv_path = PathBuf::from(format!("{prefix}_scores.csv"));
    let mut out = String::from("surface,row,col,score\n");
    for (s, map) in maps.iter().enumerate() {
        for row in 0..pixels_per_side {
            for col in 0..pixels_per_side {
                out.push_str(&format!(
                    "{},{row},{col},{}\n",
                    s + 1,
                    map[row * pixels_per_side + col]
                ));
            }
        }
    }
    std::fs::write(&csv_path, out)?;
    written.push(csv_path);
    Ok(written)
}
