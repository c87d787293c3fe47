//! PNG frames plus a `sequence.jsonl` manifest per sequence.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{Motion, Scenario, SequenceFrame, SyntheticSequence};
use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::frame::Image;
use crate::model::Modality;

pub const MANIFEST: &str = "sequence.jsonl";

/// One manifest line. Scenario metadata rides on the first line only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub frame: usize,
    pub rgb: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<String>,
    /// `[x, y, width, height]`
    pub bbox: [f64; 4],
    #[serde(default)]
    pub occluded: bool,
    #[serde(default)]
    pub corrupted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distractors: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, image.width as u32, image.height as u32);
    enc.set_depth(png::BitDepth::Eight);
    let plane = image.width * image.height;
    let data = match image.channels {
        1 => {
            enc.set_color(png::ColorType::Grayscale);
            image.data.clone()
        }
        3 => {
            enc.set_color(png::ColorType::Rgb);
            (0..plane * 3).map(|i| image.data[(i % 3) * plane + i / 3]).collect()
        }
        c => return Err(Error::Data(format!("cannot encode {c}-channel image"))),
    };
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(&data)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Image> {
    let file = BufReader::new(File::open(path)?);
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let plane = w * h;
    let src_channels = info.color_type.samples();
    let channels = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => 1,
        _ => 3,
    };
    let mut image = Image::new(channels, h, w);
    for i in 0..plane {
        for c in 0..channels {
            image.data[c * plane + i] = buf[i * src_channels + c];
        }
    }
    Ok(image)
}

fn windows_from_flags(flags: impl Iterator<Item = bool>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    let mut n = 0;
    for (t, f) in flags.enumerate() {
        match (f, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push((s, t));
                start = None;
            }
            _ => {}
        }
        n = t + 1;
    }
    if let Some(s) = start {
        out.push((s, n));
    }
    out
}

/// Write frames and manifest under `dir` (created if missing).
pub fn write_sequence(seq: &SyntheticSequence, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("rgb"))?;
    if let Some(m) = seq.aux {
        std::fs::create_dir_all(dir.join(m.to_string()))?;
    }
    let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST))?);
    for (t, frame) in seq.frames.iter().enumerate() {
        let rgb = format!("rgb/{t:06}.png");
        write_png(&dir.join(&rgb), &frame.rgb)?;
        let aux = match (seq.aux, &frame.aux) {
            (Some(m), Some(img)) => {
                let rel = format!("{m}/{t:06}.png");
                write_png(&dir.join(&rel), img)?;
                Some(rel)
            }
            _ => None,
        };
        let first = t == 0;
        let entry = ManifestEntry {
            frame: t,
            rgb,
            aux,
            modality: seq.aux.map(|m| m.to_string()),
            bbox: seq.boxes[t].to_xywh(),
            occluded: seq.is_occluded(t),
            corrupted: seq.is_corrupted(t),
            motion: first.then(|| seq.scenario.motion.to_string()),
            distractors: first.then_some(seq.scenario.distractors),
            seed: first.then_some(seq.seed),
        };
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    Ok(())
}

/// Resolve a manifest path from either the file itself or its directory.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let path = manifest_path(path);
    let file = BufReader::new(
        File::open(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?,
    );
    let mut entries = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if e.frame != entries.len() {
            return Err(Error::Data(format!(
                "{}: frame {} out of order at line {}",
                path.display(),
                e.frame,
                i + 1
            )));
        }
        entries.push(e);
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("{}: empty manifest", path.display())));
    }
    Ok(entries)
}

/// Load a sequence from its directory or manifest file.
pub fn read_sequence(path: &Path) -> Result<SyntheticSequence> {
    let manifest = manifest_path(path);
    let dir = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let entries = read_manifest(&manifest)?;
    let aux: Option<Modality> = match &entries[0].modality {
        Some(m) => Some(m.parse().map_err(Error::Data)?),
        None => None,
    };
    let mut frames = Vec::with_capacity(entries.len());
    let mut boxes = Vec::with_capacity(entries.len());
    for e in &entries {
        let rgb = read_png(&dir.join(&e.rgb))?;
        let aux_img = match (&e.aux, aux) {
            (Some(p), Some(_)) => Some(read_png(&dir.join(p))?),
            (None, None) => None,
            _ => {
                return Err(Error::Data(format!(
                    "frame {}: auxiliary frame and modality disagree",
                    e.frame
                )))
            }
        };
        frames.push(SequenceFrame { rgb, aux: aux_img });
        let [x, y, w, h] = e.bbox;
        boxes.push(BoundingBox::from_xywh(x, y, w, h));
    }
    let motion: Motion = match &entries[0].motion {
        Some(m) => m.parse().map_err(Error::Data)?,
        None => Motion::Linear,
    };
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    Ok(SyntheticSequence {
        name,
        seed: entries[0].seed.unwrap_or(0),
        aux,
        frames,
        boxes,
        scenario: Scenario {
            motion,
            distractors: entries[0].distractors.unwrap_or(0),
            occlusions: windows_from_flags(entries.iter().map(|e| e.occluded)),
            corruptions: windows_from_flags(entries.iter().map(|e| e.corrupted)),
        },
    })
}

/// Sequence directories directly under `root` (sorted), or `root` itself
/// when it holds a manifest.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    if manifest_path(root).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::Data(format!("{}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::Data(format!("no sequences under {}", root.display())));
    }
    Ok(out)
}

pub fn write_suite(seqs: &[SyntheticSequence], root: &Path) -> Result<()> {
    for s in seqs {
        write_sequence(s, &root.join(&s.name))?;
    }
    Ok(())
}

pub fn read_suite(root: &Path) -> Result<Vec<SyntheticSequence>> {
    list_sequences(root)?.iter().map(|p| read_sequence(p)).collect()
}
