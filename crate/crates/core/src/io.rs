//! On-disk formats.
//!
//! A dataset directory holds `manifest.json`, `annotations.jsonl` and one
//! binary feature file per (video, modality). Feature files are little-endian:
//! magic `TIMF`, `u32` version, `u32` dim, `u32` count, then per record
//! `f64` start, `f64` end and `dim` `f32` values.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{AnnotationSet, Dataset, Event, FeatureStream, Video};
use crate::detection::Detection;
use crate::error::{Result, TimError};
use crate::interval::TimeInterval;

const FEATURE_MAGIC: &[u8; 4] = b"TIMF";
const FEATURE_VERSION: u32 = 1;

/// Writes `bytes` next to `path` and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| TimError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| TimError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| TimError::io(path, e))
}

pub fn encode_features(stream: &FeatureStream) -> Vec<u8> {
    let dim = stream.feature_dim();
    let mut out = Vec::with_capacity(16 + stream.len() * (16 + 4 * dim));
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(stream.len() as u32).to_le_bytes());
    for (t, row) in stream.intervals.iter().zip(stream.features.outer_iter()) {
        out.extend_from_slice(&t.start_s.to_le_bytes());
        out.extend_from_slice(&t.end_s.to_le_bytes());
        for x in row {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(TimError::format(self.what, "truncated"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_features(bytes: &[u8], video: &str, modality: &str) -> Result<FeatureStream> {
    let what = format!("feature file for {video}/{modality}");
    let mut c = Cursor { bytes, pos: 0, what: &what };
    if c.take(4)? != FEATURE_MAGIC {
        return Err(TimError::format(&what, "bad magic"));
    }
    let version = c.u32()?;
    if version != FEATURE_VERSION {
        return Err(TimError::format(&what, format!("unsupported version {version}")));
    }
    let dim = c.u32()? as usize;
    let count = c.u32()? as usize;
    let mut intervals = Vec::with_capacity(count);
    let mut feats = Array2::<f32>::zeros((count, dim));
    for i in 0..count {
        let (s, e) = (c.f64()?, c.f64()?);
        intervals.push(TimeInterval::new(s, e).map_err(|err| TimError::format(&what, err.to_string()))?);
        for j in 0..dim {
            feats[[i, j]] = c.f32()?;
        }
    }
    if c.pos != bytes.len() {
        return Err(TimError::format(&what, "trailing bytes"));
    }
    FeatureStream::new(video, modality, intervals, feats)
}

pub fn read_features(path: &Path, video: &str, modality: &str) -> Result<FeatureStream> {
    let bytes = fs::read(path).map_err(|e| TimError::io(path, e))?;
    decode_features(&bytes, video, modality)
}

fn to_jsonl<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| TimError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| TimError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| TimError::format(path.display().to_string(), format!("line {}: {e}", n + 1)))?;
        out.push(row);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, annotations: &AnnotationSet) -> Result<()> {
    write_atomic(path, &to_jsonl(&annotations.events)?)
}

pub fn read_annotations(path: &Path) -> Result<AnnotationSet> {
    Ok(AnnotationSet {
        events: read_jsonl::<Event>(path)?,
    })
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    write_atomic(path, &to_jsonl(dets)?)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    read_jsonl(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub length_s: f64,
    /// Feature file per modality, relative to the manifest.
    pub features: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub videos: BTreeMap<String, ManifestEntry>,
    #[serde(default = "default_annotations")]
    pub annotations: String,
}

fn default_annotations() -> String {
    "annotations.jsonl".into()
}

/// Writes a dataset directory.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<Manifest> {
    let mut manifest = Manifest {
        videos: BTreeMap::new(),
        annotations: default_annotations(),
    };
    for v in &dataset.videos {
        let mut features = BTreeMap::new();
        for (m, s) in &v.streams {
            let rel = format!("features/{}.{}.timf", v.id, m);
            write_atomic(&dir.join(&rel), &encode_features(s))?;
            features.insert(m.clone(), rel);
        }
        manifest.videos.insert(
            v.id.clone(),
            ManifestEntry {
                length_s: v.length_s,
                features,
            },
        );
    }
    write_annotations(&dir.join(&manifest.annotations), &dataset.annotations)?;
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&dir.join("manifest.json"), &json)?;
    Ok(manifest)
}

/// Loads a dataset from a directory or a manifest path.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&manifest_path).map_err(|e| TimError::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| TimError::format(manifest_path.display().to_string(), e.to_string()))?;
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for (id, entry) in &manifest.videos {
        let mut streams = BTreeMap::new();
        for (m, rel) in &entry.features {
            streams.insert(m.clone(), read_features(&root.join(rel), id, m)?);
        }
        videos.push(Video {
            id: id.clone(),
            length_s: entry.length_s,
            streams,
        });
    }
    let annotations = read_annotations(&root.join(&manifest.annotations))?;
    Ok(Dataset { videos, annotations })
}

/// Appends JSON rows to a log file, one per line.
pub struct JsonlWriter {
    file: std::io::BufWriter<fs::File>,
    path: PathBuf,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| TimError::io(dir, e))?;
        }
        let file = fs::File::create(path).map_err(|e| TimError::io(path, e))?;
        Ok(Self {
            file: std::io::BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        serde_json::to_writer(&mut self.file, row)?;
        self.file.write_all(b"\n").map_err(|e| TimError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush().map_err(|e| TimError::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_round_trip_and_corruption() {
        let t = vec![TimeInterval::new(0.0, 1.0).unwrap(), TimeInterval::new(0.2, 1.2).unwrap()];
        let s = FeatureStream::new("v", "audio", t, Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f32 * 0.5)).unwrap();
        let bytes = encode_features(&s);
        assert_eq!(bytes.len(), 16 + 2 * (16 + 12));
        assert_eq!(decode_features(&bytes, "v", "audio").unwrap(), s);
        assert!(decode_features(&bytes[..bytes.len() - 1], "v", "audio").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_features(&bad, "v", "audio").is_err());
    }
}
