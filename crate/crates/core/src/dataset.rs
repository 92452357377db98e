//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<clip>/header.json
//! <dir>/<clip>/frames.bin     f32 [T, H, W, 3]
//! <dir>/<clip>/labels.bin     u8  [T, H, W]
//! <dir>/<clip>/flow_fwd.bin   f32 [T-1, H, W, 2]  direction tag 0
//! <dir>/<clip>/flow_bwd.bin   f32 [T-1, H, W, 2]  direction tag 1
//! <dir>/<clip>/occ.bin        u8  [T-1, H, W]     1 = occluded
//! ```
//!
//! Every `.bin` file starts with a little-endian header: magic `VSDA`, format
//! version (u8), dtype code (u8), rank (u8), direction tag (u8, 255 when not a
//! flow), then `rank` u32 dimensions. Payload is row-major little-endian.

use crate::error::{Error, Result};
use crate::flowwarp::{FlowDirection, FlowField};
use crate::synthdata::{Domain, LabelMap, Texture, VideoClip};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"VSDA";
const NO_TAG: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    U8,
    F32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::U8 => 1,
            DType::F32 => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(DType::U8),
            2 => Some(DType::F32),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
        }
    }
}

/// Decoded array file.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrayFile {
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub tag: Option<u8>,
    pub bytes: Vec<u8>,
}

impl ArrayFile {
    pub fn from_f32(dims: Vec<usize>, tag: Option<u8>, values: impl Iterator<Item = f64>) -> Self {
        let bytes = values.flat_map(|v| (v as f32).to_le_bytes()).collect();
        ArrayFile {
            dtype: DType::F32,
            dims,
            tag,
            bytes,
        }
    }

    pub fn from_u8(dims: Vec<usize>, values: Vec<u8>) -> Self {
        ArrayFile {
            dtype: DType::U8,
            dims,
            tag: None,
            bytes: values,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + self.bytes.len());
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION as u8);
        out.push(self.dtype.code());
        out.push(self.dims.len() as u8);
        out.push(self.tag.unwrap_or(NO_TAG));
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.bytes);
        out
    }

    pub fn decode(path: &Path, raw: &[u8]) -> Result<Self> {
        if raw.len() < 8 || &raw[..4] != MAGIC {
            return Err(Error::corrupt(path, "bad magic"));
        }
        if raw[4] as u32 != FORMAT_VERSION {
            return Err(Error::Version {
                path: path.to_owned(),
                found: raw[4] as u32,
                expected: FORMAT_VERSION,
            });
        }
        let dtype = DType::from_code(raw[5]).ok_or_else(|| Error::corrupt(path, "unknown dtype"))?;
        let rank = raw[6] as usize;
        let tag = (raw[7] != NO_TAG).then_some(raw[7]);
        let header = 8 + 4 * rank;
        if raw.len() < header {
            return Err(Error::corrupt(path, "truncated header"));
        }
        let dims: Vec<usize> = raw[8..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let expected = dims.iter().product::<usize>() * dtype.size();
        if raw.len() - header != expected {
            return Err(Error::corrupt(
                path,
                format!("payload is {} bytes, header implies {expected}", raw.len() - header),
            ));
        }
        Ok(ArrayFile {
            dtype,
            dims,
            tag,
            bytes: raw[header..].to_vec(),
        })
    }

    pub fn f32_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
    }
}

/// Manifest entry for one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipEntry {
    pub name: String,
    pub domain: Domain,
    pub seed: u64,
}

/// Contents of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub clips: Vec<ClipEntry>,
    /// Echo of the generator settings, if known.
    #[serde(default)]
    pub spec: Option<serde_json::Value>,
}

/// Contents of each clip's `header.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipHeader {
    pub frames_dtype: String,
    pub labels_dtype: String,
    pub flow_dtype: String,
    pub occ_dtype: String,
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub num_classes: usize,
    pub domain: Domain,
    pub background: Texture,
    pub seed: u64,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::corrupt(path, "file not found"),
        _ => Error::io(path, e),
    })
}

pub fn clip_name(i: usize) -> String {
    format!("clip_{i:04}")
}

fn write_clip(clip: &VideoClip, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (t, h, w) = (clip.num_frames(), clip.height(), clip.width());
    let header = ClipHeader {
        frames_dtype: "f32".into(),
        labels_dtype: "u8".into(),
        flow_dtype: "f32".into(),
        occ_dtype: "u8".into(),
        height: h,
        width: w,
        num_frames: t,
        num_classes: clip.num_classes,
        domain: clip.domain,
        background: clip.background,
        seed: clip.seed,
    };
    let json = serde_json::to_vec_pretty(&header).expect("header serializes");
    write_file(&dir.join("header.json"), &json)?;

    let n = h * w;
    let frames = clip
        .frames
        .iter()
        .flat_map(|f| (0..n).flat_map(move |i| (0..3).map(move |c| f.data[c * n + i])));
    write_file(
        &dir.join("frames.bin"),
        &ArrayFile::from_f32(vec![t, h, w, 3], None, frames).encode(),
    )?;
    let labels: Vec<u8> = clip.labels.iter().flat_map(|l| l.data.iter().copied()).collect();
    write_file(&dir.join("labels.bin"), &ArrayFile::from_u8(vec![t, h, w], labels).encode())?;
    for (name, flows, dir_tag) in [
        ("flow_fwd.bin", &clip.flows_fwd, FlowDirection::Forward),
        ("flow_bwd.bin", &clip.flows_bwd, FlowDirection::Backward),
    ] {
        let vals = flows.iter().flat_map(|f| f.data.iter().copied());
        write_file(
            &dir.join(name),
            &ArrayFile::from_f32(vec![t - 1, h, w, 2], Some(dir_tag.tag()), vals).encode(),
        )?;
    }
    let occ: Vec<u8> = clip.occlusion.iter().flatten().map(|&o| o as u8).collect();
    write_file(&dir.join("occ.bin"), &ArrayFile::from_u8(vec![t - 1, h, w], occ).encode())?;
    Ok(())
}

/// Writes every clip to its own subdirectory, then the manifest.
pub fn write_dataset(clips: &[VideoClip], path: &Path, spec: Option<serde_json::Value>) -> Result<DatasetManifest> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let name = clip_name(i);
        write_clip(clip, &path.join(&name))?;
        entries.push(ClipEntry {
            name,
            domain: clip.domain,
            seed: clip.seed,
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        clips: entries,
        spec,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&path.join("manifest.json"), &json)?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let mpath = path.join("manifest.json");
    if !mpath.is_file() {
        return Err(Error::ManifestNotFound(path.to_owned()));
    }
    let raw = read_file(&mpath)?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&raw).map_err(|e| Error::corrupt(&mpath, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            path: mpath,
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(manifest)
}

fn expect_dims(path: &Path, a: &ArrayFile, dtype: DType, dims: &[usize]) -> Result<()> {
    if a.dtype != dtype || a.dims != dims {
        return Err(Error::corrupt(
            path,
            format!("expected {dtype:?} {dims:?}, found {:?} {:?}", a.dtype, a.dims),
        ));
    }
    Ok(())
}

fn load_array(path: PathBuf) -> Result<(PathBuf, ArrayFile)> {
    let raw = read_file(&path)?;
    let a = ArrayFile::decode(&path, &raw)?;
    Ok((path, a))
}

fn load_clip(dir: &Path) -> Result<VideoClip> {
    let hpath = dir.join("header.json");
    let raw = read_file(&hpath)?;
    let header: ClipHeader = serde_json::from_slice(&raw).map_err(|e| Error::corrupt(&hpath, e.to_string()))?;
    let (t, h, w) = (header.num_frames, header.height, header.width);
    if t < 2 {
        return Err(Error::corrupt(&hpath, "clip has fewer than 2 frames"));
    }
    let n = h * w;

    let (p, a) = load_array(dir.join("frames.bin"))?;
    expect_dims(&p, &a, DType::F32, &[t, h, w, 3])?;
    let vals: Vec<f64> = a.f32_values().collect();
    let frames = (0..t)
        .map(|k| {
            let base = k * n * 3;
            Tensor::from_fn(3, h, w, |c, y, x| vals[base + (y * w + x) * 3 + c])
        })
        .collect();

    let (p, a) = load_array(dir.join("labels.bin"))?;
    expect_dims(&p, &a, DType::U8, &[t, h, w])?;
    if let Some(bad) = a.bytes.iter().find(|&&l| l as usize >= header.num_classes) {
        return Err(Error::corrupt(&p, format!("label {bad} out of range")));
    }
    let labels = a
        .bytes
        .chunks_exact(n)
        .map(|c| LabelMap {
            height: h,
            width: w,
            data: c.to_vec(),
        })
        .collect();

    let mut flows = Vec::with_capacity(2);
    for (name, dir_tag) in [("flow_fwd.bin", FlowDirection::Forward), ("flow_bwd.bin", FlowDirection::Backward)] {
        let (p, a) = load_array(dir.join(name))?;
        expect_dims(&p, &a, DType::F32, &[t - 1, h, w, 2])?;
        if a.tag.and_then(FlowDirection::from_tag) != Some(dir_tag) {
            return Err(Error::corrupt(&p, "wrong flow direction tag"));
        }
        let vals: Vec<f64> = a.f32_values().collect();
        let fields = vals
            .chunks_exact(2 * n)
            .map(|c| FlowField::from_vec(h, w, dir_tag, c.to_vec()))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::corrupt(&p, e.to_string()))?;
        flows.push(fields);
    }
    let flows_bwd = flows.pop().unwrap();
    let flows_fwd = flows.pop().unwrap();

    let (p, a) = load_array(dir.join("occ.bin"))?;
    expect_dims(&p, &a, DType::U8, &[t - 1, h, w])?;
    let occlusion = a.bytes.chunks_exact(n).map(|c| c.iter().map(|&b| b != 0).collect()).collect();

    Ok(VideoClip {
        frames,
        labels,
        flows_fwd,
        flows_bwd,
        occlusion,
        domain: header.domain,
        num_classes: header.num_classes,
        background: header.background,
        seed: header.seed,
    })
}

/// Loads every clip listed in `<path>/manifest.json`.
pub fn load_dataset(path: &Path) -> Result<Vec<VideoClip>> {
    let manifest = read_manifest(path)?;
    manifest
        .clips
        .iter()
        .map(|e| {
            let clip = load_clip(&path.join(&e.name))?;
            if clip.domain != e.domain {
                return Err(Error::corrupt(path.join(&e.name), "domain disagrees with manifest"));
            }
            Ok(clip)
        })
        .collect()
}
