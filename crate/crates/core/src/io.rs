//! Persistence: the tensor container, PNG frame directories, checkpoints and
//! attention dumps.
//!
//! Container layout: `b"UNIE1"`, a little-endian `u64` header length, a JSON
//! header, then the f32 little-endian payload. Header offsets are relative to
//! the start of the payload.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig, Site};
use crate::error::{Error, Result};
use crate::orchestrator::{AttentionDump, AttentionRecord, DumpSelection};

pub const MAGIC: &[u8; 5] = b"UNIE1";

/// Writes through `write` into a sibling temporary file, then renames it over `path`.
pub fn atomic_write_with(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    if let Err(e) = write(&tmp) {
        let _ = std::fs::remove_file(&tmp);
        return Err(e);
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_write_with(path, |tmp| Ok(std::fs::write(tmp, bytes)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    meta: serde_json::Value,
    entries: Vec<EntryHeader>,
}

/// Named f32 arrays plus free-form JSON metadata, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    pub meta: serde_json::Value,
    entries: Vec<(String, ArrayD<f32>)>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: ArrayD<f32>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Container(format!("duplicate entry {name:?}")));
        }
        self.entries.push((name, array));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn take(&mut self, name: &str) -> Result<ArrayD<f32>> {
        let i = self
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Container(format!("missing entry {name:?}")))?;
        Ok(self.entries.remove(i).1)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let entries = self
            .entries
            .iter()
            .map(|(name, a)| {
                let e = EntryHeader {
                    name: name.clone(),
                    shape: a.shape().to_vec(),
                    dtype: "f32".into(),
                    offset,
                };
                offset += 4 * a.len() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            entries,
        })?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, a) in &self.entries {
            for &x in a.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Container(m);
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing UNIE1 magic".into()));
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[5..13]);
        let hlen = u64::from_le_bytes(len) as usize;
        let start = 13usize
            .checked_add(hlen)
            .filter(|&s| s <= bytes.len())
            .ok_or_else(|| bad(format!("header length {hlen} exceeds file size")))?;
        let header: Header = serde_json::from_slice(&bytes[13..start])?;
        let payload = &bytes[start..];
        let mut spans: Vec<(u64, u64)> = Vec::with_capacity(header.entries.len());
        let mut entries = Vec::with_capacity(header.entries.len());
        for e in header.entries {
            if e.dtype != "f32" {
                return Err(bad(format!("entry {:?} has unsupported dtype {}", e.name, e.dtype)));
            }
            let count = e
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad(format!("entry {:?} shape overflows", e.name)))?;
            let end = e
                .offset
                .checked_add(4 * count as u64)
                .filter(|&end| end <= payload.len() as u64)
                .ok_or_else(|| bad(format!("entry {:?} runs past the payload", e.name)))?;
            spans.push((e.offset, end));
            let raw = &payload[e.offset as usize..end as usize];
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let array = ArrayD::from_shape_vec(IxDyn(&e.shape), data).map_err(|err| bad(err.to_string()))?;
            if entries.iter().any(|(n, _): &(String, _)| *n == e.name) {
                return Err(bad(format!("duplicate entry {:?}", e.name)));
            }
            entries.push((e.name, array));
        }
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(bad("entry byte ranges overlap".into()));
        }
        Ok(Self {
            meta: header.meta,
            entries,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:04}.png")
}

/// Number of contiguous `frame_%04d.png` files starting at 0; errors on gaps
/// and on directories without frame 0.
pub fn count_frames(dir: &Path) -> Result<usize> {
    if !dir.is_dir() {
        return Err(Error::Video(format!("{} is not a directory", dir.display())));
    }
    let mut indices = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(i) = name
            .strip_prefix("frame_")
            .and_then(|r| r.strip_suffix(".png"))
            .and_then(|d| d.parse::<usize>().ok())
        {
            indices.push(i);
        }
    }
    indices.sort_unstable();
    for (expect, &got) in indices.iter().enumerate() {
        if got != expect {
            return Err(Error::MissingFrame {
                dir: dir.to_path_buf(),
                index: expect,
            });
        }
    }
    if indices.is_empty() {
        return Err(Error::MissingFrame {
            dir: dir.to_path_buf(),
            index: 0,
        });
    }
    Ok(indices.len())
}

/// Source frame used for output frame `i` when taking `target` of `available` frames.
pub fn subsample_index(i: usize, available: usize, target: usize) -> usize {
    i * available / target
}

/// Reads `frames` RGB frames as `(F, 3, H, W)` in `[-1, 1]`, resized to
/// `size = (h, w)` and uniformly subsampled when more frames are present.
pub fn read_video(dir: &Path, frames: usize, size: (usize, usize)) -> Result<Array4<f32>> {
    let available = count_frames(dir)?;
    if frames == 0 || available < frames {
        return Err(Error::Video(format!(
            "{} holds {available} frames, {frames} requested",
            dir.display()
        )));
    }
    let (h, w) = size;
    let mut out = Array4::zeros((frames, 3, h, w));
    let mut first_size = None;
    for i in 0..frames {
        let src = subsample_index(i, available, frames);
        let img = image::open(dir.join(frame_file_name(src)))?.to_rgb8();
        let dims = img.dimensions();
        match first_size {
            None => first_size = Some(dims),
            Some(d) if d != dims => {
                return Err(Error::Video(format!(
                    "frame {src} is {}x{}, earlier frames are {}x{}",
                    dims.0, dims.1, d.0, d.1
                )))
            }
            _ => {}
        }
        let img = if dims != (w as u32, h as u32) {
            image::imageops::resize(&img, w as u32, h as u32, image::imageops::FilterType::Triangle)
        } else {
            img
        };
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out[[i, c, y as usize, x as usize]] = p.0[c] as f32 / 127.5 - 1.0;
            }
        }
    }
    Ok(out)
}

/// Reads one image as a `(3, H, W)` frame in `[-1, 1]`, resized to `size`.
pub fn read_image(path: &Path, size: (usize, usize)) -> Result<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (h, w) = size;
    let img = if img.dimensions() != (w as u32, h as u32) {
        image::imageops::resize(&img, w as u32, h as u32, image::imageops::FilterType::Triangle)
    } else {
        img
    };
    Ok(image_to_frame(&img))
}

fn to_u8(x: f32) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// RGB image from a `(3, H, W)` frame in `[-1, 1]`.
pub fn frame_to_image(frame: ndarray::ArrayView3<'_, f32>) -> image::RgbImage {
    let (_, h, w) = frame.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([to_u8(frame[[0, y, x]]), to_u8(frame[[1, y, x]]), to_u8(frame[[2, y, x]])])
    })
}

/// `(3, H, W)` frame in `[-1, 1]` from an RGB image.
pub fn image_to_frame(img: &image::RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32).0[c] as f32 / 127.5 - 1.0
    })
}

/// Writes `(F, 3, H, W)` frames in `[-1, 1]` (clipped) as `frame_%04d.png`;
/// returns the written paths.
pub fn write_video(video: &Array4<f32>, dir: &Path) -> Result<Vec<PathBuf>> {
    if video.len_of(Axis(1)) != 3 {
        return Err(Error::Shape(format!("expected 3 colour channels, got {:?}", video.dim())));
    }
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(video.len_of(Axis(0)));
    for (i, frame) in video.axis_iter(Axis(0)).enumerate() {
        let path = dir.join(frame_file_name(i));
        let img = frame_to_image(frame);
        atomic_write_with(&path, |tmp| {
            img.save_with_format(tmp, image::ImageFormat::Png).map_err(Error::from)
        })?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn save_checkpoint(model: &Denoiser, path: &Path) -> Result<()> {
    let mut c = TensorContainer::new();
    c.meta = serde_json::json!({ "config": model.config(), "checksum": model.checksum() });
    for (name, view) in model.named_parameters() {
        c.insert(name, view.to_owned())?;
    }
    c.write(path)
}

/// Loads a checkpoint; parameters must match the stored config exactly.
pub fn load_checkpoint(path: &Path) -> Result<Denoiser> {
    let mut c = TensorContainer::read(path)?;
    let cfg: DenoiserConfig = serde_json::from_value(
        c.meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Container("checkpoint lacks a config".into()))?,
    )?;
    let mut model = Denoiser::new(cfg)?;
    let names: Vec<String> = c.names().map(str::to_owned).collect();
    let mut tensors = BTreeMap::new();
    for n in names {
        let a = c.take(&n)?;
        tensors.insert(n, a);
    }
    model.load_parameters(&tensors)?;
    Ok(model)
}

pub fn save_latent(z: &crate::denoiser::LatentVideo, path: &Path) -> Result<()> {
    let mut c = TensorContainer::new();
    c.insert("latent", z.data().clone().into_dyn())?;
    c.write(path)
}

pub fn load_latent(path: &Path) -> Result<crate::denoiser::LatentVideo> {
    let mut c = TensorContainer::read(path)?;
    let a = c
        .take("latent")?
        .into_dimensionality()
        .map_err(|e| Error::Container(format!("latent entry: {e}")))?;
    crate::denoiser::LatentVideo::new(a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpIndexEntry {
    pub site: Site,
    pub resolution: (usize, usize),
    pub frames: usize,
    pub heads: usize,
    pub probs: Option<String>,
    pub query: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpIndex {
    pub container: String,
    pub selection: DumpSelection,
    pub records: Vec<DumpIndexEntry>,
}

pub const DUMP_CONTAINER: &str = "attention.unie";
pub const DUMP_INDEX: &str = "attention_index.json";

fn site_key(s: &Site) -> String {
    format!(
        "{:?}/{:?}/s{:03}/l{:02}/{}",
        s.branch,
        s.pass,
        s.step,
        s.layer,
        s.kind.short()
    )
    .to_lowercase()
}

/// Writes the dump as a tensor container plus a JSON index in `dir`.
pub fn write_dump(dump: &AttentionDump, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut c = TensorContainer::new();
    let mut records = Vec::with_capacity(dump.len());
    for (site, rec) in dump.records() {
        let key = site_key(site);
        let mut entry = DumpIndexEntry {
            site: *site,
            resolution: rec.resolution,
            frames: rec.frames,
            heads: rec.heads,
            probs: None,
            query: None,
        };
        if let Some(p) = &rec.probs {
            let n = format!("{key}/probs");
            c.insert(n.clone(), p.clone().into_dyn())?;
            entry.probs = Some(n);
        }
        if let Some(q) = &rec.query {
            let n = format!("{key}/query");
            c.insert(n.clone(), q.clone().into_dyn())?;
            entry.query = Some(n);
        }
        records.push(entry);
    }
    c.write(&dir.join(DUMP_CONTAINER))?;
    let index = DumpIndex {
        container: DUMP_CONTAINER.into(),
        selection: dump.selection.clone(),
        records,
    };
    atomic_write(&dir.join(DUMP_INDEX), &serde_json::to_vec_pretty(&index)?)
}

pub fn read_dump(dir: &Path) -> Result<AttentionDump> {
    let index: DumpIndex = serde_json::from_slice(&std::fs::read(dir.join(DUMP_INDEX))?)?;
    let mut c = TensorContainer::read(&dir.join(&index.container))?;
    let mut dump = AttentionDump::new(index.selection);
    let mut take3 = |name: &Option<String>| -> Result<Option<Array3<f32>>> {
        name.as_ref()
            .map(|n| {
                c.take(n)?
                    .into_dimensionality()
                    .map_err(|e| Error::Container(format!("{n}: {e}")))
            })
            .transpose()
    };
    for e in index.records {
        let record = AttentionRecord {
            probs: take3(&e.probs)?,
            query: take3(&e.query)?,
            resolution: e.resolution,
            frames: e.frames,
            heads: e.heads,
        };
        dump.insert(e.site, record);
    }
    Ok(dump)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn container_layout() {
        let mut c = TensorContainer::new();
        c.insert("a", ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, -2.5]).unwrap()).unwrap();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..5], b"UNIE1");
        let hlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[13..13 + hlen]).unwrap();
        assert_eq!(header["entries"][0]["shape"], serde_json::json!([2]));
        assert_eq!(header["entries"][0]["dtype"], "f32");
        assert_eq!(&bytes[13 + hlen..13 + hlen + 4], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 13 + hlen + 8);
        assert!(c.insert("a", ArrayD::zeros(IxDyn(&[1]))).is_err());
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let mut c = TensorContainer::new();
        c.insert("x", ArrayD::zeros(IxDyn(&[3, 2]))).unwrap();
        let bytes = c.to_bytes().unwrap();
        assert!(TensorContainer::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(TensorContainer::from_bytes(&wrong).is_err());
        let text = String::from_utf8_lossy(&bytes).replace("\"f32\"", "\"f64\"");
        assert!(TensorContainer::from_bytes(text.as_bytes()).is_err());
    }

    #[test]
    fn overlapping_entries_are_rejected() {
        let header = br#"{"entries":[{"name":"a","shape":[2],"dtype":"f32","offset":0},{"name":"b","shape":[2],"dtype":"f32","offset":4}]}"#;
        let mut bytes = b"UNIE1".to_vec();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 12]);
        assert!(matches!(TensorContainer::from_bytes(&bytes), Err(Error::Container(_))));
    }

    proptest! {
        #[test]
        fn container_round_trip_is_bit_exact(
            arrays in proptest::collection::vec(
                (proptest::collection::vec(1usize..4, 0..4), any::<u32>()),
                0..5,
            )
        ) {
            let mut c = TensorContainer::new();
            c.meta = serde_json::json!({"k": 1});
            for (i, (shape, seed)) in arrays.iter().enumerate() {
                let n: usize = shape.iter().product();
                let vals: Vec<f32> = (0..n)
                    .map(|j| {
                        let bits = seed.wrapping_mul(2654435761).wrapping_add(j as u32 * 40503);
                        let x = f32::from_bits(bits);
                        if x.is_finite() { x } else { j as f32 }
                    })
                    .collect();
                c.insert(format!("t{i}"), ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()).unwrap();
            }
            let back = TensorContainer::from_bytes(&c.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.len(), c.len());
            for ((n1, a1), (n2, a2)) in c.entries.iter().zip(back.entries.iter()) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(a1.shape(), a2.shape());
                prop_assert!(a1.iter().zip(a2.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            prop_assert_eq!(back.meta, c.meta);
        }
    }

    fn ramp(frames: usize, h: usize, w: usize) -> Array4<f32> {
        Array4::from_shape_fn((frames, 3, h, w), |(f, c, y, x)| {
            ((f * 37 + c * 11 + y * 5 + x * 3) % 255) as f32 / 127.5 - 1.0
        })
    }

    #[test]
    fn video_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let v = ramp(3, 6, 8) * 0.97;
        write_video(&v, dir.path()).unwrap();
        let back = read_video(dir.path(), 3, (6, 8)).unwrap();
        let err = (&back - &v).iter().fold(0.0f32, |m, x| m.max(x.abs()));
        assert!(err <= 1.0 / 255.0 + 1e-6, "{err}");
    }

    #[test]
    fn empty_and_gapped_directories() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_video(dir.path(), 2, (4, 4)),
            Err(Error::MissingFrame { index: 0, .. })
        ));
        write_video(&ramp(3, 4, 4), dir.path()).unwrap();
        std::fs::remove_file(dir.path().join(frame_file_name(1))).unwrap();
        assert!(matches!(
            read_video(dir.path(), 2, (4, 4)),
            Err(Error::MissingFrame { index: 1, .. })
        ));
    }

    #[test]
    fn inconsistent_sizes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_video(&ramp(2, 4, 4), dir.path()).unwrap();
        image::RgbImage::new(6, 4).save(dir.path().join(frame_file_name(2))).unwrap();
        assert!(matches!(read_video(dir.path(), 3, (4, 4)), Err(Error::Video(_))));
    }

    #[test]
    fn subsampling_uses_floor_stride() {
        let dir = tempfile::tempdir().unwrap();
        // frame f is a constant image of value f
        let v = Array4::from_shape_fn((16, 3, 4, 4), |(f, _, _, _)| (f as f32 * 10.0) / 127.5 - 1.0);
        write_video(&v, dir.path()).unwrap();
        let got = read_video(dir.path(), 8, (4, 4)).unwrap();
        for i in 0..8 {
            let expect = (i * 16 / 8) as f32 * 10.0 / 127.5 - 1.0;
            assert!((got[[i, 0, 0, 0]] - expect).abs() < 1e-6);
        }
        assert_eq!((0..8).map(|i| subsample_index(i, 16, 8)).collect::<Vec<_>>(), vec![0, 2, 4, 6, 8, 10, 12, 14]);
    }

    #[test]
    fn resizes_to_working_resolution() {
        let dir = tempfile::tempdir().unwrap();
        write_video(&(Array4::ones((2, 3, 8, 8)) * 0.2), dir.path()).unwrap();
        let got = read_video(dir.path(), 2, (4, 6)).unwrap();
        assert_eq!(got.dim(), (2, 3, 4, 6));
        assert!(got.iter().all(|&x| (x - 0.2).abs() < 1.0 / 127.0));
    }

    #[test]
    fn single_image_matches_video_frame() {
        let dir = tempfile::tempdir().unwrap();
        let v = ramp(2, 6, 8);
        write_video(&v, dir.path()).unwrap();
        let img = read_image(&dir.path().join(frame_file_name(1)), (6, 8)).unwrap();
        let vid = read_video(dir.path(), 2, (6, 8)).unwrap();
        assert_eq!(img, vid.index_axis(Axis(0), 1));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.unie");
        let model = Denoiser::new(DenoiserConfig {
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.checksum(), model.checksum());
        assert_eq!(back.config(), model.config());
    }

    #[test]
    fn dump_round_trip() {
        use crate::denoiser::{AttnKind, Branch, GuidancePass};
        let mut dump = AttentionDump::new(DumpSelection::default());
        let site = Site {
            branch: Branch::Edit,
            pass: GuidancePass::Cond,
            step: 3,
            layer: 1,
            kind: AttnKind::TemporalSelf,
        };
        dump.insert(
            site,
            AttentionRecord {
                probs: Some(Array3::from_elem((4, 2, 2), 0.5)),
                query: None,
                resolution: (2, 1),
                frames: 2,
                heads: 2,
            },
        );
        let dir = tempfile::tempdir().unwrap();
        write_dump(&dump, dir.path()).unwrap();
        assert_eq!(read_dump(dir.path()).unwrap(), dump);
    }
}
