//! On-disk silhouette formats.
//!
//! Frame-directory format: one directory per sequence holding zero-padded
//! frame-index PNGs (8-bit grayscale, foreground = 255) plus `meta.json`
//! with the subject id and fps. Pixels are re-binarized at 128 on read.
//!
//! Packed format: one file per sequence with a little-endian header
//! (magic `MGSQ`, version u16, T/H/W u32) followed by bit-packed frames
//! (row-major, LSB-first, each frame padded to a whole byte). Identity
//! metadata lives in a `<name>.meta.json` sidecar with the same schema as
//! the frame-directory metadata.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::silhouette::{rebinarize, SilhouetteSequence};

pub const PACKED_MAGIC: &[u8; 4] = b"MGSQ";
pub const PACKED_VERSION: u16 = 1;
pub const PACKED_EXTENSION: &str = "mgsq";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub subject_id: String,
    pub fps: f32,
}

/// Write a sequence as a frame directory under `root/<sequence_id>/`.
pub fn write_sequence_dir(root: &Path, seq: &SilhouetteSequence) -> Result<PathBuf> {
    let dir = root.join(&seq.sequence_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (t, frame) in seq.frames.axis_iter(Axis(0)).enumerate() {
        let path = dir.join(format!("{t:06}.png"));
        let (h, w) = frame.dim();
        let buf: Vec<u8> = frame.iter().map(|&p| p * 255).collect();
        image::save_buffer(
            &path,
            &buf,
            w as u32,
            h as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|e| Error::format(&path, e.to_string()))?;
    }
    let meta = SequenceMeta {
        subject_id: seq.subject_id.clone(),
        fps: seq.fps,
    };
    let meta_path = dir.join("meta.json");
    fs::write(
        &meta_path,
        serde_json::to_vec_pretty(&meta).expect("meta serializes"),
    )
    .map_err(|e| Error::io(&meta_path, e))?;
    Ok(dir)
}

/// Read one sequence from a frame directory. Frames are re-binarized at 128.
pub fn read_sequence_dir(dir: &Path) -> Result<SilhouetteSequence> {
    let meta_path = dir.join("meta.json");
    let meta_bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SequenceMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::format(&meta_path, format!("bad metadata: {e}")))?;

    let mut frame_paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    frame_paths.sort();
    if frame_paths.is_empty() {
        return Err(Error::format(dir, "no frame images"));
    }

    let mut frames: Option<Array3<u8>> = None;
    for (t, path) in frame_paths.iter().enumerate() {
        let img = image::open(path)
            .map_err(|e| Error::format(path, e.to_string()))?
            .into_luma8();
        let (w, h) = img.dimensions();
        let raw = Array2::from_shape_vec((h as usize, w as usize), img.into_raw())
            .expect("image buffer matches dims");
        let bin = rebinarize(&raw.view());
        let stack = frames.get_or_insert_with(|| {
            Array3::zeros((frame_paths.len(), h as usize, w as usize))
        });
        if stack.len_of(Axis(1)) != h as usize || stack.len_of(Axis(2)) != w as usize {
            return Err(Error::format(path, "frame size differs within sequence"));
        }
        stack.index_axis_mut(Axis(0), t).assign(&bin);
    }
    let sequence_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".to_string());
    SilhouetteSequence::new(frames.expect("at least one frame"), meta.subject_id, sequence_id, meta.fps)
}

fn packed_frame_bytes(h: usize, w: usize) -> usize {
    (h * w).div_ceil(8)
}

/// Write a sequence in the packed format plus its metadata sidecar.
pub fn write_sequence_packed(root: &Path, seq: &SilhouetteSequence) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let path = root.join(format!("{}.{PACKED_EXTENSION}", seq.sequence_id));
    let mut buf: Vec<u8> = Vec::new();
    buf.write_all(PACKED_MAGIC).unwrap();
    buf.write_u16::<LittleEndian>(PACKED_VERSION).unwrap();
    buf.write_u32::<LittleEndian>(seq.len() as u32).unwrap();
    buf.write_u32::<LittleEndian>(seq.height() as u32).unwrap();
    buf.write_u32::<LittleEndian>(seq.width() as u32).unwrap();
    let n = packed_frame_bytes(seq.height(), seq.width());
    for frame in seq.frames.axis_iter(Axis(0)) {
        let mut bytes = vec![0u8; n];
        for (i, &p) in frame.iter().enumerate() {
            if p != 0 {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        buf.extend_from_slice(&bytes);
    }
    fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    let meta = SequenceMeta {
        subject_id: seq.subject_id.clone(),
        fps: seq.fps,
    };
    let meta_path = root.join(format!("{}.meta.json", seq.sequence_id));
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta).unwrap())
        .map_err(|e| Error::io(&meta_path, e))?;
    Ok(path)
}

/// Read a packed sequence file (with its metadata sidecar).
pub fn read_sequence_packed(path: &Path) -> Result<SilhouetteSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = std::io::Cursor::new(&bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)
        .map_err(|_| Error::format(path, "truncated header"))?;
    if &magic != PACKED_MAGIC {
        return Err(Error::format(path, "bad magic (not a packed silhouette file)"));
    }
    let version = cur
        .read_u16::<LittleEndian>()
        .map_err(|_| Error::format(path, "truncated header"))?;
    if version != PACKED_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let t = cur.read_u32::<LittleEndian>().map_err(|_| Error::format(path, "truncated header"))? as usize;
    let h = cur.read_u32::<LittleEndian>().map_err(|_| Error::format(path, "truncated header"))? as usize;
    let w = cur.read_u32::<LittleEndian>().map_err(|_| Error::format(path, "truncated header"))? as usize;
    if t == 0 || h == 0 || w == 0 || h > 4096 || w > 4096 {
        return Err(Error::format(path, format!("implausible dimensions T={t} H={h} W={w}")));
    }
    let n = packed_frame_bytes(h, w);
    let expected = 18 + t * n;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("size mismatch: {} bytes, expected {expected}", bytes.len()),
        ));
    }
    let mut frames = Array3::<u8>::zeros((t, h, w));
    for ti in 0..t {
        let base = 18 + ti * n;
        let mut frame = frames.index_axis_mut(Axis(0), ti);
        for (i, p) in frame.iter_mut().enumerate() {
            *p = (bytes[base + i / 8] >> (i % 8)) & 1;
        }
    }
    let stem = path
        .file_stem()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".to_string());
    let meta_path = path.with_file_name(format!("{stem}.meta.json"));
    let meta: SequenceMeta = match fs::read(&meta_path) {
        Ok(b) => serde_json::from_slice(&b)
            .map_err(|e| Error::format(&meta_path, format!("bad metadata: {e}")))?,
        Err(_) => SequenceMeta {
            subject_id: crate::silhouette::UNLABELED.to_string(),
            fps: 30.0,
        },
    };
    SilhouetteSequence::new(frames, meta.subject_id, stem, meta.fps)
}
