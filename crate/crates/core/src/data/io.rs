//! Dataset file encoding.
//!
//! Layout (little-endian): magic `XMDS0001`; u32 track count; per track:
//! u64 track_id, u64 speaker_id, u32 T, visual frame shape as u32 rank then
//! u32 dims, audio frame shape likewise, then the raw f64 visual frames
//! followed by the raw f64 audio frames.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, FaceTrack};
use crate::error::{Error, Result};
use crate::tensor::checkpoint::{read_f64s, read_u32, read_u64, truncated, u32_of};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"XMDS0001";

const MAX_FRAME_RANK: u32 = 6;
const MAX_ELEMENTS: usize = 1 << 31;

pub fn write_dataset<W: Write>(mut w: W, dataset: &Dataset) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&u32_of(dataset.len(), "track count")?.to_le_bytes())?;
    for t in &dataset.tracks {
        w.write_all(&t.track_id.to_le_bytes())?;
        w.write_all(&t.speaker_id.to_le_bytes())?;
        w.write_all(&u32_of(t.len(), "track length")?.to_le_bytes())?;
        for shape in [t.visual_frame_shape(), t.audio_frame_shape()] {
            w.write_all(&u32_of(shape.len(), "frame rank")?.to_le_bytes())?;
            for &d in shape {
                w.write_all(&u32_of(d, "frame dimension")?.to_le_bytes())?;
            }
        }
        for v in t.visual().data().iter().chain(t.audio().data()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format(format!("bad dataset magic {magic:?}")));
    }
    let count = read_u32(&mut r)?;
    let mut tracks = Vec::new();
    for _ in 0..count {
        let track_id = read_u64(&mut r)?;
        let speaker_id = read_u64(&mut r)?;
        let t = read_u32(&mut r)? as usize;
        let vshape = read_frame_shape(&mut r, t)?;
        let ashape = read_frame_shape(&mut r, t)?;
        let vn: usize = vshape.iter().product();
        let an: usize = ashape.iter().product();
        let visual = Tensor::new(vshape, read_f64s(&mut r, vn)?)?;
        let audio = Tensor::new(ashape, read_f64s(&mut r, an)?)?;
        tracks.push(FaceTrack::new(track_id, speaker_id, visual, audio)?);
    }
    Dataset::new(tracks)
}

/// Reads a frame shape and returns it with the track length prepended.
fn read_frame_shape<R: Read>(r: &mut R, t: usize) -> Result<Vec<usize>> {
    let rank = read_u32(r)?;
    if rank == 0 || rank > MAX_FRAME_RANK {
        return Err(Error::Format(format!("frame rank {rank} out of range")));
    }
    let mut shape = vec![t];
    let mut numel = t;
    for _ in 0..rank {
        let d = read_u32(r)? as usize;
        numel = numel
            .checked_mul(d)
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| Error::Format("frame dimensions overflow".into()))?;
        shape.push(d);
    }
    Ok(shape)
}

pub fn write_dataset_file(path: &Path, dataset: &Dataset) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), dataset)
}

pub fn read_dataset_file(path: &Path) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}
