//! Face-track datasets and the paired-window batch sampler.

mod io;
mod synth;

pub use io::{read_dataset, read_dataset_file, write_dataset, write_dataset_file, DATASET_MAGIC};
pub use synth::{generate_synthetic, speaker_latent, SynthConfig};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One speaking segment: time-aligned visual and audio frames. `speaker_id`
/// is ground truth for evaluation and never reaches a training loss.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceTrack {
    pub track_id: u64,
    pub speaker_id: u64,
    visual: Tensor,
    audio: Tensor,
}

impl FaceTrack {
    pub fn new(track_id: u64, speaker_id: u64, visual: Tensor, audio: Tensor) -> Result<Self> {
        if visual.rank() == 0 || audio.rank() == 0 || visual.shape()[0] != audio.shape()[0] {
            return Err(Error::dim("face track alignment", visual.shape(), audio.shape()));
        }
        Ok(Self { track_id, speaker_id, visual, audio })
    }

    pub fn len(&self) -> usize {
        self.visual.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[T, *visual_frame_shape]`
    pub fn visual(&self) -> &Tensor {
        &self.visual
    }

    /// `[T, *audio_frame_shape]`
    pub fn audio(&self) -> &Tensor {
        &self.audio
    }

    pub fn visual_frame_shape(&self) -> &[usize] {
        &self.visual.shape()[1..]
    }

    pub fn audio_frame_shape(&self) -> &[usize] {
        &self.audio.shape()[1..]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub tracks: Vec<FaceTrack>,
}

impl Dataset {
    pub fn new(tracks: Vec<FaceTrack>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for t in &tracks {
            if !seen.insert(t.track_id) {
                return Err(Error::Data(format!("duplicate track_id {}", t.track_id)));
            }
        }
        Ok(Self { tracks })
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn speakers(&self) -> BTreeSet<u64> {
        self.tracks.iter().map(|t| t.speaker_id).collect()
    }

    /// Track indices grouped by speaker.
    pub fn tracks_by_speaker(&self) -> BTreeMap<u64, Vec<usize>> {
        let mut m: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, t) in self.tracks.iter().enumerate() {
            m.entry(t.speaker_id).or_default().push(i);
        }
        m
    }

    /// The tracks of the given speakers, in original order.
    pub fn subset_speakers(&self, keep: &BTreeSet<u64>) -> Dataset {
        Dataset {
            tracks: self.tracks.iter().filter(|t| keep.contains(&t.speaker_id)).cloned().collect(),
        }
    }

    /// Expected number of same-speaker pairs among `b` tracks drawn without
    /// replacement from the tracks at least `min_len` frames long.
    pub fn expected_same_speaker_pairs(&self, b: usize, min_len: usize) -> f64 {
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for t in self.tracks.iter().filter(|t| t.len() >= min_len) {
            *counts.entry(t.speaker_id).or_default() += 1;
        }
        let total: usize = counts.values().sum();
        if total < 2 {
            return 0.0;
        }
        let pairs = |n: usize| (n * n.saturating_sub(1)) as f64 / 2.0;
        let same: f64 = counts.values().map(|&c| pairs(c)).sum();
        pairs(b) * same / pairs(total)
    }
}

/// One track's window within a [`Batch`].
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub track_id: u64,
    /// Evaluation-only ground truth.
    pub speaker_id: u64,
    pub offset: usize,
    /// `[N+4, *visual_frame_shape]`
    pub visual: Tensor,
    /// `[N+4, *audio_frame_shape]`
    pub audio: Tensor,
}

/// `B` windows of `N + 4` aligned frames from `B` distinct tracks.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub windows: Vec<WindowSample>,
    pub n: usize,
}

impl Batch {
    pub fn b(&self) -> usize {
        self.windows.len()
    }

    pub fn window_len(&self) -> usize {
        self.n + 4
    }

    /// `[B, N+4, *visual_frame_shape]`
    pub fn visual_tensor(&self) -> Tensor {
        stack(self.windows.iter().map(|w| &w.visual))
    }

    /// `[B, N+4, *audio_frame_shape]`
    pub fn audio_tensor(&self) -> Tensor {
        stack(self.windows.iter().map(|w| &w.audio))
    }
}

fn stack<'a>(items: impl Iterator<Item = &'a Tensor>) -> Tensor {
    let mut shape = Vec::new();
    let mut data = Vec::new();
    let mut count = 0;
    for t in items {
        if shape.is_empty() {
            shape = t.shape().to_vec();
        }
        data.extend_from_slice(t.data());
        count += 1;
    }
    shape.insert(0, count);
    Tensor::new(shape, data).expect("windows share a shape")
}

/// Frames `start..start+len` of a `[T, ...]` tensor.
pub(crate) fn slice_frames(t: &Tensor, start: usize, len: usize) -> Tensor {
    let per = t.numel() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = len;
    Tensor::new(shape, t.data()[start * per..(start + len) * per].to_vec()).expect("in-range slice")
}

/// Draws `b` distinct tracks and one uniformly placed `n + 4` frame window in
/// each, cut at the same offset in both modalities.
pub fn sample_batch<R: Rng + ?Sized>(dataset: &Dataset, b: usize, n: usize, rng: &mut R) -> Result<Batch> {
    if b == 0 || n == 0 {
        return Err(Error::Contract(format!("batch needs B >= 1 and N >= 1, got B={b} N={n}")));
    }
    let w = n + 4;
    let eligible: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.tracks[i].len() >= w).collect();
    if eligible.len() < b {
        return Err(Error::Data(format!(
            "need {b} tracks with at least {w} frames, dataset has {} ({} tracks total)",
            eligible.len(),
            dataset.len()
        )));
    }
    let picks = index::sample(rng, eligible.len(), b);
    let windows = picks
        .into_iter()
        .map(|p| {
            let track = &dataset.tracks[eligible[p]];
            let offset = rng.gen_range(0..=track.len() - w);
            WindowSample {
                track_id: track.track_id,
                speaker_id: track.speaker_id,
                offset,
                visual: slice_frames(track.visual(), offset, w),
                audio: slice_frames(track.audio(), offset, w),
            }
        })
        .collect();
    Ok(Batch { windows, n })
}
