//! Synthetic talking-face tracks with known latent factors.
//!
//! Every speaker owns a fixed identity latent; every frame draws a fresh
//! content latent. Both modalities render the concatenated latents through a
//! fixed random map (linear, tanh, linear) shared by all datasets generated
//! with the same `world_seed`. Audio frames additionally carry a per-track
//! channel offset that is constant within a track and unrelated to the
//! speaker, the way recording conditions vary between sessions.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Dataset, FaceTrack};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_speakers: usize,
    pub tracks_per_speaker: usize,
    pub frames_per_track: usize,
    pub id_dim: usize,
    pub content_dim: usize,
    pub noise_std: f64,
    /// Seeds speaker latents, content sequences, channels and noise.
    pub seed: u64,
    /// Seeds the rendering maps; train and held-out sets must share it.
    pub world_seed: u64,
    /// First speaker id; held-out sets use a disjoint range.
    pub speaker_offset: u64,
    pub visual_frame_shape: (usize, usize, usize),
    pub audio_frame_shape: (usize, usize),
    pub hidden_dim: usize,
    /// Multiplier on the identity latent before rendering.
    pub id_scale: f64,
    /// Standard deviation of the per-track audio channel offset.
    pub channel_std: f64,
    pub channel_dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_speakers: 20,
            tracks_per_speaker: 10,
            frames_per_track: 40,
            id_dim: 4,
            content_dim: 4,
            noise_std: 0.1,
            seed: 0,
            world_seed: 0,
            speaker_offset: 0,
            visual_frame_shape: (1, 8, 8),
            audio_frame_shape: (8, 4),
            hidden_dim: 32,
            id_scale: 1.0,
            channel_std: 1.5,
            channel_dim: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_speakers", self.num_speakers),
            ("tracks_per_speaker", self.tracks_per_speaker),
            ("frames_per_track", self.frames_per_track),
            ("id_dim", self.id_dim),
            ("content_dim", self.content_dim),
            ("hidden_dim", self.hidden_dim),
            ("channel_dim", self.channel_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let (c, h, w) = self.visual_frame_shape;
        let (f, t) = self.audio_frame_shape;
        if c * h * w == 0 || f * t == 0 {
            return Err(Error::Config("frame shapes must be non-empty".into()));
        }
        for (name, v) in [("noise_std", self.noise_std), ("channel_std", self.channel_std), ("id_scale", self.id_scale)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    fn visual_dim(&self) -> usize {
        let (c, h, w) = self.visual_frame_shape;
        c * h * w
    }

    fn audio_dim(&self) -> usize {
        self.audio_frame_shape.0 * self.audio_frame_shape.1
    }
}

/// Fixed random map `latent -> W2 tanh(W1 latent + b1)`.
struct RenderMap {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    input: usize,
    hidden: usize,
    output: usize,
}

impl RenderMap {
    fn new<R: Rng>(rng: &mut R, input: usize, hidden: usize, output: usize) -> Self {
        let s1 = (1.0 / input as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        Self {
            w1: normals(rng, hidden * input, s1),
            b1: normals(rng, hidden, 0.5),
            w2: normals(rng, output * hidden, s2),
            input,
            hidden,
            output,
        }
    }

    fn apply(&self, latent: &[f64], out: &mut [f64]) {
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &self.w1[j * self.input..(j + 1) * self.input];
                (row.iter().zip(latent).map(|(a, b)| a * b).sum::<f64>() + self.b1[j]).tanh()
            })
            .collect();
        for (o, slot) in out.iter_mut().enumerate().take(self.output) {
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            *slot = row.iter().zip(&h).map(|(a, b)| a * b).sum();
        }
    }
}

fn normals<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect()
}

/// The identity latent of `speaker_id` under `config.seed`.
pub fn speaker_latent(config: &SynthConfig, speaker_id: u64) -> Vec<f64> {
    let mut rng = seed::rng_for_step(config.seed, "synth.speaker", speaker_id);
    normals(&mut rng, config.id_dim, 1.0)
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let latent_dim = config.id_dim + config.content_dim;
    let mut world = seed::rng_for(config.world_seed, "synth.world");
    let vmap = RenderMap::new(&mut world, latent_dim, config.hidden_dim, config.visual_dim());
    let amap = RenderMap::new(&mut world, latent_dim, config.hidden_dim, config.audio_dim());
    let channel_basis = normals(&mut world, config.audio_dim() * config.channel_dim, (1.0 / config.channel_dim as f64).sqrt());

    let t = config.frames_per_track;
    let (vd, ad) = (config.visual_dim(), config.audio_dim());
    let (c, h, w) = config.visual_frame_shape;
    let (f, tb) = config.audio_frame_shape;

    let mut tracks = Vec::with_capacity(config.num_speakers * config.tracks_per_speaker);
    for s in 0..config.num_speakers as u64 {
        let speaker_id = config.speaker_offset + s;
        let z_id: Vec<f64> = speaker_latent(config, speaker_id).iter().map(|v| v * config.id_scale).collect();
        for k in 0..config.tracks_per_speaker as u64 {
            let track_id = speaker_id * config.tracks_per_speaker as u64 + k;
            let mut rng = seed::rng_for_step(config.seed, "synth.track", track_id);
            let coeffs = normals(&mut rng, config.channel_dim, config.channel_std);
            let channel: Vec<f64> = (0..ad)
                .map(|o| {
                    let row = &channel_basis[o * config.channel_dim..(o + 1) * config.channel_dim];
                    row.iter().zip(&coeffs).map(|(a, b)| a * b).sum()
                })
                .collect();

            let mut visual = vec![0.0; t * vd];
            let mut audio = vec![0.0; t * ad];
            let mut latent = z_id.clone();
            latent.resize(latent_dim, 0.0);
            for frame in 0..t {
                for v in &mut latent[config.id_dim..] {
                    *v = rng.sample(StandardNormal);
                }
                let vf = &mut visual[frame * vd..(frame + 1) * vd];
                vmap.apply(&latent, vf);
                let af = &mut audio[frame * ad..(frame + 1) * ad];
                amap.apply(&latent, af);
                af.iter_mut().zip(&channel).for_each(|(a, ch)| *a += ch);
                if config.noise_std > 0.0 {
                    for v in vf.iter_mut() {
                        *v += config.noise_std * rng.sample::<f64, _>(StandardNormal);
                    }
                    for v in af.iter_mut() {
                        *v += config.noise_std * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            tracks.push(FaceTrack::new(
                track_id,
                speaker_id,
                Tensor::new(vec![t, c, h, w], visual)?,
                Tensor::new(vec![t, f, tb], audio)?,
            )?);
        }
    }
    Dataset::new(tracks)
}
