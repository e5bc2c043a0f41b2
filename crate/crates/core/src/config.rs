//! Run configuration as flat `section.key=value` text.
//!
//! Unknown keys are rejected; missing keys keep their defaults. Serializing
//! writes every key, so `parse(serialize(c)) == c` for any valid config.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, ProbeConfig, TrialConfig};
use crate::losses::{Distance, Regime};
use crate::nets::EncoderConfig;
use crate::train::TrainConfig;

/// Environment variable that overrides `run.seed`.
pub const SEED_ENV: &str = "RUN_SEED";

/// Size and id range of the held-out speaker set; every other generator
/// setting is shared with the training set.
#[derive(Clone, Debug, PartialEq)]
pub struct HeldoutConfig {
    pub num_speakers: usize,
    pub tracks_per_speaker: usize,
    pub speaker_offset: u64,
}

/// Schedule of the supervised baseline; batch shape comes from `train`.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedSchedule {
    pub lr0: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
}

impl Default for SupervisedSchedule {
    fn default() -> Self {
        Self { lr0: 0.1, epochs: 50, steps_per_epoch: 40 }
    }
}

impl Default for HeldoutConfig {
    fn default() -> Self {
        Self { num_speakers: 40, tracks_per_speaker: 10, speaker_offset: 1_000_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub name: String,
    /// Seeds parameter initialisation and batch sampling.
    pub seed: u64,
    pub synth: SynthConfig,
    pub heldout: HeldoutConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub trials: TrialConfig,
    pub probe: ProbeConfig,
    pub supervised: SupervisedSchedule,
    /// Labelled-speaker counts for the probe/supervision sweep.
    pub probe_sweep: Vec<usize>,
    pub train_data: Option<PathBuf>,
    pub heldout_data: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            synth: SynthConfig::default(),
            heldout: HeldoutConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig { b: 8, n: 8, epochs: 50, steps_per_epoch: 100, ..TrainConfig::default() },
            eval: EvalConfig::default(),
            trials: TrialConfig::default(),
            probe: ProbeConfig::default(),
            supervised: SupervisedSchedule::default(),
            probe_sweep: vec![5, 20],
            train_data: None,
            heldout_data: None,
        }
    }
}

fn shape3(s: &str) -> Result<(usize, usize, usize)> {
    match dims(s)?[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::Config(format!("expected CxHxW, got `{s}`"))),
    }
}

fn shape2(s: &str) -> Result<(usize, usize)> {
    match dims(s)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(Error::Config(format!("expected FxT, got `{s}`"))),
    }
}

fn dims(s: &str) -> Result<Vec<usize>> {
    s.split('x').map(|p| num(p.trim())).collect()
}

fn list(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|p| num(p.trim())).collect()
}

fn num<T: FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Config(format!("cannot parse `{s}`")))
}

fn join(xs: &[usize], sep: &str) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
            c.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {k}: {e}", i + 1)))?;
        }
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.synth;
        let t = &mut self.train;
        match key {
            "run.name" => self.name = v.to_string(),
            "run.seed" => self.seed = num(v)?,
            "synth.num_speakers" => s.num_speakers = num(v)?,
            "synth.tracks_per_speaker" => s.tracks_per_speaker = num(v)?,
            "synth.frames_per_track" => s.frames_per_track = num(v)?,
            "synth.id_dim" => s.id_dim = num(v)?,
            "synth.content_dim" => s.content_dim = num(v)?,
            "synth.noise_std" => s.noise_std = num(v)?,
            "synth.seed" => s.seed = num(v)?,
            "synth.world_seed" => s.world_seed = num(v)?,
            "synth.speaker_offset" => s.speaker_offset = num(v)?,
            "synth.visual_frame_shape" => s.visual_frame_shape = shape3(v)?,
            "synth.audio_frame_shape" => s.audio_frame_shape = shape2(v)?,
            "synth.hidden_dim" => s.hidden_dim = num(v)?,
            "synth.id_scale" => s.id_scale = num(v)?,
            "synth.channel_std" => s.channel_std = num(v)?,
            "synth.channel_dim" => s.channel_dim = num(v)?,
            "heldout.num_speakers" => self.heldout.num_speakers = num(v)?,
            "heldout.tracks_per_speaker" => self.heldout.tracks_per_speaker = num(v)?,
            "heldout.speaker_offset" => self.heldout.speaker_offset = num(v)?,
            "encoder.visual_frame_shape" => self.encoder.visual_frame_shape = shape3(v)?,
            "encoder.audio_frame_shape" => self.encoder.audio_frame_shape = shape2(v)?,
            "encoder.trunk_channels" => {
                self.encoder.trunk_channels = list(v)?
                    .try_into()
                    .map_err(|_| Error::Config("trunk_channels needs 5 entries".into()))?
            }
            "encoder.embed_dim" => self.encoder.embed_dim = num(v)?,
            "encoder.temporal_kernel" => self.encoder.temporal_kernel = num(v)?,
            "encoder.temporal_stride" => self.encoder.temporal_stride = num(v)?,
            "train.regime" => t.regime = v.parse()?,
            "train.B" => t.b = num(v)?,
            "train.N" => t.n = num(v)?,
            "train.lr0" => t.lr0 = num(v)?,
            "train.lr_decay" => t.lr_decay_per_epoch = num(v)?,
            "train.epochs" => t.epochs = num(v)?,
            "train.steps_per_epoch" => t.steps_per_epoch = num(v)?,
            "loss.weight.cl" => t.loss_weights.cl = num(v)?,
            "loss.weight.il" => t.loss_weights.il = num(v)?,
            "loss.weight.d1" => t.loss_weights.d1 = num(v)?,
            "loss.weight.d2" => t.loss_weights.d2 = num(v)?,
            "loss.distance" => t.loss_options.distance = v.parse()?,
            "loss.normalize" => t.loss_options.normalize = num(v)?,
            "eval.B" => self.eval.b = num(v)?,
            "eval.N" => self.eval.n = num(v)?,
            "eval.num_batches" => self.eval.num_batches = num(v)?,
            "eval.seed" => self.eval.seed = num(v)?,
            "eval.trials_per_class" => self.trials.pairs_per_class = num(v)?,
            "eval.trial_seed" => self.trials.seed = num(v)?,
            "probe.epochs" => self.probe.epochs = num(v)?,
            "probe.steps_per_epoch" => self.probe.steps_per_epoch = num(v)?,
            "probe.lr" => self.probe.lr = num(v)?,
            "probe.seed" => self.probe.seed = num(v)?,
            "probe.sweep" => self.probe_sweep = list(v)?,
            "supervised.lr0" => self.supervised.lr0 = num(v)?,
            "supervised.epochs" => self.supervised.epochs = num(v)?,
            "supervised.steps_per_epoch" => self.supervised.steps_per_epoch = num(v)?,
            "data.train" => self.train_data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.heldout" => self.heldout_data = (!v.is_empty()).then(|| PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let s = &self.synth;
        let t = &self.train;
        let e = &self.encoder;
        let (vc, vh, vw) = s.visual_frame_shape;
        let (af, at) = s.audio_frame_shape;
        let (evc, evh, evw) = e.visual_frame_shape;
        let (eaf, eat) = e.audio_frame_shape;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let pairs: Vec<(&str, String)> = vec![
            ("run.name", self.name.clone()),
            ("run.seed", self.seed.to_string()),
            ("synth.num_speakers", s.num_speakers.to_string()),
            ("synth.tracks_per_speaker", s.tracks_per_speaker.to_string()),
            ("synth.frames_per_track", s.frames_per_track.to_string()),
            ("synth.id_dim", s.id_dim.to_string()),
            ("synth.content_dim", s.content_dim.to_string()),
            ("synth.noise_std", s.noise_std.to_string()),
            ("synth.seed", s.seed.to_string()),
            ("synth.world_seed", s.world_seed.to_string()),
            ("synth.speaker_offset", s.speaker_offset.to_string()),
            ("synth.visual_frame_shape", format!("{vc}x{vh}x{vw}")),
            ("synth.audio_frame_shape", format!("{af}x{at}")),
            ("synth.hidden_dim", s.hidden_dim.to_string()),
            ("synth.id_scale", s.id_scale.to_string()),
            ("synth.channel_std", s.channel_std.to_string()),
            ("synth.channel_dim", s.channel_dim.to_string()),
            ("heldout.num_speakers", self.heldout.num_speakers.to_string()),
            ("heldout.tracks_per_speaker", self.heldout.tracks_per_speaker.to_string()),
            ("heldout.speaker_offset", self.heldout.speaker_offset.to_string()),
            ("encoder.visual_frame_shape", format!("{evc}x{evh}x{evw}")),
            ("encoder.audio_frame_shape", format!("{eaf}x{eat}")),
            ("encoder.trunk_channels", join(&e.trunk_channels, ",")),
            ("encoder.embed_dim", e.embed_dim.to_string()),
            ("encoder.temporal_kernel", e.temporal_kernel.to_string()),
            ("encoder.temporal_stride", e.temporal_stride.to_string()),
            ("train.regime", t.regime.to_string()),
            ("train.B", t.b.to_string()),
            ("train.N", t.n.to_string()),
            ("train.lr0", t.lr0.to_string()),
            ("train.lr_decay", t.lr_decay_per_epoch.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.steps_per_epoch", t.steps_per_epoch.to_string()),
            ("loss.weight.cl", t.loss_weights.cl.to_string()),
            ("loss.weight.il", t.loss_weights.il.to_string()),
            ("loss.weight.d1", t.loss_weights.d1.to_string()),
            ("loss.weight.d2", t.loss_weights.d2.to_string()),
            ("loss.distance", t.loss_options.distance.to_string()),
            ("loss.normalize", t.loss_options.normalize.to_string()),
            ("eval.B", self.eval.b.to_string()),
            ("eval.N", self.eval.n.to_string()),
            ("eval.num_batches", self.eval.num_batches.to_string()),
            ("eval.seed", self.eval.seed.to_string()),
            ("eval.trials_per_class", self.trials.pairs_per_class.to_string()),
            ("eval.trial_seed", self.trials.seed.to_string()),
            ("probe.epochs", self.probe.epochs.to_string()),
            ("probe.steps_per_epoch", self.probe.steps_per_epoch.to_string()),
            ("probe.lr", self.probe.lr.to_string()),
            ("probe.seed", self.probe.seed.to_string()),
            ("probe.sweep", join(&self.probe_sweep, ",")),
            ("supervised.lr0", self.supervised.lr0.to_string()),
            ("supervised.epochs", self.supervised.epochs.to_string()),
            ("supervised.steps_per_epoch", self.supervised.steps_per_epoch.to_string()),
            ("data.train", path(&self.train_data)),
            ("data.heldout", path(&self.heldout_data)),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Applies `RUN_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = num(v.trim()).map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an integer")))?;
        }
        Ok(())
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    /// Supervised-baseline settings: the run's batch shape and seed with the
    /// supervised schedule.
    pub fn supervised_config(&self) -> TrainConfig {
        TrainConfig {
            regime: Regime::Supervised,
            lr0: self.supervised.lr0,
            epochs: self.supervised.epochs,
            steps_per_epoch: self.supervised.steps_per_epoch,
            ..self.train_config()
        }
    }

    /// Held-out generator settings: the training world with its own speakers.
    pub fn heldout_synth(&self) -> SynthConfig {
        SynthConfig {
            num_speakers: self.heldout.num_speakers,
            tracks_per_speaker: self.heldout.tracks_per_speaker,
            speaker_offset: self.heldout.speaker_offset,
            ..self.synth.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.heldout_synth().validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        if self.encoder.visual_frame_shape != self.synth.visual_frame_shape
            || self.encoder.audio_frame_shape != self.synth.audio_frame_shape
        {
            return Err(Error::Config("encoder frame shapes differ from the generator's".into()));
        }
        Ok(())
    }
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sq_euclidean" => Ok(Distance::SquaredEuclidean),
            "euclidean" => Ok(Distance::Euclidean),
            other => Err(Error::Config(format!("unknown distance `{other}`"))),
        }
    }
}

impl std::fmt::Display for Distance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Distance::SquaredEuclidean => "sq_euclidean",
            Distance::Euclidean => "euclidean",
        })
    }
}
