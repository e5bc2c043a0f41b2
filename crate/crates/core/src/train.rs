//! SGD training for the four cross-modal regimes and the supervised
//! audio-only baseline.
//!
//! Every step draws its batch and face positions from a generator seeded by
//! `(seed, global step)`, so a run resumed from an epoch checkpoint replays
//! exactly the steps the uninterrupted run would have taken.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use crate::data::{sample_batch, Dataset};
use crate::error::{Error, Result};
use crate::eval::{eval_matching_tasks, EmbeddingKind, EvalConfig};
use crate::losses::{composite_loss, BatchEmbeddings, LossOptions, LossWeights, Regime};
use crate::nets::{self, draw_face_index, forward_stream, EncoderConfig, Heads, Modality, ParamStore};
use crate::seed;
use crate::tensor::{Graph, Target};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub b: usize,
    pub n: usize,
    pub lr0: f64,
    pub lr_decay_per_epoch: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub loss_options: LossOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::ClIlDl,
            b: 30,
            n: 30,
            lr0: 1e-2,
            lr_decay_per_epoch: 0.95,
            epochs: 10,
            steps_per_epoch: 20,
            seed: 0,
            loss_weights: LossWeights::default(),
            loss_options: LossOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b < 2 || self.n < 2 {
            return Err(Error::Config(format!("B and N must be >= 2, got B={} N={}", self.b, self.n)));
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return Err(Error::Config(format!(
                "lr decay must lie in (0, 1], got {}",
                self.lr_decay_per_epoch
            )));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        Ok(())
    }

    /// `lr0 * decay^epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay_per_epoch.powi(epoch as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_cl: Option<f64>,
    pub loss_il: Option<f64>,
    pub loss_d1: Option<f64>,
    pub loss_d2: Option<f64>,
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Held-out (N-way, B-way) accuracy of identity embeddings, when a
    /// validation set was supplied.
    pub validation: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

pub const RUNLOG_HEADER: &str = "step,epoch,lr,loss_total,loss_cl,loss_il,loss_d1,loss_d2,wall_s";

impl RunLog {
    /// Line-delimited step records; absent loss components are empty fields.
    pub fn to_csv(&self, header: bool) -> String {
        let mut s = String::new();
        if header {
            s.push_str(RUNLOG_HEADER);
            s.push('\n');
        }
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.steps {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{:.6}",
                r.step,
                r.epoch,
                r.lr,
                r.loss_total,
                opt(r.loss_cl),
                opt(r.loss_il),
                opt(r.loss_d1),
                opt(r.loss_d2),
                r.wall_s
            );
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|r| r.loss_total).collect()
    }
}

/// Optional held-out set scored at the end of every epoch.
pub struct Validation<'a> {
    pub dataset: &'a Dataset,
    pub config: EvalConfig,
}

pub fn train(dataset: &Dataset, encoder: &EncoderConfig, config: &TrainConfig) -> Result<(ParamStore, RunLog)> {
    let init = nets::init_params(encoder, config.seed)?;
    train_from(dataset, encoder, config, init, 0, None, |_, _, _| Ok(()))
}

/// Continues training `params` from `start_epoch`. `on_epoch` runs after
/// every completed epoch with the number of epochs done so far.
pub fn train_from(
    dataset: &Dataset,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    mut params: ParamStore,
    start_epoch: usize,
    validation: Option<&Validation<'_>>,
    mut on_epoch: impl FnMut(usize, &ParamStore, &RunLog) -> Result<()>,
) -> Result<(ParamStore, RunLog)> {
    config.validate()?;
    encoder.validate()?;
    if config.regime == Regime::Supervised {
        return Err(Error::Config("use train_supervised_baseline for the supervised regime".into()));
    }
    check_admits(dataset, config.b, config.n)?;

    let heads = config.regime.heads();
    let mut log = RunLog::default();
    let started = Instant::now();
    for epoch in start_epoch..config.epochs {
        let lr = config.lr_at(epoch);
        let mut epoch_loss = 0.0;
        for s in 0..config.steps_per_epoch {
            let step = epoch * config.steps_per_epoch + s;
            let mut rng = seed::rng_for_step(config.seed, "train.step", step as u64);
            let batch = sample_batch(dataset, config.b, config.n, &mut rng)?;
            let face_index: Vec<usize> = (0..config.b).map(|_| draw_face_index(config.n, &mut rng)).collect();

            let mut g = Graph::new();
            let bound = params.bind(&mut g, |_| true);
            let vis = g.constant(batch.visual_tensor());
            let aud = g.constant(batch.audio_tensor());
            let emb = BatchEmbeddings {
                face: forward_stream(&mut g, &bound, encoder, Modality::Face, vis, heads)?,
                audio: forward_stream(&mut g, &bound, encoder, Modality::Audio, aud, heads)?,
            };
            let loss = composite_loss(
                &mut g,
                &emb,
                &face_index,
                config.regime,
                &config.loss_weights,
                config.loss_options,
            )?;
            let total = g.value(loss.total).item();
            if !total.is_finite() {
                return Err(Error::NonFinite { step });
            }
            g.backward(loss.total)?;
            params.sgd_step(&g, &bound, lr);
            epoch_loss += total;
            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss_total: total,
                loss_cl: loss.cl,
                loss_il: loss.il,
                loss_d1: loss.d1,
                loss_d2: loss.d2,
                wall_s: started.elapsed().as_secs_f64(),
            });
        }
        let validation = match validation {
            Some(v) => {
                let acc = eval_matching_tasks(&params, encoder, v.dataset, &v.config, EmbeddingKind::Identity, None)?;
                Some((acc.nway, acc.bway))
            }
            None => None,
        };
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            mean_loss: epoch_loss / config.steps_per_epoch.max(1) as f64,
            validation,
        });
        on_epoch(epoch + 1, &params, &log)?;
    }
    Ok((params, log))
}

fn check_admits(dataset: &Dataset, b: usize, n: usize) -> Result<()> {
    let ok = dataset.tracks.iter().filter(|t| t.len() >= n + 4).count();
    if ok < b {
        return Err(Error::Data(format!(
            "dataset has {ok} tracks of at least {} frames, batches need {b}",
            n + 4
        )));
    }
    Ok(())
}

pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";

/// Speaker id → class index, in ascending speaker order.
pub fn speaker_classes(dataset: &Dataset) -> BTreeMap<u64, usize> {
    dataset.speakers().into_iter().enumerate().map(|(i, s)| (s, i)).collect()
}

/// Audio stream plus a linear speaker classifier over the track-averaged
/// identity embedding, trained end-to-end with speaker labels. The classifier
/// has at least two outputs so that a single-speaker set still forms a valid
/// softmax.
pub fn train_supervised_baseline(
    dataset: &Dataset,
    encoder: &EncoderConfig,
    config: &TrainConfig,
) -> Result<(ParamStore, RunLog)> {
    config.validate()?;
    encoder.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("supervised baseline needs labelled tracks".into()));
    }
    check_admits(dataset, config.b, config.n)?;
    let classes = speaker_classes(dataset);
    let k = classes.len().max(2);

    let mut params = ParamStore::new();
    nets::init_stream(&mut params, encoder, Modality::Audio, config.seed);
    let d = encoder.embed_dim;
    let bound = (1.0 / d as f64).sqrt();
    let mut rng = seed::rng_for(config.seed, CLASSIFIER_WEIGHT);
    use rand::Rng;
    params.insert(
        CLASSIFIER_WEIGHT,
        crate::tensor::Tensor::from_fn(&[k, d], |_| rng.gen_range(-bound..=bound)),
    );
    params.insert(CLASSIFIER_BIAS, crate::tensor::Tensor::zeros(&[k]));

    let mut log = RunLog::default();
    let started = Instant::now();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut epoch_loss = 0.0;
        for s in 0..config.steps_per_epoch {
            let step = epoch * config.steps_per_epoch + s;
            let mut rng = seed::rng_for_step(config.seed, "supervised.step", step as u64);
            let batch = sample_batch(dataset, config.b, config.n, &mut rng)?;
            let mut g = Graph::new();
            let bound = params.bind(&mut g, |_| true);
            let aud = g.constant(batch.audio_tensor());
            let out = forward_stream(&mut g, &bound, encoder, Modality::Audio, aud, Heads::IDENTITY)?;
            let id = out.identity.expect("identity head requested");
            let mean = g.mean_over_axis(id, 1)?;
            let logits = g.linear(mean, bound.var(CLASSIFIER_WEIGHT)?, Some(bound.var(CLASSIFIER_BIAS)?))?;
            let targets: Vec<Target> = batch.windows.iter().map(|w| Target::Index(classes[&w.speaker_id])).collect();
            let loss = g.softmax_cross_entropy(logits, &targets)?;
            let total = g.value(loss).item();
            if !total.is_finite() {
                return Err(Error::NonFinite { step });
            }
            g.backward(loss)?;
            params.sgd_step(&g, &bound, lr);
            epoch_loss += total;
            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss_total: total,
                loss_cl: None,
                loss_il: None,
                loss_d1: None,
                loss_d2: None,
                wall_s: started.elapsed().as_secs_f64(),
            });
        }
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            mean_loss: epoch_loss / config.steps_per_epoch.max(1) as f64,
            validation: None,
        });
    }
    Ok((params, log))
}

/// Top-1 speaker accuracy of a supervised baseline on whole tracks.
pub fn supervised_accuracy(params: &ParamStore, encoder: &EncoderConfig, dataset: &Dataset) -> Result<f64> {
    let classes = speaker_classes(dataset);
    let w = params
        .get(CLASSIFIER_WEIGHT)
        .ok_or_else(|| Error::Contract("checkpoint has no speaker classifier".into()))?;
    let b = params.get(CLASSIFIER_BIAS).ok_or_else(|| Error::Contract("missing classifier bias".into()))?;
    let k = w.shape()[0];
    let d = w.shape()[1];
    let embeddings = crate::eval::track_embeddings(params, encoder, dataset, EmbeddingKind::Identity)?;
    let mut correct = 0;
    for (track, e) in dataset.tracks.iter().zip(&embeddings) {
        let scores: Vec<f64> = (0..k)
            .map(|c| w.data()[c * d..(c + 1) * d].iter().zip(e).map(|(a, b)| a * b).sum::<f64>() + b.data()[c])
            .collect();
        let best = (0..k).max_by(|&x, &y| scores[x].total_cmp(&scores[y]).then(y.cmp(&x))).unwrap();
        if classes.get(&track.speaker_id) == Some(&best) {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len().max(1) as f64)
}
