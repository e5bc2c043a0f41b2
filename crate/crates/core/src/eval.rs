//! Matching accuracies, verification EER, and the frozen-embedding linear
//! probe.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::data::{sample_batch, Dataset};
use crate::error::{Error, Result};
use crate::losses::Regime;
use crate::nets::{draw_face_index, embed_batch, EncoderConfig, Heads, Modality, ParamStore};
use crate::seed;
use crate::tensor::{Graph, Target, Tensor};

/// Which head's vectors are scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EmbeddingKind {
    Identity,
    Content,
}

impl EmbeddingKind {
    pub const ALL: [EmbeddingKind; 2] = [EmbeddingKind::Identity, EmbeddingKind::Content];

    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingKind::Identity => "identity",
            EmbeddingKind::Content => "content",
        }
    }

    pub fn heads(self) -> Heads {
        match self {
            EmbeddingKind::Identity => Heads::IDENTITY,
            EmbeddingKind::Content => Heads::CONTENT,
        }
    }
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" | "id" => Ok(EmbeddingKind::Identity),
            "content" => Ok(EmbeddingKind::Content),
            other => Err(Error::Config(format!("unknown embedding kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub b: usize,
    pub n: usize,
    pub num_batches: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { b: 30, n: 30, num_batches: 500, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchingAccuracy {
    pub nway: f64,
    pub bway: f64,
    pub nway_trials: usize,
    pub bway_trials: usize,
}

/// Index of the largest value; the first one wins ties.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn neg_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

/// Scores one batch of `[B, N, D]` face and audio embeddings on both tasks.
/// Returns (N-way hits, B-way hits).
pub fn score_matching_batch(face: &Tensor, audio: &Tensor, face_index: &[usize]) -> Result<(usize, usize)> {
    if face.shape() != audio.shape() || face.rank() != 3 {
        return Err(Error::dim("matching", face.shape(), audio.shape()));
    }
    let (b, n, d) = (face.shape()[0], face.shape()[1], face.shape()[2]);
    if face_index.len() != b {
        return Err(Error::Contract(format!("{} face positions for B={b}", face_index.len())));
    }
    let vec = |t: &Tensor, i: usize, j: usize| -> Vec<f64> { t.data()[(i * n + j) * d..(i * n + j + 1) * d].to_vec() };

    let mut nway = 0;
    for i in 0..b {
        for j in 0..n {
            let f = vec(face, i, j);
            let logits: Vec<f64> = (0..n).map(|k| neg_sq_dist(&f, &vec(audio, i, k))).collect();
            nway += usize::from(argmax(&logits) == j);
        }
    }
    let means: Vec<Vec<f64>> = (0..b)
        .map(|i| {
            let mut m = vec![0.0; d];
            for k in 0..n {
                m.iter_mut().zip(vec(audio, i, k)).for_each(|(a, v)| *a += v);
            }
            m.iter_mut().for_each(|a| *a /= n as f64);
            m
        })
        .collect();
    let mut bway = 0;
    for (i, &pos) in face_index.iter().enumerate() {
        let f = vec(face, i, pos);
        let logits: Vec<f64> = means.iter().map(|m| neg_sq_dist(&f, m)).collect();
        bway += usize::from(argmax(&logits) == i);
    }
    Ok((nway, bway))
}

/// N-way content and B-way identity accuracy with `which` embeddings
/// substituted into both tasks. With `training_speakers` given, any overlap
/// with the evaluation speakers is an error.
pub fn eval_matching_tasks(
    params: &ParamStore,
    encoder: &EncoderConfig,
    dataset: &Dataset,
    config: &EvalConfig,
    which: EmbeddingKind,
    training_speakers: Option<&BTreeSet<u64>>,
) -> Result<MatchingAccuracy> {
    if config.num_batches == 0 {
        return Err(Error::Config("num_batches must be >= 1".into()));
    }
    if let Some(train) = training_speakers {
        let overlap: Vec<u64> = dataset.speakers().intersection(train).copied().collect();
        if !overlap.is_empty() {
            return Err(Error::Data(format!(
                "evaluation speakers overlap training speakers: {overlap:?}"
            )));
        }
    }
    let heads = which.heads();
    let pick = |(id, content): (Option<Tensor>, Option<Tensor>)| match which {
        EmbeddingKind::Identity => id.expect("identity head requested"),
        EmbeddingKind::Content => content.expect("content head requested"),
    };
    let (mut nway, mut bway) = (0, 0);
    for i in 0..config.num_batches {
        let mut rng = seed::rng_for_step(config.seed, "eval.match", i as u64);
        let batch = sample_batch(dataset, config.b, config.n, &mut rng)?;
        let face_index: Vec<usize> = (0..config.b).map(|_| draw_face_index(config.n, &mut rng)).collect();
        let face = pick(embed_batch(params, encoder, Modality::Face, batch.visual_tensor(), heads)?);
        let audio = pick(embed_batch(params, encoder, Modality::Audio, batch.audio_tensor(), heads)?);
        let (nh, bh) = score_matching_batch(&face, &audio, &face_index)?;
        nway += nh;
        bway += bh;
    }
    let nway_trials = config.num_batches * config.b * config.n;
    let bway_trials = config.num_batches * config.b;
    Ok(MatchingAccuracy {
        nway: nway as f64 / nway_trials as f64,
        bway: bway as f64 / bway_trials as f64,
        nway_trials,
        bway_trials,
    })
}

/// Cosine similarity `a·b / (|a| |b|)`.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine score of a zero vector is undefined".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Equal error rate and the threshold attaining it.
///
/// A trial is accepted when its score exceeds the threshold. Thresholds are
/// swept over one point below all scores, every midpoint between adjacent
/// distinct scores, and one point above all scores. The first threshold where
/// FAR and FRR meet gives the EER; otherwise the two rates are linearly
/// interpolated between the adjacent thresholds where they cross.
pub fn compute_eer(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::dim("eer", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Degenerate("non-finite verification score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate("EER needs both same and different trials".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Rates at each threshold, ascending. Start below every score: every
    // trial is accepted.
    let lo = scores[order[0]];
    let hi = scores[order[order.len() - 1]];
    let mut thresholds = vec![lo - 1.0];
    let mut far = vec![1.0];
    let mut frr = vec![0.0];
    let (mut rejected_pos, mut rejected_neg) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                rejected_pos += 1;
            } else {
                rejected_neg += 1;
            }
            i += 1;
        }
        let t = if i < order.len() { s + (scores[order[i]] - s) / 2.0 } else { hi + 1.0 };
        thresholds.push(t);
        far.push((neg - rejected_neg) as f64 / neg as f64);
        frr.push(rejected_pos as f64 / pos as f64);
    }

    for j in 0..thresholds.len() {
        let d = far[j] - frr[j];
        if d == 0.0 {
            return Ok((far[j], thresholds[j]));
        }
        if d < 0.0 {
            // Crossing lies between j-1 (FAR > FRR) and j.
            let dp = far[j - 1] - frr[j - 1];
            let alpha = dp / (dp - d);
            let eer = far[j - 1] + alpha * (far[j] - far[j - 1]);
            let thr = thresholds[j - 1] + alpha * (thresholds[j] - thresholds[j - 1]);
            return Ok((eer, thr));
        }
    }
    unreachable!("FAR - FRR goes from 1 to -1 across the sweep")
}

/// One verification pair, referring to tracks by dataset index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trial {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Lines of `track_a track_b {0|1}`.
    pub fn to_text(&self, dataset: &Dataset) -> String {
        let mut s = String::new();
        for t in &self.trials {
            let _ = writeln!(
                s,
                "{} {} {}",
                dataset.tracks[t.a].track_id,
                dataset.tracks[t.b].track_id,
                u8::from(t.same)
            );
        }
        s
    }

    pub fn parse(text: &str, dataset: &Dataset) -> Result<Self> {
        let index: BTreeMap<u64, usize> = dataset.tracks.iter().enumerate().map(|(i, t)| (t.track_id, i)).collect();
        let mut trials = Vec::new();
        for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::Format(format!("trial line {}: `{line}`", ln + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(bad());
            }
            let id = |s: &str| -> Result<usize> {
                let id: u64 = s.parse().map_err(|_| bad())?;
                index.get(&id).copied().ok_or_else(|| Error::Data(format!("unknown track {id}")))
            };
            let same = match f[2] {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            };
            trials.push(Trial { a: id(f[0])?, b: id(f[1])?, same });
        }
        Ok(Self { trials })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialConfig {
    /// Trials per class; capped by the number of same-speaker pairs.
    pub pairs_per_class: usize,
    pub seed: u64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self { pairs_per_class: 1000, seed: 0 }
    }
}

/// Balanced same/different track pairs sampled without replacement.
pub fn build_trials(dataset: &Dataset, config: &TrialConfig) -> Result<TrialList> {
    if dataset.speakers().len() < 2 {
        return Err(Error::Data("verification needs at least 2 speakers".into()));
    }
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for a in 0..dataset.len() {
        for b in a + 1..dataset.len() {
            let s = dataset.tracks[a].speaker_id == dataset.tracks[b].speaker_id;
            (if s { &mut same } else { &mut diff }).push(Trial { a, b, same: s });
        }
    }
    if same.is_empty() {
        return Err(Error::Data("no speaker has two tracks; cannot form same-speaker trials".into()));
    }
    let k = config.pairs_per_class.min(same.len()).min(diff.len());
    if k == 0 {
        return Err(Error::Config("pairs_per_class must be >= 1".into()));
    }
    let mut rng = seed::rng_for(config.seed, "eval.trials");
    let mut pick = |pool: &[Trial]| -> Vec<Trial> {
        let mut idx = index::sample(&mut rng, pool.len(), k).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i]).collect()
    };
    let mut trials = pick(&same);
    trials.extend(pick(&diff));
    Ok(TrialList { trials })
}

/// Per-track audio embedding: the mean over all positions of the chosen
/// head, one vector per track in dataset order.
pub fn track_embeddings(
    params: &ParamStore,
    encoder: &EncoderConfig,
    dataset: &Dataset,
    which: EmbeddingKind,
) -> Result<Vec<Vec<f64>>> {
    dataset
        .tracks
        .iter()
        .map(|t| {
            let mut shape = vec![1];
            shape.extend(t.audio().shape());
            let frames = t.audio().clone().reshaped(shape)?;
            let (id, content) = embed_batch(params, encoder, Modality::Audio, frames, which.heads())?;
            let e = match which {
                EmbeddingKind::Identity => id,
                EmbeddingKind::Content => content,
            }
            .expect("requested head");
            let (n, d) = (e.shape()[1], e.shape()[2]);
            let mut m = vec![0.0; d];
            for row in e.data().chunks(d) {
                m.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            m.iter_mut().for_each(|a| *a /= n as f64);
            Ok(m)
        })
        .collect()
}

/// EER of cosine scores over `trials` on precomputed embeddings.
pub fn verification_eer(embeddings: &[Vec<f64>], trials: &TrialList) -> Result<(f64, f64)> {
    let mut scores = Vec::with_capacity(trials.len());
    let mut labels = Vec::with_capacity(trials.len());
    for t in &trials.trials {
        scores.push(cosine_score(&embeddings[t.a], &embeddings[t.b])?);
        labels.push(t.same);
    }
    compute_eer(&scores, &labels)
}

/// Held-out verification with track-averaged audio identity embeddings,
/// optionally passed through a trained probe.
pub fn run_verification(
    params: &ParamStore,
    encoder: &EncoderConfig,
    dataset: &Dataset,
    trials: &TrialConfig,
    probe: Option<&LinearProbe>,
) -> Result<MetricsReport> {
    verification_report(params, encoder, dataset, trials, EmbeddingKind::Identity, probe)
}

/// Verification on track-averaged audio embeddings of either head.
pub fn verification_report(
    params: &ParamStore,
    encoder: &EncoderConfig,
    dataset: &Dataset,
    trials: &TrialConfig,
    which: EmbeddingKind,
    probe: Option<&LinearProbe>,
) -> Result<MetricsReport> {
    let list = build_trials(dataset, trials)?;
    let mut emb = track_embeddings(params, encoder, dataset, which)?;
    if let Some(p) = probe {
        emb = emb.iter().map(|e| p.apply(e)).collect::<Result<_>>()?;
    }
    let (eer, thr) = verification_eer(&emb, &list)?;
    Ok(MetricsReport {
        embedding: Some(which),
        seed: trials.seed,
        eer: Some(eer),
        eer_threshold: Some(thr),
        verification_trials: list.len(),
        ..MetricsReport::default()
    })
}

/// A single affine layer `x -> W x + b` over frozen embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

pub const PROBE_WEIGHT: &str = "probe.weight";
pub const PROBE_BIAS: &str = "probe.bias";

impl LinearProbe {
    /// Starts at the identity map, so an untrained probe scores exactly like
    /// the raw embedding.
    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Tensor::from_fn(&[dim, dim], |i| if i / dim == i % dim { 1.0 } else { 0.0 }),
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (out, din) = (self.weight.shape()[0], self.weight.shape()[1]);
        if x.len() != din {
            return Err(Error::dim("probe", &[x.len()], self.weight.shape()));
        }
        Ok((0..out)
            .map(|o| {
                self.weight.data()[o * din..(o + 1) * din].iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
                    + self.bias.data()[o]
            })
            .collect())
    }

    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(PROBE_WEIGHT, self.weight.clone());
        s.insert(PROBE_BIAS, self.bias.clone());
        s
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let get = |n: &str| store.get(n).cloned().ok_or_else(|| Error::Contract(format!("missing `{n}`")));
        Ok(Self { weight: get(PROBE_WEIGHT)?, bias: get(PROBE_BIAS)? })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 20, steps_per_epoch: 20, lr: 1e-2, seed: 0 }
    }
}

/// Trains a probe with the multi-class n-pair loss on precomputed
/// embeddings: each step takes one anchor and one positive per speaker, and
/// every other speaker's positive is a negative. Returns the probe and the
/// per-step losses.
pub fn train_probe(embeddings: &[Vec<f64>], speakers: &[u64], config: &ProbeConfig) -> Result<(LinearProbe, Vec<f64>)> {
    if embeddings.len() != speakers.len() || embeddings.is_empty() {
        return Err(Error::Contract("one speaker label per embedding required".into()));
    }
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &s) in speakers.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::Data("probe needs at least 2 labelled speakers".into()));
    }
    if let Some((s, _)) = groups.iter().find(|(_, v)| v.len() < 2) {
        return Err(Error::Data(format!("speaker {s} has fewer than 2 tracks and cannot form a pair")));
    }
    let d = embeddings[0].len();
    let mut probe = LinearProbe::identity(d);
    let targets: Vec<Target> = (0..groups.len()).map(Target::Index).collect();
    let mut losses = Vec::new();
    for step in 0..config.epochs * config.steps_per_epoch {
        let mut rng = seed::rng_for_step(config.seed, "probe.step", step as u64);
        let mut anchors = Vec::with_capacity(groups.len() * d);
        let mut positives = Vec::with_capacity(groups.len() * d);
        for members in groups.values() {
            let pair = index::sample(&mut rng, members.len(), 2);
            anchors.extend(&embeddings[members[pair.index(0)]]);
            positives.extend(&embeddings[members[pair.index(1)]]);
        }
        let s = groups.len();
        let mut g = Graph::new();
        let w = g.leaf(probe.weight.clone().with_grad());
        let b = g.leaf(probe.bias.clone().with_grad());
        let a = g.constant(Tensor::new(vec![s, d], anchors)?);
        let p = g.constant(Tensor::new(vec![s, d], positives)?);
        let pa = g.linear(a, w, Some(b))?;
        let pp = g.linear(p, w, Some(b))?;
        let logits = g.linear(pa, pp, None)?;
        let loss = g.softmax_cross_entropy(logits, &targets)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { step });
        }
        g.backward(loss)?;
        for (param, var) in [(&mut probe.weight, w), (&mut probe.bias, b)] {
            let grad = g.grad(var).expect("probe parameters require grad");
            param.data_mut().iter_mut().zip(grad).for_each(|(x, dx)| *x -= config.lr * dx);
        }
        losses.push(value);
    }
    Ok((probe, losses))
}

/// Trains a probe on `labeled` with the base network frozen, then runs
/// verification on `heldout` through it.
pub fn linear_probe(
    params: &ParamStore,
    encoder: &EncoderConfig,
    labeled: &Dataset,
    heldout: &Dataset,
    probe_config: &ProbeConfig,
    trials: &TrialConfig,
) -> Result<(LinearProbe, MetricsReport)> {
    let emb = track_embeddings(params, encoder, labeled, EmbeddingKind::Identity)?;
    let speakers: Vec<u64> = labeled.tracks.iter().map(|t| t.speaker_id).collect();
    let (probe, _) = train_probe(&emb, &speakers, probe_config)?;
    let mut report = run_verification(params, encoder, heldout, trials, Some(&probe))?;
    report.labeled_speakers = Some(labeled.speakers().len());
    Ok((probe, report))
}

/// Picks `k` labelled speakers from `dataset` with a seeded draw.
pub fn choose_labeled_speakers<R: Rng + ?Sized>(dataset: &Dataset, k: usize, rng: &mut R) -> Result<BTreeSet<u64>> {
    let all: Vec<u64> = dataset.speakers().into_iter().collect();
    if k > all.len() {
        return Err(Error::Data(format!("asked for {k} labelled speakers, dataset has {}", all.len())));
    }
    Ok(index::sample(rng, all.len(), k).into_iter().map(|i| all[i]).collect())
}

/// Flat `key=value` evaluation record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub run: Option<String>,
    pub regime: Option<Regime>,
    pub embedding: Option<EmbeddingKind>,
    pub seed: u64,
    pub nway_acc: Option<f64>,
    pub bway_acc: Option<f64>,
    pub eer: Option<f64>,
    pub eer_threshold: Option<f64>,
    pub nway_trials: usize,
    pub bway_trials: usize,
    pub verification_trials: usize,
    pub labeled_speakers: Option<usize>,
}

impl MetricsReport {
    pub fn merge_matching(&mut self, acc: &MatchingAccuracy) {
        self.nway_acc = Some(acc.nway);
        self.bway_acc = Some(acc.bway);
        self.nway_trials = acc.nway_trials;
        self.bway_trials = acc.bway_trials;
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                let _ = writeln!(s, "{k}={v}");
            }
        };
        kv("run", self.run.clone());
        kv("regime", self.regime.map(|r| r.to_string()));
        kv("embedding", self.embedding.map(|e| e.to_string()));
        kv("seed", Some(self.seed.to_string()));
        kv("nway_acc", self.nway_acc.map(|v| v.to_string()));
        kv("bway_acc", self.bway_acc.map(|v| v.to_string()));
        kv("eer", self.eer.map(|v| v.to_string()));
        kv("eer_threshold", self.eer_threshold.map(|v| v.to_string()));
        kv("nway_trials", Some(self.nway_trials.to_string()));
        kv("bway_trials", Some(self.bway_trials.to_string()));
        kv("verification_trials", Some(self.verification_trials.to_string()));
        kv("labeled_speakers", self.labeled_speakers.map(|v| v.to_string()));
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = MetricsReport::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("report line without `=`: `{line}`")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| Error::Format(format!("bad number for {k}: `{v}`")));
            let int = |v: &str| v.parse::<usize>().map_err(|_| Error::Format(format!("bad count for {k}: `{v}`")));
            match k {
                "run" => r.run = Some(v.to_string()),
                "regime" => r.regime = Some(v.parse()?),
                "embedding" => r.embedding = Some(v.parse()?),
                "seed" => r.seed = v.parse().map_err(|_| Error::Format(format!("bad seed `{v}`")))?,
                "nway_acc" => r.nway_acc = Some(num(v)?),
                "bway_acc" => r.bway_acc = Some(num(v)?),
                "eer" => r.eer = Some(num(v)?),
                "eer_threshold" => r.eer_threshold = Some(num(v)?),
                "nway_trials" => r.nway_trials = int(v)?,
                "bway_trials" => r.bway_trials = int(v)?,
                "verification_trials" => r.verification_trials = int(v)?,
                "labeled_speakers" => r.labeled_speakers = Some(int(v)?),
                other => return Err(Error::Format(format!("unknown report key `{other}`"))),
            }
        }
        Ok(r)
    }
}
