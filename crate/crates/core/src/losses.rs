//! Cross-modal matching losses.
//!
//! Both matching tasks score a query against K candidates with
//! `logit_k = -distance(query, candidate_k)`:
//!
//! * content (N-way): a face content vector against the N audio content
//!   vectors of its own window, positive = the synchronised position;
//! * identity (B-way): one randomly chosen face identity vector against the
//!   B track-averaged audio identity vectors of the batch.
//!
//! The confusion losses reuse those constructions with swapped embeddings
//! (content vectors in the B-way task, identity vectors in the N-way task)
//! and a uniform target, so their minimum `ln K` is reached exactly when
//! the task carries no signal.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nets::{Heads, StreamOutput};
use crate::tensor::{Graph, Target, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    /// Content loss only.
    Cl,
    /// Identity loss only.
    Il,
    ClIl,
    /// Content, identity and both confusion losses.
    ClIlDl,
    /// Audio stream trained end-to-end on speaker labels.
    Supervised,
}

impl Regime {
    pub const SELF_SUPERVISED: [Regime; 4] = [Regime::Cl, Regime::Il, Regime::ClIl, Regime::ClIlDl];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Cl => "CL",
            Regime::Il => "IL",
            Regime::ClIl => "CL+IL",
            Regime::ClIlDl => "CL+IL+DL",
            Regime::Supervised => "supervised",
        }
    }

    pub fn uses_content(self) -> bool {
        matches!(self, Regime::Cl | Regime::ClIl | Regime::ClIlDl)
    }

    pub fn uses_identity(self) -> bool {
        matches!(self, Regime::Il | Regime::ClIl | Regime::ClIlDl | Regime::Supervised)
    }

    pub fn uses_confusion(self) -> bool {
        self == Regime::ClIlDl
    }

    /// Heads that must be evaluated during training.
    pub fn heads(self) -> Heads {
        Heads { identity: self.uses_identity(), content: self.uses_content() }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts: Vec<String> = s.split('+').map(|p| p.trim().to_ascii_uppercase()).collect();
        if parts.len() == 1 && parts[0] == "SUPERVISED" {
            return Ok(Regime::Supervised);
        }
        parts.sort();
        parts.dedup();
        let has = |p: &str| parts.iter().any(|x| x == p);
        if parts.iter().any(|p| !matches!(p.as_str(), "CL" | "IL" | "DL")) {
            return Err(Error::Config(format!("unknown regime `{s}`")));
        }
        match (has("CL"), has("IL"), has("DL")) {
            (true, false, false) => Ok(Regime::Cl),
            (false, true, false) => Ok(Regime::Il),
            (true, true, false) => Ok(Regime::ClIl),
            (true, true, true) => Ok(Regime::ClIlDl),
            _ => Err(Error::Config(format!(
                "invalid regime `{s}`: DL requires both CL and IL; expected CL, IL, CL+IL, CL+IL+DL or supervised"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Distance {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossOptions {
    pub distance: Distance,
    /// L2-normalise embeddings before computing distances.
    pub normalize: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cl: f64,
    pub il: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cl: 1.0, il: 1.0, d1: 1.0, d2: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchKind {
    ContentNway,
    IdentityBway,
}

#[derive(Clone, Debug)]
pub struct MatchLogits {
    /// `[K]`, or `[..., K]` for batched queries.
    pub logits: Var,
    pub positive_index: Option<usize>,
    pub kind: MatchKind,
}

const EUCLIDEAN_EPS: f64 = 1e-12;
const NORMALIZE_EPS: f64 = 1e-12;

/// `-distance` from each query to each candidate; see
/// [`Graph::pairwise_sq_euclidean`] for accepted layouts.
pub fn matching_logits(g: &mut Graph, queries: Var, candidates: Var, opts: LossOptions) -> Result<Var> {
    let (q, c) = if opts.normalize {
        (g.l2_normalize(queries, NORMALIZE_EPS)?, g.l2_normalize(candidates, NORMALIZE_EPS)?)
    } else {
        (queries, candidates)
    };
    let mut d = g.pairwise_sq_euclidean(q, c)?;
    if opts.distance == Distance::Euclidean {
        d = g.sqrt_eps(d, EUCLIDEAN_EPS);
    }
    Ok(g.neg(d))
}

fn candidate_count(g: &Graph, candidates: Var) -> Result<usize> {
    let s = g.shape(candidates);
    if s.len() < 2 {
        return Err(Error::dim("matching", s, &[0, 0]));
    }
    Ok(s[s.len() - 2])
}

/// N-way content matching of one face content vector against the audio
/// content vectors of the same window.
pub fn content_loss(
    g: &mut Graph,
    visual_content: Var,
    audio_contents: Var,
    positive_index: usize,
    opts: LossOptions,
) -> Result<(Var, MatchLogits)> {
    hard_match(g, visual_content, audio_contents, positive_index, opts, MatchKind::ContentNway)
}

/// B-way identity matching of one face identity vector against the
/// track-averaged audio identity vectors of the batch.
pub fn identity_loss(
    g: &mut Graph,
    face_id: Var,
    audio_id_means: Var,
    positive_track: usize,
    opts: LossOptions,
) -> Result<(Var, MatchLogits)> {
    hard_match(g, face_id, audio_id_means, positive_track, opts, MatchKind::IdentityBway)
}

fn hard_match(
    g: &mut Graph,
    query: Var,
    candidates: Var,
    positive: usize,
    opts: LossOptions,
    kind: MatchKind,
) -> Result<(Var, MatchLogits)> {
    let k = candidate_count(g, candidates)?;
    if k < 2 {
        return Err(Error::Degenerate(format!("{kind:?} needs at least 2 candidates, got {k}")));
    }
    if positive >= k {
        return Err(Error::Contract(format!("positive index {positive} >= {k} candidates")));
    }
    let logits = matching_logits(g, query, candidates, opts)?;
    let loss = g.softmax_cross_entropy(logits, &[Target::Index(positive)])?;
    Ok((loss, MatchLogits { logits, positive_index: Some(positive), kind }))
}

/// Confusion loss on the B-way construction fed with content vectors:
/// cross-entropy of the match distribution against the uniform target.
pub fn confusion_loss_d1(g: &mut Graph, face_content: Var, audio_content_means: Var, opts: LossOptions) -> Result<Var> {
    uniform_match(g, face_content, audio_content_means, opts, MatchKind::IdentityBway)
}

/// Confusion loss on the N-way construction fed with identity vectors.
pub fn confusion_loss_d2(g: &mut Graph, face_identity: Var, audio_identities: Var, opts: LossOptions) -> Result<Var> {
    uniform_match(g, face_identity, audio_identities, opts, MatchKind::ContentNway)
}

fn uniform_match(g: &mut Graph, query: Var, candidates: Var, opts: LossOptions, kind: MatchKind) -> Result<Var> {
    let k = candidate_count(g, candidates)?;
    if k < 2 {
        return Err(Error::Degenerate(format!("{kind:?} confusion needs at least 2 candidates, got {k}")));
    }
    let logits = matching_logits(g, query, candidates, opts)?;
    g.softmax_cross_entropy(logits, &[Target::uniform(k)])
}

/// Both streams' outputs for one batch, each `[B, N, D]`.
#[derive(Clone, Copy, Debug)]
pub struct BatchEmbeddings {
    pub face: StreamOutput,
    pub audio: StreamOutput,
}

/// Loss graph node plus the value of each active component.
#[derive(Clone, Debug)]
pub struct CompositeLoss {
    pub total: Var,
    pub cl: Option<f64>,
    pub il: Option<f64>,
    pub d1: Option<f64>,
    pub d2: Option<f64>,
}

fn require(v: Option<Var>, what: &str, regime: Regime) -> Result<Var> {
    v.ok_or_else(|| Error::Contract(format!("regime {regime} needs {what} embeddings")))
}

/// Rows `(b, face_index[b])` of a `[B, N, D]` tensor, as `[B, D]`.
fn select_positions(g: &mut Graph, x: Var, face_index: &[usize]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    if face_index.len() != b || face_index.iter().any(|&i| i >= n) {
        return Err(Error::Contract(format!("face indices {face_index:?} invalid for B={b}, N={n}")));
    }
    let flat = g.reshape(x, &[b * n, d])?;
    let rows: Vec<usize> = face_index.iter().enumerate().map(|(bi, &i)| bi * n + i).collect();
    g.gather_rows(flat, &rows)
}

/// Content loss averaged over every track and every face position.
pub fn batch_content_loss(g: &mut Graph, face_content: Var, audio_content: Var, opts: LossOptions) -> Result<Var> {
    let s = g.shape(face_content).to_vec();
    if s.len() != 3 || g.shape(audio_content) != s.as_slice() {
        return Err(Error::dim("content loss", &s, g.shape(audio_content)));
    }
    let (b, n) = (s[0], s[1]);
    if n < 2 {
        return Err(Error::Degenerate(format!("content task needs N >= 2, got {n}")));
    }
    let logits = matching_logits(g, face_content, audio_content, opts)?;
    let targets: Vec<Target> = (0..b).flat_map(|_| (0..n).map(Target::Index)).collect();
    g.softmax_cross_entropy(logits, &targets)
}

/// Identity loss averaged over the B face queries of a batch.
pub fn batch_identity_loss(
    g: &mut Graph,
    face_identity: Var,
    audio_identity: Var,
    face_index: &[usize],
    opts: LossOptions,
) -> Result<Var> {
    let b = g.shape(face_identity)[0];
    if b < 2 {
        return Err(Error::Degenerate(format!("identity task needs B >= 2, got {b}")));
    }
    let faces = select_positions(g, face_identity, face_index)?;
    let means = g.mean_over_axis(audio_identity, 1)?;
    let logits = matching_logits(g, faces, means, opts)?;
    let targets: Vec<Target> = (0..b).map(Target::Index).collect();
    g.softmax_cross_entropy(logits, &targets)
}

pub fn batch_confusion_d1(
    g: &mut Graph,
    face_content: Var,
    audio_content: Var,
    face_index: &[usize],
    opts: LossOptions,
) -> Result<Var> {
    let faces = select_positions(g, face_content, face_index)?;
    let means = g.mean_over_axis(audio_content, 1)?;
    confusion_loss_d1(g, faces, means, opts)
}

pub fn batch_confusion_d2(g: &mut Graph, face_identity: Var, audio_identity: Var, opts: LossOptions) -> Result<Var> {
    uniform_match(g, face_identity, audio_identity, opts, MatchKind::ContentNway)
}

/// Weighted sum of the losses active under `regime`. `face_index[b]` is the
/// randomly selected face position of track `b`, shared by the identity and
/// D1 terms.
pub fn composite_loss(
    g: &mut Graph,
    emb: &BatchEmbeddings,
    face_index: &[usize],
    regime: Regime,
    weights: &LossWeights,
    opts: LossOptions,
) -> Result<CompositeLoss> {
    if regime == Regime::Supervised {
        return Err(Error::Contract("supervised regime has no cross-modal loss".into()));
    }
    let mut terms: Vec<Var> = Vec::new();
    let mut out = CompositeLoss { total: Var(0), cl: None, il: None, d1: None, d2: None };
    let mut add = |g: &mut Graph, loss: Var, w: f64, slot: &mut Option<f64>| {
        *slot = Some(g.value(loss).item());
        terms.push(g.scale(loss, w));
    };

    if regime.uses_content() {
        let fc = require(emb.face.content, "face content", regime)?;
        let ac = require(emb.audio.content, "audio content", regime)?;
        let l = batch_content_loss(g, fc, ac, opts)?;
        add(g, l, weights.cl, &mut out.cl);
    }
    if regime.uses_identity() {
        let fi = require(emb.face.identity, "face identity", regime)?;
        let ai = require(emb.audio.identity, "audio identity", regime)?;
        let l = batch_identity_loss(g, fi, ai, face_index, opts)?;
        add(g, l, weights.il, &mut out.il);
    }
    if regime.uses_confusion() {
        let fc = require(emb.face.content, "face content", regime)?;
        let ac = require(emb.audio.content, "audio content", regime)?;
        let fi = require(emb.face.identity, "face identity", regime)?;
        let ai = require(emb.audio.identity, "audio identity", regime)?;
        let l1 = batch_confusion_d1(g, fc, ac, face_index, opts)?;
        add(g, l1, weights.d1, &mut out.d1);
        let l2 = batch_confusion_d2(g, fi, ai, opts)?;
        add(g, l2, weights.d2, &mut out.d2);
    }

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    out.total = total;
    Ok(out)
}
