//! Two-stream encoders. Each modality has its own five-stage convolutional
//! trunk (four per-frame 2-D stages, then a temporal convolution spanning
//! five frames) feeding two linear heads: identity and content.
//!
//! A window of `N + 4` frames yields exactly `N` embedding positions; position
//! `i` depends only on frames `i..i+5`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{read_checkpoint, write_checkpoint, Graph, Tensor, Var};

pub const TEMPORAL_KERNEL: usize = 5;
pub const TRUNK_STAGES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Face,
    Audio,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Face => "face",
            Modality::Audio => "audio",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// (channels, height, width) of one video frame.
    pub visual_frame_shape: (usize, usize, usize),
    /// (freq_bins, time_bins) of one 0.04 s audio frame.
    pub audio_frame_shape: (usize, usize),
    pub trunk_channels: [usize; TRUNK_STAGES],
    pub embed_dim: usize,
    pub temporal_kernel: usize,
    pub temporal_stride: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            visual_frame_shape: (1, 8, 8),
            audio_frame_shape: (8, 4),
            trunk_channels: [16, 16, 32, 32, 64],
            embed_dim: 32,
            temporal_kernel: TEMPORAL_KERNEL,
            temporal_stride: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temporal_kernel != TEMPORAL_KERNEL || self.temporal_stride != 1 {
            return Err(Error::Config(format!(
                "temporal kernel/stride must be {TEMPORAL_KERNEL}/1, got {}/{}",
                self.temporal_kernel, self.temporal_stride
            )));
        }
        if self.embed_dim == 0 || self.trunk_channels.contains(&0) {
            return Err(Error::Config("embed_dim and trunk channels must be positive".into()));
        }
        for m in [Modality::Face, Modality::Audio] {
            let [c, h, w] = self.frame_image(m);
            if c == 0 || h < 4 || w < 4 {
                return Err(Error::Config(format!(
                    "{} frames must be at least 4x4 with >= 1 channel, got {c}x{h}x{w}",
                    m.name()
                )));
            }
        }
        Ok(())
    }

    /// Per-frame shape as stored in datasets.
    pub fn frame_shape(&self, m: Modality) -> Vec<usize> {
        match m {
            Modality::Face => {
                let (c, h, w) = self.visual_frame_shape;
                vec![c, h, w]
            }
            Modality::Audio => vec![self.audio_frame_shape.0, self.audio_frame_shape.1],
        }
    }

    /// Per-frame shape as seen by the 2-D trunk stages: `[C, H, W]`.
    fn frame_image(&self, m: Modality) -> [usize; 3] {
        match m {
            Modality::Face => {
                let (c, h, w) = self.visual_frame_shape;
                [c, h, w]
            }
            Modality::Audio => [1, self.audio_frame_shape.0, self.audio_frame_shape.1],
        }
    }

    /// Flattened per-frame feature size entering the temporal stage.
    fn temporal_in(&self, m: Modality) -> usize {
        let [_, h, w] = self.frame_image(m);
        self.trunk_channels[3] * (h / 4) * (w / 4)
    }

    fn param_shapes(&self, m: Modality) -> Vec<(String, Vec<usize>)> {
        let p = m.name();
        let [cin, _, _] = self.frame_image(m);
        let ch = self.trunk_channels;
        let mut v = Vec::new();
        let mut prev = cin;
        for (i, &c) in ch[..4].iter().enumerate() {
            v.push((format!("{p}.trunk.{}.weight", i + 1), vec![c, prev, 3, 3]));
            v.push((format!("{p}.trunk.{}.bias", i + 1), vec![c]));
            prev = c;
        }
        v.push((format!("{p}.trunk.5.weight"), vec![ch[4], self.temporal_in(m), TEMPORAL_KERNEL, 1]));
        v.push((format!("{p}.trunk.5.bias"), vec![ch[4]]));
        for head in ["id", "content"] {
            v.push((format!("{p}.head.{head}.weight"), vec![self.embed_dim, ch[4]]));
            v.push((format!("{p}.head.{head}.bias"), vec![self.embed_dim]));
        }
        v
    }
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = tensor,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, tensor));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
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

    /// Total scalar parameter count over names with the given prefix.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.numel()).sum()
    }

    /// Records every parameter on `g`; names accepted by `trainable` become
    /// gradient-carrying leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(name, t)| {
                let mut t = t.clone();
                t.zero_grad();
                t.set_requires_grad(trainable(name));
                (name.clone(), g.leaf(t))
            })
            .collect();
        Bound { vars }
    }

    /// Plain SGD step `p -= lr * grad` using the gradients accumulated on `g`.
    pub fn sgd_step(&mut self, g: &Graph, bound: &Bound, lr: f64) {
        for (name, var) in &bound.vars {
            if let Some(grad) = g.grad(*var) {
                let p = self.get_mut(name).expect("bound parameter exists");
                p.data_mut().iter_mut().zip(grad).for_each(|(w, d)| *w -= lr * d);
            }
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        for (n, t) in other.entries {
            self.insert(n, t);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = BufWriter::new(File::create(path)?);
        write_checkpoint(f, self.iter())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = BufReader::new(File::open(path)?);
        let mut store = ParamStore::new();
        for (name, t) in read_checkpoint(f)? {
            store.insert(name, t);
        }
        Ok(store)
    }
}

/// Graph handles for a [`ParamStore`] bound to one forward pass.
#[derive(Debug)]
pub struct Bound {
    vars: Vec<(String, Var)>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }
}

/// Uniform `±sqrt(gain * 3 / fan_in)`, so outputs keep unit variance per
/// unit input variance (gain 2 in front of a ReLU). One seeded stream per
/// tensor name.
fn init_tensor(name: &str, shape: &[usize], fan_in: usize, gain: f64, seed: u64) -> Tensor {
    let bound = (gain * 3.0 / fan_in as f64).sqrt();
    let mut rng = seed::rng_for(seed, name);
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

/// Adds one stream's parameters: trunk weights scaled for the following
/// ReLU, head weights for a linear output, biases zero.
pub fn init_stream(store: &mut ParamStore, config: &EncoderConfig, m: Modality, seed: u64) {
    let shapes = config.param_shapes(m);
    for pair in shapes.chunks(2) {
        let (wname, wshape) = &pair[0];
        let (bname, bshape) = &pair[1];
        let fan_in: usize = wshape[1..].iter().product();
        let gain = if wname.contains(".trunk.") { 2.0 } else { 1.0 };
        store.insert(wname.clone(), init_tensor(wname, wshape, fan_in, gain, seed));
        store.insert(bname.clone(), Tensor::zeros(bshape));
    }
}

/// Fresh parameters for both streams.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut store = ParamStore::new();
    init_stream(&mut store, config, Modality::Face, seed);
    init_stream(&mut store, config, Modality::Audio, seed);
    Ok(store)
}

/// Which heads a forward pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub identity: bool,
    pub content: bool,
}

impl Heads {
    pub const BOTH: Heads = Heads { identity: true, content: true };
    pub const IDENTITY: Heads = Heads { identity: true, content: false };
    pub const CONTENT: Heads = Heads { identity: false, content: true };
}

/// Graph-level stream outputs, each `[B, N, embed_dim]`.
#[derive(Clone, Copy, Debug)]
pub struct StreamOutput {
    pub identity: Option<Var>,
    pub content: Option<Var>,
}

/// Runs one modality stream over a batch of windows `[B, T, *frame_shape]`.
pub fn forward_stream(
    g: &mut Graph,
    bound: &Bound,
    config: &EncoderConfig,
    m: Modality,
    frames: Var,
    heads: Heads,
) -> Result<StreamOutput> {
    let shape = g.shape(frames).to_vec();
    let frame = config.frame_shape(m);
    if shape.len() != 2 + frame.len() || shape[2..] != frame[..] {
        let mut expect = vec![0, 0];
        expect.extend(&frame);
        return Err(Error::dim("encode", &shape, &expect));
    }
    let (b, t) = (shape[0], shape[1]);
    if t < TEMPORAL_KERNEL {
        return Err(Error::WindowTooShort { len: t, min: TEMPORAL_KERNEL });
    }
    let n = t - TEMPORAL_KERNEL + 1;
    let p = m.name();
    let [c, h, w] = config.frame_image(m);

    let mut x = g.reshape(frames, &[b * t, c, h, w])?;
    for stage in 1..=4 {
        let wv = bound.var(&format!("{p}.trunk.{stage}.weight"))?;
        let bv = bound.var(&format!("{p}.trunk.{stage}.bias"))?;
        x = g.conv2d(x, wv, bv, (1, 1), (1, 1))?;
        x = g.relu(x);
        if stage <= 2 {
            x = g.max_pool2d(x, 2)?;
        }
    }
    let feat = config.temporal_in(m);
    x = g.reshape(x, &[b, t, feat])?;
    x = g.permute(x, &[0, 2, 1])?;
    x = g.reshape(x, &[b, feat, t, 1])?;
    let wv = bound.var(&format!("{p}.trunk.5.weight"))?;
    let bv = bound.var(&format!("{p}.trunk.5.bias"))?;
    x = g.conv2d(x, wv, bv, (config.temporal_stride, 1), (0, 0))?;
    x = g.relu(x);
    let c5 = config.trunk_channels[4];
    x = g.reshape(x, &[b, c5, n])?;
    let trunk = g.permute(x, &[0, 2, 1])?;

    let mut head = |name: &str, on: bool| -> Result<Option<Var>> {
        if !on {
            return Ok(None);
        }
        let wv = bound.var(&format!("{p}.head.{name}.weight"))?;
        let bv = bound.var(&format!("{p}.head.{name}.bias"))?;
        g.linear(trunk, wv, Some(bv)).map(Some)
    };
    Ok(StreamOutput {
        identity: head("id", heads.identity)?,
        content: head("content", heads.content)?,
    })
}

/// Identity and content embeddings for one track window of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub identity: Tensor,
    pub content: Tensor,
    pub modality: Modality,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.identity.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encodes `frames[N+4, *frame_shape]` into `N` identity and content vectors.
pub fn encode_track_window(
    frames: &Tensor,
    params: &ParamStore,
    config: &EncoderConfig,
    m: Modality,
) -> Result<EmbeddingSet> {
    if frames.rank() == 0 || frames.shape()[0] < TEMPORAL_KERNEL {
        return Err(Error::WindowTooShort {
            len: frames.shape().first().copied().unwrap_or(0),
            min: TEMPORAL_KERNEL,
        });
    }
    let mut batched = vec![1];
    batched.extend(frames.shape());
    let (id, content) = embed_batch(params, config, m, frames.clone().reshaped(batched)?, Heads::BOTH)?;
    let strip = |t: Tensor| {
        let s = t.shape()[1..].to_vec();
        t.reshaped(s)
    };
    Ok(EmbeddingSet {
        identity: strip(id.expect("identity head requested"))?,
        content: strip(content.expect("content head requested"))?,
        modality: m,
    })
}

/// Inference-only forward over `[B, T, *frame_shape]`; returns `[B, N, D]`
/// tensors for the requested heads.
pub fn embed_batch(
    params: &ParamStore,
    config: &EncoderConfig,
    m: Modality,
    frames: Tensor,
    heads: Heads,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, |_| false);
    let x = g.constant(frames);
    let out = forward_stream(&mut g, &bound, config, m, x, heads)?;
    Ok((
        out.identity.map(|v| g.value(v).clone()),
        out.content.map(|v| g.value(v).clone()),
    ))
}

/// Track-level audio identity: the mean of the `N` per-position vectors.
pub fn aggregate_audio_identity(set: &EmbeddingSet) -> Result<Tensor> {
    if set.modality != Modality::Audio {
        return Err(Error::Modality { expected: "audio", actual: set.modality.name() });
    }
    let mut g = Graph::new();
    let x = g.constant(set.identity.clone());
    let m = g.mean_over_axis(x, 0)?;
    Ok(g.value(m).clone())
}

/// Uniform draw of one face position in `[0, n)`.
pub fn draw_face_index<R: Rng + ?Sized>(n: usize, rng: &mut R) -> usize {
    rng.gen_range(0..n)
}

/// Picks one face identity vector uniformly at random; returns it with its
/// position.
pub fn select_face_identity<R: Rng + ?Sized>(set: &EmbeddingSet, rng: &mut R) -> Result<(Tensor, usize)> {
    if set.modality != Modality::Face {
        return Err(Error::Modality { expected: "face", actual: set.modality.name() });
    }
    if set.is_empty() {
        return Err(Error::Contract("empty embedding set".into()));
    }
    let idx = draw_face_index(set.len(), rng);
    let d = set.identity.shape()[1];
    let v = Tensor::new(vec![d], set.identity.row(idx).to_vec())?;
    Ok((v, idx))
}
