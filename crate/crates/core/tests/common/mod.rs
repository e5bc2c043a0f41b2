//! Independent oracles and harnesses shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmodal::losses::{composite_loss, BatchEmbeddings, CompositeLoss};
use xmodal::nets::{forward_stream, Bound};
use xmodal::{EncoderConfig, Graph, LossOptions, LossWeights, Modality, ParamStore, Regime, SynthConfig, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// Six nested loops over one `[Cin,H,W]` image.
pub fn naive_conv2d(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    wt: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    bias: &[f64],
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
) -> Vec<f64> {
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[co];
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += wt[((co * cin + ci) * kh + ky) * kw + kx] * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

pub fn naive_linear(x: &[f64], rows: usize, din: usize, wt: &[f64], dout: usize, bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut acc = bias[o];
            for i in 0..din {
                acc += x[r * din + i] * wt[o * din + i];
            }
            out[r * dout + o] = acc;
        }
    }
    out
}

/// `-Σ t_k log softmax(x)_k` straight from the definition.
pub fn naive_cross_entropy(logits: &[f64], target: &[f64]) -> f64 {
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    -logits.iter().zip(target).map(|(l, t)| t * (l.exp() / z).ln()).sum::<f64>()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Evaluates FAR and FRR at every candidate threshold (one below the lowest
/// score, each midpoint, one above the highest) and returns the crossing.
pub fn brute_force_eer(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    s.dedup();
    let mut thresholds = vec![s[0] - 1.0];
    thresholds.extend(s.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    thresholds.push(s[s.len() - 1] + 1.0);
    let rates = |t: f64| {
        let mut fa = 0.0;
        let mut fr = 0.0;
        for (&x, &l) in scores.iter().zip(labels) {
            if l && x <= t {
                fr += 1.0;
            }
            if !l && x > t {
                fa += 1.0;
            }
        }
        (fa / neg, fr / pos)
    };
    let mut prev = rates(thresholds[0]);
    if prev.0 == prev.1 {
        return prev.0;
    }
    for &t in &thresholds[1..] {
        let cur = rates(t);
        if cur.0 == cur.1 {
            return cur.0;
        }
        let (d0, d1) = (prev.0 - prev.1, cur.0 - cur.1);
        if d0 > 0.0 && d1 < 0.0 {
            let a = d0 / (d0 - d1);
            return prev.0 + a * (cur.0 - prev.0);
        }
        prev = cur;
    }
    unreachable!("FAR falls from 1 to 0 while FRR rises from 0 to 1")
}

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        visual_frame_shape: (1, 4, 4),
        audio_frame_shape: (4, 4),
        trunk_channels: [2, 3, 2, 3, 4],
        embed_dim: 3,
        ..EncoderConfig::default()
    }
}

pub fn tiny_synth(encoder: &EncoderConfig) -> SynthConfig {
    SynthConfig {
        num_speakers: 6,
        tracks_per_speaker: 3,
        frames_per_track: 12,
        visual_frame_shape: encoder.visual_frame_shape,
        audio_frame_shape: encoder.audio_frame_shape,
        hidden_dim: 8,
        ..SynthConfig::default()
    }
}

/// Full two-stream forward plus composite loss on fixed frames.
pub struct ModelLoss {
    pub graph: Graph,
    pub bound: Bound,
    pub loss: CompositeLoss,
}

#[allow(clippy::too_many_arguments)]
pub fn model_loss(
    params: &ParamStore,
    encoder: &EncoderConfig,
    visual: &Tensor,
    audio: &Tensor,
    face_index: &[usize],
    regime: Regime,
    weights: &LossWeights,
    opts: LossOptions,
) -> ModelLoss {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, |_| true);
    let v = g.constant(visual.clone());
    let a = g.constant(audio.clone());
    let heads = regime.heads();
    let face = forward_stream(&mut g, &bound, encoder, Modality::Face, v, heads).unwrap();
    let audio = forward_stream(&mut g, &bound, encoder, Modality::Audio, a, heads).unwrap();
    let loss = composite_loss(&mut g, &BatchEmbeddings { face, audio }, face_index, regime, weights, opts).unwrap();
    ModelLoss { graph: g, bound, loss }
}

/// Central difference of `f` at `x[i]`.
pub fn central_difference(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// `|a - n| / max(|a|, |n|)`, or the absolute gap when both are tiny.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Checks the gradient of `Σ c ⊙ op(inputs)` against central differences
/// for every element of every input. Returns the worst relative error.
pub fn check_op_gradient(inputs: &[Tensor], seed: u64, op: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut r = rng(seed);
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = op(&mut g, &vars);
        random_tensor(g.shape(out), &mut r)
    };
    let scalar = |g: &mut Graph, vars: &[Var]| {
        let out = op(g, vars);
        let c = g.constant(weights.clone());
        let prod = g.mul(out, c).unwrap();
        g.sum(prod)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let loss = scalar(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let mut data = t.data().to_vec();
        for i in 0..data.len() {
            let numeric = central_difference(&mut data, i, 1e-5, |d| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == k {
                            g.constant(Tensor::new(t.shape().to_vec(), d.to_vec()).unwrap())
                        } else {
                            g.constant(t.clone())
                        }
                    })
                    .collect();
                let l = scalar(&mut g, &vars);
                g.value(l).item()
            });
            worst = worst.max(relative_error(analytic[k][i], numeric));
        }
    }
    worst
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
