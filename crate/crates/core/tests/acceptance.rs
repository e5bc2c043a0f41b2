//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. The desk experiments train 15 encoders and take several
//! minutes on one core.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use common::*;
use rand::seq::SliceRandom;
use rand::Rng;
use xmodal::eval::{
    compute_eer, eval_matching_tasks, run_verification, EmbeddingKind, EvalConfig, MatchingAccuracy, TrialConfig,
};
use xmodal::losses::{confusion_loss_d1, confusion_loss_d2, content_loss, identity_loss};
use xmodal::nets::init_params;
use xmodal::report::{evaluate_run, label_sweep_point};
use xmodal::{
    generate_synthetic, train, Dataset, Graph, LossOptions, LossWeights, Modality, ParamStore, Regime, RunConfig,
    Target, Tensor, TrainConfig,
};

const SEEDS: u64 = 5;
const GRAD_TOL: f64 = 1e-4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn criterion_autodiff() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    let mut op = |name: &str, inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[xmodal::Var]) -> xmodal::Var| {
        let e = check_op_gradient(inputs, 2, f);
        worst = worst.max(e);
        (e < GRAD_TOL).then_some(()).ok_or_else(|| format!("{name}: {e:.2e}"))
    };
    let x4 = random_tensor(&[2, 2, 5, 4], &mut r);
    let w4 = random_tensor(&[3, 2, 3, 2], &mut r);
    let b3 = random_tensor(&[3], &mut r);
    let x3 = random_tensor(&[2, 3, 5], &mut r);
    let w2 = random_tensor(&[4, 5], &mut r);
    let b4 = random_tensor(&[4], &mut r);
    let m = random_tensor(&[3, 4], &mut r);
    let n = random_tensor(&[3, 4], &mut r);
    let kinked = Tensor::from_fn(&[4, 6], |i| if i % 2 == 0 { 0.1 + 0.03 * i as f64 } else { -0.1 - 0.02 * i as f64 });
    let positive = Tensor::from_fn(&[3, 4], |i| 0.5 + i as f64 * 0.1);
    let hard = [Target::Index(0), Target::Index(3), Target::Index(1)];
    let checks = [
        op("conv2d", &[x4.clone(), w4, b3], &|g, v| g.conv2d(v[0], v[1], v[2], (1, 1), (1, 1)).unwrap()),
        op("linear", &[x3, w2, b4], &|g, v| g.linear(v[0], v[1], Some(v[2])).unwrap()),
        op("relu", &[kinked], &|g, v| g.relu(v[0])),
        op("max_pool2d", &[x4], &|g, v| g.max_pool2d(v[0], 2).unwrap()),
        op("mean_over_axis", std::slice::from_ref(&m), &|g, v| g.mean_over_axis(v[0], 1).unwrap()),
        op("pairwise_sq_euclidean", &[m.clone(), n.clone()], &|g, v| g.pairwise_sq_euclidean(v[0], v[1]).unwrap()),
        op("cross_entropy", std::slice::from_ref(&m), &|g, v| g.softmax_cross_entropy(v[0], &hard).unwrap()),
        op("add", &[m.clone(), n.clone()], &|g, v| g.add(v[0], v[1]).unwrap()),
        op("sub", &[m.clone(), n.clone()], &|g, v| g.sub(v[0], v[1]).unwrap()),
        op("mul", &[m.clone(), n], &|g, v| g.mul(v[0], v[1]).unwrap()),
        op("scale", std::slice::from_ref(&m), &|g, v| g.scale(v[0], -2.5)),
        op("neg", std::slice::from_ref(&m), &|g, v| g.neg(v[0])),
        op("sum", std::slice::from_ref(&m), &|g, v| g.sum(v[0])),
        op("sqrt_eps", &[positive], &|g, v| g.sqrt_eps(v[0], 1e-12)),
        op("reshape", std::slice::from_ref(&m), &|g, v| g.reshape(v[0], &[2, 6]).unwrap()),
        op("permute", std::slice::from_ref(&m), &|g, v| g.permute(v[0], &[1, 0]).unwrap()),
        op("gather_rows", std::slice::from_ref(&m), &|g, v| g.gather_rows(v[0], &[2, 0, 2]).unwrap()),
        op("concat", &[m.clone(), m.clone()], &|g, v| g.concat(&[v[0], v[1]]).unwrap()),
        op("l2_normalize", &[m], &|g, v| g.l2_normalize(v[0], 1e-12).unwrap()),
    ];
    if let Some(Err(e)) = checks.into_iter().find(Result::is_err) {
        return outcome(false, format!("op gradient off: {e}"));
    }

    let enc = tiny_encoder();
    let params = init_params(&enc, 31).unwrap();
    let (b, t) = (3, 7);
    let mut vshape = vec![b, t];
    vshape.extend(enc.frame_shape(Modality::Face));
    let mut ashape = vec![b, t];
    ashape.extend(enc.frame_shape(Modality::Audio));
    let visual = random_tensor(&vshape, &mut r);
    let audio = random_tensor(&ashape, &mut r);
    let face_index = [0, 2, 1];
    let weights = LossWeights { cl: 1.0, il: 0.7, d1: 1.3, d2: 0.5 };
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut probes = 0;
    for regime in [Regime::ClIlDl, Regime::ClIl, Regime::Cl, Regime::Il] {
        let opts = LossOptions::default();
        let ml = model_loss(&params, &enc, &visual, &audio, &face_index, regime, &weights, opts);
        let mut g = ml.graph;
        g.backward(ml.loss.total).unwrap();
        for _ in 0..60 {
            let name = names.choose(&mut r).unwrap();
            let Some(grad) = g.grad(ml.bound.var(name).unwrap()) else { continue };
            let i = r.gen_range(0..grad.len());
            let analytic = grad[i];
            let mut data = params.get(name).unwrap().data().to_vec();
            let numeric = central_difference(&mut data, i, 1e-5, |d| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().data_mut().copy_from_slice(d);
                let m = model_loss(&p, &enc, &visual, &audio, &face_index, regime, &weights, opts);
                m.graph.value(m.loss.total).item()
            });
            worst = worst.max(relative_error(analytic, numeric));
            probes += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < GRAD_TOL && probes >= 200 && elapsed < Duration::from_secs(120),
        format!("{probes} model probes + 19 ops, worst relative error {worst:.2e}, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn criterion_loss_identities() -> Outcome {
    let basis = |k: usize| Tensor::from_fn(&[k, k], |i| if i / k == i % k { 1.0 } else { 0.0 });
    let (mut worst_value, mut worst_grad): (f64, f64) = (0.0, 0.0);
    for k in 2..=64usize {
        let ln_k = (k as f64).ln();
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[k]));
        let c = g.constant(basis(k));
        let (cl, _) = content_loss(&mut g, q, c, 0, LossOptions::default()).unwrap();
        let (il, _) = identity_loss(&mut g, q, c, k - 1, LossOptions::default()).unwrap();
        worst_value = worst_value.max((g.value(cl).item() - ln_k).abs()).max((g.value(il).item() - ln_k).abs());
        for which in 0..2 {
            let mut g = Graph::new();
            let q = g.leaf(Tensor::zeros(&[k]).with_grad());
            let c = g.leaf(basis(k).with_grad());
            let l = if which == 0 {
                confusion_loss_d1(&mut g, q, c, LossOptions::default()).unwrap()
            } else {
                confusion_loss_d2(&mut g, q, c, LossOptions::default()).unwrap()
            };
            worst_value = worst_value.max((g.value(l).item() - ln_k).abs());
            g.backward(l).unwrap();
            for v in [q, c] {
                worst_grad = g.grad(v).unwrap().iter().fold(worst_grad, |m, d| m.max(d.abs()));
            }
        }
    }
    outcome(
        worst_value < 1e-9 && worst_grad < 1e-9,
        format!("K=2..64: max |loss - ln K| {worst_value:.1e}, max confusion gradient {worst_grad:.1e}"),
    )
}

fn criterion_eer_oracle() -> Outcome {
    let mut r = rng(300);
    let mut worst: f64 = 0.0;
    let mut invariant = true;
    for case in 0..100 {
        let labels: Vec<bool> = (0..1000).map(|i| i == 0 || (i != 1 && r.gen_bool(0.5))).collect();
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| {
                let s: f64 = r.gen_range(-1.0..1.0) + if l { 0.4 } else { 0.0 };
                if case % 3 == 0 {
                    (s * 8.0).round() / 8.0
                } else {
                    s
                }
            })
            .collect();
        let (eer, _) = compute_eer(&scores, &labels).unwrap();
        worst = worst.max((eer - brute_force_eer(&scores, &labels)).abs());
        for f in [|s: f64| 2.0 * s + 1.0, |s: f64| s * s * s] {
            let mapped: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            invariant &= compute_eer(&mapped, &labels).unwrap().0.to_bits() == eer.to_bits();
        }
    }
    outcome(
        worst < 1e-12 && invariant,
        format!("100 x 1000 trials: max |Δ| vs sweep oracle {worst:.1e}, 2x+1 and x³ bit-exact: {invariant}"),
    )
}

fn criterion_chance(rc: &RunConfig, heldout: &Dataset) -> Outcome {
    let params = init_params(&rc.encoder, 0).unwrap();
    let eval = EvalConfig { b: 30, n: 30, num_batches: 500, seed: 0 };
    let chance = 1.0 / 30.0;
    let mut ok = true;
    let mut cells = Vec::new();
    for kind in EmbeddingKind::ALL {
        let acc = eval_matching_tasks(&params, &rc.encoder, heldout, &eval, kind, None).unwrap();
        ok &= (acc.nway - chance).abs() <= 0.015 && (acc.bway - chance).abs() <= 0.015;
        cells.push(format!("{kind} N-way {:.4} B-way {:.4}", acc.nway, acc.bway));
    }
    let trials = TrialConfig { pairs_per_class: 1000, seed: 0 };
    let eer = run_verification(&params, &rc.encoder, heldout, &trials, None).unwrap().eer.unwrap();
    ok &= (0.47..=0.53).contains(&eer);
    outcome(ok, format!("{}, EER {eer:.4} over 2000 trials", cells.join(", ")))
}

struct DeskRun {
    params: ParamStore,
    identity: MatchingAccuracy,
    eer: f64,
    elapsed: Duration,
}

fn desk_runs(rc: &RunConfig, train_set: &Dataset, heldout: &Dataset) -> BTreeMap<Regime, Vec<DeskRun>> {
    let eval = EvalConfig { b: rc.train.b, n: rc.train.n, num_batches: 500, seed: 0 };
    let train_speakers = train_set.speakers();
    let mut out = BTreeMap::new();
    for regime in [Regime::Il, Regime::ClIl, Regime::ClIlDl] {
        let runs = (0..SEEDS)
            .map(|seed| {
                let start = Instant::now();
                let cfg = TrainConfig { regime, seed, ..rc.train_config() };
                let (params, _) = train(train_set, &rc.encoder, &cfg).unwrap();
                let elapsed = start.elapsed();
                let identity = eval_matching_tasks(
                    &params,
                    &rc.encoder,
                    heldout,
                    &eval,
                    EmbeddingKind::Identity,
                    Some(&train_speakers),
                )
                .unwrap();
                let eer = run_verification(&params, &rc.encoder, heldout, &rc.trials, None).unwrap().eer.unwrap();
                eprintln!(
                    "  {regime} seed {seed}: identity N-way {:.3} B-way {:.3}, EER {eer:.3}, {:.0}s",
                    identity.nway,
                    identity.bway,
                    elapsed.as_secs_f64()
                );
                DeskRun { params, identity, eer, elapsed }
            })
            .collect();
        out.insert(regime, runs);
    }
    out
}

struct Medians {
    nway: f64,
    bway: f64,
    eer: f64,
}

fn medians(runs: &[DeskRun]) -> Medians {
    Medians {
        nway: median(runs.iter().map(|r| r.identity.nway).collect()),
        bway: median(runs.iter().map(|r| r.identity.bway).collect()),
        eer: median(runs.iter().map(|r| r.eer).collect()),
    }
}

fn criterion_identity_ordering(rc: &RunConfig, runs: &BTreeMap<Regime, Vec<DeskRun>>) -> Outcome {
    let (il, clil, dl) = (medians(&runs[&Regime::Il]), medians(&runs[&Regime::ClIl]), medians(&runs[&Regime::ClIlDl]));
    let chance = 1.0 / rc.train.b as f64;
    let slowest = runs.values().flatten().map(|r| r.elapsed).max().unwrap();
    let a = il.bway >= 3.0 * chance;
    let b = clil.bway >= il.bway;
    let c = dl.nway < clil.nway && dl.bway >= clil.bway - 0.02;
    let budget = slowest < Duration::from_secs(15 * 60) && rc.train.epochs <= 50;
    outcome(
        a && b && c && budget,
        format!(
            "(a) IL B-way {:.3} vs 3x chance {:.3}: {}; (b) CL+IL B-way {:.3} vs IL {:.3}: {}; \
             (c) identity N-way CL+IL {:.3} -> +DL {:.3}, B-way {:.3} -> {:.3}: {}; slowest run {:.0}s",
            il.bway,
            3.0 * chance,
            verdict(a),
            clil.bway,
            il.bway,
            verdict(b),
            clil.nway,
            dl.nway,
            clil.bway,
            dl.bway,
            verdict(c),
            slowest.as_secs_f64()
        ),
    )
}

fn criterion_eer_ordering(runs: &BTreeMap<Regime, Vec<DeskRun>>) -> Outcome {
    let (il, clil, dl) = (medians(&runs[&Regime::Il]), medians(&runs[&Regime::ClIl]), medians(&runs[&Regime::ClIlDl]));
    outcome(
        il.eer >= clil.eer && clil.eer >= dl.eer,
        format!("median EER IL {:.4} >= CL+IL {:.4} >= CL+IL+DL {:.4}", il.eer, clil.eer, dl.eer),
    )
}

fn criterion_probe_vs_supervision(
    rc: &RunConfig,
    train_set: &Dataset,
    heldout: &Dataset,
    runs: &[DeskRun],
) -> (Outcome, Outcome) {
    let mut sweep: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut unprobed = Vec::new();
    for (seed, run) in (0..).zip(runs) {
        unprobed.push(run.eer);
        for &k in &rc.probe_sweep {
            let probe = xmodal::eval::ProbeConfig { seed, ..rc.probe.clone() };
            let supervised = TrainConfig { seed, ..rc.supervised_config() };
            let point =
                label_sweep_point(&run.params, &rc.encoder, train_set, heldout, k, &probe, &supervised, &rc.trials)
                    .unwrap();
            let entry = sweep.entry(k).or_default();
            entry.0.push(point.probe.eer.unwrap());
            entry.1.push(point.supervised.eer.unwrap());
        }
    }
    let few = *rc.probe_sweep.iter().min().unwrap();
    let all = train_set.speakers().len();
    let cells: Vec<String> = sweep
        .iter()
        .map(|(k, (p, s))| format!("{k} labeled: probe {:.4} supervised {:.4}", median(p.clone()), median(s.clone())))
        .collect();
    let (p, s) = &sweep[&few];
    let main = outcome(median(p.clone()) < median(s.clone()), cells.join(", "));
    let full = &sweep[&all].0;
    let base = median(unprobed);
    let gain = outcome(
        median(full.clone()) < base,
        format!("{all} labeled speakers: probed EER {:.4} vs unprobed {base:.4}", median(full.clone())),
    );
    (main, gain)
}

fn criterion_determinism(rc: &RunConfig, train_set: &Dataset, heldout: &Dataset) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 3, steps_per_epoch: 10, seed: 11, ..rc.train_config() };
    let eval = EvalConfig { num_batches: 50, ..EvalConfig { b: 8, n: 8, ..rc.eval.clone() } };
    let mut artifacts = Vec::new();
    for i in 0..2 {
        let (params, log) = train(train_set, &rc.encoder, &cfg).unwrap();
        let path = dir.path().join(format!("run{i}.ckpt"));
        params.save(&path).unwrap();
        let reports: String = evaluate_run(&params, &rc.encoder, heldout, &eval, &rc.trials, Some(cfg.regime), None)
            .unwrap()
            .iter()
            .map(|r| r.to_text())
            .collect();
        // Wall-clock time is the only column allowed to differ.
        let losses: Vec<u64> = log.losses().iter().map(|v| v.to_bits()).collect();
        artifacts.push((std::fs::read(&path).unwrap(), reports, losses));
    }
    let (a, b) = (&artifacts[0], &artifacts[1]);
    let (ckpt, reports, losses) = (a.0 == b.0, a.1 == b.1, a.2 == b.2);
    outcome(
        ckpt && reports && losses,
        format!(
            "two {} runs: checkpoint ({} bytes) identical: {ckpt}, reports: {reports}, loss stream: {losses}",
            cfg.regime,
            a.0.len()
        ),
    )
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "not met"
    }
}

fn main() {
    let rc = RunConfig::default();
    let train_set = generate_synthetic(&rc.synth).unwrap();
    let heldout = generate_synthetic(&rc.heldout_synth()).unwrap();

    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 autodiff", criterion_autodiff()),
        ("2 loss identities", criterion_loss_identities()),
        ("3 EER oracle", criterion_eer_oracle()),
        ("4 chance calibration", criterion_chance(&rc, &heldout)),
    ];
    let runs = desk_runs(&rc, &train_set, &heldout);
    results.push(("5 identity task ordering", criterion_identity_ordering(&rc, &runs)));
    results.push(("6 verification ordering", criterion_eer_ordering(&runs)));
    let (probe, gain) = criterion_probe_vs_supervision(&rc, &train_set, &heldout, &runs[&Regime::ClIl]);
    results.push(("7 probe vs supervision", probe));
    results.push(("7 probe gain", gain));
    results.push(("8 determinism", criterion_determinism(&rc, &train_set, &heldout)));

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} of {} acceptance checks failed", results.len());
        std::process::exit(1);
    }
}
