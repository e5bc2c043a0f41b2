//! Whole-run evaluation and the comparison tables built from it.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{
    choose_labeled_speakers, eval_matching_tasks, linear_probe, verification_report, EmbeddingKind, EvalConfig,
    MetricsReport, ProbeConfig, TrialConfig,
};
use crate::losses::Regime;
use crate::nets::{EncoderConfig, ParamStore};
use crate::seed;
use crate::train::{train_supervised_baseline, TrainConfig};

/// True when `params` holds both streams (a cross-modal checkpoint rather
/// than an audio-only baseline).
pub fn has_face_stream(params: &ParamStore) -> bool {
    params.names().any(|n| n.starts_with("face."))
}

/// Matching accuracies and verification EER for both embedding types. Audio
/// only checkpoints get verification rows without accuracies.
pub fn evaluate_run(
    params: &ParamStore,
    encoder: &EncoderConfig,
    heldout: &Dataset,
    eval: &EvalConfig,
    trials: &TrialConfig,
    regime: Option<Regime>,
    training_speakers: Option<&BTreeSet<u64>>,
) -> Result<Vec<MetricsReport>> {
    let kinds: &[EmbeddingKind] = if has_face_stream(params) { &EmbeddingKind::ALL } else { &[EmbeddingKind::Identity] };
    let mut out = Vec::new();
    for &kind in kinds {
        let mut report = verification_report(params, encoder, heldout, trials, kind, None)?;
        if has_face_stream(params) {
            let acc = eval_matching_tasks(params, encoder, heldout, eval, kind, training_speakers)?;
            report.merge_matching(&acc);
        }
        report.regime = regime;
        report.seed = eval.seed;
        out.push(report);
    }
    Ok(out)
}

/// One labelled-subset size: the frozen probe against a supervised baseline
/// trained end-to-end on the same speakers.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub labeled_speakers: usize,
    pub probe: MetricsReport,
    pub supervised: MetricsReport,
}

/// Seeded choice of `k` labelled speakers from `train`.
pub fn labeled_subset(train: &Dataset, k: usize, subset_seed: u64) -> Result<Dataset> {
    let mut rng = seed::rng_for(subset_seed, "label.subset");
    Ok(train.subset_speakers(&choose_labeled_speakers(train, k, &mut rng)?))
}

#[allow(clippy::too_many_arguments)]
pub fn label_sweep_point(
    params: &ParamStore,
    encoder: &EncoderConfig,
    train: &Dataset,
    heldout: &Dataset,
    k: usize,
    probe: &ProbeConfig,
    supervised: &TrainConfig,
    trials: &TrialConfig,
) -> Result<SweepPoint> {
    let labeled = labeled_subset(train, k, probe.seed)?;
    let (_, mut probe_report) = linear_probe(params, encoder, &labeled, heldout, probe, trials)?;
    let (baseline, _) = train_supervised_baseline(&labeled, encoder, supervised)?;
    let mut sup_report = verification_report(&baseline, encoder, heldout, trials, EmbeddingKind::Identity, None)?;
    probe_report.labeled_speakers = Some(k);
    sup_report.labeled_speakers = Some(k);
    sup_report.regime = Some(Regime::Supervised);
    Ok(SweepPoint { labeled_speakers: k, probe: probe_report, supervised: sup_report })
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

/// Rows of regime x embedding type with N-way, B-way and EER columns.
pub fn comparison_grid(rows: &[(String, MetricsReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<16} {:<10} {:<10} {:>9} {:>9} {:>9}", "run", "regime", "embedding", "nway_acc", "bway_acc", "eer");
    for (run, r) in rows {
        let _ = writeln!(
            s,
            "{:<16} {:<10} {:<10} {:>9} {:>9} {:>9}",
            run,
            r.regime.map(|r| r.to_string()).unwrap_or_else(|| "-".into()),
            r.embedding.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
            cell(r.nway_acc),
            cell(r.bway_acc),
            cell(r.eer)
        );
    }
    s
}

/// Probe and supervised EER per labelled-subset size.
pub fn sweep_table(rows: &[(String, SweepPoint)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<16} {:>8} {:>10} {:>15}", "run", "labeled", "probe_eer", "supervised_eer");
    for (run, p) in rows {
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>10} {:>15}",
            run,
            p.labeled_speakers,
            cell(p.probe.eer),
            cell(p.supervised.eer)
        );
    }
    s
}

/// Rejects a comparison across runs with different embedding sizes.
pub fn check_embed_dims(dims: &[(String, usize)]) -> Result<()> {
    if let Some((first_run, d0)) = dims.first() {
        if let Some((run, d)) = dims.iter().find(|(_, d)| d != d0) {
            return Err(Error::Config(format!(
                "embed_dim mismatch: {first_run} has {d0}, {run} has {d}"
            )));
        }
    }
    Ok(())
}
