//! End-to-end benchmark: generate phantom data, pretrain on the source
//! domain, adapt per target subject under every requested mode, evaluate, and
//! tabulate the comparison in the per-class + Mean layout.
//!
//! Subjects adapt in parallel (one worker per subject); results merge in
//! subject order, so the output is identical regardless of thread count.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ModeName, RunConfig};
use crate::data::{self, derive_seed, Domain, SubjectVolume};
use crate::engine::{self, AdaptOptions, PretrainTraceRow, TraceRow};
use crate::error::Result;
use crate::metrics::{self, MethodRow, MetricReport};
use crate::segnet::{ForwardMode, ParameterStore};

/// Canonical row order of the comparison table.
pub const METHOD_ORDER: [&str; 5] = ["NoAdap", "Tent", "TTAS_R", "TTAS_RC", "TTAS_RD"];

pub struct BenchResult {
    pub table_text: String,
    pub results_csv: String,
    pub rows: Vec<MethodRow>,
    pub reports: Vec<MetricReport>,
    pub pretrain_trace: Vec<PretrainTraceRow>,
    /// (method, subject) -> adaptation trace.
    pub traces: Vec<(String, String, Vec<TraceRow>)>,
}

impl BenchResult {
    pub fn mean_dsc(&self, method: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method).map(|r| r.mean_dsc)
    }
}

#[derive(Serialize)]
struct Manifest {
    version: &'static str,
    config_hash: String,
    seed: u64,
    modes: Vec<String>,
    source_subjects: usize,
    target_subjects: usize,
}

/// Cap rayon's global pool from SHAPE_TTA_THREADS; first caller wins.
pub fn init_thread_pool() {
    if let Ok(raw) = std::env::var("SHAPE_TTA_THREADS") {
        if let Ok(n) = raw.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

/// Run the full benchmark and write every artifact under `out_dir`.
pub fn run_bench(config: &RunConfig, out_dir: &Path) -> Result<BenchResult> {
    config.validate()?;
    init_thread_pool();
    std::fs::create_dir_all(out_dir)?;

    let spec = &config.data.phantom;
    let source = data::generate(spec, config.data.source_subjects, Domain::Source, derive_seed(config.seed, "source-data"))?;
    let target = data::generate(spec, config.data.target_subjects, Domain::Target, derive_seed(config.seed, "target-data"))?;

    let data_dir = out_dir.join("data");
    for (sub_dir, subjects) in [("source", &source), ("target", &target)] {
        let dir = data_dir.join(sub_dir);
        std::fs::create_dir_all(&dir)?;
        for s in subjects {
            s.save(&dir.join(format!("{}.vol", s.header.subject_id)))?;
        }
    }

    let (store, pretrain_trace) =
        engine::pretrain(&source, &config.network, &config.schedule, derive_seed(config.seed, "pretrain"))?;
    store.save(&out_dir.join("checkpoint.ckpt"))?;
    std::fs::write(out_dir.join("pretrain_trace.csv"), engine::pretrain_trace_csv(&pretrain_trace))?;

    let (reports, traces) = run_methods(config, &store, &target, Some(out_dir))?;

    let rows = metrics::aggregate(&reports, &METHOD_ORDER);
    let class_names = class_names(spec.num_classes());
    let name_refs: Vec<&str> = class_names.iter().map(|s| s.as_str()).collect();
    let table_text = metrics::render_table(&rows, &name_refs);
    let results_csv = metrics::render_csv(&reports);

    std::fs::write(out_dir.join("results_table.txt"), &table_text)?;
    std::fs::write(out_dir.join("results.csv"), &results_csv)?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        config_hash: config.hash(),
        seed: config.seed,
        modes: config.modes.iter().map(|m| format!("{:?}", m)).collect(),
        source_subjects: source.len(),
        target_subjects: target.len(),
    };
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    Ok(BenchResult { table_text, results_csv, rows, reports, pretrain_trace, traces })
}

/// NoAdap plus every configured adaptation mode over all target subjects.
/// Subjects run in parallel; output order is by subject id.
#[allow(clippy::type_complexity)]
fn run_methods(
    config: &RunConfig,
    store: &ParameterStore,
    target: &[SubjectVolume],
    out_dir: Option<&Path>,
) -> Result<(Vec<MetricReport>, Vec<(String, String, Vec<TraceRow>)>)> {
    let (n, h, w) = {
        let hd = &target[0].header;
        (hd.slices, hd.height, hd.width)
    };
    let k = config.network.num_classes;

    let per_subject: Vec<Result<(Vec<MetricReport>, Vec<(String, String, Vec<TraceRow>)>, Vec<(String, SubjectVolume)>)>> = target
        .par_iter()
        .map(|subject| {
            let subject_id = subject.header.subject_id.clone();
            let gt = subject.labels.as_ref().expect("generated subjects carry labels");
            let mut reports = Vec::new();
            let mut traces = Vec::new();
            let mut predictions = Vec::new();

            let noadap = engine::predict(store, &subject.without_labels(), ForwardMode::Eval)?;
            reports.push(metrics::evaluate_volume("NoAdap", &subject_id, &noadap, gt, n, h, w, k)?);
            predictions.push(("NoAdap".to_string(), prediction_volume(subject, &noadap)));

            let prior = config.descriptor_prior(&subject_id)?;
            let options = AdaptOptions {
                lambda: config.loss.lambda,
                kl_weight: config.loss.kl_weight,
                band_delta: config.loss.band_delta,
                band_form: config.loss.band_form,
                seed: derive_seed(config.seed, &format!("adapt/{}", subject_id)),
            };
            for mode_name in &config.modes {
                let mode = mode_name.to_mode();
                let outcome =
                    engine::adapt_subject(store, subject, mode, &prior, &config.schedule, &options)?;
                reports.push(metrics::evaluate_volume(mode.label(), &subject_id, &outcome.predictions, gt, n, h, w, k)?);
                traces.push((mode.label().to_string(), subject_id.clone(), outcome.trace));
                predictions.push((mode.label().to_string(), prediction_volume(subject, &outcome.predictions)));
            }
            Ok((reports, traces, predictions))
        })
        .collect();

    let mut reports = Vec::new();
    let mut traces = Vec::new();
    for result in per_subject {
        let (r, t, preds) = result?;
        if let Some(out_dir) = out_dir {
            for (method, volume) in &preds {
                let dir = out_dir.join("predictions").join(method);
                std::fs::create_dir_all(&dir)?;
                volume.save(&dir.join(format!("{}.vol", volume.header.subject_id)))?;
            }
            for (method, subject, trace) in &t {
                let dir = out_dir.join("traces");
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join(format!("{}_{}.csv", method, subject)), engine::trace_csv(trace))?;
            }
        }
        reports.extend(r);
        traces.extend(t);
    }
    Ok((reports, traces))
}

/// Label-only volume carrying a prediction, keyed like its subject.
fn prediction_volume(subject: &SubjectVolume, labels: &[u8]) -> SubjectVolume {
    let mut header = subject.header.clone();
    header.has_image = false;
    header.has_labels = true;
    SubjectVolume { header, intensities: Vec::new(), labels: Some(labels.to_vec()) }
}

fn class_names(k: usize) -> Vec<String> {
    match k {
        4 => vec!["LV".into(), "MYO".into(), "AA".into()],
        _ => (1..k).map(|c| format!("C{}", c)).collect(),
    }
}

/// Adaptation run of a single mode for the `adapt` subcommand.
pub fn run_adapt_mode(
    config: &RunConfig,
    store: &ParameterStore,
    subject: &SubjectVolume,
    mode: ModeName,
) -> Result<engine::AdaptOutcome> {
    let prior = config.descriptor_prior(&subject.header.subject_id)?;
    let options = AdaptOptions {
        lambda: config.loss.lambda,
        kl_weight: config.loss.kl_weight,
        band_delta: config.loss.band_delta,
        band_form: config.loss.band_form,
        seed: derive_seed(config.seed, &format!("adapt/{}", subject.header.subject_id)),
    };
    engine::adapt_subject(store, subject, mode.to_mode(), &prior, &config.schedule, &options)
}
