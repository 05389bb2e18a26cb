// Calibration harness: pretrain quality on the source domain, then the
// NoAdap / Tent / TTAS_R / TTAS_RC ordering on a couple of target subjects.
//
// Usage: calib [pretrain_epochs] [n_targets]

use shape_tta::config::RunConfig;
use shape_tta::data::{derive_seed, generate, Domain};
use shape_tta::engine::{self, AdaptOptions, TrainingSchedule};
use shape_tta::losses::AdaptMode;
use shape_tta::metrics;
use shape_tta::segnet::ForwardMode;
use std::time::Instant;

fn mean_fg_dice(pred: &[u8], gt: &[u8], k: usize) -> f64 {
    (1..k as u8).map(|c| metrics::dice3d(pred, gt, c).unwrap()).sum::<f64>() / (k - 1) as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let pretrain_epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(24);
    let n_targets: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2);
    let adapt_lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(5e-4);

    let config = RunConfig::default();
    let spec = &config.data.phantom;
    let k = spec.num_classes();
    let seed = 7u64;

    let source = generate(spec, 10, Domain::Source, derive_seed(seed, "source-data")).unwrap();
    let targets = generate(spec, n_targets, Domain::Target, derive_seed(seed, "target-data")).unwrap();

    let schedule = TrainingSchedule {
        pretrain_epochs,
        tta_init_epochs: 30,
        tta_shape_epochs: 40,
        lr: adapt_lr,
        ..TrainingSchedule::default()
    };
    println!("adapt lr {}", adapt_lr);

    let t0 = Instant::now();
    let (store, trace) =
        engine::pretrain(&source, &config.network, &schedule, derive_seed(seed, "pretrain")).unwrap();
    println!(
        "pretrain {} epochs in {:.0} s: loss {:.4} -> {:.4}",
        pretrain_epochs,
        t0.elapsed().as_secs_f64(),
        trace.first().unwrap().loss,
        trace.last().unwrap().loss
    );

    // sanity: segmentation quality on the training domain itself
    let mut src_dice = 0.0;
    for s in source.iter().take(3) {
        let pred = engine::predict(&store, &s.without_labels(), ForwardMode::Eval).unwrap();
        src_dice += mean_fg_dice(&pred, s.labels.as_ref().unwrap(), k);
    }
    println!("source-domain mean fg DSC (eval BN, 3 subjects): {:.2}", src_dice / 3.0);

    let prior_ratios = config.ratio_prior().unwrap();
    println!("ratio prior: {:?}", prior_ratios.iter().map(|r| (r * 1e4).round() / 1e4).collect::<Vec<_>>());

    let describe = |tag: &str, pred: &[u8], gt: &[u8]| {
        let per: Vec<f64> = (1..k as u8).map(|c| metrics::dice3d(pred, gt, c).unwrap()).collect();
        let n = pred.len() as f64;
        let ratios: Vec<f64> = (0..k as u8)
            .map(|c| pred.iter().filter(|l| **l == c).count() as f64 / n)
            .collect();
        println!(
            "  {:<22} mean {:5.1} | per-class {:?} | pred ratios {:?}",
            tag,
            per.iter().sum::<f64>() / per.len() as f64,
            per.iter().map(|d| (d * 10.0).round() / 10.0).collect::<Vec<_>>(),
            ratios.iter().map(|r| (r * 1e3).round() / 1e3).collect::<Vec<_>>()
        );
    };

    for (i, target) in targets.iter().enumerate() {
        println!("target {}:", i);
        let gt = target.labels.as_ref().unwrap();
        let gtn = gt.len() as f64;
        let gt_ratios: Vec<f64> = (0..k as u8)
            .map(|c| gt.iter().filter(|l| **l == c).count() as f64 / gtn)
            .collect();
        println!(
            "  gt ratios {:?}",
            gt_ratios.iter().map(|r| (r * 1e3).round() / 1e3).collect::<Vec<_>>()
        );
        let noadap = engine::predict(&store, &target.without_labels(), ForwardMode::Eval).unwrap();
        describe("NoAdap", &noadap, gt);
        let batchstat = engine::predict(&store, &target.without_labels(), ForwardMode::Adapt).unwrap();
        describe("batch-stats-only", &batchstat, gt);

        let prior = config.descriptor_prior(&target.header.subject_id).unwrap();
        let options = AdaptOptions { seed: derive_seed(seed, &format!("adapt/{}", i)), ..AdaptOptions::default() };
        for mode in [AdaptMode::Tent, AdaptMode::RatioOnly, AdaptMode::RatioCentroid, AdaptMode::RatioDist] {
            let t0 = Instant::now();
            let outcome = engine::adapt_subject(&store, target, mode, &prior, &schedule, &options).unwrap();
            let tag = format!("{} ({:.0}s)", mode.label(), t0.elapsed().as_secs_f64());
            describe(&tag, &outcome.predictions, gt);
        }
    }
}
