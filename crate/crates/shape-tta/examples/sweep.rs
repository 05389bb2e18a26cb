// Sweep palette / inversion / adaptation-lr candidates and report the
// NoAdap vs adapted ordering on two subjects. Calibration tool only.

use shape_tta::config::RunConfig;
use shape_tta::data::{derive_seed, generate, Domain, PhantomSpec};
use shape_tta::engine::{self, AdaptOptions, TrainingSchedule};
use shape_tta::losses::AdaptMode;
use shape_tta::metrics;
use shape_tta::priors::DescriptorPrior;
use shape_tta::segnet::ForwardMode;

fn mean_fg_dice(pred: &[u8], gt: &[u8], k: usize) -> f64 {
    (1..k as u8).map(|c| metrics::dice3d(pred, gt, c).unwrap()).sum::<f64>() / (k - 1) as f64
}

fn main() {
    let seed = 7u64;
    let candidates: Vec<(&str, Vec<f64>, usize)> = vec![
        ("E: dark bg, invert MYO", vec![0.02, 0.95, 0.45, 0.70], 2),
        ("F: dark bg, invert AA", vec![0.02, 0.95, 0.60, 0.75], 3),
        ("G: dark bg wide, invert MYO", vec![0.02, 0.90, 0.50, 0.65], 2),
    ];
    let lrs = [5e-4, 1e-3];

    for (name, palette, invert) in &candidates {
        let spec = PhantomSpec { palette: palette.clone(), invert_class: *invert, ..PhantomSpec::default() };
        if spec.validate().is_err() {
            println!("{}: invalid spec", name);
            continue;
        }
        let source = generate(&spec, 10, Domain::Source, derive_seed(seed, "source-data")).unwrap();
        let targets = generate(&spec, 2, Domain::Target, derive_seed(seed, "target-data")).unwrap();
        let config = RunConfig::default();
        let k = spec.num_classes();

        let schedule = TrainingSchedule {
            pretrain_epochs: 12,
            tta_init_epochs: 30,
            tta_shape_epochs: 40,
            ..TrainingSchedule::default()
        };
        let (store, trace) =
            engine::pretrain(&source, &config.network, &schedule, derive_seed(seed, "pretrain")).unwrap();
        let src_pred = engine::predict(&store, &source[0].without_labels(), ForwardMode::Eval).unwrap();
        let src_dice = mean_fg_dice(&src_pred, source[0].labels.as_ref().unwrap(), k);
        println!(
            "{} | pretrain CE {:.3}, source DSC {:.1}",
            name,
            trace.last().unwrap().loss,
            src_dice
        );

        // coarse prior from this spec's nominal areas (same rule as the bench)
        let nominal = spec.nominal_class_ratios();
        let prior = DescriptorPrior::from_coarse_ratios(&nominal).unwrap();

        for lr in lrs {
            let schedule = TrainingSchedule { lr, ..schedule.clone() };
            let mut line = format!("  lr {:>6}:", lr);
            let mut means = std::collections::BTreeMap::<&str, Vec<f64>>::new();
            for target in &targets {
                let gt = target.labels.as_ref().unwrap();
                let noadap = engine::predict(&store, &target.without_labels(), ForwardMode::Eval).unwrap();
                means.entry("NoAdap").or_default().push(mean_fg_dice(&noadap, gt, k));
                let bstats = engine::predict(&store, &target.without_labels(), ForwardMode::Adapt).unwrap();
                means.entry("BStats").or_default().push(mean_fg_dice(&bstats, gt, k));
                let options = AdaptOptions {
                    seed: derive_seed(seed, &target.header.subject_id),
                    ..AdaptOptions::default()
                };
                for mode in [AdaptMode::Tent, AdaptMode::RatioOnly, AdaptMode::RatioCentroid] {
                    let outcome =
                        engine::adapt_subject(&store, target, mode, &prior, &schedule, &options).unwrap();
                    means
                        .entry(mode.label())
                        .or_default()
                        .push(mean_fg_dice(&outcome.predictions, gt, k));
                }
            }
            for (m, v) in &means {
                line.push_str(&format!(" {} {:.1}", m, v.iter().sum::<f64>() / v.len() as f64));
            }
            println!("{}", line);
        }
    }
}
