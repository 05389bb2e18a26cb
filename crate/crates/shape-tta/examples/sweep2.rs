// Second calibration axis: network capacity, pretraining length, and source
// noise level, holding one palette per run.

use shape_tta::data::{derive_seed, generate, Domain, PhantomSpec};
use shape_tta::engine::{self, AdaptOptions, TrainingSchedule};
use shape_tta::losses::AdaptMode;
use shape_tta::metrics;
use shape_tta::priors::DescriptorPrior;
use shape_tta::segnet::{ForwardMode, NetworkConfig};

fn mean_fg_dice(pred: &[u8], gt: &[u8], k: usize) -> f64 {
    (1..k as u8).map(|c| metrics::dice3d(pred, gt, c).unwrap()).sum::<f64>() / (k - 1) as f64
}

struct Case {
    name: &'static str,
    palette: Vec<f64>,
    invert: usize,
    noise_source: f64,
    base_width: usize,
    pretrain_epochs: usize,
    adapt_lr: f64,
}

fn main() {
    let seed = 7u64;
    let cases = vec![
        Case {
            name: "H: wide/base4/low-noise",
            palette: vec![0.30, 0.85, 0.55, 0.65],
            invert: 2,
            noise_source: 0.005,
            base_width: 4,
            pretrain_epochs: 12,
            adapt_lr: 5e-4,
        },
        Case {
            name: "I: dark-bg/base4",
            palette: vec![0.02, 0.95, 0.45, 0.70],
            invert: 2,
            noise_source: 0.02,
            base_width: 4,
            pretrain_epochs: 12,
            adapt_lr: 5e-4,
        },
        Case {
            name: "J: wide/base8/6-epoch",
            palette: vec![0.30, 0.85, 0.55, 0.65],
            invert: 2,
            noise_source: 0.02,
            base_width: 8,
            pretrain_epochs: 6,
            adapt_lr: 5e-4,
        },
        Case {
            name: "K: dark-bg/base4/lr1e-3",
            palette: vec![0.02, 0.95, 0.45, 0.70],
            invert: 2,
            noise_source: 0.02,
            base_width: 4,
            pretrain_epochs: 12,
            adapt_lr: 1e-3,
        },
    ];

    for case in cases {
        let spec = PhantomSpec {
            palette: case.palette.clone(),
            invert_class: case.invert,
            noise_source: case.noise_source,
            ..PhantomSpec::default()
        };
        if let Err(e) = spec.validate() {
            println!("{}: {}", case.name, e);
            continue;
        }
        let net = NetworkConfig {
            in_channels: 1,
            num_classes: 4,
            base_width: case.base_width,
            depth: 3,
            seed: 17,
        };
        let source = generate(&spec, 10, Domain::Source, derive_seed(seed, "source-data")).unwrap();
        let targets = generate(&spec, 2, Domain::Target, derive_seed(seed, "target-data")).unwrap();
        let k = spec.num_classes();

        let schedule = TrainingSchedule {
            pretrain_epochs: case.pretrain_epochs,
            tta_init_epochs: 30,
            tta_shape_epochs: 40,
            lr: case.adapt_lr,
            ..TrainingSchedule::default()
        };
        let (store, trace) = engine::pretrain(&source, &net, &schedule, derive_seed(seed, "pretrain")).unwrap();
        let src_pred = engine::predict(&store, &source[0].without_labels(), ForwardMode::Eval).unwrap();
        println!(
            "{} | CE {:.3} | src DSC {:.1}",
            case.name,
            trace.last().unwrap().loss,
            mean_fg_dice(&src_pred, source[0].labels.as_ref().unwrap(), k)
        );

        let prior = DescriptorPrior::from_coarse_ratios(&spec.nominal_class_ratios()).unwrap();
        let mut line = String::from("  ");
        let mut sums = std::collections::BTreeMap::<&str, f64>::new();
        for target in &targets {
            let gt = target.labels.as_ref().unwrap();
            let noadap = engine::predict(&store, &target.without_labels(), ForwardMode::Eval).unwrap();
            *sums.entry("NoAdap").or_default() += mean_fg_dice(&noadap, gt, k);
            let bstats = engine::predict(&store, &target.without_labels(), ForwardMode::Adapt).unwrap();
            *sums.entry("BStats").or_default() += mean_fg_dice(&bstats, gt, k);
            let options =
                AdaptOptions { seed: derive_seed(seed, &target.header.subject_id), ..AdaptOptions::default() };
            for mode in [AdaptMode::Tent, AdaptMode::RatioOnly, AdaptMode::RatioCentroid, AdaptMode::RatioDist] {
                let outcome = engine::adapt_subject(&store, target, mode, &prior, &schedule, &options).unwrap();
                *sums.entry(mode.label()).or_default() += mean_fg_dice(&outcome.predictions, gt, k);
            }
        }
        for (m, v) in &sums {
            line.push_str(&format!("{} {:.1}  ", m, v / targets.len() as f64));
        }
        println!("{}", line);
    }
}
