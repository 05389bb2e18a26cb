// Times the major pipeline pieces at benchmark scale.

use shape_tta::config::RunConfig;
use shape_tta::data::{generate, Domain};
use shape_tta::engine::{self, AdaptOptions, TrainingSchedule};
use shape_tta::losses::AdaptMode;
use shape_tta::priors::DescriptorPrior;
use shape_tta::segnet::ForwardMode;
use std::time::Instant;

fn main() {
    let config = RunConfig::default();
    let spec = &config.data.phantom;
    let source = generate(spec, 10, Domain::Source, 1).unwrap();
    let target = generate(spec, 1, Domain::Target, 2).unwrap().remove(0);

    let mut schedule = TrainingSchedule { pretrain_epochs: 3, ..TrainingSchedule::default() };
    let t0 = Instant::now();
    let (store, trace) = engine::pretrain(&source, &config.network, &schedule, 1).unwrap();
    println!(
        "pretrain: {:.2} s/epoch (loss {:.3})",
        t0.elapsed().as_secs_f64() / 3.0,
        trace.last().unwrap().loss
    );

    let prior = DescriptorPrior::from_coarse_ratios(&spec.nominal_class_ratios()).unwrap();
    let options = AdaptOptions::default();

    schedule.tta_init_epochs = 5;
    schedule.tta_shape_epochs = 0;
    let t0 = Instant::now();
    engine::adapt_subject(&store, &target, AdaptMode::Tent, &prior, &schedule, &options).unwrap();
    println!("tent epoch: {:.2} s", t0.elapsed().as_secs_f64() / 5.0);

    let t0 = Instant::now();
    engine::adapt_subject(&store, &target, AdaptMode::RatioOnly, &prior, &schedule, &options).unwrap();
    println!("ratio epoch: {:.2} s", t0.elapsed().as_secs_f64() / 5.0);

    schedule.tta_init_epochs = 1;
    schedule.tta_shape_epochs = 4;
    let t0 = Instant::now();
    engine::adapt_subject(&store, &target, AdaptMode::RatioCentroid, &prior, &schedule, &options).unwrap();
    println!("rc epoch (1 init + 4 shape): {:.2} s", t0.elapsed().as_secs_f64() / 5.0);

    let t0 = Instant::now();
    for _ in 0..5 {
        engine::predict(&store, &target, ForwardMode::Adapt).unwrap();
    }
    println!("full-subject predict: {:.2} s", t0.elapsed().as_secs_f64() / 5.0);
}
