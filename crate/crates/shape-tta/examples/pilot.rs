// Pilot run of the full benchmark at the pinned configuration, reporting
// per-method mean DSC and wall time.

use shape_tta::bench;
use shape_tta::config::RunConfig;
use std::time::Instant;

fn main() {
    let mut config = RunConfig::default();
    config.schedule.pretrain_epochs = 30;
    config.schedule.tta_init_epochs = 30;
    config.schedule.tta_shape_epochs = 40;
    config.seed = 7;

    let args: Vec<String> = std::env::args().collect();
    if args.len() > 1 {
        config.seed = args[1].parse().unwrap();
    }

    let out = std::env::temp_dir().join(format!("shape_tta_pilot_{}", config.seed));
    let t0 = Instant::now();
    let result = bench::run_bench(&config, &out).unwrap();
    let dt = t0.elapsed().as_secs_f64();

    println!("{}", result.table_text);
    println!("wall time: {:.1} s", dt);
    for method in bench::METHOD_ORDER {
        if let Some(d) = result.mean_dsc(method) {
            println!("{:>8}: mean DSC {:.2}", method, d);
        }
    }
    let first = result.pretrain_trace.first().unwrap().loss;
    let last = result.pretrain_trace.last().unwrap().loss;
    println!("pretrain loss: {:.4} -> {:.4} (ratio {:.3})", first, last, last / first);
}
