use shape_tta::tensor::{Tape, Tensor};
use std::time::Instant;

fn main() {
    // Representative mid-network layer: B=16, 32->32 ch at 16x16 and 8->8 at 64x64
    let cases = [(16usize, 8usize, 8usize, 64usize), (16, 32, 32, 16), (16, 96, 32, 16)];
    for (b, ci, co, hw) in cases {
        let x = Tensor::full(vec![b, ci, hw, hw], 0.5);
        let w = Tensor::full(vec![co, ci, 3, 3], 0.01);
        let bias = Tensor::zeros(vec![co]);
        let t0 = Instant::now();
        let iters = 30;
        let mut sink = 0.0;
        for _ in 0..iters {
            let mut tape = Tape::new();
            let xv = tape.leaf(&x, false);
            let wv = tape.leaf(&w, true);
            let bv = tape.leaf(&bias, true);
            let y = tape.conv2d(xv, wv, Some(bv), 1, 1).unwrap();
            let l = tape.sum_all(y);
            tape.backward(l).unwrap();
            sink += tape.scalar(l);
        }
        let dt = t0.elapsed().as_secs_f64() / iters as f64;
        let macs = (b * co * hw * hw * ci * 9) as f64;
        println!(
            "B{} {}->{} @{}x{}: {:.2} ms/iter fwd+bwd, fwd {:.2} GMAC/s (sink {})",
            b, ci, co, hw, hw, dt * 1e3, macs / dt / 1e9 * 3.0, sink
        );
    }
}
