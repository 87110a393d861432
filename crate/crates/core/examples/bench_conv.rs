use mixdann::tensor::{Tape, Tensor};
use std::time::Instant;

fn main() {
    // mimic the heaviest layer: conv 16->16 @64x64 batch 16
    let x = Tensor::full(vec![16, 16, 64, 64], 0.3);
    let k = Tensor::full(vec![16, 16, 3, 3], 0.01);
    let b = Tensor::zeros(vec![16]);
    let t0 = Instant::now();
    let mut tape = Tape::new();
    let xi = tape.leaf(&x);
    let ki = tape.leaf(&k);
    let bi = tape.leaf(&b);
    let mut y = xi;
    for _ in 0..5 {
        y = tape.conv2d(y, ki, bi, 1, 1).unwrap();
    }
    let fwd = t0.elapsed();
    let loss = tape.sum(y);
    let t1 = Instant::now();
    tape.backward(loss).unwrap();
    let bwd = t1.elapsed();
    // 5 convs * 16 imgs * 64*64*16*16*9 = 5*16*9.44M = 755M MAC fwd
    let gmac = 5.0 * 16.0 * 64.0 * 64.0 * 16.0 * 16.0 * 9.0 / 1e9;
    println!("fwd {:?} ({:.2} GMAC/s), bwd {:?} ({:.2} GMAC/s)",
        fwd, gmac / fwd.as_secs_f64(), bwd, 2.0 * gmac / bwd.as_secs_f64());
}
