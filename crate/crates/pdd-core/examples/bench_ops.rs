use pdd_core::ops::{self, kernels::ConvSpec};
use pdd_core::rng::Stream;
use pdd_core::tape::Tape;
use pdd_core::tensor::Tensor;
use std::time::Instant;

fn rnd(s: &mut Stream, shape: Vec<usize>) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| s.uniform(-1.0, 1.0) as f32).collect()).unwrap()
}

fn main() {
    let mut s = Stream::from_seed(1);
    // Student stage-1-ish conv: [8,32,16,16] -> [8,16,16,16] k3
    let x = rnd(&mut s, vec![8, 32, 16, 16]);
    let w = rnd(&mut s, vec![16, 32, 3, 3]);
    let b = rnd(&mut s, vec![16]);
    let macs = 8f64 * 16.0 * 16.0 * 16.0 * 32.0 * 9.0;

    let t = Instant::now();
    let reps = 200;
    for _ in 0..reps {
        let mut tape = Tape::new();
        let _ = ops::conv2d(&mut tape, &x, &w, Some(&b), 1, 1, 1).unwrap();
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    println!("conv fwd (untracked): {:.3} ms  {:.2} GMAC/s", dt * 1e3, macs / dt / 1e9);

    // tracked + backward
    let t = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let xw = tape.watch(&x);
        let ww = tape.watch(&w);
        let bw = tape.watch(&b);
        let out = ops::conv2d(&mut tape, &xw, &ww, Some(&bw), 1, 1, 1).unwrap();
        let loss = ops::mean_all(&mut tape, &out).unwrap();
        let _ = tape.backward(&loss).unwrap();
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    println!("conv fwd+bwd: {:.3} ms  ({:.2} GMAC/s equiv at 3x)", dt * 1e3, 3.0 * macs / dt / 1e9);

    // gelu on 32k elements
    let g = rnd(&mut s, vec![8, 16, 16, 16]);
    let t = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let gw = tape.watch(&g);
        let out = ops::gelu(&mut tape, &gw).unwrap();
        let loss = ops::mean_all(&mut tape, &out).unwrap();
        let _ = tape.backward(&loss).unwrap();
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    println!("gelu fwd+bwd 32k: {:.3} ms ({:.1} ns/elem)", dt * 1e3, dt * 1e9 / 32768.0);

    // batchnorm on 32k
    let mean = rnd(&mut s, vec![16]);
    let var = Tensor::from_vec(vec![16], (0..16).map(|_| s.uniform(0.5, 2.0) as f32).collect()).unwrap();
    let gamma = rnd(&mut s, vec![16]);
    let beta = rnd(&mut s, vec![16]);
    let t = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let gw = tape.watch(&g);
        let out = ops::batchnorm_infer(&mut tape, &gw, &mean, &var, &gamma, &beta, 1e-5).unwrap();
        let loss = ops::mean_all(&mut tape, &out).unwrap();
        let _ = tape.backward(&loss).unwrap();
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    println!("bn fwd+bwd 32k: {:.3} ms", dt * 1e3);

    // bilinear up 8x32x8x8 -> 16x16
    let u = rnd(&mut s, vec![8, 32, 8, 8]);
    let t = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let uw = tape.watch(&u);
        let out = ops::bilinear_resize(&mut tape, &uw, 16, 16).unwrap();
        let loss = ops::mean_all(&mut tape, &out).unwrap();
        let _ = tape.backward(&loss).unwrap();
    }
    let dt = t.elapsed().as_secs_f64() / reps as f64;
    println!("bilinear fwd+bwd: {:.3} ms", dt * 1e3);

    // ConvSpec out_dim sanity
    let spec = ConvSpec { stride: 1, padding: 1, dilation: 1, kh: 3, kw: 3 };
    assert_eq!(spec.out_dim(16, 3), Some(16));
}
