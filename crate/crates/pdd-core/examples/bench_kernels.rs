use pdd_core::ops::kernels::*;
use pdd_core::rng::Stream;
use std::time::Instant;

fn main() {
    let mut s = Stream::from_seed(1);
    let (n, cin, h, w, cout) = (8usize, 32usize, 16usize, 16usize, 16usize);
    let spec = ConvSpec { stride: 1, padding: 1, dilation: 1, kh: 3, kw: 3 };
    let (oh, ow) = (16usize, 16usize);
    let k = cin * 9;
    let m = oh * ow;
    let x: Vec<f32> = (0..n * cin * h * w).map(|_| s.uniform(-1.0, 1.0) as f32).collect();
    let wt: Vec<f32> = (0..cout * k).map(|_| s.uniform(-1.0, 1.0) as f32).collect();
    let g: Vec<f32> = (0..n * cout * m).map(|_| s.uniform(-1.0, 1.0) as f32).collect();
    let reps = 300;

    let mut col = vec![0f32; k * m];
    let t = Instant::now();
    for _ in 0..reps {
        for ni in 0..n {
            im2col(&x[ni * cin * h * w..(ni + 1) * cin * h * w], cin, h, w, &spec, oh, ow, &mut col);
        }
    }
    println!("im2col x8: {:.3} ms", t.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // dW dots
    let mut dw = vec![0f32; cout * k];
    let t = Instant::now();
    for _ in 0..reps {
        for _ni in 0..n {
            for co in 0..cout {
                let grow = &g[co * m..(co + 1) * m];
                for kk in 0..k {
                    dw[co * k + kk] += dot(grow, &col[kk * m..(kk + 1) * m]);
                }
            }
        }
    }
    println!("dW dots x8: {:.3} ms", t.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // dcol axpy
    let mut dcol = vec![0f32; k * m];
    let t = Instant::now();
    for _ in 0..reps {
        for _ni in 0..n {
            dcol.iter_mut().for_each(|v| *v = 0.0);
            for co in 0..cout {
                let grow = &g[co * m..(co + 1) * m];
                let wrow = &wt[co * k..(co + 1) * k];
                for (kk, &wv) in wrow.iter().enumerate() {
                    let drow = &mut dcol[kk * m..(kk + 1) * m];
                    for (d, &gv) in drow.iter_mut().zip(grow.iter()) {
                        *d += wv * gv;
                    }
                }
            }
        }
    }
    println!("dcol axpy x8: {:.3} ms", t.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // col2im
    let mut dx = vec![0f32; n * cin * h * w];
    let t = Instant::now();
    for _ in 0..reps {
        for ni in 0..n {
            col2im_acc(&dcol, cin, h, w, &spec, oh, ow, &mut dx[ni * cin * h * w..(ni + 1) * cin * h * w]);
        }
    }
    println!("col2im x8: {:.3} ms", t.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // forward matmul for reference
    let mut out = vec![0f32; cout * m];
    let t = Instant::now();
    for _ in 0..reps {
        for _ni in 0..n {
            out.iter_mut().for_each(|v| *v = 0.0);
            matmul_acc(&mut out, &wt, &col, cout, k, m);
        }
    }
    println!("fwd matmul x8: {:.3} ms", t.elapsed().as_secs_f64() / reps as f64 * 1e3);
}
