//! Scratch: primitive timings.
use copf::tensor::DenseMatrix;
use std::time::Instant;

fn main() {
    let a = DenseMatrix::zeros(1000, 32).map(|_| 0.5);
    let b = DenseMatrix::zeros(1000, 32).map(|_| 0.25);
    let t = Instant::now();
    for _ in 0..5 { std::hint::black_box(a.matmul_nt(&b).unwrap()); }
    println!("matmul_nt 1000x32 x 1000x32: {:.1} ms", t.elapsed().as_secs_f64()*200.0);

    let big = DenseMatrix::zeros(1000, 1000).map(|_| 0.3);
    let t = Instant::now();
    for _ in 0..5 { std::hint::black_box(big.map(f64::exp)); }
    println!("exp 1M: {:.1} ms", t.elapsed().as_secs_f64()*200.0);

    let t = Instant::now();
    for _ in 0..5 { std::hint::black_box(big.scale(0.5)); }
    println!("scale 1M (alloc+mul): {:.1} ms", t.elapsed().as_secs_f64()*200.0);

    let g = DenseMatrix::zeros(1000, 1000).map(|_| 0.1);
    let t = Instant::now();
    for _ in 0..5 { std::hint::black_box(g.matmul(&a).unwrap()); }
    println!("matmul 1000x1000 x 1000x32: {:.1} ms", t.elapsed().as_secs_f64()*200.0);

    let t = Instant::now();
    for _ in 0..5 { std::hint::black_box(g.matmul_tn(&a).unwrap()); }
    println!("matmul_tn 1000x1000^T x 1000x32: {:.1} ms", t.elapsed().as_secs_f64()*200.0);
}
