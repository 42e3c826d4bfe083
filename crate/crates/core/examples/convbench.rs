//! Quick single-core throughput probe for the conv kernels, used to size the
//! default network widths. Run with `cargo run --release -p hicmd-core --example convbench`.

use std::time::Instant;

use hicmd_core::graph::Graph;
use hicmd_core::tensor::Tensor;

fn bench_conv(name: &str, b: usize, h: usize, w: usize, cin: usize, cout: usize, k: usize, stride: usize, iters: usize) {
    let x = Tensor::<f32>::full(vec![b, h, w, cin], 0.1);
    let wt = Tensor::<f32>::full(vec![k, k, cin, cout], 0.01);
    let bt = Tensor::<f32>::zeros(vec![cout]);

    let oh = (h + 2 - k) / stride + 1;
    let ow = (w + 2 - k) / stride + 1;
    let macs = (b * oh * ow * cout * k * k * cin) as f64;

    let t0 = Instant::now();
    for _ in 0..iters {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let wv = g.leaf(wt.clone(), true);
        let bv = g.leaf(bt.clone(), true);
        let y = g.conv2d(xv, wv, bv, stride, 1);
        let m = g.mean_all(y);
        let _ = g.backward(m);
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    // Forward + backward ≈ 3x the forward MAC count.
    let gflops = 3.0 * 2.0 * macs / dt / 1e9;
    println!("{name:32} {:.3} ms/iter  ~{gflops:.1} GFLOP/s", dt * 1e3);
}

fn main() {
    // Decoder residual conv shapes (batch = 24 stacked decode jobs).
    bench_conv("res 64->8  @16x8  B24", 24, 16, 8, 64, 8, 3, 1, 50);
    bench_conv("res 8->64  @16x8  B24", 24, 16, 8, 8, 64, 3, 1, 50);
    bench_conv("res 64->16 @16x8  B24", 24, 16, 8, 64, 16, 3, 1, 50);
    bench_conv("res 16->64 @16x8  B24", 24, 16, 8, 16, 64, 3, 1, 50);
    bench_conv("up  16->8  @32x16 B24", 24, 32, 16, 16, 8, 3, 1, 50);
    bench_conv("up  8->8   @64x32 B24", 24, 64, 32, 8, 8, 3, 1, 20);
    bench_conv("final 8->3 @64x32 B24", 24, 64, 32, 8, 3, 3, 1, 20);
    // Prototype encoder shapes (batch = 8 source images).
    bench_conv("stem 3->8  s2 @64x32 B8", 8, 64, 32, 3, 8, 3, 2, 50);
    bench_conv("stem 8->64 s2 @32x16 B8", 8, 32, 16, 8, 64, 3, 2, 50);
    // Big fused GEMM sanity: equivalent of one 3x3 res conv as raw GEMM.
    let m = 24 * 128;
    let kk = 576;
    let n = 16;
    let a = vec![0.1f32; m * kk];
    let b2 = vec![0.01f32; kk * n];
    let mut c = vec![0.0f32; m * n];
    let t0 = Instant::now();
    let reps = 200;
    for _ in 0..reps {
        hicmd_core::Scalar::gemm_nn(m, kk, n, &a, &b2, 0.0f32, &mut c);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("raw sgemm 3072x576x16          {:.3} ms    ~{:.1} GFLOP/s", dt * 1e3, 2.0 * (m * kk * n) as f64 / dt / 1e9);
}
