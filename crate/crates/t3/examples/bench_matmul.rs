use std::time::Instant;
use t3::tensor::Tensor;

fn main() {
    for &(m, k, n, reps) in &[(197usize, 64usize, 64usize, 2000usize), (197, 64, 256, 800), (197, 768, 64, 800), (512, 512, 512, 40)] {
        let a = Tensor::<f32>::init(&[m, k], t3::tensor::Init::Uniform(-1.0, 1.0), 1);
        let b = Tensor::<f32>::init(&[k, n], t3::tensor::Init::Uniform(-1.0, 1.0), 2);
        let t0 = Instant::now();
        let mut sink = 0.0f32;
        for _ in 0..reps {
            let c = a.matmul(&b);
            sink += c.with_data(|d| d[0]);
        }
        let dt = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / dt / 1e9;
        println!("{m}x{k}x{n}: {gflops:.2} GFLOP/s (sink {sink})");
    }
}
