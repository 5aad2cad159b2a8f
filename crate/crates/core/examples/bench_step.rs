use aqnet::nn::init::Initializer;
use aqnet::nn::resnet::ResNet50;
use ndarray::Array4;
use std::time::Instant;

fn main() {
    let mut init = Initializer::new(0);
    let mut net = ResNet50::<f32>::new(&mut init, 12);
    let batch = 8;
    let x = Array4::from_shape_fn((batch, 12, 120, 120), |(n, c, i, j)| {
        ((n * 31 + c * 7 + i * 3 + j) as f32 * 0.07).sin()
    });
    // warmup
    let f = net.forward(&x, true).unwrap();
    let _ = net.backward(&f);
    let t = Instant::now();
    let reps = 3;
    for _ in 0..reps {
        let f = net.forward(&x, true).unwrap();
        let _ = net.backward(&f);
    }
    let per_sample = t.elapsed().as_secs_f64() / (reps * batch) as f64;
    println!("train step: {:.3} s/sample ({:.1} s per 1200-sample epoch)", per_sample, per_sample * 1200.0);
    let t = Instant::now();
    for _ in 0..reps { let _ = net.forward(&x, false).unwrap(); }
    println!("inference: {:.4} s/sample", t.elapsed().as_secs_f64() / (reps * batch) as f64);
}
