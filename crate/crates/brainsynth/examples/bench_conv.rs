use brainsynth::tensor::conv::{conv3d_fwd, conv3d_bwd_x, conv3d_bwd_w, ConvSpec};
use brainsynth::tensor::Arr;
use ndarray::IxDyn;
use std::time::Instant;

fn main() {
    // encoder-like layer: [2,10,32,32,32] -> k4 s2 -> 16 ch
    let x: Arr<f32> = Arr::from_elem(IxDyn(&[2, 10, 16, 16, 16]), 0.5f32);
    let w: Arr<f32> = Arr::from_elem(IxDyn(&[16, 10, 4, 4, 4]), 0.01f32);
    let spec = ConvSpec::new([2,2,2],[1,1,1],1);
    let t = Instant::now();
    let n = 30;
    for _ in 0..n {
        let o = conv3d_fwd(&x, &w, None, &spec);
        std::hint::black_box(&o);
    }
    let el = t.elapsed().as_secs_f64() / n as f64;
    // MACs: out 8^3 * 16ch * 2b * (10*64) = 8*8*8*16*2*640 = 10.5M
    let macs = 8.0f64*8.0*8.0*16.0*2.0*640.0;
    println!("k4s2 fwd: {:.2} ms -> {:.2} GFLOP/s", el*1e3, 2.0*macs/el/1e9);

    let go = conv3d_fwd(&x, &w, None, &spec);
    let t = Instant::now();
    for _ in 0..n { std::hint::black_box(conv3d_bwd_x(&go, &x, &w, &spec)); }
    let el = t.elapsed().as_secs_f64() / n as f64;
    println!("bwd_x: {:.2} ms -> {:.2} GFLOP/s", el*1e3, 2.0*macs/el/1e9);
    let t = Instant::now();
    for _ in 0..n { std::hint::black_box(conv3d_bwd_w(&go, &x, &w, &spec)); }
    let el = t.elapsed().as_secs_f64() / n as f64;
    println!("bwd_w: {:.2} ms -> {:.2} GFLOP/s", el*1e3, 2.0*macs/el/1e9);

    // full-res k3 s1: [2,10,32,32,32] -> 6ch
    let x: Arr<f32> = Arr::from_elem(IxDyn(&[2, 10, 32, 32, 32]), 0.5f32);
    let w: Arr<f32> = Arr::from_elem(IxDyn(&[6, 10, 3, 3, 3]), 0.01f32);
    let spec = ConvSpec::new([1,1,1],[1,1,1],1);
    let t = Instant::now();
    let n = 10;
    for _ in 0..n { std::hint::black_box(conv3d_fwd(&x, &w, None, &spec)); }
    let el = t.elapsed().as_secs_f64() / n as f64;
    let macs = 32.0f64.powi(3)*6.0*2.0*270.0;
    println!("k3s1 full-res fwd: {:.2} ms -> {:.2} GFLOP/s", el*1e3, 2.0*macs/el/1e9);
}
