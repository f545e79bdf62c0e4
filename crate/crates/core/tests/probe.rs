use msgen_core::data::sample_dataset;
use msgen_core::metrics::*;
use msgen_core::stage1::*;
use msgen_core::stage2::*;
use std::time::Instant;

#[test]
fn probe_pipeline() {
    let ds = sample_dataset::<f32>(5000, 42).unwrap();
    let train = ds.slice(0, 4000).unwrap();
    let test = ds.slice(4000, 5000).unwrap();
    let xtr = train.images_flat();
    let xte = test.images_flat();

    for (beta, seed) in [(1.0f64, 0u64), (4.0, 0), (10.0, 0), (4.0, 1), (4.0, 2)] {
        let t0 = Instant::now();
        let s1cfg = Stage1Config { beta, epochs: 32, lr: 2e-3, seed, ..Default::default() };
        let (s1, _) = train_stage1(&s1cfg, &xtr).unwrap();
        let s2cfg = Stage2Config { epochs: 32, lr: 2e-3, sigma_x: 0.05, seed, ..Default::default() };
        let (s2, _) = train_stage2(&s2cfg, &xtr, &s1).unwrap();
        let t = t0.elapsed().as_secs_f32();

        let (y, xhat) = reconstruct(&s1, &s2, &xte).unwrap();
        let mse_y = mse(&xte, &y).unwrap();
        let mse_hat = mse(&xte, &xhat).unwrap();
        let f_y = frechet_gaussian(&xte, &y, FrechetMode::Diag).unwrap();
        let f_hat = frechet_gaussian(&xte, &xhat, FrechetMode::Diag).unwrap();
        let cm = conditioning_metrics(&s1, &s2, &ds.images_flat(), 0, 20).unwrap();
        eprintln!("beta={beta} seed={seed}: t={t:.0}s | mse y={mse_y:.5} xhat={mse_hat:.5} | fid y={f_y:.3} xhat={f_hat:.3} | M=[{:.3},{:.3},{:.3},{:.3}]",
            cm.m1, cm.m2, cm.m3, cm.m4);
    }
}
