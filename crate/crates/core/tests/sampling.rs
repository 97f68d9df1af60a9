use ddgen::data::synth_two_clusters;
use ddgen::divergence::path_dual_values;
use ddgen::metrics::bound_check;
use ddgen::trainer::{generate, train, TrainConfig};

#[test]
fn generated_samples_fill_gaps_inside_the_real_range() {
    let s = synth_two_clusters::<f64>(120, 4, 4, 0.6, 3).unwrap();
    let mut cfg = TrainConfig::<f64>::from_text("iters = 30\nwarmup = 10\nhidden_dims = 16,8").unwrap();
    cfg.seed = 1;
    let res = train(&s.images, &cfg).unwrap();
    let out = generate(&res.model, &res.offsets, &s.images, &cfg, 60).unwrap();
    assert!(!out.images.is_empty());
    assert_eq!(out.images.len(), out.dual_values.len());

    let mut real = path_dual_values(&res.model, &s.images, &res.offsets).unwrap();
    real.sort_by(f64::total_cmp);
    let (lo, hi) = (real[0], real[real.len() - 1]);
    let widest_gap = real.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    let gen = path_dual_values(&res.model, &out.images, &res.offsets).unwrap();
    let mut nearest = f64::INFINITY;
    for &g in &gen {
        assert!(lo < g && g < hi, "{g} outside ({lo}, {hi})");
        let d = real.iter().map(|r| (r - g).abs()).fold(f64::INFINITY, f64::min);
        nearest = nearest.min(d);
    }
    assert!(nearest < widest_gap);
    assert!(out.images.pixels().iter().all(|p| (0.0..=1.0).contains(p)));

    let check = bound_check(&res.model, &res.offsets, &s.images, &out.images).unwrap();
    assert!(check.margin >= 0.0);
}

#[test]
fn generation_is_reproducible() {
    let s = synth_two_clusters::<f64>(80, 3, 3, 0.5, 8).unwrap();
    let cfg = TrainConfig::<f64>::from_text("iters = 10\nwarmup = 5\npath_steps = 3\nhidden_dims = 8").unwrap();
    let res = train(&s.images, &cfg).unwrap();
    let a = generate(&res.model, &res.offsets, &s.images, &cfg, 20).unwrap();
    let b = generate(&res.model, &res.offsets, &s.images, &cfg, 20).unwrap();
    assert_eq!(a.images, b.images);
    assert_eq!(a.attempts, b.attempts);
}
