use std::f64::consts::PI;

use topoflow::fields::GridSpec;
use topoflow::synthdata::{
    fit_covariance_decay, gen_terrain, integrate, make_dataset, Archetype, Boundary, DatasetConfig, InitKind,
    PhysicsConfig, WindDraw,
};

fn gaussian_blob(spec: &GridSpec, r0: f64, c0: f64, sigma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.cells());
    for r in 0..spec.height {
        for c in 0..spec.width {
            let d2 = (r as f64 - r0).powi(2) + (c as f64 - c0).powi(2);
            out.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    out
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::MIN), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[test]
fn gaussian_peak_moves_with_the_wind() {
    let spec = GridSpec::new(32, 64, 2, 8, 8).unwrap();
    let cfg = PhysicsConfig {
        diffusivity: 0.0,
        sink: 0.0,
        boundary: Boundary::Periodic,
        ..PhysicsConfig::default()
    };
    for (u, v, n) in [(1.5f32, 0.0f32, 20usize), (0.0, -1.0, 30), (1.2, 0.8, 25)] {
        let tw = gen_terrain(&spec, Archetype::Flat, 0, 2.0).unwrap().with_uniform_wind(u, v);
        let c0 = gaussian_blob(&spec, 16.0, 20.0, 2.5);
        let end = integrate(&c0, &tw, &cfg, n, |_, _| {}).unwrap();
        let peak = argmax(&end);
        let (pr, pc) = ((peak / spec.width) as f64, (peak % spec.width) as f64);
        let shift = |vel: f32| (n as f64 * vel as f64 * cfg.dt / cfg.dx).round();
        let (er, ec) = (16.0 + shift(v), 20.0 + shift(u));
        assert!((pr - er).abs() <= 1.0 && (pc - ec).abs() <= 1.0, "peak ({pr},{pc}) expected ({er},{ec})");
    }
}

#[test]
fn plumes_decorrelate_faster_across_the_wind() {
    let spec = GridSpec::new(32, 64, 2, 8, 8).unwrap();
    let cfg = PhysicsConfig::default();
    let mut anisotropic = 0;
    for seed in 0..10u64 {
        let angle = seed as f64 * 2.0 * PI / 10.0 + 0.1;
        let speed = 1.5;
        let tw = gen_terrain(&spec, Archetype::Flat, seed, 2.0)
            .unwrap()
            .with_uniform_wind((speed * angle.cos()) as f32, (speed * angle.sin()) as f32);
        let peclet = speed * cfg.dx / cfg.diffusivity;
        assert!(peclet >= 10.0);
        let dcfg = DatasetConfig {
            horizons: vec![24],
            count: 32,
            seed,
            init: InitKind::Zero,
            wind: WindDraw::Fixed,
            random_sources: 12,
            ..DatasetConfig::default()
        };
        let samples = make_dataset(&tw, &cfg, &dcfg).unwrap();
        let fit = fit_covariance_decay(&samples, &tw).unwrap();
        println!("seed {seed}: along {:.3} cross {:.3} resid {:.3}", fit.along, fit.cross, fit.residual);
        if fit.along > fit.cross {
            anisotropic += 1;
        }
    }
    assert!(anisotropic >= 9, "{anisotropic}/10");
}

#[test]
fn white_noise_is_isotropic() {
    let spec = GridSpec::new(32, 64, 2, 8, 8).unwrap();
    let cfg = PhysicsConfig {
        diffusivity: 0.0,
        sink: 0.0,
        ..PhysicsConfig::default()
    };
    let tw = gen_terrain(&spec, Archetype::Flat, 0, 2.0).unwrap().with_uniform_wind(0.7, 0.7);
    let still = tw.with_uniform_wind(0.0, 0.0);
    let dcfg = DatasetConfig {
        horizons: vec![12],
        count: 48,
        seed: 5,
        init: InitKind::WhiteNoise,
        wind: WindDraw::Fixed,
        ..DatasetConfig::default()
    };
    let samples = make_dataset(&still, &cfg, &dcfg).unwrap();
    // fit directions come from `tw`; the data itself never moved
    let fit = fit_covariance_decay(&samples, &tw).unwrap();
    println!("white noise: along {:.4} cross {:.4}", fit.along, fit.cross);
    let rel = (fit.along - fit.cross).abs() / fit.along.max(fit.cross);
    assert!(rel < 0.25, "along {} cross {}", fit.along, fit.cross);
}
