use std::f64::consts::PI;

use blindtof::forward_model::{
    make_kernel, simulate_trace, KernelFamily, MeasurementTrace, SimulationMode, Spike, SpikeTrain,
};
use blindtof::prony::{
    amplitudes_ls, annihilating_filter, delays_from_filter, prony_solve, toeplitz_singular_values,
    AnnihilatingFilter,
};
use blindtof::signal_core::{poly_from_roots, Grid};
use blindtof::C64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn expo_sum(amps: &[f64], us: &[C64], m: usize) -> Vec<C64> {
    (0..m)
        .map(|i| {
            amps.iter()
                .zip(us)
                .map(|(a, u)| *a * u.powu(i as u32))
                .sum()
        })
        .collect()
}

fn circ_dist(a: f64, b: f64, w: f64) -> f64 {
    let d = (a - b).rem_euclid(w);
    d.min(w - d)
}

fn train(spikes: &[(f64, f64)], grid: &Grid) -> SpikeTrain {
    SpikeTrain::new(
        spikes
            .iter()
            .map(|&(gamma, tau)| Spike { gamma, tau })
            .collect(),
        grid,
    )
    .unwrap()
}

fn separated(taus: &[f64], w: f64, gap: f64) -> bool {
    (0..taus.len()).all(|i| (i + 1..taus.len()).all(|j| circ_dist(taus[i], taus[j], w) >= gap))
}

#[test]
fn perturbed_single_exponential_is_stable() {
    let u = C64::from_polar(1.0, -PI / 5.0);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..200 {
        let y: Vec<C64> = expo_sum(&[1.0], &[u], 8)
            .into_iter()
            .map(|v| {
                v + 1e-3 * C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                    / 2f64.sqrt()
            })
            .collect();
        let h = annihilating_filter(&y, 1).unwrap();
        let root = -h.taps()[1] / h.taps()[0];
        assert!((root - u).norm() <= 2e-3, "{root}");
    }
}

#[test]
fn exp_one_delays_survive_root_round_trip() {
    let w = 2976.0 * 70e-12;
    let taus = [8.45e-8, 9.44e-8];
    // filter taps whose reversed polynomial vanishes at u_k = e^{-j2πτ_k/w}
    let inv: Vec<C64> = taus
        .iter()
        .map(|t| C64::from_polar(1.0, 2.0 * PI * t / w))
        .collect();
    let est = delays_from_filter(
        &AnnihilatingFilter::new(poly_from_roots(&inv).into_coeffs()).unwrap(),
        w,
    )
    .unwrap();
    for (e, t) in est.taus.iter().zip(taus) {
        assert!(((e - t) / t).abs() <= 1e-12);
    }
}

#[test]
fn exp_one_amplitudes_recovered() {
    let grid = Grid::new(512, 1.0).unwrap();
    let kernel = make_kernel(KernelFamily::BandlimitedDirichlet { l: 40 }, grid).unwrap();
    let taus = [120.7, 262.1];
    let g = simulate_trace(
        &kernel,
        &train(&[(1.19, taus[0]), (0.23, taus[1])], &grid),
        SimulationMode::Circular,
    )
    .unwrap();
    let gam = amplitudes_ls(&g, &taus, &kernel).unwrap();
    assert!(
        ((gam[0] - 1.19) / 1.19).abs() <= 1e-8 && ((gam[1] - 0.23) / 0.23).abs() <= 1e-8,
        "{gam:?}"
    );
    let one = simulate_trace(
        &kernel,
        &train(&[(0.7, 33.3)], &grid),
        SimulationMode::Circular,
    )
    .unwrap();
    assert!((amplitudes_ls(&one, &[33.3], &kernel).unwrap()[0] - 0.7).abs() <= 1e-10);
    let zero = MeasurementTrace::new(vec![0.0; 512], grid).unwrap();
    assert_eq!(
        amplitudes_ls(&zero, &taus, &kernel).unwrap(),
        vec![0.0, 0.0]
    );
}

#[test]
fn gaussian_kernel_with_model_mismatch() {
    let grid = Grid::new(256, 1.0).unwrap();
    let kernel = make_kernel(
        KernelFamily::Gaussian {
            center: 128.0,
            fwhm: 10.0,
        },
        grid,
    )
    .unwrap();
    let truth = train(&[(1.0, 60.4), (0.7, 150.85)], &grid);
    let g = simulate_trace(&kernel, &truth, SimulationMode::Continuous).unwrap();
    let est = prony_solve(&g, &kernel, 2, 1e-4).unwrap();
    for (e, t) in est.taus().iter().zip(truth.taus()) {
        assert!(circ_dist(*e, t, 256.0) <= 0.05, "{e} vs {t}");
    }
}

#[test]
fn on_grid_spike_with_dirac_kernel() {
    let grid = Grid::new(32, 1.0).unwrap();
    let mut d = vec![0.0; 32];
    d[0] = 1.0;
    let kernel = blindtof::forward_model::KernelTrace::new(d, grid).unwrap();
    let mut g = vec![0.0; 32];
    g[9] = 2.5;
    let est = prony_solve(&MeasurementTrace::new(g, grid).unwrap(), &kernel, 1, 1e-4).unwrap();
    assert!((est.taus()[0] - 9.0).abs() <= 1e-12 && (est.gammas()[0] - 2.5).abs() <= 1e-12);
}

#[test]
fn one_moment_short_leaves_system_underdetermined() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for k in 1..=5 {
        let us: Vec<C64> = (0..k)
            .map(|_| C64::from_polar(1.0, rng.random_range(0.0..2.0 * PI)))
            .collect();
        let amps: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
        let full = toeplitz_singular_values(&expo_sum(&amps, &us, 2 * k), k);
        let short = toeplitz_singular_values(&expo_sum(&amps, &us, 2 * k - 1), k);
        // with 2K moments only the annihilating direction is null
        assert!(
            full[0] <= 1e-10 * full[k] && full[1] >= 1e-6 * full[k],
            "K={k}: {full:?}"
        );
        // with 2K−1 a second null direction opens up
        assert!(short[1] <= 1e-10 * short[k].max(1e-300), "K={k}: {short:?}");
    }
}

proptest! {
    #[test]
    fn filter_annihilates_exponential_sums(phases in prop::collection::vec(0.0..2.0 * PI, 1..=6), extra in 0usize..6, seed in 0u64..1000) {
        let k = phases.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let us: Vec<C64> = phases.iter().map(|&p| C64::from_polar(1.0, p)).collect();
        let amps: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..2.0)).collect();
        let y = expo_sum(&amps, &us, 2 * k + extra);
        let h = annihilating_filter(&y, k).unwrap();
        let peak = y.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for m in k..y.len() {
            let s: C64 = (0..=k).map(|l| h.taps()[l] * y[m - l]).sum();
            prop_assert!(s.norm() <= 1e-9 * peak);
        }
    }

    #[test]
    fn delays_shift_with_the_scene(t1 in 0.0..256.0f64, t2 in 0.0..256.0f64, delta in 0.0..256.0f64) {
        prop_assume!(separated(&[t1, t2], 256.0, 3.0));
        let grid = Grid::new(256, 1.0).unwrap();
        let kernel = make_kernel(KernelFamily::BandlimitedDirichlet { l: 20 }, grid).unwrap();
        let base = prony_solve(&simulate_trace(&kernel, &train(&[(1.0, t1), (0.6, t2)], &grid), SimulationMode::Circular).unwrap(), &kernel, 2, 1e-4).unwrap();
        let moved = train(&[(1.0, (t1 + delta).rem_euclid(256.0)), (0.6, (t2 + delta).rem_euclid(256.0))], &grid);
        let shifted = prony_solve(&simulate_trace(&kernel, &moved, SimulationMode::Circular).unwrap(), &kernel, 2, 1e-4).unwrap();
        for s in base.spikes() {
            let target = (s.tau + delta).rem_euclid(256.0);
            let best = shifted.spikes().iter().map(|x| circ_dist(x.tau, target, 256.0)).fold(f64::INFINITY, f64::min);
            prop_assert!(best <= 1e-9 * 256.0);
        }
    }

    #[test]
    fn amplitudes_scale_with_the_trace(t1 in 0.0..256.0f64, t2 in 0.0..256.0f64, c in 0.01..100.0f64) {
        prop_assume!(separated(&[t1, t2], 256.0, 3.0));
        let grid = Grid::new(256, 1.0).unwrap();
        let kernel = make_kernel(KernelFamily::BandlimitedDirichlet { l: 20 }, grid).unwrap();
        let g = simulate_trace(&kernel, &train(&[(1.0, t1), (0.4, t2)], &grid), SimulationMode::Circular).unwrap();
        let gs = MeasurementTrace::new(g.samples().iter().map(|v| c * v).collect(), grid).unwrap();
        let a = prony_solve(&g, &kernel, 2, 1e-4).unwrap();
        let b = prony_solve(&gs, &kernel, 2, 1e-4).unwrap();
        for (x, y) in a.spikes().iter().zip(b.spikes()) {
            prop_assert!((x.tau - y.tau).abs() <= 1e-12 * 256.0);
            prop_assert!((y.gamma - c * x.gamma).abs() <= 1e-10 * (c * x.gamma).abs());
        }
    }
}
