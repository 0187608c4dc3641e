use std::f64::consts::PI;

use blindtof::forward_model::{
    add_noise, add_noise_tracked, dirichlet_spikes, make_kernel, simulate_tensor, simulate_trace,
    KernelFamily, Scene, SimulationMode, Spike, SpikeTrain,
};
use blindtof::signal_core::{dft_real, norm_real, Grid};
use blindtof::C64;
use proptest::prelude::*;

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

fn argmax(x: &[f64]) -> usize {
    x.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0
}

fn scene_strategy() -> impl Strategy<Value = (usize, Vec<(f64, f64)>)> {
    (33usize..96).prop_flat_map(|n| {
        let spikes = prop::collection::vec((0.2..2.0f64, 0.0..1.0f64), 1..=4).prop_map(move |v| {
            v.into_iter()
                .map(|(g, u)| (g, u * n as f64))
                .collect::<Vec<_>>()
        });
        (Just(n), spikes)
    })
}

#[test]
fn exp_one_trace_has_two_lobes() {
    let tp = 70e-12;
    let grid = Grid::new(2976, tp).unwrap();
    let kernel = make_kernel(
        KernelFamily::RaisedCosine {
            center: 100.0 * tp,
            width: 40.0 * tp,
        },
        grid,
    )
    .unwrap();
    let g = simulate_trace(
        &kernel,
        &train(&[(1.19, 8.45e-8), (0.23, 9.44e-8)], &grid),
        SimulationMode::Circular,
    )
    .unwrap();
    let s = g.samples();
    let peaks: Vec<usize> = (1..s.len() - 1)
        .filter(|&i| s[i] > s[i - 1] && s[i] >= s[i + 1] && s[i] > 0.05)
        .collect();
    assert_eq!(peaks.len(), 2, "{peaks:?}");
    let gap = (peaks[1] - peaks[0]) as f64;
    assert!((gap - 141.43).abs() <= 1.5, "lobe gap {gap}");
}

#[test]
fn empirical_snr_is_calibrated() {
    let grid = Grid::new(4096, 1.0).unwrap();
    let kernel = make_kernel(
        KernelFamily::Gaussian {
            center: 40.0,
            fwhm: 12.0,
        },
        grid,
    )
    .unwrap();
    let g = simulate_trace(
        &kernel,
        &train(&[(1.0, 1000.3), (0.6, 2500.8)], &grid),
        SimulationMode::Circular,
    )
    .unwrap();
    for seed in 0..10 {
        let noisy = add_noise(&g, 20.0, seed).unwrap();
        let noise: Vec<f64> = noisy
            .samples()
            .iter()
            .zip(g.samples())
            .map(|(a, b)| a - b)
            .collect();
        let snr = 20.0 * (norm_real(g.samples()) / norm_real(&noise)).log10();
        assert!((snr - 20.0).abs() <= 0.5, "seed {seed}: {snr}");
    }
    let (again, n) = add_noise_tracked(&g, 20.0, 3).unwrap();
    assert_eq!(again, add_noise(&g, 20.0, 3).unwrap());
    assert!(n > 0.0);
    assert_eq!(add_noise(&g, f64::INFINITY, 1).unwrap(), g);
}

#[test]
fn tensor_small_cases() {
    let grid = Grid::new(64, 1.0).unwrap();
    let kernel = make_kernel(
        KernelFamily::Gaussian {
            center: 16.0,
            fwhm: 4.0,
        },
        grid,
    )
    .unwrap();
    let s = train(&[(1.0, 20.4)], &grid);
    let t = simulate_tensor(
        &Scene {
            height: 2,
            width: 2,
            pixels: vec![s.clone(); 4],
        },
        &kernel,
        f64::INFINITY,
        0,
        SimulationMode::Circular,
    )
    .unwrap();
    for i in 1..4 {
        assert_eq!(t.pixel(i / 2, i % 2), t.pixel(0, 0));
    }
    let one = simulate_tensor(
        &Scene {
            height: 1,
            width: 1,
            pixels: vec![s.clone()],
        },
        &kernel,
        f64::INFINITY,
        0,
        SimulationMode::Circular,
    )
    .unwrap();
    assert_eq!(
        one.pixel(0, 0),
        simulate_trace(&kernel, &s, SimulationMode::Circular)
            .unwrap()
            .samples()
    );
}

#[test]
fn ramp_argmax_is_monotone() {
    let grid = Grid::new(256, 1.0).unwrap();
    let kernel = make_kernel(
        KernelFamily::RaisedCosine {
            center: 8.0,
            width: 6.0,
        },
        grid,
    )
    .unwrap();
    let pixels: Vec<SpikeTrain> = (0..256)
        .map(|i| {
            train(
                &[(1.0, 60.0 + 2.3 * (i % 16) as f64 + 0.9 * (i / 16) as f64)],
                &grid,
            )
        })
        .collect();
    let t = simulate_tensor(
        &Scene {
            height: 16,
            width: 16,
            pixels,
        },
        &kernel,
        40.0,
        11,
        SimulationMode::Circular,
    )
    .unwrap();
    for r in 0..16 {
        let peaks: Vec<usize> = (0..16).map(|c| argmax(t.pixel(r, c))).collect();
        assert!(peaks.windows(2).all(|w| w[1] > w[0]), "row {r}: {peaks:?}");
    }
}

proptest! {
    #[test]
    fn dirichlet_vector_sums_to_total_amplitude((n, spikes) in scene_strategy()) {
        let grid = Grid::new(n, 1.0).unwrap();
        let s = train(&spikes, &grid);
        let d = dirichlet_spikes(s.spikes(), &grid);
        let total: f64 = s.gammas().iter().sum();
        prop_assert!((d.iter().sum::<C64>() - total).norm() <= 1e-10 * total.abs().max(1.0));
    }

    #[test]
    fn circular_spectrum_is_kernel_times_spike_sum((n, spikes) in scene_strategy(), fwhm in 2.0..4.0f64) {
        let grid = Grid::new(n, 1.0).unwrap();
        let kernel = make_kernel(KernelFamily::Gaussian { center: n as f64 / 2.0, fwhm }, grid).unwrap();
        let s = train(&spikes, &grid);
        let g = dft_real(simulate_trace(&kernel, &s, SimulationMode::Circular).unwrap().samples()).unwrap();
        let k = dft_real(kernel.samples()).unwrap();
        let scale = g.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for b in 0..n {
            // the unpaired Nyquist bin of an even length is folded by the real part
            if 2 * b == n {
                continue;
            }
            let f = if 2 * b < n { b as f64 } else { b as f64 - n as f64 };
            let sb: C64 = s.spikes().iter().map(|x| x.gamma * C64::from_polar(1.0, -2.0 * PI * f * x.tau / n as f64)).sum();
            prop_assert!((g[b] - k[b] * sb).norm() <= 1e-9 * scale);
        }
    }

    #[test]
    fn bandlimited_modes_agree((n, spikes) in scene_strategy(), frac in 0.1..0.45f64) {
        let grid = Grid::new(n, 1.0).unwrap();
        let l = ((n as f64 * frac) as usize).max(1);
        let kernel = make_kernel(KernelFamily::BandlimitedDirichlet { l }, grid).unwrap();
        let s = train(&spikes, &grid);
        let a = simulate_trace(&kernel, &s, SimulationMode::Continuous).unwrap();
        let b = simulate_trace(&kernel, &s, SimulationMode::Circular).unwrap();
        let peak = a.samples().iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (x, y) in a.samples().iter().zip(b.samples()) {
            prop_assert!((x - y).abs() <= 1e-9 * peak);
        }
    }

    #[test]
    fn gaussian_modes_agree_approximately(fwhm in 8.0..14.0f64, spikes in prop::collection::vec((0.2..2.0f64, 0.0..128.0f64), 1..=3)) {
        let grid = Grid::new(128, 1.0).unwrap();
        let kernel = make_kernel(KernelFamily::Gaussian { center: 64.0, fwhm }, grid).unwrap();
        let s = train(&spikes, &grid);
        let a = simulate_trace(&kernel, &s, SimulationMode::Continuous).unwrap();
        let b = simulate_trace(&kernel, &s, SimulationMode::Circular).unwrap();
        let peak = a.samples().iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (x, y) in a.samples().iter().zip(b.samples()) {
            prop_assert!((x - y).abs() <= 1e-4 * peak);
        }
    }

    #[test]
    fn fourier_coefficients_decay(which in 0usize..3, width in 4.0..12.0f64) {
        let grid = Grid::new(128, 1.0).unwrap();
        let family = match which {
            0 => KernelFamily::Gaussian { center: 64.0, fwhm: width },
            1 => KernelFamily::RaisedCosine { center: 64.0, width },
            _ => KernelFamily::Emg { center: 40.0, sigma: width / 3.0, decay: width / 6.0 },
        };
        let kernel = make_kernel(family.clone(), grid).unwrap();
        // series coefficients via a fine Riemann sum of the analytic kernel
        let fine = 16 * 128;
        let dt = 128.0 / fine as f64;
        let slope = family.max_slope(&grid);
        for m in 1..=64i64 {
            let c: C64 = (0..fine)
                .map(|i| {
                    let t = i as f64 * dt;
                    kernel.eval(t).unwrap() * C64::from_polar(1.0, -2.0 * PI * m as f64 * t / 128.0)
                })
                .sum::<C64>()
                * dt
                / 128.0;
            let bound = 128.0 / (2.0 * PI * m as f64) * slope;
            prop_assert!(c.norm() <= bound * (1.0 + 1e-6) + 1e-12, "m={} |c|={} bound={}", m, c.norm(), bound);
        }
    }
}
