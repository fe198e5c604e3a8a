mod common;

use common::rk4_central;
use synthlong::nlme::{self, clamp_eta, params_from_eta, FixedEffects, TimeGrid};
use synthlong::ode::Tolerances;
use synthlong::sampling::sample_latent;

fn golden() -> Vec<(f64, f64, f64)> {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/baseline_trajectory.csv")).unwrap();
    text.lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (v[0], v[1], v[2])
        })
        .collect()
}

#[test]
fn baseline_matches_golden_file() {
    let g = golden();
    assert_eq!(g.len(), 21);
    let tr = nlme::simulate(&[0.0; 3], &FixedEffects::default(), &TimeGrid::default(), Tolerances::default()).unwrap();
    for (j, (t, d, c)) in g.iter().enumerate() {
        assert_eq!(tr.times[j], *t);
        assert!((tr.depot[j] - d).abs() < 1e-8, "D at t = {t}");
        assert!((tr.central[j] - c).abs() < 1e-6, "C at t = {t}");
    }
}

#[test]
fn random_draws_match_fixed_step_oracle() {
    let fx = FixedEffects::default();
    let grid = TimeGrid::default();
    for s in 0..30u64 {
        let z = sample_latent(3, 4000 + s);
        let eta = clamp_eta(&[z[0] * 1.5, z[1] * 1.5, z[2] * 1.5]);
        let p = params_from_eta(&eta, &fx);
        let tr = nlme::simulate(&eta, &fx, &grid, Tolerances::default()).unwrap();
        let oracle = rk4_central(p.ka, p.imax, p.ic50, grid.times(), 1e-5);
        for j in 0..grid.len() {
            let t = grid.times()[j];
            assert!((tr.depot[j] - (-p.ka * t).exp()).abs() < 1e-8);
            assert!((tr.central[j] - oracle[j]).abs() < 1e-6, "draw {s}, t = {t}: {} vs {}", tr.central[j], oracle[j]);
            assert!(tr.central[j] >= 0.0, "draw {s}: C = {:e}, params {p:?}", tr.central[j]);
        }
    }
}

#[test]
fn tighter_tolerances_barely_move_the_solution() {
    let fx = FixedEffects::default();
    let grid = TimeGrid::default();
    for s in 0..10u64 {
        let z = sample_latent(3, 5000 + s);
        let eta = [z[0], z[1], z[2]];
        let a = nlme::simulate(&eta, &fx, &grid, Tolerances::default()).unwrap();
        let b = nlme::simulate(&eta, &fx, &grid, Tolerances::default().scaled(0.5)).unwrap();
        for j in 0..grid.len() {
            assert!((a.central[j] - b.central[j]).abs() < 1e-7);
        }
    }
}

#[test]
fn drug_is_eliminated_by_t200() {
    let grid = TimeGrid::new((1..=400).map(|j| 0.5 * j as f64).collect()).unwrap();
    let tr = nlme::simulate(&[0.0; 3], &FixedEffects::default(), &grid, Tolerances::default()).unwrap();
    assert!(*tr.central.last().unwrap() < 1e-3);
    assert!(tr.depot.windows(2).all(|w| w[1] < w[0]));
}
