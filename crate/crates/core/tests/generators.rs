use covgof_core::rng::{stream, Domain};
use covgof_core::sim::DeviationDraw;
use covgof_core::{Deviation, LongDataset, ScenarioSpec, VisitModel};

fn cov(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0)
}

fn effects(spec: &ScenarioSpec, seed: u64) -> (Vec<usize>, Vec<Vec<f64>>) {
    let factor = spec.sigma_matrix().unwrap().cholesky().unwrap().l();
    let mut rng = stream(seed, Domain::Simulation, 0);
    let (obs, b) = spec.generate_with(&mut rng, &factor);
    let mut counts = vec![0; spec.n_subjects];
    for o in obs.iter().filter(|o| o.outcome == 1) {
        counts[o.subject] += 1;
    }
    (counts, b)
}

#[test]
fn sparse_design_visit_counts_and_effect_moments() {
    let spec = ScenarioSpec::univariate_sparse(10_000, 2, 6, 4.0);
    let (counts, b) = effects(&spec, 301);
    let mean_j = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    assert!((mean_j - 4.0).abs() < 0.05, "{mean_j}");
    assert!(counts.iter().all(|&j| (2..=6).contains(&j)));
    let b0: Vec<f64> = b.iter().map(|v| v[0]).collect();
    let b1: Vec<f64> = b.iter().map(|v| v[1]).collect();
    assert!((cov(&b0, &b0) - 1.0).abs() < 0.05);
    assert!((cov(&b0, &b1) + 0.5).abs() < 0.05);
    assert!((cov(&b1, &b1) - 0.5).abs() < 0.05);
}

#[test]
fn grid_times_are_distinct_points_of_the_grid() {
    let v = VisitModel::sparse_grid(5, 9);
    let mut rng = stream(302, Domain::Simulation, 0);
    for _ in 0..500 {
        let t = v.draw_times((-1.0, 1.0), &mut rng);
        assert!((5..=9).contains(&t.len()));
        assert!(t.windows(2).all(|w| w[1] > w[0]));
        for x in t {
            let g = (x + 1.0) / 2.0 * 79.0;
            assert!((g - g.round()).abs() < 1e-9);
        }
    }
}

#[test]
fn cross_outcome_intercept_covariance() {
    let spec = ScenarioSpec::scenario1(10_000, 5, 0.0, false, Deviation::Quadratic);
    let sigma = spec.sigma_matrix().unwrap();
    let (_, b) = effects(&spec, 303);
    let b01: Vec<f64> = b.iter().map(|v| v[0]).collect();
    let b02: Vec<f64> = b.iter().map(|v| v[2]).collect();
    assert!((cov(&b01, &b02) - sigma[(0, 2)]).abs() < 0.05);
}

#[test]
fn deviation_processes_have_the_stated_covariance() {
    let mut rng = stream(304, Domain::Simulation, 0);
    let (t, s) = (0.3, 0.8);
    for kind in [Deviation::Quadratic, Deviation::Trigonometric] {
        let draws: Vec<DeviationDraw> = (0..10_000).map(|_| DeviationDraw::draw(kind, &mut rng)).collect();
        let zt: Vec<f64> = draws.iter().map(|d| d.eval(t)).collect();
        let zs: Vec<f64> = draws.iter().map(|d| d.eval(s)).collect();
        let expected = match kind {
            Deviation::Quadratic => t * t * s * s,
            _ => {
                use std::f64::consts::PI;
                (2.0 * PI * t).sin() * (2.0 * PI * s).sin() + (4.0 * PI * t).sin() * (4.0 * PI * s).sin()
            }
        };
        assert!((cov(&zt, &zs) - expected).abs() < 0.05, "{kind:?}");
        let mean = zs.iter().sum::<f64>() / zs.len() as f64;
        assert!(mean.abs() < 0.05);
    }
    let none = DeviationDraw::draw(Deviation::None, &mut rng);
    assert_eq!(none.eval(0.7), 0.0);
}

#[test]
fn generation_is_a_pure_function_of_seed_and_replicate() {
    let spec = ScenarioSpec::scenario2(50, 0.5);
    let a = spec.generate(9, 3).unwrap();
    assert_eq!(a, spec.generate(9, 3).unwrap());
    assert_ne!(a, spec.generate(9, 4).unwrap());
    assert_ne!(a, spec.generate(10, 3).unwrap());
}

#[test]
fn rescaling_round_trips_and_splits_partition_rows() {
    let spec = ScenarioSpec::scenario1(40, 5, 0.0, false, Deviation::None);
    let mut data = spec.generate(305, 0).unwrap();
    let obs: Vec<_> = data
        .observations()
        .iter()
        .map(|o| covgof_core::Observation { time: 3.0 + 4.0 * o.time, ..*o })
        .collect();
    data = LongDataset::from_observations(obs, data.subject_labels().to_vec(), data.outcome_labels().to_vec()).unwrap();
    let (unit, map) = data.rescale_time().unwrap();
    assert!((map.offset - 3.0).abs() < 1e-12 && (map.scale - 4.0).abs() < 1e-12);
    let back = unit.invert_time_map(&map);
    for (a, b) in back.observations().iter().zip(data.observations()) {
        assert!((a.time - b.time).abs() < 1e-12);
        assert_eq!(a.value, b.value);
    }
    let rows: usize = (1..=3).map(|k| data.split_by_outcome(k).unwrap().n_rows()).sum();
    assert_eq!(rows, data.n_rows());
}
