use irc_core::datasets::{
    lj_energy, lj_forces, lj_initial_positions, lj_simulate, lj_step, load_ljp, load_shapes,
    normalize_cloud, save_ljp, save_shapes, toy_dataset, LjConfig, LjpConfig, ToyConfig,
};

fn total_energy(cfg: &LjConfig, steps: usize) -> (f64, f64) {
    let mut pos = lj_initial_positions(cfg).unwrap();
    let mut vel = vec![[0.0; 3]; pos.len()];
    let mut force = lj_forces(cfg, &pos);
    let (k, u) = lj_energy(cfg, &pos, &vel);
    let start = k + u;
    for _ in 0..steps {
        lj_step(cfg, &mut pos, &mut vel, &mut force);
    }
    let (k, u) = lj_energy(cfg, &pos, &vel);
    (start, k + u)
}

#[test]
fn energy_drift_within_one_percent() {
    let cfg = LjConfig::default();
    let (e0, e1) = total_energy(&cfg, 1000);
    assert!((e1 - e0).abs() <= 0.01 * e0.abs(), "E0 {e0} E1000 {e1}");
    // A ten times finer step over the same time span is the oracle.
    let fine = LjConfig {
        dt: cfg.dt / 10.0,
        ..cfg
    };
    let (f0, f1) = total_energy(&fine, 10_000);
    assert_eq!(e0, f0);
    assert!((f1 - f0).abs() <= 0.01 * f0.abs());
    assert!((e1 - f1).abs() <= 0.01 * f0.abs(), "coarse {e1} fine {f1}");
}

#[test]
fn momentum_conserved_before_wall_contact() {
    let cfg = LjConfig::default();
    let wall = cfg.box_extent / 2.0;
    let mut pos = lj_initial_positions(&cfg).unwrap();
    let mut vel = vec![[0.0; 3]; pos.len()];
    let mut force = lj_forces(&cfg, &pos);
    let momentum = |v: &[[f64; 3]]| -> [f64; 3] {
        let mut p = [0.0; 3];
        for x in v {
            for k in 0..3 {
                p[k] += x[k];
            }
        }
        p
    };
    let mut prev = momentum(&vel);
    for step in 0..300 {
        lj_step(&cfg, &mut pos, &mut vel, &mut force);
        if pos.iter().flatten().any(|x| x.abs() > 0.9 * wall) {
            assert!(step > 0, "wall contact before any step");
            break;
        }
        let now = momentum(&vel);
        for k in 0..3 {
            assert!(
                (now[k] - prev[k]).abs() <= 1e-10,
                "step {step}: {now:?} vs {prev:?}"
            );
        }
        prev = now;
    }
}

#[test]
fn generators_are_bit_deterministic() {
    let toy = ToyConfig {
        count: 8,
        n_points: 64,
        seed: 11,
    };
    assert_eq!(toy_dataset(&toy).unwrap(), toy_dataset(&toy).unwrap());
    let lj = LjConfig {
        n_particles: 16,
        steps: 50,
        seed: 5,
        ..LjConfig::default()
    };
    assert_eq!(lj_simulate(&lj).unwrap(), lj_simulate(&lj).unwrap());
    let other = LjConfig {
        seed: 6,
        ..lj.clone()
    };
    assert_ne!(
        lj_simulate(&lj).unwrap().frames[0],
        lj_simulate(&other).unwrap().frames[0]
    );
}

#[test]
fn toy_shapes_are_normalized() {
    let toy = ToyConfig {
        count: 4,
        n_points: 256,
        seed: 0,
    };
    for c in toy_dataset(&toy).unwrap() {
        let n = c.len() as f64;
        let centroid: Vec<f64> = (0..3)
            .map(|k| c.positions().iter().map(|p| p[k]).sum::<f64>() / n)
            .collect();
        assert!(centroid.iter().all(|v| v.abs() <= 1e-12));
        let radius = c
            .positions()
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0, f64::max);
        assert!((radius - 1.0).abs() <= 1e-12);
        assert_eq!(normalize_cloud(&c).positions().len(), c.len());
    }
}

#[test]
fn dataset_directories_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let toy = ToyConfig {
        count: 3,
        n_points: 32,
        seed: 1,
    };
    let shapes = toy_dataset(&toy).unwrap();
    save_shapes(&shapes, &dir.path().join("s")).unwrap();
    let back = load_shapes(&dir.path().join("s")).unwrap();
    for (a, b) in shapes.iter().zip(&back) {
        let err = a
            .positions()
            .iter()
            .zip(b.positions())
            .flat_map(|(p, q)| (0..3).map(move |k| (p[k] - q[k]).abs()))
            .fold(0.0, f64::max);
        assert!(err <= 1e-9);
    }
    let ljp = LjpConfig {
        lj: LjConfig {
            n_particles: 8,
            steps: 20,
            stride: 5,
            ..LjConfig::default()
        },
        trajectories: 2,
    };
    let trajs = irc_core::datasets::ljp_dataset(&ljp).unwrap();
    save_ljp(&trajs, &dir.path().join("l")).unwrap();
    let back = load_ljp(&dir.path().join("l")).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[1].frames.len(), 5);
    assert_eq!(back[1].frames[0].channels(), 3);
    assert!(load_shapes(&dir.path().join("l")).is_err());
}
