use std::collections::BTreeMap;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use pidflow::analysis::{dep_from_deltas, mean, pearson, Delta};
use pidflow::gaussianize::{train_flow_with, TrainConfig};
use pidflow::pid::{self, Component, InfoState, JointGaussian};
use pidflow::store::{self, ActivationStore, Condition, LayerBlock, Manifest, Matrix32, TargetVector};
use pidflow::trajectory::{assemble_trajectory, Trajectory, TrajectoryMeta};

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn random_joint(seed: u64, dq: usize, di: usize, dy: usize) -> JointGaussian {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dq + di + dy;
    let a = gaussian(&mut rng, d, d);
    let cov = (&a * a.transpose()) / d as f64 + DMatrix::identity(d, d) * 0.05;
    JointGaussian::from_cov(dq, di, dy, cov).unwrap()
}

/// Swaps the two source blocks of a joint covariance.
fn swap_sources(j: &JointGaussian) -> JointGaussian {
    let (q, i, y) = (j.language(), j.vision(), j.target());
    let order: Vec<usize> = i.iter().chain(&q).chain(&y).copied().collect();
    let cov = DMatrix::from_fn(order.len(), order.len(), |r, c| j.cov[(order[r], order[c])]);
    JointGaussian::from_cov(i.len(), q.len(), y.len(), cov).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pid_components_are_consistent(seed in any::<u64>(), dq in 1usize..4, di in 1usize..4, dy in 1usize..3) {
        let j = random_joint(seed, dq, di, dy);
        let s = pid::decompose_pid_mmi(&j).unwrap();
        prop_assert!(s.r >= 0.0 && s.u_v >= 0.0 && s.u_l >= 0.0 && s.s >= 0.0);
        prop_assert!(s.additivity_error() < 1e-9);
        prop_assert_eq!(s.u_v.min(s.u_l), 0.0);
        prop_assert!(pid::check_identities(&s, &j).unwrap().max_residual() < 1e-9);
    }

    #[test]
    fn pid_is_symmetric_in_sources(seed in any::<u64>(), dq in 1usize..4, di in 1usize..4) {
        let j = random_joint(seed, dq, di, 1);
        let a = pid::decompose_pid_mmi(&j).unwrap();
        let b = pid::decompose_pid_mmi(&swap_sources(&j)).unwrap();
        prop_assert!((a.r - b.r).abs() < 1e-9);
        prop_assert!((a.s - b.s).abs() < 1e-9);
        prop_assert!((a.u_v - b.u_l).abs() < 1e-9);
        prop_assert!((a.u_l - b.u_v).abs() < 1e-9);
    }

    #[test]
    fn mi_is_invariant_to_block_rescaling(seed in any::<u64>(), scales in prop::collection::vec(0.01f64..100.0, 5)) {
        let j = random_joint(seed, 2, 2, 1);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(scales));
        let scaled = JointGaussian::from_cov(2, 2, 1, &d * &j.cov * &d).unwrap();
        for (a, b) in [(j.language(), j.target()), (j.vision(), j.target()), (j.sources(), j.target())] {
            let x = pid::gaussian_mi(&j, &a, &b).unwrap();
            let y = pid::gaussian_mi(&scaled, &a, &b).unwrap();
            prop_assert!((x - y).abs() < 1e-8 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn deltas_are_reciprocal(a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let ab = Delta::new(a, b).percent.unwrap() / 100.0;
        let ba = Delta::new(b, a).percent.unwrap() / 100.0;
        prop_assert!(((1.0 + ab) * (1.0 + ba) - 1.0).abs() < 1e-9);
        prop_assert!(ab == 0.0 && ba == 0.0 || ab.signum() == -ba.signum());
    }

    #[test]
    fn dep_is_mean_of_defined_deltas(
        pairs in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 3),
        zero_mask in prop::collection::vec(any::<bool>(), 3),
    ) {
        let comps = [Component::UV, Component::S, Component::Total];
        let mut deltas = BTreeMap::new();
        let mut expect = Vec::new();
        for ((c, (mut a, b)), z) in comps.iter().zip(pairs).zip(zero_mask) {
            if z { a = 0.0; }
            let d = Delta::new(a, b);
            if let Some(p) = d.defined() { expect.push(p); }
            deltas.insert(*c, d);
        }
        deltas.insert(Component::R, Delta::new(1.0, 50.0));
        match dep_from_deltas(&deltas) {
            Ok(dep) => {
                prop_assert!((dep.percent - mean(&expect)).abs() < 1e-9);
                prop_assert_eq!(dep.terms, expect.len());
                prop_assert_eq!(dep.partial, expect.len() < 3);
            }
            Err(_) => prop_assert!(expect.is_empty()),
        }
    }

    #[test]
    fn pearson_is_affine_invariant(
        xs in prop::collection::vec(-10.0f64..10.0, 3..40),
        scale in prop_oneof![-50.0f64..-0.1, 0.1f64..50.0],
        shift in -100.0f64..100.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ys: Vec<f64> = xs.iter().map(|x| { let e: f64 = StandardNormal.sample(&mut rng); x + e }).collect();
        let zs: Vec<f64> = ys.iter().map(|y| scale * y + shift).collect();
        if let (Some(r1), Some(r2)) = (pearson(&xs, &ys), pearson(&xs, &zs)) {
            prop_assert!((r1 * scale.signum() - r2).abs() < 1e-9);
            prop_assert!(r1.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn trajectory_csv_roundtrips(rows in prop::collection::vec((0.0f64..30.0, 0.0f64..30.0, 0.0f64..30.0, 0.0f64..30.0), 1..40)) {
        let states = rows.iter().enumerate().map(|(l, &(r, v, q, s))| InfoState::new(l, r, v, q, s)).collect();
        let t = assemble_trajectory(states, TrajectoryMeta::default()).unwrap();
        let back = Trajectory::from_csv(&t.to_csv(), TrajectoryMeta::default()).unwrap();
        prop_assert_eq!(back.states.len(), t.states.len());
        for (a, b) in t.states.iter().zip(&back.states) {
            for c in Component::PID {
                // six decimals on disk
                prop_assert!((a.component(c) - b.component(c)).abs() <= 5e-7 + 1e-12 * a.component(c));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn store_roundtrips(
        layers in 1usize..4, n in 2usize..12, d in 1usize..6, seed in any::<u64>(), labels in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut manifest = Manifest::pooled("model", "task", Condition::Knockout, layers, d, n);
        let ids = pidflow::synth::sample_ids("p", n);
        manifest.sample_hash = Some(store::sample_hash(&ids));
        let targets = if labels {
            manifest.target_kind = store::TargetKind::DiscreteLabel;
            manifest.num_classes = Some(3);
            TargetVector::Labels((0..n).map(|i| (i % 3) as u32).collect())
        } else {
            TargetVector::Scalar((0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
        };
        let blocks = (0..layers)
            .map(|l| {
                let v = Matrix32::from_dmatrix(&gaussian(&mut rng, n, d));
                let q = Matrix32::from_dmatrix(&gaussian(&mut rng, n, d));
                LayerBlock::pooled(l, v, q)
            })
            .collect();
        let s = ActivationStore { manifest, blocks, targets };
        let dir = tempfile::tempdir().unwrap();
        store::write_store(&s, dir.path()).unwrap();
        prop_assert!(store::validate_store(dir.path()).is_valid());
        prop_assert_eq!(store::read_store(dir.path()).unwrap(), s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn flow_training_never_worsens_nll(seed in any::<u64>(), d in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 400;
        let raw = gaussian(&mut rng, n, d + 1);
        // skewed, heavy-tailed marginals
        let data = raw.map(|v| v.exp() + 0.3 * v * v * v);
        let cfg = TrainConfig { steps: 150, ..TrainConfig::test() }.with_seed(seed);
        let flow = train_flow_with(&data, d, None, &cfg).unwrap();
        prop_assert!(flow.final_nll.is_finite());
        prop_assert!(flow.final_nll <= flow.initial_nll + 1e-12, "{} > {}", flow.final_nll, flow.initial_nll);
    }
}
