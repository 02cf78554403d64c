use drive_acl::curriculum::{ReplayConfig, ScenarioBuffer};
use drive_acl::geometry::{normalize_angle, Pose2D};
use drive_acl::layouts::LayoutLibrary;
use drive_acl::learning_potential::{gae, positive_value_loss};
use drive_acl::orchestrator::TrainConfig;
use drive_acl::scenario::{
    encode_relative, semantic_changes, validate, ScenarioBounds, ScenarioGraph,
};
use drive_acl::teacher::{generate_scenario, mutate_once, GeneratorConfig, TeacherError};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::sync::OnceLock;

fn library() -> &'static LayoutLibrary {
    static LIB: OnceLock<LayoutLibrary> = OnceLock::new();
    LIB.get_or_init(|| TrainConfig::default().library().unwrap())
}

fn stub() -> &'static ScenarioGraph {
    static S: OnceLock<ScenarioGraph> = OnceLock::new();
    S.get_or_init(|| {
        generate_scenario(
            &library().train,
            &GeneratorConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap()
    })
}

fn deltas() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, 1..40)
}

#[derive(Debug, Clone)]
enum Op {
    Insert(f64),
    Sample(usize),
    Rescore(usize, f64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0u8..20).prop_map(|s| Op::Insert(s as f64 / 4.0)),
        2 => (1usize..6).prop_map(Op::Sample),
        1 => (0usize..8, 0.0..5.0f64).prop_map(|(i, s)| Op::Rescore(i, s)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn gae_matches_power_series(d in deltas(), gamma in 0.0..=1.0f64, lambda in 0.0..=1.0f64) {
        let adv = gae(&d, gamma, lambda).unwrap();
        prop_assert_eq!(adv.len(), d.len());
        for t in 0..d.len() {
            let series: f64 = (t..d.len()).map(|k| (gamma * lambda).powi((k - t) as i32) * d[k]).sum();
            prop_assert!((adv[t] - series).abs() <= 1e-9 * (1.0 + series.abs()));
        }
    }

    #[test]
    fn positive_value_loss_is_mean_clamped_advantage(d in deltas(), gamma in 0.0..=1.0f64, lambda in 0.0..=1.0f64) {
        let u = positive_value_loss(&d, gamma, lambda).unwrap();
        let adv = gae(&d, gamma, lambda).unwrap();
        let direct = adv.iter().map(|a| a.max(0.0)).sum::<f64>() / d.len() as f64;
        prop_assert!(u >= 0.0);
        prop_assert!((u - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
    }

    #[test]
    fn nonpositive_deltas_score_zero(d in prop::collection::vec(-10.0..=0.0f64, 1..40), gamma in 0.0..=1.0f64, lambda in 0.0..=1.0f64) {
        prop_assert_eq!(positive_value_loss(&d, gamma, lambda).unwrap(), 0.0);
    }

    #[test]
    fn relative_pose_is_rigid_invariant(
        a in (-100.0..100.0f64, -100.0..100.0f64, -PI..PI),
        b in (-100.0..100.0f64, -100.0..100.0f64, -PI..PI),
        t in (-500.0..500.0f64, -500.0..500.0f64, -10.0..10.0f64),
    ) {
        let pa = Pose2D::new(a.0, a.1, a.2);
        let pb = Pose2D::new(b.0, b.1, b.2);
        let (s, c) = t.2.sin_cos();
        let move_pose = |p: &Pose2D| Pose2D::new(c * p.x - s * p.y + t.0, s * p.x + c * p.y + t.1, p.heading + t.2);
        let r0 = encode_relative(&pa, &pb);
        let r1 = encode_relative(&move_pose(&pa), &move_pose(&pb));
        prop_assert!((r0.dx - r1.dx).abs() < 1e-6);
        prop_assert!((r0.dy - r1.dy).abs() < 1e-6);
        prop_assert!(normalize_angle(r0.dheading - r1.dheading).abs() < 1e-9);
    }

    #[test]
    fn buffer_laws_hold(capacity in 1usize..8, ops in prop::collection::vec(op(), 1..40), seed in any::<u64>()) {
        let cfg = ReplayConfig { capacity, batch_size: 3, ..ReplayConfig::default() };
        let mut buf = ScenarioBuffer::new(capacity);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (now, op) in ops.into_iter().enumerate() {
            let now = now as u64;
            match op {
                Op::Insert(score) => {
                    let min = buf.min_score();
                    let was_full = buf.len() == capacity;
                    let len = buf.len();
                    let inserted = buf.maybe_insert(stub().clone(), score, now).unwrap();
                    if was_full {
                        prop_assert_eq!(inserted, score > min.unwrap());
                        prop_assert_eq!(buf.len(), capacity);
                    } else {
                        prop_assert!(inserted);
                        prop_assert_eq!(buf.len(), len + 1);
                    }
                }
                Op::Sample(b) => {
                    if buf.is_empty() {
                        continue;
                    }
                    let cfg = ReplayConfig { batch_size: b, ..cfg.clone() };
                    let p = buf.replay_distribution(&cfg, now).unwrap();
                    prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(p.iter().all(|&x| x >= 0.0));
                    let mut ids = buf.sample_batch(&cfg, &mut rng, now).unwrap();
                    prop_assert_eq!(ids.len(), b.min(buf.len()));
                    ids.sort();
                    ids.dedup();
                    prop_assert_eq!(ids.len(), b.min(buf.len()));
                    for id in ids {
                        prop_assert_eq!(buf.get(id).unwrap().last_sampled, now);
                    }
                }
                Op::Rescore(i, s) => {
                    if let Some(id) = buf.entries().get(i).map(|e| e.id) {
                        buf.update_score(id, s).unwrap();
                        prop_assert_eq!(buf.get(id).unwrap().score, s);
                    }
                }
            }
            prop_assert!(buf.len() <= capacity);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mutation_keeps_scenarios_valid(seed in any::<u64>(), steps in 1usize..6) {
        let lib = library();
        let cfg = GeneratorConfig::default();
        let bounds = ScenarioBounds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = generate_scenario(&lib.train, &cfg, &mut rng).unwrap();
        prop_assert!(validate(&g, &bounds).is_clean());
        let layout = lib.train.iter().find(|l| l.id == g.layout_id).unwrap();
        for _ in 0..steps {
            match mutate_once(&g, layout, &cfg, &mut rng) {
                Ok(next) => {
                    let report = validate(&next, &bounds);
                    prop_assert!(report.is_clean(), "{:?}", report.messages());
                    prop_assert_eq!(semantic_changes(&g, &next).len(), 1);
                    g = next;
                }
                Err(TeacherError::NoApplicableMutation) => break,
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }
}
