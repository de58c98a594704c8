//! End-to-end checks on a small suite: data invariants, file round trips,
//! training determinism and the exact cases of the diagnostics.

use mergelab_core::checkpoint::Checkpoint;
use mergelab_core::diagnostics::{acc_at_k, disentanglement_residual, representation_bias};
use mergelab_core::math::l2_distance;
use mergelab_core::merge::{task_arithmetic, task_vector, Lambdas};
use mergelab_core::se::DistanceMetric;
use mergelab_core::suite::{generate_suite, nearest_centroid_accuracy, read_suite, write_suite, CLUSTER_SIGMA};
use mergelab_core::train::{finetune, pretrain};
use mergelab_core::{Activation, ModelSpec, Optimizer, SuiteParams, TaskSuite, TrainConfig};

fn small_params(seed: u64) -> SuiteParams {
    SuiteParams {
        tasks: 3,
        dim: 12,
        classes: 3,
        n_train: 96,
        n_test: 48,
        seed,
        ..SuiteParams::default()
    }
}

fn cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        learning_rate: 0.05,
        seed,
        optimizer: Optimizer::SgdMomentum,
    }
}

fn spec(suite: &TaskSuite) -> ModelSpec {
    ModelSpec::new(vec![suite.dim(), 24, 24, suite.classes()], Activation::Relu).unwrap()
}

#[test]
fn suite_is_deterministic_and_seed_sensitive() {
    let a = generate_suite(&small_params(4)).unwrap();
    let b = generate_suite(&small_params(4)).unwrap();
    let c = generate_suite(&small_params(5)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.tasks[0].train, c.tasks[0].train);
}

#[test]
fn disjoint_suite_keeps_tasks_apart() {
    for seed in 0..3 {
        let suite = generate_suite(&small_params(seed)).unwrap();
        let centers: Vec<_> = suite.all_centers().collect();
        let min_gap = (suite.params.separation_sigmas * CLUSTER_SIGMA) as f64;
        for (i, (ti, ci)) in centers.iter().enumerate() {
            for (tj, cj) in &centers[i + 1..] {
                if ti != tj {
                    assert!(l2_distance(ci, cj).unwrap() >= min_gap - 1e-4);
                }
            }
        }
        for task in &suite.tasks {
            assert_eq!(task.train.len(), 96);
            assert_eq!(task.test.len(), 48);
            assert!(nearest_centroid_accuracy(task, suite.classes()) >= 0.99);
            for s in task.train.iter().chain(&task.test) {
                assert_eq!(suite.nearest_task(&s.x), task.task_id);
                assert!(s.y < suite.classes());
            }
        }
    }
}

#[test]
fn conflict_suite_overlaps_with_conflicting_labels() {
    let suite = generate_suite(&SuiteParams { n_train: 64, n_test: 32, ..SuiteParams::conflict(0) }).unwrap();
    let gap = (3.0 * CLUSTER_SIGMA) as f64;
    let mut close_conflicts = 0;
    for a in &suite.tasks {
        for b in suite.tasks.iter().filter(|b| b.task_id > a.task_id) {
            for (ya, ca) in a.centers.iter().enumerate() {
                for (yb, cb) in b.centers.iter().enumerate() {
                    let d = l2_distance(ca, cb).unwrap();
                    assert!(d >= gap - 1e-4);
                    if d < 2.0 * gap && ya != yb {
                        close_conflicts += 1;
                    }
                }
            }
        }
    }
    assert!(close_conflicts > 0, "no nearby centers with different labels");
}

#[test]
fn suite_files_round_trip() {
    let suite = generate_suite(&small_params(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = write_suite(&suite, dir.path()).unwrap();
    assert!(path.ends_with("suite/2"));
    assert!(path.join("task1/test/manifest.json").exists());
    assert_eq!(read_suite(&path).unwrap(), suite);

    let labels = path.join("task0/train/labels.u8");
    let mut bytes = std::fs::read(&labels).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&labels, bytes).unwrap();
    assert!(read_suite(&path).is_err());
}

#[test]
fn training_is_reproducible_across_thread_counts() {
    let suite = generate_suite(&small_params(1)).unwrap();
    let spec = spec(&suite);
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let (pt, _) = pretrain(&spec, &suite, &cfg(3, 1)).unwrap();
            let (ft, _) = finetune(&spec, &pt, &suite.tasks[0], &cfg(2, 2)).unwrap();
            (Checkpoint::new(spec.clone(), 1, pt).unwrap().to_bytes(), Checkpoint::new(spec.clone(), 2, ft).unwrap().to_bytes())
        })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn checkpoint_round_trips_and_detects_corruption() {
    let suite = generate_suite(&small_params(1)).unwrap();
    let spec = spec(&suite);
    let (pt, _) = pretrain(&spec, &suite, &cfg(1, 3)).unwrap();
    let ckpt = Checkpoint::new(spec, 3, pt).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pt.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes(), ckpt.to_bytes());
    assert_eq!(back.params, ckpt.params);

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn diagnostics_exact_cases() {
    let suite = generate_suite(&small_params(3)).unwrap();
    let spec = spec(&suite);
    let (pt, _) = pretrain(&spec, &suite, &cfg(3, 1)).unwrap();
    let taus: Vec<_> = suite
        .tasks
        .iter()
        .map(|t| task_vector(&finetune(&spec, &pt, t, &cfg(3, 2)).unwrap().0, &pt).unwrap())
        .collect();
    let far = suite.far_field(32, 0);

    let zero = disentanglement_residual(&spec, &suite, &pt, &taus, &[0.0; 3], &far).unwrap();
    assert!(zero.per_task_residual.iter().all(|r| *r == 0.0));
    assert_eq!(zero.off_support_residual, Some(0.0));

    let single = TaskSuite { params: SuiteParams { tasks: 1, ..suite.params.clone() }, tasks: vec![suite.tasks[0].clone()] };
    let one = disentanglement_residual(&spec, &single, &pt, &taus[..1], &[0.7], &[]).unwrap();
    assert_eq!(one.per_task_residual, vec![0.0]);
    assert!(one.per_task_logit_norm[0] > 0.0);

    // the merged model is the only candidate when T = 1, so acc@1 is total
    let acc = acc_at_k(&spec, &single, &pt, &taus[..1], 0.3, 2, DistanceMetric::L2).unwrap();
    assert_eq!(acc.curve(0), vec![1.0]);

    let full = acc_at_k(&spec, &suite, &pt, &taus, 0.3, 2, DistanceMetric::L2).unwrap();
    for t in 0..3 {
        let c = full.curve(t);
        assert!(c.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(c[2], 1.0);
    }

    // a merged model equal to task 0's reference has zero bias on task 0
    let reference = task_arithmetic(&pt, &taus[..1], &Lambdas::Uniform(0.3)).unwrap();
    let bias = representation_bias(&spec, &suite, &reference, &pt, &taus, 0.3, "ref").unwrap();
    assert_eq!(bias.per_task[0], 0.0);
    assert!(bias.per_task[1] > 0.0);
}
