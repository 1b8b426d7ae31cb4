use fedsim::datagen::{generate_synthetic, partition, PartitionSpec, Scheme};
use fedsim::model::{evaluate, loss_and_gradient, ModelSpec};
use fedsim::DenseVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn full_batch_descent(spec: &ModelSpec, data: &fedsim::datagen::Dataset, steps: usize, lr: f64) -> DenseVector {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut x = spec.init_params(0);
    for _ in 0..steps {
        let (_, g) = loss_and_gradient(spec, &x, &all, data).unwrap();
        x.axpy(-lr, &g);
    }
    x
}

#[test]
fn separated_clusters_are_learned() {
    let data = generate_synthetic(2, 2, 500, 6.0, 1).unwrap();
    let spec = ModelSpec::softmax(2, 2, 0.0);
    let x = full_batch_descent(&spec, &data, 200, 0.5);
    let ev = evaluate(&spec, &x, &data).unwrap();
    assert!(ev.accuracy >= 0.99, "train accuracy {}", ev.accuracy);

    let test = generate_synthetic(2, 2, 200, 6.0, 1).unwrap();
    assert!(evaluate(&spec, &x, &test).unwrap().accuracy >= 0.99);
}

#[test]
fn zero_model_scores_the_first_class_share() {
    let data = generate_synthetic(4, 3, 25, 2.0, 9).unwrap();
    let spec = ModelSpec::softmax(3, 4, 0.0);
    let ev = evaluate(&spec, &DenseVector::zeros(spec.dim()), &data).unwrap();
    assert!((ev.accuracy - 0.25).abs() < 1e-12);
    assert!((ev.loss - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn regularized_softmax_loss_is_convex_along_segments() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let data = generate_synthetic(3, 4, 20, 2.0, 3).unwrap();
    let spec = ModelSpec::softmax(4, 3, 0.05);
    let batch: Vec<usize> = (0..data.len()).collect();
    let loss = |x: &DenseVector| loss_and_gradient(&spec, x, &batch, &data).unwrap().0;
    for _ in 0..50 {
        let x: DenseVector = (0..spec.dim()).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>().into();
        let y: DenseVector = (0..spec.dim()).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>().into();
        for t in [0.25, 0.5, 0.75] {
            let mid: DenseVector = x.iter().zip(y.iter()).map(|(a, b)| t * a + (1.0 - t) * b).collect::<Vec<_>>().into();
            assert!(loss(&mid) <= t * loss(&x) + (1.0 - t) * loss(&y) + 1e-9);
        }
    }
}

#[test]
fn dominant_share_is_at_least_psi() {
    let data = generate_synthetic(10, 4, 200, 3.0, 5).unwrap();
    let spec = PartitionSpec { scheme: Scheme::DominantClass { psi: 0.8 }, seed: 11 };
    let part = partition(&data, 100, &spec).unwrap();
    for (n, h) in part.class_histogram(&data).iter().enumerate() {
        let size: usize = h.iter().sum();
        let share = h[n % 10] as f64 / size as f64;
        assert!(share >= 0.8 && share <= 0.8 + 1.0 / size as f64, "client {n}: {share}");
    }
}

fn scheme() -> impl Strategy<Value = Scheme> {
    prop_oneof![
        Just(Scheme::Iid),
        (0.0..=1.0f64).prop_map(|psi| Scheme::DominantClass { psi }),
        (0usize..4).prop_map(|psi| Scheme::SkewedLabel { psi }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partitions_are_balanced_and_reproducible(
        scheme in scheme(),
        clients in 1usize..30,
        per_class in 5usize..40,
        seed in any::<u64>(),
    ) {
        let data = generate_synthetic(5, 3, per_class, 2.0, 1).unwrap();
        let spec = PartitionSpec { scheme, seed };
        let part = partition(&data, clients, &spec).unwrap();
        prop_assert_eq!(part.num_clients(), clients);

        let sizes: Vec<usize> = part.assignments.iter().map(Vec::len).collect();
        let (lo, hi) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert_eq!(sizes.iter().sum::<usize>(), data.len());
        prop_assert!(part.assignments.iter().flatten().all(|&r| r < data.len()));

        let total: f64 = part.weights.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        for (w, s) in part.weights.iter().zip(&sizes) {
            prop_assert!((w - *s as f64 / data.len() as f64).abs() < 1e-12);
        }

        if let Scheme::Iid = scheme {
            let mut all: Vec<usize> = part.assignments.iter().flatten().copied().collect();
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), data.len());
        }
        if let Scheme::SkewedLabel { psi } = scheme {
            for h in part.class_histogram(&data) {
                prop_assert!(h.iter().filter(|&&c| c == 0).count() >= psi);
            }
        }
        prop_assert_eq!(partition(&data, clients, &spec).unwrap(), part);
    }
}
