use ltcl::queue::MemoryQueue;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn fifo_keeps_the_newest_entries_in_order(
        seed in any::<u64>(),
        capacity in 1usize..40,
        batches in proptest::collection::vec(0usize..25, 1..8),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let mut q = MemoryQueue::new(capacity, d).unwrap();
        let mut history: Vec<(Vec<f64>, usize)> = Vec::new();
        for b in batches {
            let zs: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, d)).collect();
            let ls: Vec<usize> = (0..b).map(|_| rng.gen_range(0..5)).collect();
            q.enqueue_batch(&zs, &ls).unwrap();
            history.extend(zs.into_iter().zip(ls));
            prop_assert!(q.len() <= capacity);
        }
        let keep = history.len().min(capacity);
        let tail = &history[history.len() - keep..];
        prop_assert_eq!(q.len(), keep);
        for (e, (z, l)) in q.entries().zip(tail) {
            prop_assert_eq!(&e.z, z);
            prop_assert_eq!(e.label, *l);
        }
        let idx: Vec<u64> = q.entries().map(|e| e.index).collect();
        prop_assert!(idx.windows(2).all(|w| w[1] == w[0] + 1));
    }

    #[test]
    fn positives_and_negatives_partition_the_snapshot(
        seed in any::<u64>(),
        n in 0usize..50,
        label in 0usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q = MemoryQueue::new(64, 3).unwrap();
        let zs: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, 3)).collect();
        let ls: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6)).collect();
        q.enqueue_batch(&zs, &ls).unwrap();
        let snap = q.snapshot();
        let p = snap.positives_of(label);
        let neg = snap.negatives_of(label);
        prop_assert_eq!(p.len() + neg.len(), snap.len());
        let mut all: Vec<usize> = p.iter().chain(&neg).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..snap.len()).collect::<Vec<_>>());
        prop_assert!(p.iter().all(|&k| snap.labels()[k] == label));
        prop_assert!(neg.iter().all(|&k| snap.labels()[k] != label));
        prop_assert_eq!(snap.count_of(label), p.len());
        prop_assert_eq!(q.positives_of(label), p);
    }

    #[test]
    fn rejected_batch_leaves_queue_untouched(seed in any::<u64>(), n in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q = MemoryQueue::new(8, 3).unwrap();
        let good: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, 3)).collect();
        q.enqueue_batch(&good, &vec![0; n]).unwrap();
        let before = q.snapshot();
        let mut bad = good.clone();
        bad[n - 1][0] += 0.5;
        prop_assert!(q.enqueue_batch(&bad, &vec![1; n]).is_err());
        prop_assert_eq!(q.snapshot(), before);
    }
}
