mod common;

use common::three_blobs;
use gsimclr::cluster::{self, KMeansConfig, PseudoLabelAssignment};
use gsimclr::scheduler::{self, BatchPlan, PlanMode, PlanSource};
use proptest::prelude::*;

fn blocks(k: usize, each: usize) -> PseudoLabelAssignment {
    PseudoLabelAssignment::new((0..k).flat_map(|j| std::iter::repeat_n(j, each)).collect(), k).unwrap()
}

fn distinct(batch: &[usize], labels: &[usize]) -> usize {
    let mut l: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
    l.sort_unstable();
    l.dedup();
    l.len()
}

#[test]
fn sixty_four_rich_clusters_fill_every_batch_with_distinct_labels() {
    let a = blocks(64, 5);
    let plan = scheduler::build_guided_plan(&a, 64, 1).unwrap();
    assert_eq!(plan.len(), 5);
    for b in plan.batches() {
        assert_eq!(distinct(b, a.labels()), 64);
    }
}

#[test]
fn n128_pairs_make_two_distinct_batches() {
    let a = blocks(64, 2);
    let plan = scheduler::build_guided_plan(&a, 64, 9).unwrap();
    assert_eq!(plan.len(), 2);
    let mut union: Vec<usize> = plan.batches().iter().flatten().copied().collect();
    union.sort_unstable();
    assert_eq!(union, (0..128).collect::<Vec<_>>());
    for b in plan.batches() {
        assert_eq!(b.len(), 64);
        assert_eq!(distinct(b, a.labels()), 64);
    }
}

#[test]
fn one_cluster_degenerates_to_random_batching() {
    let a = blocks(1, 100);
    let plan = scheduler::build_guided_plan(&a, 64, 0).unwrap();
    let sizes: Vec<usize> = plan.batches().iter().map(Vec::len).collect();
    assert_eq!(sizes, vec![64, 36]);
    let d = scheduler::validate_plan(&plan, &a).unwrap();
    assert_eq!(d.violations, vec![64 * 63 / 2, 36 * 35 / 2]);
    assert_eq!(d.full_batch_violations, 2016);
}

#[test]
fn random_plans_small_cases() {
    let p = scheduler::build_random_plan(4, 2, 3).unwrap();
    assert_eq!(p.len(), 2);
    assert_eq!(p, scheduler::build_random_plan(4, 2, 3).unwrap());
    scheduler::validate_plan(&p, &blocks(1, 4)).unwrap();
    let sizes: Vec<usize> = scheduler::build_random_plan(5, 2, 0)
        .unwrap()
        .batches()
        .iter()
        .map(Vec::len)
        .collect();
    assert_eq!(sizes, vec![2, 2, 1]);
}

#[test]
fn random_positions_are_uniform() {
    const SEEDS: u64 = 10_000;
    let mut counts = [[0u32; 10]; 10];
    for s in 0..SEEDS {
        let plan = scheduler::build_random_plan(10, 10, s).unwrap();
        for (pos, &i) in plan.batches()[0].iter().enumerate() {
            counts[i][pos] += 1;
        }
    }
    // Binomial(10000, 0.1): sd 30; 3.9 sd keeps the family-wise level near 1% over 100 cells.
    let expected = SEEDS as f64 / 10.0;
    let band = 3.9 * (SEEDS as f64 * 0.1 * 0.9).sqrt();
    for row in counts {
        for c in row {
            assert!((c as f64 - expected).abs() <= band, "{counts:?}");
        }
    }
}

#[test]
fn hand_built_violation() {
    let a = PseudoLabelAssignment::new(vec![0, 1, 0, 2], 3).unwrap();
    let plan = BatchPlan::new(vec![vec![0, 2], vec![1, 3]], 2, 0);
    let d = scheduler::validate_plan(&plan, &a).unwrap();
    assert_eq!(d.violations, vec![1, 0]);
}

#[test]
fn guided_batches_beat_random_on_blobs() {
    let (y, _) = three_blobs(1);
    let model = cluster::kmeans_fit(
        &y,
        &KMeansConfig {
            k: 3,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let a = cluster::assign(&model, &y).unwrap();
    let guided = scheduler::validate_plan(&scheduler::build_guided_plan(&a, 3, 0).unwrap(), &a).unwrap();
    let random = scheduler::validate_plan(&scheduler::build_random_plan(a.len(), 3, 0).unwrap(), &a).unwrap();
    println!(
        "violations: guided {} random {}",
        guided.total_violations, random.total_violations
    );
    assert_eq!(guided.total_violations, 0);
    assert!(random.total_violations >= 20, "random {}", random.total_violations);
}

#[test]
fn per_epoch_seeds_and_reuse() {
    let src = PlanSource::guided(blocks(8, 4), 8, 5, true);
    assert_ne!(src.plan(0).unwrap(), src.plan(1).unwrap());
    assert_eq!(src.plan(1).unwrap(), src.plan(1).unwrap());
    let fixed = PlanSource::guided(blocks(8, 4), 8, 5, false);
    assert_eq!(fixed.plan(0).unwrap().batches(), fixed.plan(3).unwrap().batches());
    let random = PlanSource::random(32, 8, 5, true);
    assert_eq!(random.mode(), PlanMode::Random);
    assert_ne!(random.plan(0).unwrap(), random.plan(1).unwrap());
}

#[test]
fn malformed_plans_are_rejected() {
    let a = blocks(2, 3);
    let plan = BatchPlan::new(vec![vec![0, 1, 1], vec![7, 2]], 3, 0);
    let err = scheduler::validate_plan(&plan, &a).unwrap_err().to_string();
    for needle in ["out of range", "repeated", "missing"] {
        assert!(err.contains(needle), "{err}");
    }
}

#[test]
fn jsonl_round_trip() {
    let src = PlanSource::random(10, 4, 2, true);
    let plans: Vec<BatchPlan> = (0..3).map(|e| src.plan(e).unwrap()).collect();
    let mut buf = b"# config_hash=z\n".to_vec();
    scheduler::write_plan_jsonl(&plans, &mut buf).unwrap();
    let back = scheduler::read_plan_jsonl(buf.as_slice()).unwrap();
    assert_eq!(back.len(), 3);
    for (b, p) in back.iter().zip(&plans) {
        assert_eq!(b.as_slice(), p.batches());
    }
}

fn fuzz_assignment() -> impl Strategy<Value = (PseudoLabelAssignment, usize)> {
    (1usize..12, prop::collection::vec(0usize..20, 1..24)).prop_map(|(p, counts)| {
        let k = counts.len();
        let labels = counts
            .iter()
            .enumerate()
            .flat_map(|(j, &c)| std::iter::repeat_n(j, c))
            .collect();
        (PseudoLabelAssignment::new(labels, k).unwrap(), p)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn every_plan_is_an_exact_partition((a, p) in fuzz_assignment(), seed in any::<u64>()) {
        scheduler::validate_plan(&scheduler::build_guided_plan(&a, p, seed).unwrap(), &a).unwrap();
        scheduler::validate_plan(&scheduler::build_random_plan(a.len(), p, seed).unwrap(), &a).unwrap();
    }

    #[test]
    fn balanced_clusters_have_no_full_batch_violations(p in 1usize..10, extra in 0usize..10, each in 1usize..8, seed in any::<u64>()) {
        let a = blocks(p + extra, each);
        let plan = scheduler::build_guided_plan(&a, p, seed).unwrap();
        prop_assert_eq!(scheduler::validate_plan(&plan, &a).unwrap().full_batch_violations, 0);
    }

    #[test]
    fn same_seed_same_plan((a, p) in fuzz_assignment(), seed in any::<u64>()) {
        prop_assert_eq!(
            scheduler::build_guided_plan(&a, p, seed).unwrap(),
            scheduler::build_guided_plan(&a, p, seed).unwrap()
        );
    }
}
