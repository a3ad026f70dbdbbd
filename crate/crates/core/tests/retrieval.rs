use anchorbind::retrieval::{median_rank, random_embeddings, rank_of_truth, recall_at_k, similarity_matrix, RetrievalReport};
use anchorbind::retrieval::Baseline;
use anchorbind::Matrix;
use proptest::prelude::*;

/// Rank by sorting the whole row, ties to the lower gallery index.
fn sorted_rank(row: &[f64], truth: usize) -> usize {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    order.iter().position(|&j| j == truth).unwrap() + 1
}

fn sim_matrix() -> impl Strategy<Value = (Matrix, Vec<usize>)> {
    (1usize..12, 1usize..12).prop_flat_map(|(q, g)| {
        // Coarse values so that ties actually occur.
        let data = prop::collection::vec((-4i32..=4).prop_map(|v| v as f64 / 4.0), q * g);
        let truth = prop::collection::vec(0..g, q);
        (data.prop_map(move |d| Matrix::new(q, g, d).unwrap()), truth)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn rank_matches_full_sort((sim, truth) in sim_matrix()) {
        let ranks = rank_of_truth(&sim, &truth).unwrap();
        for (i, &r) in ranks.iter().enumerate() {
            prop_assert_eq!(r, sorted_rank(sim.row(i), truth[i]));
        }
    }

    #[test]
    fn recall_is_monotone_in_k(ranks in prop::collection::vec(1usize..50, 1..40)) {
        let mut last = 0.0;
        for k in 1..55 {
            let r = recall_at_k(&ranks, k).unwrap();
            prop_assert!(r >= last && (0.0..=100.0).contains(&r));
            last = r;
        }
        prop_assert_eq!(last, 100.0);
    }

    #[test]
    fn median_lies_between_extremes(ranks in prop::collection::vec(1usize..1000, 1..40)) {
        let m = median_rank(&ranks).unwrap();
        let lo = *ranks.iter().min().unwrap() as f64;
        let hi = *ranks.iter().max().unwrap() as f64;
        prop_assert!(lo <= m && m <= hi);
    }
}

#[test]
fn even_length_median_averages_middle_pair() {
    assert_eq!(median_rank(&[4, 1, 3, 2]).unwrap(), 2.5);
    assert_eq!(median_rank(&[7, 1, 3]).unwrap(), 3.0);
}

#[test]
fn identical_embeddings_retrieve_perfectly() {
    let e = Matrix::from_fn(50, 6, |r, c| ((r * 7 + c * 3) as f64).sin()).unwrap();
    let sim = similarity_matrix(&e, &e).unwrap();
    let report = RetrievalReport::from_similarity("a", "b", &sim, &[1, 10], Baseline::Model).unwrap();
    assert_eq!(report.recall(1), 100.0);
    assert_eq!(report.median_rank, 1.0);
}

#[test]
fn random_baseline_sits_near_chance() {
    let n = 1000;
    let truth: Vec<usize> = (0..n).collect();
    for seed in 0..5 {
        let (q, g) = random_embeddings(seed, "x", "y", n, 32).unwrap();
        let ranks = rank_of_truth(&similarity_matrix(&q, &g).unwrap(), &truth).unwrap();
        let r10 = recall_at_k(&ranks, 10).unwrap();
        let med = median_rank(&ranks).unwrap();
        assert!((0.3..=2.5).contains(&r10), "seed {seed}: R@10 {r10}");
        assert!((400.0..=600.0).contains(&med), "seed {seed}: median {med}");
    }
}
