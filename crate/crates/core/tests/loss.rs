use anchorbind::loss::{infonce_value, LossVariant, Temperature};
use anchorbind::Matrix;
use proptest::prelude::*;

/// Straight-line enumeration of both InfoNCE variants over nested `Vec`s.
#[allow(clippy::needless_range_loop)]
fn oracle(variant: LossVariant, o: &[Vec<f64>], c: &[Vec<f64>], tau: f64) -> f64 {
    let unit = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let o: Vec<_> = o.iter().map(unit).collect();
    let c: Vec<_> = c.iter().map(unit).collect();
    let k = o.len();
    let logit: Vec<Vec<f64>> = o
        .iter()
        .map(|oi| c.iter().map(|cj| oi.iter().zip(cj).map(|(a, b)| a * b).sum::<f64>() / tau).collect())
        .collect();
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..k {
        let denom_row: f64 = (0..k).map(|j| logit[i][j].exp()).sum();
        rows += -(logit[i][i].exp() / denom_row).ln();
        let denom_col: f64 = (0..k).map(|j| logit[j][i].exp()).sum();
        cols += -(logit[i][i].exp() / denom_col).ln();
    }
    let l1 = rows / k as f64;
    let l2 = cols / k as f64;
    match variant {
        LossVariant::Directional => l1,
        LossVariant::Symmetric => (l1 + l2) / 2.0,
    }
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn batch(k: usize, d: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(prop_oneof![-2.0..-0.1f64, 0.1..2.0f64], k * d)
        .prop_map(move |v| Matrix::new(k, d, v).unwrap())
}

fn case() -> impl Strategy<Value = (Matrix, Matrix, f64)> {
    (2usize..7, 2usize..6).prop_flat_map(|(k, d)| (batch(k, d), batch(k, d), 0.05..2.0f64))
}

proptest! {
    #[test]
    fn matches_enumeration((o, c, tau) in case()) {
        let t = Temperature::from_tau(tau);
        for v in [LossVariant::Directional, LossVariant::Symmetric] {
            let got = infonce_value(v, &o, &c, &t).unwrap();
            let want = oracle(v, &rows_of(&o), &rows_of(&c), t.tau());
            prop_assert!((got - want).abs() < 1e-9, "{v:?}: {got} vs {want}");
        }
    }

    #[test]
    fn joint_row_permutation_leaves_loss_unchanged((o, c, tau) in case(), seed in any::<u64>()) {
        let k = o.rows();
        let mut perm: Vec<usize> = (0..k).collect();
        perm.rotate_left((seed as usize) % k);
        perm.swap(0, k - 1);
        let t = Temperature::from_tau(tau);
        for v in [LossVariant::Directional, LossVariant::Symmetric] {
            let base = infonce_value(v, &o, &c, &t).unwrap();
            let moved = infonce_value(v, &o.select_rows(&perm), &c.select_rows(&perm), &t).unwrap();
            prop_assert!((base - moved).abs() < 1e-12);
        }
    }

    #[test]
    fn positive_row_scaling_leaves_loss_unchanged((o, c, tau) in case(), scale in 0.01..100.0f64) {
        let t = Temperature::from_tau(tau);
        let s = Matrix::from_fn(o.rows(), o.cols(), |r, col| o.get(r, col) * scale * (r + 1) as f64).unwrap();
        for v in [LossVariant::Directional, LossVariant::Symmetric] {
            let a = infonce_value(v, &o, &c, &t).unwrap();
            let b = infonce_value(v, &s, &c, &t).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn symmetric_is_mean_of_both_directions((o, c, tau) in case()) {
        let t = Temperature::from_tau(tau);
        let sym = infonce_value(LossVariant::Symmetric, &o, &c, &t).unwrap();
        let ab = infonce_value(LossVariant::Directional, &o, &c, &t).unwrap();
        let ba = infonce_value(LossVariant::Directional, &c, &o, &t).unwrap();
        prop_assert!((sym - (ab + ba) / 2.0).abs() < 1e-12);
        prop_assert!(ab >= 0.0 && ba >= 0.0);
    }
}

#[test]
fn single_pair_loss_is_zero() {
    let o = Matrix::from_rows(&[[0.3, -1.2, 4.0]]).unwrap();
    let c = Matrix::from_rows(&[[-2.0, 0.5, 0.1]]).unwrap();
    for v in [LossVariant::Directional, LossVariant::Symmetric] {
        assert_eq!(infonce_value(v, &o, &c, &Temperature::default()).unwrap(), 0.0);
    }
}

#[test]
fn identical_rows_give_ln_two() {
    let o = Matrix::from_rows(&[[1.0, 2.0], [1.0, 2.0]]).unwrap();
    for v in [LossVariant::Directional, LossVariant::Symmetric] {
        let l = infonce_value(v, &o, &o, &Temperature::default()).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn orthonormal_alignment_at_unit_temperature() {
    let e = Matrix::identity(2);
    let l = infonce_value(LossVariant::Symmetric, &e, &e, &Temperature::from_tau(1.0)).unwrap();
    assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-9);
}

#[test]
fn perfect_alignment_loss_falls_with_temperature() {
    let e = Matrix::identity(4);
    let mut last = f64::INFINITY;
    for tau in [1.0, 0.5, 0.1, 0.02] {
        let l = infonce_value(LossVariant::Symmetric, &e, &e, &Temperature::from_tau(tau)).unwrap();
        assert!(l < last);
        last = l;
    }
    assert!(last < 1e-20);
}
