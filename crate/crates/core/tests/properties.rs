use fcce_core::fcm::{self, Centroids, FcmConfig};
use fcce_core::loss::{self, LabelField, LossConfig, LossKind, MembershipSource, ProbabilityField};
use fcce_core::{ClassMatrix, MembershipMatrix};
use proptest::prelude::*;

fn intensities(min: usize, max: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..1.0, min..max)
}

/// Columns of a `c x n` softmax over random logits.
fn probabilities(c: usize, n: usize) -> impl Strategy<Value = ProbabilityField> {
    proptest::collection::vec(-4.0f64..4.0, c * n)
        .prop_map(move |z| loss::softmax(&ClassMatrix::from_vec(c, n, z).unwrap()).unwrap())
}

fn problem() -> impl Strategy<Value = (LabelField, ClassMatrix, MembershipMatrix)> {
    (2usize..5, 1usize..17).prop_flat_map(|(c, n)| {
        (
            proptest::collection::vec(0..c, n),
            proptest::collection::vec(-4.0f64..4.0, c * n),
            probabilities(c, n),
        )
            .prop_map(move |(labels, z, u)| {
                (
                    LabelField::from_labels(&labels, c).unwrap(),
                    ClassMatrix::from_vec(c, n, z).unwrap(),
                    MembershipMatrix(u.0),
                )
            })
    })
}

/// Exhaustive minimum of the c=2 objective over memberships on the 0.01
/// grid, with the optimal centroids of each assignment in closed form.
fn grid_minimum(px: &[f64]) -> f64 {
    fn descend(px: &[f64], s: [f64; 6]) -> f64 {
        let Some((&x, rest)) = px.split_first() else {
            let var = |w: f64, wx: f64, wxx: f64| if w > 0.0 { wxx - wx * wx / w } else { 0.0 };
            return var(s[0], s[1], s[2]) + var(s[3], s[4], s[5]);
        };
        (0..=100)
            .map(|g| {
                let t = g as f64 / 100.0;
                let (a, b) = (t * t, (1.0 - t) * (1.0 - t));
                descend(rest, [s[0] + a, s[1] + a * x, s[2] + a * x * x, s[3] + b, s[4] + b * x, s[5] + b * x * x])
            })
            .fold(f64::INFINITY, f64::min)
    }
    descend(px, [0.0; 6])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn memberships_are_column_stochastic(
        px in intensities(1, 40),
        mut centroids in proptest::collection::vec(0.0f64..1.0, 2..6),
        snap in any::<bool>(),
    ) {
        if snap {
            // put a centroid exactly on a pixel, and duplicate it
            centroids[0] = px[0];
            centroids[1] = px[0];
        }
        let u = fcm::update_memberships(&px, &Centroids(centroids.clone()), 2.0).unwrap();
        for j in 0..px.len() {
            let col = u.matrix().column(j);
            prop_assert!((col.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(col.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn objective_never_rises(px in intensities(6, 120), c in 2usize..5, m in 1.2f64..3.0, seed in any::<u64>()) {
        let r = fcm::run(&px, &FcmConfig { num_clusters: c, fuzzifier: m, seed, ..FcmConfig::default() }).unwrap();
        for w in r.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
        prop_assert!(r.objective >= 0.0);
    }

    #[test]
    fn permuting_pixels_permutes_memberships(px in intensities(8, 60), shift in 1usize..7) {
        let n = px.len();
        let perm: Vec<usize> = (0..n).map(|k| (k * 5 + shift) % n).collect();
        prop_assume!({ let mut p = perm.clone(); p.sort(); p.dedup(); p.len() == n });
        let moved: Vec<f64> = perm.iter().map(|&k| px[k]).collect();
        let cfg = FcmConfig::with_clusters(3);
        let a = fcm::run(&px, &cfg).unwrap();
        let b = fcm::run(&moved, &cfg).unwrap();
        for (j, &k) in perm.iter().enumerate() {
            for i in 0..3 {
                prop_assert!((b.memberships.get(i, j) - a.memberships.get(i, k)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn fuzzy_entropy_is_bounded(u in (2usize..6, 1usize..20).prop_flat_map(|(c, n)| probabilities(c, n))) {
        let c = u.0.classes() as f64;
        let h = loss::fuzzy_entropy(&u.0).unwrap();
        prop_assert!(h >= -1e-12 && h <= c.ln() + 1e-12);
    }

    #[test]
    fn zero_lambda_is_cce((y, z, u) in problem(), mode in 0usize..3) {
        let source = [MembershipSource::FcmFixed, MembershipSource::Prediction, MembershipSource::Blend][mode];
        let (cce_value, cce_grad) = loss::loss_and_grad(&y, &z, Some(&u), &LossConfig::cce()).unwrap();
        let (value, grad) = loss::loss_and_grad(&y, &z, Some(&u), &LossConfig::fcce(source, 0.0)).unwrap();
        prop_assert_eq!(value.to_bits(), cce_value.to_bits());
        prop_assert_eq!(grad, cce_grad);
    }

    #[test]
    fn fcce_adds_a_nonnegative_term((y, z, u) in problem(), lambda in 0.0f64..2.0, mode in 0usize..3) {
        let source = [MembershipSource::FcmFixed, MembershipSource::Prediction, MembershipSource::Blend][mode];
        let p = loss::softmax(&z).unwrap();
        let base = loss::cce(&y, &p).unwrap();
        let total = loss::fcce(&y, &p, Some(&u), &LossConfig::fcce(source, lambda)).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert!(total >= base - 1e-12);
    }

    #[test]
    fn deep_supervision_is_bounded_below((y, z, _u) in problem()) {
        let p = loss::softmax(&z).unwrap();
        let cfg = LossConfig { kind: LossKind::DeepSupervision, ..LossConfig::cce() };
        let (value, _) = loss::loss_and_grad(&y, &z, None, &cfg).unwrap();
        // each pixel contributes -(log p_true + dice-like), which is at least -1
        prop_assert!(value >= -1.0 - 1e-12);
        prop_assert_eq!(value, loss::deep_supervision_loss(&y, &p).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn grid_oracle_never_beats_fcm(px in proptest::collection::vec(0.0f64..1.0, 3)) {
        let r = fcm::run(&px, &FcmConfig::with_clusters(2)).unwrap();
        let tol: f64 = px
            .iter()
            .map(|&x| 0.02 * r.centroids.values().iter().map(|&v| (x - v).powi(2)).fold(0.0, f64::max))
            .sum();
        let grid = grid_minimum(&px);
        prop_assert!(grid >= r.objective - tol, "grid {grid} < fcm {} - {tol}", r.objective);
    }
}

#[test]
fn uniform_memberships_have_maximal_entropy() {
    for c in 2..6 {
        let u = ClassMatrix::from_vec(c, 3, vec![1.0 / c as f64; 3 * c]).unwrap();
        assert!((loss::fuzzy_entropy(&u).unwrap() - (c as f64).ln()).abs() < 1e-12);
    }
    let crisp = ProbabilityField::new(ClassMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
    assert_eq!(loss::fuzzy_entropy(&crisp.0).unwrap(), 0.0);
}
