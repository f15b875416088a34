use chrono::NaiveDate;
use mandi_core::data::{clean_outliers, MarketRecord, MarketRegistry, OutlierPolicy, SparsePanel};
use mandi_core::eval::{balanced_accuracy, per_class_accuracy, raw_accuracy};
use mandi_core::impute::DensePanel;
use mandi_core::panel::{
    argmax_direction, build_samples, directions, neighbor_markets, quantize, relative_changes, Direction, FeatureConfig,
};
use proptest::prelude::*;

fn d0() -> NaiveDate {
    NaiveDate::from_ymd_opt(2017, 1, 1).unwrap()
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("m{i}")).collect()
}

fn dense(rows: &[Vec<f64>]) -> DensePanel {
    DensePanel::new("x", ids(rows.len()), d0(), rows[0].len(), rows.concat()).unwrap()
}

fn rows(markets: usize, days: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
    days.prop_flat_map(move |t| prop::collection::vec(prop::collection::vec(1.0f64..5000.0, t), markets))
}

fn direction() -> impl Strategy<Value = Direction> {
    (0usize..3).prop_map(Direction::from_index)
}

proptest! {
    #[test]
    fn cleaning_only_removes_cells(
        cells in prop::collection::vec(prop::option::weighted(0.8, 0.5f64..20000.0), 3 * 60),
    ) {
        let panel = SparsePanel::new("x", ids(3), d0(), 60, cells).unwrap();
        let (clean, report) = clean_outliers(&panel, &OutlierPolicy::default());
        let mut dropped = 0;
        for (a, b) in panel.values().iter().zip(clean.values()) {
            match (a, b) {
                (Some(x), Some(y)) => prop_assert_eq!(x, y),
                (Some(_), None) => dropped += 1,
                (None, None) => {}
                (None, Some(_)) => prop_assert!(false, "cleaning invented a value"),
            }
        }
        prop_assert_eq!(dropped, report.removed.len());
        for r in &report.removed {
            prop_assert!(r.value > 10.0 * r.trailing_median || r.value < r.trailing_median / 10.0);
        }
    }

    #[test]
    fn relative_changes_rebuild_the_series(data in rows(3, 2..40), q in 1usize..4) {
        prop_assume!(data[0].len() >= q);
        let qp = quantize(&dense(&data), q).unwrap();
        prop_assert_eq!(qp.num_steps, data[0].len() / q);
        for (m, delta) in relative_changes(&qp).iter().enumerate() {
            prop_assert_eq!(delta[0], 0.0);
            for s in 2..=qp.num_steps {
                let rebuilt = qp.get(m, s - 1) * (1.0 + delta[s - 1]);
                prop_assert!((rebuilt - qp.get(m, s)).abs() <= 1e-9 * qp.get(m, s));
            }
        }
    }

    #[test]
    fn directions_ignore_price_scale(data in rows(2, 2..30), exp in -4i32..8) {
        let scale = 2f64.powi(exp);
        let scaled: Vec<Vec<f64>> = data.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        let a = directions(&relative_changes(&quantize(&dense(&data), 1).unwrap()));
        let b = directions(&relative_changes(&quantize(&dense(&scaled), 1).unwrap()));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn sample_count_is_neighbors_times_usable_steps(
        data in rows(5, 3..30),
        tau in 1usize..6,
        k in 1usize..6,
    ) {
        let registry = MarketRegistry::new(
            (0..5).map(|i| MarketRecord::new(&format!("m{i}"), "n", i as f64, (i * i) as f64, "s")).collect(),
        ).unwrap();
        let qp = quantize(&dense(&data), 1).unwrap();
        let samples = build_samples(&qp, &qp, "m2", &FeatureConfig { tau, k }, &registry).unwrap();
        let neighbors = neighbor_markets(&registry, "m2", k).unwrap().markets.len();
        prop_assert_eq!(neighbors, k);
        prop_assert_eq!(samples.len(), neighbors * qp.num_steps.saturating_sub(tau));
        prop_assert!(samples.iter().all(|s| s.features.len() == 2 * tau));
    }

    #[test]
    fn metrics_ignore_pair_order(
        pairs in prop::collection::vec((direction(), direction()), 1..60),
        rot in 0usize..60,
    ) {
        let (t, p): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
        let mut shuffled = pairs.clone();
        let r = rot % shuffled.len();
        shuffled.rotate_left(r);
        shuffled.reverse();
        let (t2, p2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
        prop_assert_eq!(raw_accuracy(&t, &p).unwrap(), raw_accuracy(&t2, &p2).unwrap());
        let (a, b) = (balanced_accuracy(&t, &p).unwrap(), balanced_accuracy(&t2, &p2).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
        let present = per_class_accuracy(&t, &p).unwrap().iter().flatten().count();
        prop_assert!(present >= 1);
    }

    #[test]
    fn argmax_picks_a_maximum(p in prop::array::uniform3(0.0f64..1.0)) {
        let d = argmax_direction(&p);
        let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(p[d.index()] >= max - 1e-12);
    }
}

#[test]
fn random_guessing_scores_a_third_balanced() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let n = 30_000;
    let truth: Vec<Direction> = (0..n)
        .map(|_| match rng.random_range(0..10) {
            0..=5 => Direction::Up,
            6..=8 => Direction::Down,
            _ => Direction::Flat,
        })
        .collect();
    let guess: Vec<Direction> = (0..n).map(|_| Direction::from_index(rng.random_range(0..3))).collect();
    let b = balanced_accuracy(&truth, &guess).unwrap();
    assert!((b - 1.0 / 3.0).abs() < 0.02, "{b}");
}
