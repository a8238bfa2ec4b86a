use dopplernet::confidence::{
    decide, default_grid, fit_quantiles, Decision, QuantileTable, ScoreRecord, ScoreSource,
};
use dopplernet::heads::{
    bucket_baseline, decide_output, masked_loss, BaselineBucket, HeadsConfig, DEFAULT_HEADS_TOML,
};
use dopplernet::pipeline::{Image, Mode};
use dopplernet::synth::{apportion, image_bytes, parse_image, Manifest, ManifestRecord};
use proptest::prelude::*;

fn mode() -> impl Strategy<Value = Mode> {
    prop_oneof![Just(Mode::Cw), Just(Mode::Pw), Just(Mode::Tvd)]
}

fn class_of(mode: Mode) -> impl Strategy<Value = usize> {
    match mode {
        Mode::Cw | Mode::Pw => 0usize..6,
        Mode::Tvd => 6usize..10,
    }
}

fn score_records() -> impl Strategy<Value = Vec<ScoreRecord>> {
    prop::collection::vec((-50.0f64..50.0, 0usize..3), 1..300).prop_map(|v| {
        v.into_iter()
            .map(|(s, c)| {
                let mut values = vec![0.0; 3];
                values[c] = s;
                ScoreRecord { values, predicted: c }
            })
            .collect()
    })
}

fn ignored_at(records: &[ScoreRecord], q: f64, table: &QuantileTable) -> Vec<bool> {
    records
        .iter()
        .map(|r| decide(r, q, table).unwrap() == Decision::Ignored)
        .collect()
}

proptest! {
    #[test]
    fn buckets_partition_the_unit_interval(b in 0.0f64..=1.0) {
        let bucket = bucket_baseline(b).unwrap();
        let expected = if b == 0.5 {
            BaselineBucket::Zero
        } else if b < 0.5 {
            BaselineBucket::Negative
        } else {
            BaselineBucket::Positive
        };
        prop_assert_eq!(bucket, expected);
    }

    #[test]
    fn baselines_outside_the_unit_interval_are_rejected(
        b in prop_oneof![-10.0f64..-1e-12, 1.0f64 + 1e-12..10.0]
    ) {
        prop_assert!(bucket_baseline(b).is_err());
    }

    #[test]
    fn apportion_sums_and_stays_within_one_of_exact(
        n in 0usize..5000,
        w in prop::collection::vec(0.01f64..10.0, 1..20),
    ) {
        let counts = apportion(n, &w);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        let total: f64 = w.iter().sum();
        for (c, wi) in counts.iter().zip(&w) {
            let exact = wi / total * n as f64;
            prop_assert!((*c as f64 - exact).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn masked_loss_leaves_the_other_head_untouched(
        (m, class) in mode().prop_flat_map(|m| (Just(m), class_of(m))),
        logits in prop::collection::vec(-20.0f32..20.0, 10),
    ) {
        let (layout, _) = HeadsConfig::load(DEFAULT_HEADS_TOML).unwrap();
        let (loss, grad) = masked_loss(&logits, class, m, &layout).unwrap();
        prop_assert!(loss.is_finite() && loss >= 0.0);
        let own = if m == Mode::Tvd { 6..10 } else { 0..6 };
        for (i, g) in grad.iter().enumerate() {
            if !own.contains(&i) {
                prop_assert_eq!(*g, 0.0);
            }
        }
        let sum: f32 = grad[own].iter().sum();
        prop_assert!(sum.abs() < 1e-5);
    }

    #[test]
    fn every_prediction_maps_to_an_output_of_the_universe(
        m in mode(),
        b in 0.0f64..=1.0,
        logits in prop::collection::vec(-20.0f32..20.0, 10),
    ) {
        let (layout, table) = HeadsConfig::load(DEFAULT_HEADS_TOML).unwrap();
        for baseline in [b, 0.5] {
            let d = decide_output(&logits, m, baseline, &layout, &table).unwrap();
            prop_assert!(table.universe.contains(&d.output_class));
        }
    }

    #[test]
    fn quantile_cutoffs_are_monotone_and_ignored_sets_nest(records in score_records()) {
        let grid = default_grid();
        let (table, _) = fit_quantiles(&records, 3, &grid, ScoreSource::Presoftmax).unwrap();
        for c in &table.classes {
            prop_assert!(c.cutoffs.windows(2).all(|w| w[0] <= w[1]));
        }
        prop_assert!(ignored_at(&records, 0.0, &table).iter().all(|&x| !x));
        let mut previous = vec![false; records.len()];
        for &q in &grid {
            let now = ignored_at(&records, q, &table);
            for (p, n) in previous.iter().zip(&now) {
                prop_assert!(!p || *n, "ignored set shrank at q = {}", q);
            }
            // per class, strictly fewer than floor(qN) + 1 records fall below the cutoff
            for (c, cls) in table.classes.iter().enumerate() {
                let n = cls.sorted.len();
                let k = now.iter().zip(&records).filter(|(x, r)| **x && r.predicted == c).count();
                prop_assert!(k as f64 <= (q * n as f64).floor() + 1e-9);
            }
            previous = now;
        }
    }

    #[test]
    fn variance_sources_reject_the_largest_scores(records in score_records()) {
        let (table, _) = fit_quantiles(&records, 3, &default_grid(), ScoreSource::McVarPresoftmax).unwrap();
        let ignored = ignored_at(&records, 0.1, &table);
        for c in 0..3 {
            let kept = records.iter().zip(&ignored).filter(|(r, x)| r.predicted == c && !**x);
            let dropped = records.iter().zip(&ignored).filter(|(r, x)| r.predicted == c && **x);
            let max_kept = kept.map(|(r, _)| r.own_score()).fold(f64::NEG_INFINITY, f64::max);
            let min_dropped = dropped.map(|(r, _)| r.own_score()).fold(f64::INFINITY, f64::min);
            prop_assert!(max_kept <= min_dropped);
        }
    }

    #[test]
    fn quantile_table_bytes_round_trip(records in score_records()) {
        let (table, _) = fit_quantiles(&records, 3, &default_grid(), ScoreSource::Softmax).unwrap();
        let back = QuantileTable::from_bytes(&table.to_bytes()).unwrap();
        prop_assert_eq!(back, table);
    }

    #[test]
    fn image_bytes_round_trip(
        (rows, cols, data) in (1usize..20, 1usize..20).prop_flat_map(|(r, c)| {
            (Just(r), Just(c), prop::collection::vec(0.0f32..=1.0, r * c))
        })
    ) {
        let img = Image::new(rows, cols, data).unwrap();
        prop_assert_eq!(parse_image(&image_bytes(&img)).unwrap(), img);
    }

    #[test]
    fn manifest_text_round_trip(
        seed in any::<u64>(),
        rows in prop::collection::vec(
            (0.0f64..128.0, 0.0f64..64.0, 0.0f64..=1.0, mode(), "[A-Z_]{0,6}"),
            0..20,
        ),
    ) {
        let records = rows
            .into_iter()
            .enumerate()
            .map(|(i, (r, c, b, m, label))| ManifestRecord {
                path: format!("images/test_{i:05}.f32"),
                roi_row: r,
                roi_col: c,
                baseline: b,
                mode: m,
                label,
                split: "test".into(),
            })
            .collect();
        let m = Manifest { config_hash: "abc123".into(), seed, records };
        let back = Manifest::parse(&m.to_string().unwrap()).unwrap();
        prop_assert_eq!(back, m);
    }
}
