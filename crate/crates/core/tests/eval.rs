use proptest::prelude::*;
use trigen_core::corpus::{generate_samples, CorpusConfig};
use trigen_core::eval::{
    miou, run_protocol, spearman, train_segmenter, BackgroundSegmenter, ConfusionMatrix, OracleSegmenter, Regime, SegConfig,
};

fn seg() -> SegConfig {
    SegConfig { width: 8, steps: 60, batch_size: 8, lr: 1e-2 }
}

#[test]
fn protocol_is_bit_reproducible() {
    let cc = CorpusConfig::with_size(16, 16);
    let real = generate_samples(&cc, 24, 1).unwrap();
    let syn = generate_samples(&cc, 24, 2).unwrap();
    let test = generate_samples(&cc, 8, 3).unwrap();
    let regimes = [Regime::Real, Regime::Syn, Regime::RealSyn];
    let a = run_protocol(&real, &syn, &test, &regimes, &[1, 2], 5, &seg()).unwrap();
    let b = run_protocol(&real, &syn, &test, &regimes, &[1, 2], 5, &seg()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 3);
    assert!(a.rows.iter().all(|r| r.cells.len() == 2));
    assert!(run_protocol(&real, &syn, &[], &regimes, &[1], 5, &seg()).is_err());
    assert!(run_protocol(&real, &syn, &test, &regimes, &[], 5, &seg()).is_err());
}

#[test]
fn trained_segmenter_sits_between_background_and_oracle() {
    let cc = CorpusConfig::with_size(16, 16);
    let train = generate_samples(&cc, 48, 11).unwrap();
    let test = generate_samples(&cc, 16, 12).unwrap();
    let m = train_segmenter(&[&train], 5, &SegConfig { steps: 150, ..seg() }, 4).unwrap();
    let got = miou(&m, &test, 5).unwrap().miou;
    let bg = miou(&BackgroundSegmenter, &test, 5).unwrap().miou;
    let oracle = miou(&OracleSegmenter, &test, 5).unwrap().miou;
    assert!(bg < got && got < oracle, "{bg} < {got} < {oracle}");
    assert_eq!(oracle, 1.0);
}

proptest! {
    #[test]
    fn miou_lies_in_the_unit_interval(rows in prop::collection::vec(prop::collection::vec(0u64..50, 3), 3)) {
        let cm = ConfusionMatrix::from_rows(&rows).unwrap();
        let m = cm.miou();
        prop_assert!((0.0..=1.0).contains(&m));
        let diag: Vec<Vec<u64>> = (0..3).map(|i| (0..3).map(|j| if i == j { rows[i][j] + 1 } else { 0 }).collect()).collect();
        prop_assert_eq!(ConfusionMatrix::from_rows(&diag).unwrap().miou(), 1.0);
    }

    #[test]
    fn spearman_ignores_monotone_maps(xs in prop::collection::vec(-10.0f64..10.0, 3..20)) {
        let ys: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        let distinct = xs.iter().enumerate().all(|(i, a)| xs[..i].iter().all(|b| b != a));
        prop_assume!(distinct);
        prop_assert!((spearman(&xs, &ys) - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        prop_assert!((spearman(&xs, &neg) + 1.0).abs() < 1e-12);
    }
}
