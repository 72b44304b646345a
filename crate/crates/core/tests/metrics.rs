use pgrd::metrics::*;
use pgrd::ndgrad::Tensor;
use pgrd::rng::Stream;
use proptest::prelude::*;

/// `[1, C, 1, N]` field from per-pixel probability rows.
fn field(rows: &[Vec<f64>]) -> Tensor<f64> {
    let (n, c) = (rows.len(), rows[0].len());
    Tensor::from_fn(&[1, c, 1, n], |i| rows[i % n][i / n])
}

#[test]
fn dice_examples() {
    assert_eq!(dice(&[1, 1, 0, 0], &[1, 0, 1, 0], 1).unwrap(), 0.5);
    assert_eq!(dice(&[1, 0, 2], &[1, 0, 2], 2).unwrap(), 1.0);
    assert_eq!(dice(&[0, 0], &[0, 0], 1).unwrap(), 1.0);
    assert!(dice(&[0, 0], &[0], 1).is_err());
    let (per, fg) = dice_per_class(&[0, 1, 2, 2], &[0, 1, 1, 2], 3).unwrap();
    assert_eq!(per, vec![1.0, 2.0 / 3.0, 2.0 / 3.0]);
    assert!((fg - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn nll_examples() {
    let half = field(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
    assert!((nll(&half, &[0, 1]).unwrap() - 2f64.ln()).abs() < 1e-12);
    let sure = field(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert_eq!(nll(&sure, &[0, 1]).unwrap(), 0.0);
    let mixed = field(&[vec![0.5, 0.5], vec![0.75, 0.25]]);
    assert!((nll(&mixed, &[1, 1]).unwrap() - 1.0397).abs() < 1e-4);
    // A zero probability on the truth is clamped, not infinite.
    assert!((nll(&sure, &[1, 0]).unwrap() + 1e-12f64.ln()).abs() < 1e-9);
}

#[test]
fn nll_rejects_unnormalized_fields() {
    let off = field(&[vec![0.5, 0.6]]);
    assert!(matches!(nll(&off, &[0]), Err(MetricError::NotNormalized(_))));
    let within = field(&[vec![0.5, 0.50005]]);
    assert!(nll(&within, &[0]).is_ok());
}

#[test]
fn ece_examples() {
    // Bin [0, 0.5) is empty; [0.5, 1] holds two pixels at 0.6/0.55 (one
    // right) and two at 0.9/0.8 (both right).
    let p = field(&[vec![0.4, 0.6], vec![0.45, 0.55], vec![0.1, 0.9], vec![0.2, 0.8]]);
    let truth = [1, 0, 1, 1];
    let two = ece(&p, &truth, 2).unwrap();
    // With two bins all four land in the upper bin: |0.75 - 0.7125|.
    assert!((two - 0.0375).abs() < 1e-12);
    // Four bins put the two groups in [0.5, 0.75) and [0.75, 1]:
    // 0.5 |0.5 - 0.575| + 0.5 |1.0 - 0.85|.
    let four = ece(&p, &truth, 4).unwrap();
    assert!((four - 0.1125).abs() < 1e-12, "{four}");
    let right = field(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert_eq!(ece(&right, &[0, 1], 10).unwrap(), 0.0);
    assert_eq!(ece(&right, &[1, 0], 10).unwrap(), 1.0);
    assert!(ece(&right, &[1, 0], 0).is_err());
}

#[test]
fn reliability_bins_partition_the_pixels() {
    let p = field(&[vec![0.4, 0.6], vec![0.45, 0.55], vec![0.1, 0.9], vec![0.2, 0.8]]);
    let bins = reliability(&p, &[1, 0, 1, 1], 4).unwrap();
    assert_eq!(bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![0, 0, 2, 2]);
    assert_eq!(bins[2].accuracy, 0.5);
    assert!((bins[3].confidence - 0.85).abs() < 1e-12);
    let bins = reliability(&p, &[1, 0, 1, 1], 5).unwrap();
    assert_eq!(bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![0, 0, 1, 1, 2]);
}

/// Naive ranks: 1 + number below + half the other ties.
fn naive_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let below = xs.iter().filter(|&&y| y < x).count() as f64;
            let ties = xs.iter().filter(|&&y| y == x).count() as f64;
            1.0 + below + (ties - 1.0) / 2.0
        })
        .collect()
}

fn naive_spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (naive_ranks(a), naive_ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn spearman_matches_naive_ranks() {
    for seed in 0..20 {
        let mut s = Stream::new(seed, "spearman");
        let a: Vec<f64> = (0..37).map(|_| s.range_inclusive(0, 6) as f64).collect();
        let b: Vec<f64> = a.iter().map(|x| x + s.range_inclusive(0, 4) as f64).collect();
        let got = spearman(&a, &b).unwrap();
        assert!(!got.degenerate);
        assert!((got.value - naive_spearman(&a, &b)).abs() < 1e-12);
    }
}

#[test]
fn error_uncertainty_correlation_cases() {
    // Errors exactly on the high-entropy pixels.
    let p = field(&[vec![0.9, 0.1], vec![0.9, 0.1], vec![0.6, 0.4], vec![0.6, 0.4]]);
    let c = err_uncert_corr(&p, &[0, 0, 1, 1]).unwrap();
    assert!((c.value - 1.0).abs() < 1e-12 && !c.degenerate);
    let flat = field(&[vec![0.7, 0.3], vec![0.7, 0.3], vec![0.7, 0.3]]);
    let c = err_uncert_corr(&flat, &[0, 1, 0]).unwrap();
    assert_eq!((c.value, c.degenerate), (0.0, true));
    assert!(err_uncert_corr(&field(&[vec![0.5, 0.5]]), &[0]).is_err());
}

/// Two-sided Student-t tail by Simpson integration of the density after
/// substituting `x = sqrt(df) tan(theta)`, which maps it to `cos^(df-1)`.
fn t_tail_oracle(t: f64, df: usize) -> f64 {
    let f = |th: f64| th.cos().powi(df as i32 - 1);
    let simpson = |a: f64, b: f64| {
        let n = 200_000;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let half = std::f64::consts::FRAC_PI_2;
    let th0 = (t.abs() / (df as f64).sqrt()).atan();
    2.0 * simpson(th0, half) / simpson(-half, half)
}

#[test]
fn paired_t_examples() {
    let a = [0.8, 0.7, 0.9];
    let r = paired_t_test(&a, &a).unwrap();
    assert_eq!((r.t, r.p), (0.0, 1.0));
    let r = paired_t_test(&[1.0, -1.0, 1.0, -1.0], &[0.0; 4]).unwrap();
    assert_eq!((r.t, r.p), (0.0, 1.0));
    assert!(paired_t_test(&[1.0, 2.0], &[1.0]).is_err());

    let a = [0.81, 0.77, 0.92, 0.64, 0.88, 0.70];
    let b = [0.78, 0.75, 0.85, 0.66, 0.80, 0.69];
    let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = mean / (sd / n.sqrt());
    let r = paired_t_test(&a, &b).unwrap();
    assert!((r.t - t).abs() < 1e-9);
    assert_eq!(r.df, 5);
    assert!((r.p - t_tail_oracle(t, 5)).abs() < 1e-9, "{} vs {}", r.p, t_tail_oracle(t, 5));
}

fn case(id: usize, dsc: f64, nll: f64) -> CaseResult {
    CaseResult {
        case: id,
        dsc: vec![1.0, dsc],
        dsc_mean: dsc,
        nll,
        ece: 0.1,
        corr: 0.2,
        corr_degenerate: false,
        samples: 8,
    }
}

#[test]
fn summary_conventions() {
    let r = summarize(&[case(0, 0.6, 0.3)]).unwrap();
    assert_eq!(r.dsc.std, 0.0);
    let r = summarize(&[case(0, 0.6, 0.3), case(1, 0.8, 0.3)]).unwrap();
    assert!((r.dsc.mean - 0.7).abs() < 1e-12);
    assert!((r.dsc.std - 0.1414).abs() < 1e-4);
    assert!(summarize(&[]).is_err());
}

#[test]
fn report_schema_and_table_layout() {
    let r = summarize(&[case(0, 0.6, 0.3), case(1, 0.8, 0.4)]).unwrap();
    let json = serde_json::to_value(r).unwrap();
    let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
    assert_eq!(keys.len(), 4);
    for m in METRICS {
        let inner = json[m].as_object().unwrap();
        assert_eq!(inner.len(), 2);
        assert!(inner.contains_key("mean") && inner.contains_key("std"));
    }
    let table = Report::table(&[("pgrd", r)], true);
    let header = table.lines().next().unwrap();
    let cols: Vec<&str> = header.split_whitespace().collect();
    assert_eq!(cols, vec!["model", "DSC(%)", "NLL(%)", "ECE(%)", "corr"]);
    assert!(table.contains("70.000"));
    assert!(Report::table(&[("pgrd", r)], false).contains("0.700"));
    let csv = per_case_csv(&[case(3, 0.6, 0.3)]);
    assert_eq!(csv.lines().next().unwrap(), "case,dsc_mean,dsc_0,dsc_1,nll,ece,corr,corr_degenerate,samples");
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn comparisons_pair_by_case_id() {
    let a = [case(0, 0.9, 0.3), case(1, 0.8, 0.2), case(2, 0.85, 0.25)];
    let b = [case(2, 0.8, 0.25), case(0, 0.85, 0.3), case(1, 0.7, 0.2)];
    let cmp = compare(&a, &b).unwrap();
    assert_eq!(cmp.iter().map(|c| c.metric.as_str()).collect::<Vec<_>>(), METRICS);
    assert!((cmp[0].test.mean_difference - (0.05 + 0.1 + 0.05) / 3.0).abs() < 1e-12);
    assert_eq!(cmp[1].test.p, 1.0);
    assert!(compare(&a, &b[..2]).is_err());
}

fn probs(seed: u64, classes: usize, n: usize) -> (Tensor<f64>, Vec<u8>) {
    let mut s = Stream::new(seed, "probs");
    let raw: Tensor<f64> = s.normal_tensor(&[1, classes, 1, n]);
    let p = pgrd::ndgrad::softmax_channels(&raw.scale(2.0)).unwrap();
    let truth = (0..n).map(|_| s.range_inclusive(0, classes as u64 - 1) as u8).collect();
    (p, truth)
}

proptest! {
    #[test]
    fn dice_is_symmetric(a in proptest::collection::vec(0u8..3, 1..60), seed in any::<u64>()) {
        let mut s = Stream::new(seed, "other");
        let b: Vec<u8> = a.iter().map(|_| s.range_inclusive(0, 2) as u8).collect();
        for c in 0..3 {
            prop_assert_eq!(dice(&a, &b, c).unwrap(), dice(&b, &a, c).unwrap());
            prop_assert_eq!(dice(&a, &a, c).unwrap(), 1.0);
        }
    }

    #[test]
    fn nll_ignores_an_empty_extra_class(seed in any::<u64>(), n in 2usize..40) {
        let (p, truth) = probs(seed, 2, n);
        let wider = Tensor::from_fn(&[1, 3, 1, n], |i| if i < 2 * n { p.data()[i] } else { 0.0 });
        prop_assert_eq!(nll(&p, &truth).unwrap(), nll(&wider, &truth).unwrap());
    }

    #[test]
    fn ece_is_bounded_and_bins_cover_every_pixel(seed in any::<u64>(), n in 1usize..50, bins in 1usize..20) {
        let (p, truth) = probs(seed, 3, n);
        let e = ece(&p, &truth, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        let total: usize = reliability(&p, &truth, bins).unwrap().iter().map(|b| b.count).sum();
        prop_assert_eq!(total, n);
    }

    #[test]
    fn metrics_are_pure(seed in any::<u64>(), n in 2usize..30) {
        let (p, truth) = probs(seed, 2, n);
        prop_assert_eq!(nll(&p, &truth).unwrap().to_bits(), nll(&p, &truth).unwrap().to_bits());
        prop_assert_eq!(ece(&p, &truth, 10).unwrap().to_bits(), ece(&p, &truth, 10).unwrap().to_bits());
        prop_assert_eq!(err_uncert_corr(&p, &truth).unwrap(), err_uncert_corr(&p, &truth).unwrap());
    }
}
