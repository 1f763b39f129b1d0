mod common;

use chrono::{DateTime, Duration, NaiveDate, TimeZone, Utc};
use common::*;
use newsmkl::market::synth::{starter_dictionary, synth_generate, SynthSpec};
use newsmkl::market::{
    abnormal_threshold, calendar_features, measure_event, read_prices, return_features, DropReason, LabelKind,
    LabelingConfig, PriceSeries,
};
use proptest::prelude::*;
use rand::Rng;

/// Irregular random-walk ticks between 09:30 and 16:00 on one day.
fn random_walk(seed: u64, day: NaiveDate) -> PriceSeries {
    let mut r = rng(seed);
    let mut t = day.and_hms_opt(9, 30, 0).unwrap().and_utc();
    let end = day.and_hms_opt(16, 0, 0).unwrap().and_utc();
    let mut p = 50.0;
    let mut points = Vec::new();
    while t <= end {
        points.push((t, p));
        p *= 1.0 + r.random_range(-0.004..0.004);
        t += Duration::seconds(r.random_range(20..400));
    }
    PriceSeries::new("RW", points).unwrap()
}

/// Previous-tick lookup by a linear scan.
fn scan_price(points: &[(DateTime<Utc>, f64)], t: DateTime<Utc>) -> f64 {
    let mut last = None;
    for &(s, p) in points {
        if s <= t {
            last = Some(p);
        }
    }
    last.unwrap()
}

#[test]
fn return_features_match_scan_recompute() {
    let day = NaiveDate::from_ymd_opt(2004, 6, 9).unwrap();
    for seed in 0..10 {
        let s = random_walk(seed, day);
        let mut r = rng(seed + 100);
        for _ in 0..20 {
            let t = day.and_hms_opt(10, 20, 0).unwrap().and_utc() + Duration::seconds(r.random_range(0..5 * 3600));
            let got = return_features(&s, t, false).unwrap();
            let abs = return_features(&s, t, true).unwrap();
            for k in 0..5 {
                let end = t - Duration::minutes(5 * k as i64);
                let p1 = scan_price(s.points(), end);
                let p0 = scan_price(s.points(), end - Duration::minutes(15));
                let want = (p1 - p0) / p0;
                assert!((got[k] - want).abs() < 1e-15);
                assert_eq!(abs[k], want.abs());
            }
        }
    }
}

#[test]
fn drop_reasons() {
    let day = NaiveDate::from_ymd_opt(2004, 6, 9).unwrap();
    let s = random_walk(1, day);
    let cfg = LabelingConfig::default();
    let at = |h, m| day.and_hms_opt(h, m, 0).unwrap().and_utc();
    assert_eq!(measure_event(&s, at(9, 0), &cfg), Err(DropReason::OutsideTradingHours));
    assert_eq!(measure_event(&s, at(9, 50), &cfg), Err(DropReason::BeforeMinTime));
    assert_eq!(measure_event(&s, at(15, 55), &cfg), Err(DropReason::HorizonPastClose));
    let sat = Utc.with_ymd_and_hms(2004, 6, 12, 12, 0, 0).unwrap();
    assert_eq!(measure_event(&s, sat, &cfg), Err(DropReason::Weekend));
    let ok = measure_event(&s, at(12, 0), &cfg).unwrap();
    assert!((ok.future_return - s.simple_return(at(12, 0), at(12, 10)).unwrap()).abs() < 1e-15);
    assert!(ok.returns.is_some());
}

#[test]
fn calendar_bins_are_one_hot() {
    let wed = NaiveDate::from_ymd_opt(2004, 6, 9).unwrap();
    for (h, m, bin) in [(9, 30, 0), (10, 29, 0), (10, 30, 1), (14, 59, 1), (15, 0, 2)] {
        let (tod, dow) = calendar_features(wed.and_hms_opt(h, m, 0).unwrap()).unwrap();
        let mut want = [0.0; 3];
        want[bin] = 1.0;
        assert_eq!(tod, want);
        assert_eq!(dow, [0.0, 0.0, 1.0, 0.0, 0.0]);
    }
}

#[test]
fn utc_offset_shifts_exchange_clock() {
    let cfg = LabelingConfig {
        utc_offset_minutes: -300,
        ..LabelingConfig::default()
    };
    let t = Utc.with_ymd_and_hms(2004, 6, 9, 17, 0, 0).unwrap();
    assert_eq!(cfg.local(t).time(), chrono::NaiveTime::from_hms_opt(12, 0, 0).unwrap());
}

#[test]
fn synthetic_prices_parse_and_signal_zero_decouples_jumps() {
    let spec = SynthSpec {
        n_events: 3000,
        signal: 0.0,
        ..SynthSpec::default()
    };
    let data = synth_generate(5, &spec, &starter_dictionary()).unwrap();
    let prices = read_prices(data.prices_csv.as_bytes()).unwrap();
    assert_eq!(prices.len(), spec.n_tickers);
    let rate = |kw: bool| {
        let rows: Vec<_> = data.truth.iter().filter(|t| t.keyword == kw).collect();
        rows.iter().filter(|t| t.jump).count() as f64 / rows.len() as f64
    };
    assert!(
        (rate(true) - rate(false)).abs() < 0.05,
        "{} {}",
        rate(true),
        rate(false)
    );
    assert!((rate(false) - spec.keyword_rate).abs() < 0.05);
    let again = synth_generate(5, &spec, &starter_dictionary()).unwrap();
    assert_eq!(again, data);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn threshold_matches_nearest_rank(values in prop::collection::vec(-1.0f64..1.0, 1..80), p in 50u32..=95) {
        let got = abnormal_threshold(&values, p as f64).unwrap();
        prop_assert_eq!(got, naive_nearest_rank(&values, p as f64));
    }

    #[test]
    fn threshold_is_monotone(values in prop::collection::vec(0.0f64..1.0, 1..80), p in 50.0f64..94.0, dp in 0.0f64..5.0) {
        prop_assert!(abnormal_threshold(&values, p).unwrap() <= abnormal_threshold(&values, p + dp).unwrap());
        let t = abnormal_threshold(&values, p).unwrap();
        let above = values.iter().filter(|&&v| v > t).count() as f64;
        prop_assert!(above <= (1.0 - p / 100.0) * values.len() as f64 + 1e-9);
    }

    #[test]
    fn mirrored_path_flips_direction_labels(seed in 0u64..1000, minute in 0i64..300) {
        let day = NaiveDate::from_ymd_opt(2004, 6, 9).unwrap();
        let s = random_walk(seed, day);
        let mirror = PriceSeries::new("M", s.points().iter().map(|&(t, p)| (t, 2500.0 / p)).collect()).unwrap();
        let t = day.and_hms_opt(10, 30, 0).unwrap().and_utc() + Duration::minutes(minute);
        let cfg = LabelingConfig::default();
        let a = measure_event(&s, t, &cfg).unwrap();
        let b = measure_event(&mirror, t, &cfg).unwrap();
        if a.future_return != 0.0 {
            prop_assert_eq!(a.label(LabelKind::Direction, 0.0), -b.label(LabelKind::Direction, 0.0));
        } else {
            prop_assert_eq!(a.label(LabelKind::Direction, 0.0), -1);
        }
        let ra = a.returns.unwrap();
        let rb = b.returns.unwrap();
        for k in 0..5 {
            prop_assert!(ra[k].signum() == -rb[k].signum() || ra[k] == 0.0);
        }
    }
}
