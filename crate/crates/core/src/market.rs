//! Prices, return features, event labels and calendar features.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;

use chrono::{DateTime, Datelike, Duration, NaiveTime, Utc, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod synth;

/// Number of lagged returns in a return feature vector.
pub const N_RETURNS: usize = 5;
/// History needed before an event to compute its return features.
pub const HISTORY_MINUTES: i64 = 35;

#[derive(Debug, Error, PartialEq)]
pub enum MarketError {
    #[error("price series for {0} is empty")]
    EmptySeries(String),
    #[error("{ticker}: timestamps not strictly increasing at {at}")]
    Unordered { ticker: String, at: DateTime<Utc> },
    #[error("{ticker}: price {price} at {at} is not positive")]
    BadPrice {
        ticker: String,
        at: DateTime<Utc>,
        price: f64,
    },
    #[error("no price at or before {0}")]
    NoPrice(DateTime<Utc>),
    #[error("prices line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("empty population")]
    EmptyPopulation,
    #[error("percentile must lie in (0, 100), got {0}")]
    BadPercentile(f64),
    #[error("{0} falls on a weekend")]
    Weekend(DateTime<Utc>),
    #[error("invalid labeling config: {0}")]
    Config(String),
}

/// Time-ordered positive prices for one ticker.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    ticker: String,
    points: Vec<(DateTime<Utc>, f64)>,
}

impl PriceSeries {
    pub fn new(ticker: impl Into<String>, points: Vec<(DateTime<Utc>, f64)>) -> Result<Self, MarketError> {
        let ticker = ticker.into();
        if points.is_empty() {
            return Err(MarketError::EmptySeries(ticker));
        }
        for (i, &(t, p)) in points.iter().enumerate() {
            if !(p > 0.0 && p.is_finite()) {
                return Err(MarketError::BadPrice {
                    ticker,
                    at: t,
                    price: p,
                });
            }
            if i > 0 && points[i - 1].0 >= t {
                return Err(MarketError::Unordered { ticker, at: t });
            }
        }
        Ok(PriceSeries { ticker, points })
    }

    pub fn ticker(&self) -> &str {
        &self.ticker
    }

    pub fn points(&self) -> &[(DateTime<Utc>, f64)] {
        &self.points
    }

    /// Last price at or before `t`.
    pub fn price_at(&self, t: DateTime<Utc>) -> Result<f64, MarketError> {
        let idx = self.points.partition_point(|&(s, _)| s <= t);
        if idx == 0 {
            return Err(MarketError::NoPrice(t));
        }
        Ok(self.points[idx - 1].1)
    }

    /// Simple return from `from` to `to`, both sampled by previous tick.
    pub fn simple_return(&self, from: DateTime<Utc>, to: DateTime<Utc>) -> Result<f64, MarketError> {
        let p0 = self.price_at(from)?;
        Ok((self.price_at(to)? - p0) / p0)
    }
}

/// Reads `ticker,timestamp,price` rows (header required) into one series per ticker.
/// Rows of a ticker may be interleaved with other tickers but must be time-ordered.
pub fn read_prices<R: BufRead>(reader: R) -> Result<BTreeMap<String, PriceSeries>, MarketError> {
    let mut raw: BTreeMap<String, Vec<(DateTime<Utc>, f64)>> = BTreeMap::new();
    let parse_err = |line: usize, reason: String| MarketError::Parse { line, reason };
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| parse_err(i + 1, e.to_string()))?;
        let line = line.trim();
        if i == 0 {
            if line != "ticker,timestamp,price" {
                return Err(parse_err(
                    1,
                    format!("expected header ticker,timestamp,price, got {line:?}"),
                ));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(parse_err(i + 1, format!("expected 3 fields, got {}", fields.len())));
        }
        let t = DateTime::parse_from_rfc3339(fields[1])
            .map_err(|e| parse_err(i + 1, format!("timestamp {:?}: {e}", fields[1])))?
            .with_timezone(&Utc);
        let p: f64 = fields[2]
            .parse()
            .map_err(|e| parse_err(i + 1, format!("price {:?}: {e}", fields[2])))?;
        raw.entry(fields[0].to_string()).or_default().push((t, p));
    }
    raw.into_iter()
        .map(|(ticker, points)| PriceSeries::new(ticker.clone(), points).map(|s| (ticker, s)))
        .collect()
}

pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// The five lagged returns `r_k = (P(t-5k) - P(t-5k-15)) / P(t-5k-15)`, `k = 0..4`.
pub fn return_features(
    series: &PriceSeries,
    t: DateTime<Utc>,
    absolute: bool,
) -> Result<[f64; N_RETURNS], MarketError> {
    let mut out = [0.0; N_RETURNS];
    for (k, r) in out.iter_mut().enumerate() {
        let end = t - Duration::minutes(5 * k as i64);
        let v = series.simple_return(end - Duration::minutes(15), end)?;
        *r = if absolute { v.abs() } else { v };
    }
    Ok(out)
}

/// Nearest-rank percentile: element `ceil(p/100 * n)` (1-based) of the sorted values.
pub fn abnormal_threshold(values: &[f64], percentile: f64) -> Result<f64, MarketError> {
    if values.is_empty() {
        return Err(MarketError::EmptyPopulation);
    }
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(MarketError::BadPercentile(percentile));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (percentile * sorted.len() as f64 / 100.0).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    /// +1 when the absolute horizon return exceeds the threshold.
    Abnormal,
    /// +1 when the horizon return is positive.
    Direction,
}

impl LabelKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "abnormal" => Some(LabelKind::Abnormal),
            "direction" => Some(LabelKind::Direction),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelKind::Abnormal => "abnormal",
            LabelKind::Direction => "direction",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LabelingConfig {
    pub horizon_minutes: u32,
    pub percentile: f64,
    pub label_kind: LabelKind,
    pub open: NaiveTime,
    pub close: NaiveTime,
    /// Events published earlier than this are dropped.
    pub min_event_time: NaiveTime,
    /// Offset added to UTC timestamps to obtain exchange clock time.
    pub utc_offset_minutes: i32,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        LabelingConfig {
            horizon_minutes: 10,
            percentile: 75.0,
            label_kind: LabelKind::Abnormal,
            open: NaiveTime::from_hms_opt(9, 30, 0).unwrap(),
            close: NaiveTime::from_hms_opt(16, 0, 0).unwrap(),
            min_event_time: NaiveTime::from_hms_opt(10, 10, 0).unwrap(),
            utc_offset_minutes: 0,
        }
    }
}

impl LabelingConfig {
    pub fn validate(&self) -> Result<(), MarketError> {
        let h = self.horizon_minutes;
        if h == 0 || !h.is_multiple_of(10) || h > 250 {
            return Err(MarketError::Config(format!(
                "horizon {h} is not a multiple of 10 in 10..=250"
            )));
        }
        if !(50.0..=95.0).contains(&self.percentile) {
            return Err(MarketError::Config(format!(
                "percentile {} outside [50, 95]",
                self.percentile
            )));
        }
        if self.open >= self.close {
            return Err(MarketError::Config("open must precede close".into()));
        }
        Ok(())
    }

    pub fn with_horizon(mut self, horizon_minutes: u32) -> Self {
        self.horizon_minutes = horizon_minutes;
        self
    }

    /// Exchange clock time of an instant.
    pub fn local(&self, t: DateTime<Utc>) -> chrono::NaiveDateTime {
        t.naive_utc() + Duration::minutes(self.utc_offset_minutes as i64)
    }
}

/// Why an event produced no labeled example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Weekend,
    OutsideTradingHours,
    BeforeMinTime,
    HorizonPastClose,
    MissingPrice,
    InsufficientHistory,
    UnknownTicker,
}

impl DropReason {
    pub fn name(self) -> &'static str {
        match self {
            DropReason::Weekend => "weekend",
            DropReason::OutsideTradingHours => "outside_trading_hours",
            DropReason::BeforeMinTime => "before_min_time",
            DropReason::HorizonPastClose => "horizon_past_close",
            DropReason::MissingPrice => "missing_price",
            DropReason::InsufficientHistory => "insufficient_history",
            DropReason::UnknownTicker => "unknown_ticker",
        }
    }
}

/// Features and horizon return of one event, before labeling.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasuredEvent {
    pub time: DateTime<Utc>,
    pub horizon_minutes: u32,
    /// Signed lagged returns; `None` when the series lacks history.
    pub returns: Option<[f64; N_RETURNS]>,
    pub time_of_day: [f64; 3],
    pub day_of_week: [f64; 5],
    pub future_return: f64,
}

impl MeasuredEvent {
    pub fn abs_future_return(&self) -> f64 {
        self.future_return.abs()
    }

    /// Return features as used by a task: absolute values for abnormal labels.
    pub fn return_features(&self, kind: LabelKind) -> Option<[f64; N_RETURNS]> {
        self.returns.map(|r| match kind {
            LabelKind::Abnormal => r.map(f64::abs),
            LabelKind::Direction => r,
        })
    }

    pub fn label(&self, kind: LabelKind, threshold: f64) -> i8 {
        match kind {
            LabelKind::Abnormal if self.abs_future_return() > threshold => 1,
            LabelKind::Direction if self.future_return > 0.0 => 1,
            _ => -1,
        }
    }
}

/// Measures an event published at `t`, or says why it is dropped.
pub fn measure_event(
    series: &PriceSeries,
    t: DateTime<Utc>,
    config: &LabelingConfig,
) -> Result<MeasuredEvent, DropReason> {
    let local = config.local(t);
    let (time_of_day, day_of_week) = calendar_features(local).map_err(|_| DropReason::Weekend)?;
    let clock = local.time();
    if clock < config.open || clock >= config.close {
        return Err(DropReason::OutsideTradingHours);
    }
    if clock < config.min_event_time {
        return Err(DropReason::BeforeMinTime);
    }
    let horizon = Duration::minutes(config.horizon_minutes as i64);
    if (local + horizon).time() > config.close || (local + horizon).date() != local.date() {
        return Err(DropReason::HorizonPastClose);
    }
    let future_return = series
        .simple_return(t, t + horizon)
        .map_err(|_| DropReason::MissingPrice)?;
    let returns = return_features(series, t, false).ok();
    Ok(MeasuredEvent {
        time: t,
        horizon_minutes: config.horizon_minutes,
        returns,
        time_of_day,
        day_of_week,
        future_return,
    })
}

/// A labeled event ready for training or evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabeledEvent {
    pub doc_id: String,
    pub event: MeasuredEvent,
    pub label: i8,
    pub label_kind: LabelKind,
}

pub fn label_event(
    series: &PriceSeries,
    doc_id: &str,
    t: DateTime<Utc>,
    config: &LabelingConfig,
    threshold: f64,
) -> Result<LabeledEvent, DropReason> {
    let event = measure_event(series, t, config)?;
    Ok(LabeledEvent {
        doc_id: doc_id.to_string(),
        label: event.label(config.label_kind, threshold),
        label_kind: config.label_kind,
        event,
    })
}

/// One-hot time-of-day bins `[before 10:30, between, from 15:00]` and weekday `Mon..Fri`
/// of an exchange clock time.
pub fn calendar_features(local: chrono::NaiveDateTime) -> Result<([f64; 3], [f64; 5]), MarketError> {
    let weekday = local.weekday();
    if matches!(weekday, Weekday::Sat | Weekday::Sun) {
        return Err(MarketError::Weekend(local.and_utc()));
    }
    let mut dow = [0.0; 5];
    dow[weekday.num_days_from_monday() as usize] = 1.0;
    let clock = local.time();
    let mut tod = [0.0; 3];
    if clock < NaiveTime::from_hms_opt(10, 30, 0).unwrap() {
        tod[0] = 1.0;
    } else if clock < NaiveTime::from_hms_opt(15, 0, 0).unwrap() {
        tod[1] = 1.0;
    } else {
        tod[2] = 1.0;
    }
    Ok((tod, dow))
}

pub const EVENTS_CSV_HEADER: &str =
    "id,timestamp,horizon,ret0,ret1,ret2,ret3,ret4,tod0,tod1,tod2,dow0,dow1,dow2,dow3,dow4,future_return,label";

/// One row of the events CSV; return columns are empty without history.
pub fn event_csv_row(e: &LabeledEvent) -> String {
    let mut out = format!(
        "{},{},{}",
        e.doc_id,
        format_timestamp(e.event.time),
        e.event.horizon_minutes
    );
    match e.event.return_features(e.label_kind) {
        Some(r) => r.iter().for_each(|v| {
            let _ = write!(out, ",{v}");
        }),
        None => out.push_str(",,,,,"),
    }
    for v in e.event.time_of_day.iter().chain(&e.event.day_of_week) {
        let _ = write!(out, ",{v}");
    }
    let _ = write!(out, ",{},{}", e.event.future_return, e.label);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(h: u32, m: u32) -> DateTime<Utc> {
        // 2007-12-12 is a Wednesday
        DateTime::parse_from_rfc3339(&format!("2007-12-12T{h:02}:{m:02}:00Z"))
            .unwrap()
            .with_timezone(&Utc)
    }

    #[test]
    fn previous_tick() {
        let s = PriceSeries::new("X", vec![(at(10, 0), 100.0), (at(10, 4), 101.0)]).unwrap();
        assert_eq!(s.price_at(at(10, 2)).unwrap(), 100.0);
        assert_eq!(s.price_at(at(10, 4)).unwrap(), 101.0);
        assert_eq!(s.price_at(at(9, 59)), Err(MarketError::NoPrice(at(9, 59))));
    }

    #[test]
    fn series_validation() {
        assert!(PriceSeries::new("X", vec![]).is_err());
        assert!(PriceSeries::new("X", vec![(at(10, 0), 1.0), (at(10, 0), 1.0)]).is_err());
        assert!(PriceSeries::new("X", vec![(at(10, 0), 0.0)]).is_err());
    }

    #[test]
    fn step_return() {
        let s = PriceSeries::new("X", vec![(at(9, 0), 100.0), (at(11, 46), 110.0)]).unwrap();
        let r = return_features(&s, at(12, 0), false).unwrap();
        assert!((r[0] - 0.10).abs() < 1e-15);
        assert_eq!(r[3..], [0.0, 0.0]);
        let short = PriceSeries::new("X", vec![(at(11, 30), 100.0)]).unwrap();
        assert!(return_features(&short, at(12, 0), false).is_err());
    }

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(abnormal_threshold(&v, 75.0).unwrap(), 75.0);
        assert_eq!(abnormal_threshold(&[3.0], 50.0).unwrap(), 3.0);
        assert_eq!(abnormal_threshold(&[], 50.0), Err(MarketError::EmptyPopulation));
        assert!(abnormal_threshold(&v, 100.0).is_err());
    }

    #[test]
    fn calendar_bins() {
        let f = |t: DateTime<Utc>| calendar_features(t.naive_utc()).unwrap();
        assert_eq!(f(at(9, 45)).0, [1.0, 0.0, 0.0]);
        assert_eq!(f(at(12, 0)).0, [0.0, 1.0, 0.0]);
        assert_eq!(f(at(15, 30)).0, [0.0, 0.0, 1.0]);
        assert_eq!(f(at(12, 0)).1, [0.0, 0.0, 1.0, 0.0, 0.0]);
        let saturday = DateTime::parse_from_rfc3339("2007-12-15T12:00:00Z")
            .unwrap()
            .naive_utc();
        assert!(calendar_features(saturday).is_err());
    }

    #[test]
    fn tie_rules_and_drops() {
        let s = PriceSeries::new("X", vec![(at(9, 30), 100.0), (at(12, 5), 101.0)]).unwrap();
        let cfg = LabelingConfig::default();
        let e = label_event(&s, "a", at(12, 0), &cfg, 0.01).unwrap();
        assert_eq!(e.label, -1, "|r| equal to the threshold is not abnormal");
        let dir = LabelingConfig {
            label_kind: LabelKind::Direction,
            ..cfg
        };
        assert_eq!(label_event(&s, "a", at(13, 0), &dir, 0.0).unwrap().label, -1);
        assert_eq!(
            label_event(&s, "a", at(15, 0), &cfg.with_horizon(70), 0.0).unwrap_err(),
            DropReason::HorizonPastClose
        );
        assert_eq!(
            label_event(&s, "a", at(10, 0), &cfg, 0.0).unwrap_err(),
            DropReason::BeforeMinTime
        );
        assert_eq!(
            label_event(&s, "a", at(16, 0), &cfg, 0.0).unwrap_err(),
            DropReason::OutsideTradingHours
        );
    }

    #[test]
    fn config_validation() {
        assert!(LabelingConfig::default().validate().is_ok());
        assert!(LabelingConfig::default().with_horizon(15).validate().is_err());
        assert!(LabelingConfig::default().with_horizon(260).validate().is_err());
    }

    #[test]
    fn prices_csv() {
        let text = "ticker,timestamp,price\nA,2007-12-12T10:00:00Z,10.5\nB,2007-12-12T10:00:00Z,3\nA,2007-12-12T10:05:00Z,11\n";
        let m = read_prices(text.as_bytes()).unwrap();
        assert_eq!(m["A"].points().len(), 2);
        assert!(read_prices("bad\n".as_bytes()).is_err());
        assert!(read_prices("ticker,timestamp,price\nA,x,1\n".as_bytes()).is_err());
    }
}
