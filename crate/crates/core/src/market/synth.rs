//! Seeded synthetic news and intraday prices with planted keyword-jump links.
//!
//! Each document carries a planted signal keyword with probability
//! `keyword_rate`. A keyword document is followed by a price jump with
//! probability `signal + (1 - signal) * keyword_rate`, other documents with
//! probability `(1 - signal) * keyword_rate`. So `signal = 1` ties jumps to
//! keywords exactly and `signal = 0` makes them independent with the same
//! overall jump rate. Diffusive volatility follows a U-shaped intraday profile.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use chrono::{DateTime, Datelike, Duration, Months, NaiveDate, NaiveTime, Utc, Weekday};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::format_timestamp;
use crate::config::{ConfigError, KeyValues};
use crate::text::{Dictionary, Document};

const STEP_MINUTES: i64 = 5;
const PRE_EVENT_MINUTES: i64 = 40;
const POST_EVENT_MINUTES: i64 = 250;
const START_PRICE: f64 = 50.0;

const FILLER: [&str; 24] = [
    "the", "company", "said", "today", "its", "of", "and", "in", "for", "with", "a", "year", "which", "will", "this",
    "from", "per", "inc", "corp", "ltd", "by", "on", "at", "as",
];
const SUFFIXES: [&str; 6] = ["", "s", "ed", "ing", "es", "ion"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_events: usize,
    pub n_tickers: usize,
    pub start: NaiveDate,
    pub months: u32,
    pub signal: f64,
    pub keyword_rate: f64,
    /// Standard deviation of a 5-minute log return at midday.
    pub base_vol: f64,
    /// Volatility at the open and close is `1 + u_shape` times the midday level.
    pub u_shape: f64,
    pub jump_size: f64,
    pub n_signal_stems: usize,
    pub words_per_doc: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_events: 2400,
            n_tickers: 4,
            start: NaiveDate::from_ymd_opt(2000, 1, 1).unwrap(),
            months: 24,
            signal: 1.0,
            keyword_rate: 0.24,
            base_vol: 0.001,
            u_shape: 1.0,
            jump_size: 0.03,
            n_signal_stems: 5,
            words_per_doc: 60,
        }
    }
}

pub const SPEC_KEYS: [&str; 11] = [
    "n_events",
    "n_tickers",
    "start",
    "months",
    "signal",
    "keyword_rate",
    "base_vol",
    "u_shape",
    "jump_size",
    "n_signal_stems",
    "words_per_doc",
];

impl SynthSpec {
    /// Reads the keys in [`SPEC_KEYS`]; other keys are ignored.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self, ConfigError> {
        let d = SynthSpec::default();
        let spec = SynthSpec {
            n_events: kv.get_or("n_events", d.n_events)?,
            n_tickers: kv.get_or("n_tickers", d.n_tickers)?,
            start: kv.get_or("start", d.start)?,
            months: kv.get_or("months", d.months)?,
            signal: kv.get_or("signal", d.signal)?,
            keyword_rate: kv.get_or("keyword_rate", d.keyword_rate)?,
            base_vol: kv.get_or("base_vol", d.base_vol)?,
            u_shape: kv.get_or("u_shape", d.u_shape)?,
            jump_size: kv.get_or("jump_size", d.jump_size)?,
            n_signal_stems: kv.get_or("n_signal_stems", d.n_signal_stems)?,
            words_per_doc: kv.get_or("words_per_doc", d.words_per_doc)?,
        };
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), String> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("{name} must lie in [0, 1], got {v}"))
            }
        };
        unit("signal", self.signal)?;
        unit("keyword_rate", self.keyword_rate)?;
        if self.n_events == 0 || self.n_tickers == 0 || self.months == 0 {
            return Err("n_events, n_tickers and months must be positive".into());
        }
        if self.n_signal_stems == 0 || self.words_per_doc < 4 {
            return Err("need at least one signal stem and four words per document".into());
        }
        if !(self.base_vol >= 0.0 && self.u_shape >= 0.0 && self.jump_size >= 0.0 && self.jump_size < 1.0) {
            return Err("volatility and jump parameters must be nonnegative, jump_size < 1".into());
        }
        Ok(())
    }
}

/// Ground truth of one generated event.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRow {
    pub id: String,
    pub ticker: String,
    pub time: DateTime<Utc>,
    pub keyword: bool,
    pub jump: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub documents: Vec<Document>,
    /// `ticker,timestamp,price` CSV.
    pub prices_csv: String,
    pub truth: Vec<TruthRow>,
    pub signal_stems: Vec<String>,
}

impl SynthData {
    pub fn truth_csv(&self) -> String {
        let mut out = String::from("id,ticker,timestamp,keyword,jump\n");
        for t in &self.truth {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                t.id,
                t.ticker,
                format_timestamp(t.time),
                u8::from(t.keyword),
                u8::from(t.jump)
            );
        }
        out
    }
}

/// Weekdays in `[start, start + months)`.
fn trading_days(start: NaiveDate, months: u32) -> Vec<NaiveDate> {
    let end = start + Months::new(months);
    start
        .iter_days()
        .take_while(|d| *d < end)
        .filter(|d| !matches!(d.weekday(), Weekday::Sat | Weekday::Sun))
        .collect()
}

fn open() -> NaiveTime {
    NaiveTime::from_hms_opt(9, 30, 0).unwrap()
}

fn close() -> NaiveTime {
    NaiveTime::from_hms_opt(16, 0, 0).unwrap()
}

/// Volatility multiplier at fraction `tau` of the trading day.
fn u_profile(tau: f64, u_shape: f64) -> f64 {
    1.0 + u_shape * (2.0 * tau - 1.0).powi(2)
}

/// Signal stems spread evenly over the dictionary.
fn pick_signal_stems(dict: &Dictionary, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let stems = dict.stems();
    let n = n.min(stems.len());
    let stride = stems.len() / n;
    let offset = rng.random_range(0..stride);
    (0..n).map(|i| stems[i * stride + offset].clone()).collect()
}

pub fn synth_generate(seed: u64, spec: &SynthSpec, dict: &Dictionary) -> Result<SynthData, String> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let days = trading_days(spec.start, spec.months);
    if days.is_empty() {
        return Err("no trading days in the requested span".into());
    }
    let signal_stems = pick_signal_stems(dict, spec.n_signal_stems, &mut rng);
    let is_signal = |w: &str| signal_stems.iter().any(|s| w.starts_with(s.as_str()));
    let background: Vec<String> = dict
        .stems()
        .iter()
        .flat_map(|s| SUFFIXES.iter().map(move |x| format!("{s}{x}")))
        .filter(|w| !is_signal(w))
        .collect();
    let filler: Vec<&str> = FILLER.iter().copied().filter(|w| !is_signal(w)).collect();
    let signal_words: Vec<String> = signal_stems
        .iter()
        .flat_map(|s| SUFFIXES.iter().map(move |x| format!("{s}{x}")))
        .collect();

    // event slots on a 5-minute grid from the open to 5 minutes before the close
    let n_slots = ((close() - open()).num_minutes() / STEP_MINUTES) as usize;
    let tickers: Vec<String> = (0..spec.n_tickers).map(|i| format!("SYN{i}")).collect();
    let mut taken = HashSet::new();
    let mut events = Vec::with_capacity(spec.n_events);
    while events.len() < spec.n_events {
        let day = days[rng.random_range(0..days.len())];
        let slot = rng.random_range(0..n_slots);
        let ticker = rng.random_range(0..spec.n_tickers);
        if !taken.insert((ticker, day, slot)) {
            continue;
        }
        let time = day.and_time(open()).and_utc() + Duration::minutes(slot as i64 * STEP_MINUTES);
        events.push((time, ticker));
    }
    events.sort();

    let mut documents = Vec::with_capacity(events.len());
    let mut truth = Vec::with_capacity(events.len());
    let mut jumps: BTreeMap<(usize, DateTime<Utc>), f64> = BTreeMap::new();
    for (i, &(time, ticker)) in events.iter().enumerate() {
        let keyword = rng.random::<f64>() < spec.keyword_rate;
        let p_jump = if keyword {
            spec.signal + (1.0 - spec.signal) * spec.keyword_rate
        } else {
            (1.0 - spec.signal) * spec.keyword_rate
        };
        let jump = rng.random::<f64>() < p_jump;
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        if jump {
            jumps.insert((ticker, time), sign);
        }

        let n_words = rng.random_range(spec.words_per_doc / 2..=spec.words_per_doc * 3 / 2);
        let mut words: Vec<&str> = (0..n_words)
            .map(|_| {
                if rng.random::<f64>() < 0.3 {
                    background.choose(&mut rng).unwrap().as_str()
                } else {
                    filler.choose(&mut rng).copied().unwrap()
                }
            })
            .collect();
        if keyword {
            for _ in 0..2 {
                let pos = rng.random_range(0..=words.len());
                words.insert(pos, signal_words.choose(&mut rng).unwrap().as_str());
            }
        }
        let id = format!("n{:06}", i + 1);
        documents.push(Document {
            id: id.clone(),
            timestamp: time,
            ticker: tickers[ticker].clone(),
            text: words.join(" "),
        });
        truth.push(TruthRow {
            id,
            ticker: tickers[ticker].clone(),
            time,
            keyword,
            jump,
        });
    }

    // price grid around every event of a ticker, clipped to trading hours
    let mut grids: Vec<BTreeSet<DateTime<Utc>>> = vec![BTreeSet::new(); spec.n_tickers];
    for &(time, ticker) in &events {
        let day_open = time.date_naive().and_time(open()).and_utc();
        let day_close = time.date_naive().and_time(close()).and_utc();
        let mut t = (time - Duration::minutes(PRE_EVENT_MINUTES)).max(day_open);
        let end = (time + Duration::minutes(POST_EVENT_MINUTES)).min(day_close);
        while t <= end {
            grids[ticker].insert(t);
            t += Duration::minutes(STEP_MINUTES);
        }
    }
    let day_minutes = (close() - open()).num_minutes() as f64;
    let mut prices_csv = String::from("ticker,timestamp,price\n");
    for (ticker, grid) in grids.iter().enumerate() {
        let mut log_price = START_PRICE.ln();
        let mut prev: Option<DateTime<Utc>> = None;
        for &t in grid {
            if let Some(p) = prev {
                let gap = (t - p).num_minutes();
                let vol = if gap == STEP_MINUTES && p.date_naive() == t.date_naive() {
                    let tau = (p.time() - open()).num_minutes() as f64 / day_minutes;
                    spec.base_vol * u_profile(tau, spec.u_shape)
                } else {
                    spec.base_vol * ((gap.min(day_minutes as i64) / STEP_MINUTES) as f64).sqrt()
                };
                log_price += vol * rng.sample::<f64, _>(StandardNormal);
                if let Some(sign) = jumps.get(&(ticker, p)) {
                    log_price += (1.0 + sign * spec.jump_size).ln();
                }
            }
            let _ = writeln!(
                prices_csv,
                "{},{},{:.4}",
                tickers[ticker],
                format_timestamp(t),
                log_price.exp()
            );
            prev = Some(t);
        }
    }

    Ok(SynthData {
        documents,
        prices_csv,
        truth,
        signal_stems,
    })
}

/// The dictionary shipped with the crate.
pub fn starter_dictionary() -> Dictionary {
    Dictionary::parse(STARTER_DICTIONARY).expect("starter dictionary is valid")
}

pub const STARTER_DICTIONARY: &str = include_str!("../../data/dictionary.txt");

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::read_prices;
    use crate::text::bag_of_words;

    fn small() -> SynthSpec {
        SynthSpec {
            n_events: 200,
            months: 2,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        let dict = starter_dictionary();
        let a = synth_generate(7, &small(), &dict).unwrap();
        let b = synth_generate(7, &small(), &dict).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(8, &small(), &dict).unwrap();
        assert_ne!(a.prices_csv, c.prices_csv);
    }

    #[test]
    fn full_signal_links_keywords_and_jumps() {
        let dict = starter_dictionary();
        let data = synth_generate(1, &small(), &dict).unwrap();
        assert!(data.truth.iter().all(|t| t.keyword == t.jump));
        assert!(data.truth.iter().any(|t| t.keyword));
        let signal = Dictionary::new(data.signal_stems.clone()).unwrap();
        for (doc, t) in data.documents.iter().zip(&data.truth) {
            let hits: u32 = bag_of_words(&doc.text, &signal).counts.iter().sum();
            assert_eq!(hits > 0, t.keyword, "{}", doc.id);
        }
        let prices = read_prices(data.prices_csv.as_bytes()).unwrap();
        assert_eq!(prices.len(), 4);
    }

    #[test]
    fn rejects_bad_spec() {
        let dict = starter_dictionary();
        let spec = SynthSpec { signal: 1.5, ..small() };
        assert!(synth_generate(1, &spec, &dict).is_err());
    }
}
