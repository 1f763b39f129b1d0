//! Bag-of-words counts and tf-idf weighting against a stem dictionary.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::BufRead;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("dictionary line {line}: {reason}")]
    BadStem { line: usize, reason: String },
    #[error("dictionary is empty")]
    EmptyDictionary,
    #[error("documents line {line}: {reason}")]
    BadDocument { line: usize, reason: String },
    #[error("document length is 0 but counts are nonzero")]
    ZeroLength,
    #[error("count vector has length {got}, dictionary has {expected}")]
    Length { expected: usize, got: usize },
    #[error("cannot fit tf-idf on an empty corpus")]
    EmptyCorpus,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Ordered list of lowercase stems.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dictionary {
    stems: Vec<String>,
}

impl Dictionary {
    pub fn new<S: Into<String>>(stems: impl IntoIterator<Item = S>) -> Result<Self, TextError> {
        Self::build(stems.into_iter().enumerate().map(|(i, s)| (i + 1, s.into())))
    }

    /// Parses newline-delimited stems; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, TextError> {
        Self::build(
            text.lines()
                .enumerate()
                .map(|(i, raw)| (i + 1, raw.trim().to_string()))
                .filter(|(_, line)| !line.is_empty() && !line.starts_with('#')),
        )
    }

    fn build(stems: impl Iterator<Item = (usize, String)>) -> Result<Self, TextError> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for (line, stem) in stems {
            let reason = if stem.is_empty() {
                Some("empty stem")
            } else if stem.chars().any(char::is_whitespace) {
                Some("stem contains whitespace")
            } else if stem.chars().any(char::is_uppercase) {
                Some("stem is not lowercase")
            } else if !seen.insert(stem.clone()) {
                Some("duplicate stem")
            } else {
                None
            };
            if let Some(reason) = reason {
                return Err(TextError::BadStem {
                    line,
                    reason: format!("{reason}: {stem:?}"),
                });
            }
            out.push(stem);
        }
        if out.is_empty() {
            return Err(TextError::EmptyDictionary);
        }
        Ok(Dictionary { stems: out })
    }

    pub fn stems(&self) -> &[String] {
        &self.stems
    }

    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems.is_empty()
    }
}

/// A timestamped press release about one ticker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub timestamp: DateTime<Utc>,
    pub ticker: String,
    pub text: String,
}

/// Reads one JSON object per line; blank lines are skipped.
pub fn read_documents<R: BufRead>(reader: R) -> Result<Vec<Document>, TextError> {
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| TextError::BadDocument {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if doc.ticker.trim().is_empty() {
            return Err(TextError::BadDocument {
                line: i + 1,
                reason: "empty ticker".into(),
            });
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_documents(docs: &[Document]) -> String {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d).expect("document serializes"));
        out.push('\n');
    }
    out
}

/// Lowercased alphanumeric tokens of `text`; tokens that strip to nothing are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Per-stem counts plus the document's token count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagOfWords {
    pub counts: Vec<u32>,
    pub n_tokens: usize,
}

/// Counts tokens beginning with each stem. A token can match several stems.
pub fn bag_of_words(text: &str, dict: &Dictionary) -> BagOfWords {
    let tokens = tokenize(text);
    let mut counts = vec![0u32; dict.len()];
    for tok in &tokens {
        for (c, stem) in counts.iter_mut().zip(dict.stems()) {
            if tok.starts_with(stem.as_str()) {
                *c += 1;
            }
        }
    }
    BagOfWords {
        counts,
        n_tokens: tokens.len(),
    }
}

/// Document frequencies fitted on a training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfModel {
    pub doc_frequency: Vec<usize>,
    pub n_docs: usize,
}

impl TfidfModel {
    pub fn fit(corpus: &[Vec<u32>]) -> Result<Self, TextError> {
        let first = corpus.first().ok_or(TextError::EmptyCorpus)?;
        let mut df = vec![0usize; first.len()];
        for counts in corpus {
            if counts.len() != df.len() {
                return Err(TextError::Length {
                    expected: df.len(),
                    got: counts.len(),
                });
            }
            for (d, &c) in df.iter_mut().zip(counts) {
                if c > 0 {
                    *d += 1;
                }
            }
        }
        Ok(TfidfModel {
            doc_frequency: df,
            n_docs: corpus.len(),
        })
    }

    /// `ln(N / DF)`, or 0 for a stem absent from the corpus.
    pub fn idf(&self, i: usize) -> f64 {
        match self.doc_frequency[i] {
            0 => 0.0,
            df => (self.n_docs as f64 / df as f64).ln(),
        }
    }

    /// `(count_i / doc_length) * idf(i)` for each stem.
    pub fn transform(&self, counts: &[u32], doc_length: usize) -> Result<Vec<f64>, TextError> {
        if counts.len() != self.doc_frequency.len() {
            return Err(TextError::Length {
                expected: self.doc_frequency.len(),
                got: counts.len(),
            });
        }
        if doc_length == 0 {
            return if counts.iter().all(|&c| c == 0) {
                Ok(vec![0.0; counts.len()])
            } else {
                Err(TextError::ZeroLength)
            };
        }
        let len = doc_length as f64;
        Ok(counts
            .iter()
            .enumerate()
            .map(|(i, &c)| c as f64 / len * self.idf(i))
            .collect())
    }
}

/// CSV with an `id` column then one column per stem.
pub fn features_csv(dict: &Dictionary, rows: &[(String, Vec<f64>)]) -> String {
    let mut out = String::from("id");
    for s in dict.stems() {
        out.push(',');
        out.push_str(s);
    }
    out.push('\n');
    for (id, values) in rows {
        out.push_str(id);
        for v in values {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_strips_punctuation() {
        assert_eq!(
            tokenize("Corp. has -- ACQUIRED, Kingdom’s"),
            vec!["corp", "has", "acquired", "kingdoms"]
        );
    }

    #[test]
    fn prefix_match_is_case_folded() {
        let dict = Dictionary::new(["acqui"]).unwrap();
        let bow = bag_of_words("Acquired ACQUISITION acquirer", &dict);
        assert_eq!(bow.counts, vec![3]);
        assert_eq!(bow.n_tokens, 3);
    }

    #[test]
    fn parse_skips_comments_and_reports_lines() {
        let d = Dictionary::parse("# header\nup\n\ndown\n").unwrap();
        assert_eq!(d.stems(), ["up", "down"]);
        match Dictionary::parse("up\n# x\nup\n") {
            Err(TextError::BadStem { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Dictionary::parse("# only\n"), Err(TextError::EmptyDictionary)));
        assert!(Dictionary::parse("Up\n").is_err());
    }

    #[test]
    fn idf_conventions() {
        let m = TfidfModel::fit(&[vec![1, 0, 0], vec![2, 0, 0], vec![1, 0, 1], vec![1, 0, 0]]).unwrap();
        assert_eq!(m.idf(0), 0.0);
        assert_eq!(m.idf(1), 0.0);
        assert!((m.idf(2) - 4f64.ln()).abs() < 1e-15);
        let v = m.transform(&[5, 0, 2], 72).unwrap();
        assert_eq!(v[0], 0.0);
        assert!((v[2] - 2.0 / 72.0 * 4f64.ln()).abs() < 1e-15);
        assert!(matches!(m.transform(&[0, 0, 1], 0), Err(TextError::ZeroLength)));
        assert_eq!(m.transform(&[0, 0, 0], 0).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn document_round_trip() {
        let line = r#"{"id":"a","timestamp":"2007-12-12T14:30:00Z","ticker":"MSFT","text":"hi"}"#;
        let docs = read_documents(line.as_bytes()).unwrap();
        assert_eq!(docs[0].ticker, "MSFT");
        assert_eq!(write_documents(&docs).trim(), line);
        assert!(read_documents(r#"{"id":"a","timestamp":"bad","ticker":"X","text":""}"#.as_bytes()).is_err());
    }
}
