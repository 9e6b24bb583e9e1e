//! Newline-delimited JSON review parsing (Amazon review dump convention).

use super::{CorpusError, Interaction, Result};
use serde::Deserialize;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

#[derive(Deserialize)]
struct RawRecord {
    #[serde(rename = "reviewerID")]
    reviewer_id: Option<String>,
    asin: Option<String>,
    overall: Option<f64>,
    #[serde(rename = "reviewText")]
    review_text: Option<String>,
    #[serde(rename = "unixReviewTime")]
    unix_review_time: Option<i64>,
}

#[derive(Debug)]
pub struct ParseOutcome {
    pub interactions: Vec<Interaction>,
    pub malformed: usize,
}

/// Parse a file of newline-delimited JSON records with fields `reviewerID`,
/// `asin`, `overall`, `reviewText` and optional `unixReviewTime`.
///
/// Malformed records (bad JSON, missing fields, out-of-range rating) are
/// counted and skipped; more than 50% malformed is a corpus-format error.
pub fn parse_reviews(path: &Path) -> Result<ParseOutcome> {
    let file = File::open(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = BufReader::new(file);

    let mut interactions = Vec::new();
    let mut malformed = 0usize;
    let mut total = 0usize;
    for line in reader.lines() {
        let line = line.map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        total += 1;
        match parse_record(trimmed) {
            Some(interaction) => interactions.push(interaction),
            None => malformed += 1,
        }
    }
    if total > 0 && malformed * 2 > total {
        return Err(CorpusError::Format { malformed, total });
    }
    Ok(ParseOutcome {
        interactions,
        malformed,
    })
}

fn parse_record(line: &str) -> Option<Interaction> {
    let raw: RawRecord = serde_json::from_str(line).ok()?;
    let rating = raw.overall?;
    if !rating.is_finite() || !(1.0..=5.0).contains(&rating) {
        return None;
    }
    Some(Interaction {
        user_id: raw.reviewer_id?,
        item_id: raw.asin?,
        rating,
        review_text: raw.review_text?,
        timestamp: raw.unix_review_time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_fixture(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f
    }

    #[test]
    fn parses_well_formed_record() {
        let f = write_fixture(&[
            r#"{"reviewerID":"A","asin":"B","overall":5.0,"reviewText":"Great taste."}"#,
        ]);
        let out = parse_reviews(f.path()).unwrap();
        assert_eq!(out.malformed, 0);
        assert_eq!(out.interactions.len(), 1);
        let it = &out.interactions[0];
        assert_eq!(it.user_id, "A");
        assert_eq!(it.item_id, "B");
        assert_eq!(it.rating, 5.0);
        assert_eq!(it.review_text, "Great taste.");
        assert_eq!(it.timestamp, None);
    }

    #[test]
    fn missing_review_text_is_skipped_and_counted() {
        let f = write_fixture(&[
            r#"{"reviewerID":"A","asin":"B","overall":4.0,"reviewText":"ok."}"#,
            r#"{"reviewerID":"C","asin":"D","overall":4.0}"#,
            r#"{"reviewerID":"E","asin":"F","overall":3.0,"reviewText":"fine."}"#,
        ]);
        let out = parse_reviews(f.path()).unwrap();
        assert_eq!(out.malformed, 1);
        assert_eq!(out.interactions.len(), 2);
    }

    #[test]
    fn keeps_file_order() {
        let f = write_fixture(&[
            r#"{"reviewerID":"u1","asin":"i1","overall":1.0,"reviewText":"a."}"#,
            r#"{"reviewerID":"u2","asin":"i2","overall":2.0,"reviewText":"b."}"#,
            r#"{"reviewerID":"u3","asin":"i3","overall":3.0,"reviewText":"c."}"#,
        ]);
        let out = parse_reviews(f.path()).unwrap();
        let users: Vec<&str> = out.interactions.iter().map(|i| i.user_id.as_str()).collect();
        assert_eq!(users, ["u1", "u2", "u3"]);
    }

    #[test]
    fn mostly_malformed_is_a_format_error() {
        let f = write_fixture(&[
            r#"{"reviewerID":"A","asin":"B","overall":5.0,"reviewText":"x."}"#,
            "not json",
            "{}",
        ]);
        let err = parse_reviews(f.path()).unwrap_err();
        assert!(matches!(err, CorpusError::Format { malformed: 2, total: 3 }));
    }

    #[test]
    fn out_of_range_rating_is_malformed() {
        let f = write_fixture(&[
            r#"{"reviewerID":"A","asin":"B","overall":9.0,"reviewText":"x."}"#,
            r#"{"reviewerID":"A","asin":"B","overall":2.0,"reviewText":"x."}"#,
        ]);
        let out = parse_reviews(f.path()).unwrap();
        assert_eq!(out.malformed, 1);
        assert_eq!(out.interactions.len(), 1);
    }

    #[test]
    fn unreadable_file_is_io_error() {
        let err = parse_reviews(Path::new("/nonexistent/reviews.json")).unwrap_err();
        assert!(matches!(err, CorpusError::Io { .. }));
    }

    #[test]
    fn empty_review_text_is_tolerated() {
        let f = write_fixture(&[
            r#"{"reviewerID":"A","asin":"B","overall":3.0,"reviewText":""}"#,
        ]);
        let out = parse_reviews(f.path()).unwrap();
        assert_eq!(out.malformed, 0);
        assert_eq!(out.interactions[0].review_text, "");
    }
}
