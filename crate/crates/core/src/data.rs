//! Positive-pair TSV ingestion: `query_id TAB item_id` per line, `#`
//! comments, ordinals assigned in first-appearance order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::QueryTruth;
use crate::index::MAX_ID_BYTES;

/// External id to ordinal map with stable first-appearance ordinals.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    ids: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_ids(ids: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut v = Self::default();
        for id in ids {
            if !valid_id(&id) {
                return Err(Error::Ingestion(format!("invalid id {id:?}")));
            }
            if v.lookup.contains_key(&id) {
                return Err(Error::Ingestion(format!("duplicate id {id:?}")));
            }
            v.intern(&id);
        }
        Ok(v)
    }

    fn intern(&mut self, id: &str) -> u32 {
        if let Some(&o) = self.lookup.get(id) {
            return o;
        }
        let o = self.ids.len() as u32;
        self.ids.push(id.to_owned());
        self.lookup.insert(id.to_owned(), o);
        o
    }

    pub fn ordinal(&self, id: &str) -> Option<u32> {
        self.lookup.get(id).copied()
    }

    pub fn id(&self, ordinal: usize) -> &str {
        &self.ids[ordinal]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= MAX_ID_BYTES && !id.chars().any(char::is_control)
}

/// Splits a line into `(query, item)` or `None` when malformed.
fn parse_line(line: &str) -> Option<(&str, &str)> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let mut fields = line.split('\t');
    let (q, s) = (fields.next()?, fields.next()?);
    if fields.next().is_some() || !valid_id(q) || !valid_id(s) {
        return None;
    }
    Some((q, s))
}

fn is_skippable(line: &str) -> bool {
    line.starts_with('#') || line.trim().is_empty()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub queries: Vocab,
    pub items: Vocab,
    /// Duplicates are kept; they re-weight the pair.
    pub pairs: Vec<(u32, u32)>,
    pub malformed: usize,
}

pub fn ingest_str(text: &str) -> Result<Dataset> {
    let mut ds = Dataset {
        queries: Vocab::default(),
        items: Vocab::default(),
        pairs: Vec::new(),
        malformed: 0,
    };
    for line in text.lines().filter(|l| !is_skippable(l)) {
        match parse_line(line) {
            Some((q, s)) => {
                let pair = (ds.queries.intern(q), ds.items.intern(s));
                ds.pairs.push(pair);
            }
            None => ds.malformed += 1,
        }
    }
    if ds.pairs.is_empty() {
        return Err(Error::Ingestion(format!(
            "no valid pairs ({} malformed lines)",
            ds.malformed
        )));
    }
    Ok(ds)
}

pub fn ingest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    ingest_str(&text)
}

/// Evaluation pairs resolved against training vocabularies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalSet {
    /// One entry per query, ascending query ordinal.
    pub truth: Vec<QueryTruth>,
    pub malformed: usize,
    /// Pairs naming a query or item absent from training.
    pub unknown: usize,
}

pub fn ingest_eval_str(text: &str, queries: &Vocab, items: &Vocab) -> Result<EvalSet> {
    let mut grouped: BTreeMap<usize, HashSet<usize>> = BTreeMap::new();
    let (mut malformed, mut unknown) = (0, 0);
    for line in text.lines().filter(|l| !is_skippable(l)) {
        let Some((q, s)) = parse_line(line) else {
            malformed += 1;
            continue;
        };
        match (queries.ordinal(q), items.ordinal(s)) {
            (Some(q), Some(s)) => {
                grouped.entry(q as usize).or_default().insert(s as usize);
            }
            _ => unknown += 1,
        }
    }
    if grouped.is_empty() {
        return Err(Error::Ingestion(format!(
            "no usable evaluation pairs ({malformed} malformed, {unknown} unknown ids)"
        )));
    }
    Ok(EvalSet {
        truth: grouped
            .into_iter()
            .map(|(query, relevant)| QueryTruth { query, relevant })
            .collect(),
        malformed,
        unknown,
    })
}

pub fn ingest_eval(path: impl AsRef<Path>, queries: &Vocab, items: &Vocab) -> Result<EvalSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    ingest_eval_str(&text, queries, items)
}

/// Renders pairs as TSV lines.
pub fn pairs_to_tsv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    let mut out = String::new();
    for (q, s) in pairs {
        writeln!(out, "{q}\t{s}").expect("writing to a String");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_lines() {
        let ds = ingest_str("u1\ta\nu2\ta\n").unwrap();
        assert_eq!(ds.pairs, vec![(0, 0), (1, 0)]);
        assert_eq!(ds.queries.len(), 2);
        assert_eq!(ds.items.len(), 1);
        assert_eq!(ds.malformed, 0);
    }

    #[test]
    fn malformed_lines_are_counted() {
        let ds = ingest_str("# header\nu1\ta\nbroken line\nu2\tb\n\n").unwrap();
        assert_eq!(ds.malformed, 1);
        assert_eq!(ds.pairs.len(), 2);
        let ds = ingest_str("u1\ta\tx\n\tb\nu1\t\nu2\tb\r\n").unwrap();
        assert_eq!(ds.malformed, 3);
        assert_eq!(ds.items.id(0), "b");
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(ingest_str("# only\n"), Err(Error::Ingestion(_))));
        assert!(matches!(ingest_str("bad\n"), Err(Error::Ingestion(_))));
        assert!(matches!(ingest("/definitely/not/here"), Err(Error::Ingestion(_))));
    }

    #[test]
    fn ordinals_are_stable_and_duplicates_kept() {
        let text = "b\tx\na\ty\nb\tx\n";
        let a = ingest_str(text).unwrap();
        let b = ingest_str(text).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (0, 0)]);
        assert_eq!(a.queries.ids(), &["b".to_string(), "a".to_string()]);
    }

    #[test]
    fn long_ids_are_malformed() {
        let long = "x".repeat(MAX_ID_BYTES + 1);
        let ds = ingest_str(&format!("{long}\ta\nq\ta\n")).unwrap();
        assert_eq!(ds.malformed, 1);
    }

    #[test]
    fn eval_pairs_group_by_query() {
        let train = ingest_str("q1\ta\nq2\tb\nq1\tc\n").unwrap();
        let ev = ingest_eval_str("q2\ta\nq1\tb\nq2\tc\nq9\ta\nbad\n", &train.queries, &train.items).unwrap();
        assert_eq!(ev.unknown, 1);
        assert_eq!(ev.malformed, 1);
        assert_eq!(ev.truth.len(), 2);
        assert_eq!(ev.truth[0].query, 0);
        assert_eq!(ev.truth[1].relevant, [0usize, 2].into_iter().collect());
        assert!(ingest_eval_str("zz\tyy\n", &train.queries, &train.items).is_err());
    }

    #[test]
    fn tsv_round_trip() {
        let text = pairs_to_tsv([("q", "a"), ("r", "b")]);
        assert_eq!(text, "q\ta\nr\tb\n");
        assert_eq!(ingest_str(&text).unwrap().pairs.len(), 2);
    }

    #[test]
    fn vocab_from_ids_rejects_duplicates() {
        assert!(Vocab::from_ids(["a".to_string(), "a".to_string()]).is_err());
        assert!(Vocab::from_ids(["".to_string()]).is_err());
        let v = Vocab::from_ids(["a".to_string(), "b".to_string()]).unwrap();
        assert_eq!(v.ordinal("b"), Some(1));
    }
}
