//! Tab-separated interaction logs and id maps.
//!
//! Interaction files hold one `user\titem\ttimestamp` record per line.
//! Raw ids are arbitrary strings; they are mapped onto dense indices in
//! sorted order (numeric when every id parses as an integer, byte-wise
//! otherwise) so the mapping depends only on the set of ids present.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use hyperrec_core::ingest::{Interaction, InteractionLog};

use crate::error::{Error, Result};

/// Bijection between original ids and dense indices `0..len`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IdMap {
    originals: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    /// Sorted, deduplicated map over `ids`.
    pub fn from_ids<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v: Vec<String> = ids.into_iter().map(Into::into).collect();
        v.sort_unstable();
        v.dedup();
        let numeric: Option<Vec<i128>> = v.iter().map(|s| s.parse::<i128>().ok()).collect();
        if let Some(keys) = numeric {
            let mut pairs: Vec<(i128, String)> = keys.into_iter().zip(v).collect();
            pairs.sort();
            v = pairs.into_iter().map(|(_, s)| s).collect();
        }
        Self::build(v)
    }

    /// Map that keeps the given order; duplicates are rejected.
    pub fn from_ordered(originals: Vec<String>) -> std::result::Result<Self, String> {
        let map = Self::build(originals);
        if map.index.len() != map.originals.len() {
            return Err(format!(
                "{} ids but only {} distinct",
                map.originals.len(),
                map.index.len()
            ));
        }
        Ok(map)
    }

    /// Dense ids `0..n` mapped onto themselves.
    pub fn identity(n: usize) -> Self {
        Self::build((0..n).map(|i| i.to_string()).collect())
    }

    fn build(originals: Vec<String>) -> Self {
        let index = originals.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        IdMap { originals, index }
    }

    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }

    pub fn dense(&self, original: &str) -> Option<usize> {
        self.index.get(original).copied()
    }

    pub fn original(&self, dense: usize) -> &str {
        &self.originals[dense]
    }

    pub fn originals(&self) -> &[String] {
        &self.originals
    }

    /// Writes `original\tdense` lines in dense order.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        for (i, s) in self.originals.iter().enumerate() {
            writeln!(w, "{s}\t{i}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let r = open(path)?;
        let mut originals = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let parse = |msg: String| Error::Parse {
                path: path.into(),
                line: n + 1,
                msg,
            };
            let (orig, dense) = line
                .split_once('\t')
                .ok_or_else(|| parse("expected `original\\tdense`".into()))?;
            let dense: usize = dense
                .parse()
                .map_err(|_| parse(format!("dense id `{dense}` is not a non-negative integer")))?;
            if dense != originals.len() {
                return Err(parse(format!("dense id {dense} out of sequence, expected {}", originals.len())));
            }
            originals.push(orig.to_owned());
        }
        Self::from_ordered(originals).map_err(|msg| Error::format(path, msg))
    }
}

/// A log together with the maps that produced its dense ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedInteractions {
    pub log: InteractionLog,
    pub users: IdMap,
    pub items: IdMap,
}

/// Loads a TSV log, deriving both id maps from the ids it contains.
pub fn load_interactions(path: &Path) -> Result<LoadedInteractions> {
    load_interactions_with(path, None, None)
}

/// Loads a TSV log. A fixed map defines the id universe for its side
/// (ids absent from it are rejected); a missing map is derived from
/// the file.
pub fn load_interactions_with(path: &Path, users: Option<&IdMap>, items: Option<&IdMap>) -> Result<LoadedInteractions> {
    let raw = read_raw(path)?;
    let derive = |fixed: Option<&IdMap>, col: fn(&RawRecord) -> &str| match fixed {
        Some(m) => m.clone(),
        None => IdMap::from_ids(raw.iter().map(col)),
    };
    let user_map = derive(users, |r| &r.user);
    let item_map = derive(items, |r| &r.item);
    let mut records = Vec::with_capacity(raw.len());
    for r in &raw {
        let lookup = |map: &IdMap, id: &str, what: &str| {
            map.dense(id).ok_or_else(|| Error::Parse {
                path: path.into(),
                line: r.line,
                msg: format!("{what} id `{id}` is not in the id map"),
            })
        };
        records.push(Interaction {
            user: lookup(&user_map, &r.user, "user")?,
            item: lookup(&item_map, &r.item, "item")?,
            timestamp: r.timestamp,
        });
    }
    let log = InteractionLog::new(user_map.len(), item_map.len(), records)?;
    log::debug!(
        "{}: {} records, {} users, {} items",
        path.display(),
        log.len(),
        user_map.len(),
        item_map.len()
    );
    Ok(LoadedInteractions {
        log,
        users: user_map,
        items: item_map,
    })
}

struct RawRecord {
    line: usize,
    user: String,
    item: String,
    timestamp: i64,
}

fn read_raw(path: &Path) -> Result<Vec<RawRecord>> {
    let r = open(path)?;
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse {
            path: path.into(),
            line: n + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse("empty user or item id".into()));
        }
        let timestamp = fields[2]
            .trim()
            .parse::<i64>()
            .map_err(|_| parse(format!("timestamp `{}` is not an integer", fields[2])))?;
        out.push(RawRecord {
            line: n + 1,
            user: fields[0].to_owned(),
            item: fields[1].to_owned(),
            timestamp,
        });
    }
    Ok(out)
}

/// Writes `log` with original ids, one record per line in log order.
pub fn write_interactions(path: &Path, log: &InteractionLog, users: &IdMap, items: &IdMap) -> Result<()> {
    let mut w = create(path)?;
    for r in log.records() {
        writeln!(w, "{}\t{}\t{}", users.original(r.user), items.original(r.item), r.timestamp)
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> std::path::PathBuf {
        let p = dir.join("log.tsv");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn three_lines_two_users_two_items() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a\tx\t1\nb\ty\t2\na\ty\t3\n");
        let l = load_interactions(&p).unwrap();
        assert_eq!((l.log.n_users(), l.log.n_items(), l.log.len()), (2, 2, 3));
        assert_eq!(l.users.dense("b"), Some(1));
    }

    #[test]
    fn empty_file_is_empty_log() {
        let dir = tempfile::tempdir().unwrap();
        let l = load_interactions(&write(dir.path(), "")).unwrap();
        assert!(l.log.is_empty());
        assert_eq!((l.log.n_users(), l.log.n_items()), (0, 0));
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_interactions(&write(dir.path(), "a\tx\t1\nb y 2\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = load_interactions(&write(dir.path(), "a\tx\t1\na\tx\t1.5\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(err.to_string().contains("not an integer"));
    }

    #[test]
    fn duplicates_collapse_but_retimed_records_do_not() {
        let dir = tempfile::tempdir().unwrap();
        let l = load_interactions(&write(dir.path(), "a\tx\t1\na\tx\t1\na\tx\t2\n")).unwrap();
        assert_eq!(l.log.len(), 2);
    }

    #[test]
    fn numeric_ids_sort_numerically() {
        let m = IdMap::from_ids(["10", "9", "100", "9"]);
        assert_eq!(m.originals(), ["9", "10", "100"]);
        let m = IdMap::from_ids(["b10", "b9", "a"]);
        assert_eq!(m.originals(), ["a", "b10", "b9"]);
    }

    #[test]
    fn fixed_map_rejects_unknown_ids() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "0\t1\t5\n0\t7\t6\n");
        let items = IdMap::identity(3);
        let err = load_interactions_with(&p, None, Some(&items)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let p = write(dir.path(), "0\t1\t5\n");
        let l = load_interactions_with(&p, None, Some(&items)).unwrap();
        assert_eq!(l.log.n_items(), 3);
    }

    #[test]
    fn id_map_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ids.tsv");
        let m = IdMap::from_ids(["u3", "u1", "u2"]);
        m.write(&p).unwrap();
        assert_eq!(IdMap::read(&p).unwrap(), m);
        std::fs::write(&p, "a\t0\nb\t2\n").unwrap();
        assert!(matches!(IdMap::read(&p), Err(Error::Parse { line: 2, .. })));
    }
}
