//! Little-endian binary formats.
//!
//! | magic  | layout after the magic                                            |
//! |--------|-------------------------------------------------------------------|
//! | `FEAT` | u64 N, u64 d, N·d f32 row-major modal features                    |
//! | `FE64` | u64 N, u64 d, N·d f64 row-major embeddings                        |
//! | `CSR1` | u64 rows, cols, nnz, row_ptr (u64), col_idx (u64), vals (f64)     |
//! | `HRCK` | u32 version, then the checkpoint body described on [`Checkpoint`] |

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use hyperrec_core::ingest::ModalFeatureSet;
use hyperrec_core::numerics::{Adam, AdamConfig, ParamSet};
use hyperrec_core::{DenseMat, SparseCsr};

use crate::error::{Error, Result};
use crate::tsv::create;

const FEAT: &[u8; 4] = b"FEAT";
const FE64: &[u8; 4] = b"FE64";
const CSR1: &[u8; 4] = b"CSR1";
const HRCK: &[u8; 4] = b"HRCK";

pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, buf: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != magic {
            return Err(Error::format(
                path,
                format!("missing `{}` magic", String::from_utf8_lossy(magic)),
            ));
        }
        Ok(Reader { path, buf, pos: 4 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated at byte {} (need {n} more)", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::format(self.path, format!("count {v} overflows usize")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    /// Element count `a·b`, checked against the bytes left.
    fn count(&self, a: usize, b: usize, width: usize) -> Result<usize> {
        let n = a
            .checked_mul(b)
            .filter(|n| n.checked_mul(width).is_some_and(|bytes| bytes <= self.buf.len() - self.pos))
            .ok_or_else(|| Error::format(self.path, format!("{a}x{b} payload exceeds file size")))?;
        Ok(n)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn usizes(&mut self, n: usize) -> Result<Vec<usize>> {
        (0..n).map(|_| self.usize()).collect()
    }

    fn string(&mut self) -> Result<String> {
        let n = self.usize()?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format(self.path, "string is not UTF-8"))
    }

    fn matrix(&mut self) -> Result<DenseMat> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = self.count(rows, cols, 8)?;
        Ok(DenseMat::new(rows, cols, self.f64s(n)?)?)
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.path,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn with_magic(magic: &[u8; 4]) -> Self {
        Writer { buf: magic.to_vec() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn string(&mut self, s: &str) {
        self.usize(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn matrix(&mut self, m: &DenseMat) {
        self.usize(m.rows());
        self.usize(m.cols());
        for &v in m.data() {
            self.f64(v);
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        w.write_all(&self.buf).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads a `FEAT` file; the row count must equal `expected_items` and
/// every value must be finite.
pub fn read_features(path: &Path, modality: &str, expected_items: usize) -> Result<ModalFeatureSet> {
    let buf = read_file(path)?;
    let mut r = Reader::new(path, &buf, FEAT)?;
    let n = r.usize()?;
    let d = r.usize()?;
    if n != expected_items {
        return Err(hyperrec_core::Error::ItemCountMismatch {
            expected: expected_items,
            found: n,
        }
        .into());
    }
    let len = r.count(n, d, 4)?;
    let data: Vec<f64> = r
        .take(len * 4)?
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    r.finish()?;
    Ok(ModalFeatureSet::new(modality, DenseMat::new(n, d, data)?)?)
}

/// Writes `features` as `FEAT`, narrowing every value to f32.
pub fn write_features(path: &Path, features: &DenseMat) -> Result<()> {
    let mut w = Writer::with_magic(FEAT);
    w.usize(features.rows());
    w.usize(features.cols());
    for &v in features.data() {
        w.buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.save(path)
}

pub fn read_embeddings(path: &Path) -> Result<DenseMat> {
    let buf = read_file(path)?;
    let mut r = Reader::new(path, &buf, FE64)?;
    let n = r.usize()?;
    let d = r.usize()?;
    let len = r.count(n, d, 8)?;
    let m = DenseMat::new(n, d, r.f64s(len)?)?;
    r.finish()?;
    Ok(m)
}

pub fn write_embeddings(path: &Path, m: &DenseMat) -> Result<()> {
    let mut w = Writer::with_magic(FE64);
    w.usize(m.rows());
    w.usize(m.cols());
    for &v in m.data() {
        w.f64(v);
    }
    w.save(path)
}

pub fn read_csr(path: &Path) -> Result<SparseCsr> {
    let buf = read_file(path)?;
    let mut r = Reader::new(path, &buf, CSR1)?;
    let rows = r.usize()?;
    let cols = r.usize()?;
    let nnz = r.usize()?;
    let need = rows.checked_add(1).and_then(|p| p.checked_add(nnz.checked_mul(2)?));
    if need.is_none_or(|n| n.saturating_mul(8) > buf.len() - r.pos) {
        return Err(Error::format(path, format!("{rows} rows and {nnz} entries exceed file size")));
    }
    let row_ptr = r.usizes(rows + 1)?;
    let col_idx = r.usizes(nnz)?;
    let vals = r.f64s(nnz)?;
    r.finish()?;
    SparseCsr::new(rows, cols, row_ptr, col_idx, vals).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_csr(path: &Path, m: &SparseCsr) -> Result<()> {
    let mut w = Writer::with_magic(CSR1);
    w.usize(m.rows());
    w.usize(m.cols());
    w.usize(m.nnz());
    for &p in m.row_ptr() {
        w.usize(p);
    }
    for &c in m.col_idx() {
        w.usize(c);
    }
    for &v in m.vals() {
        w.f64(v);
    }
    w.save(path)
}

/// Trainable tables, optional optimizer state and free-form metadata.
///
/// Body after the version: u64 epoch; u64 metadata count, then
/// `(key, value)` strings; u64 table count, then `(name, rows, cols,
/// values)`; a u8 optimizer flag, and when set the Adam hyperparameters
/// (lr, beta1, beta2, eps as f64), the u64 step count and one `(m, v)`
/// matrix pair per table in table order. Strings are a u64 byte length
/// followed by UTF-8.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub meta: BTreeMap<String, String>,
    pub tables: Vec<(String, DenseMat)>,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn capture(params: &ParamSet, adam: Option<&Adam>, epoch: u64) -> Self {
        Checkpoint {
            epoch,
            meta: BTreeMap::new(),
            tables: params
                .ids()
                .map(|id| (params.name(id).to_owned(), params.value(id).clone()))
                .collect(),
            adam: adam.cloned(),
        }
    }

    /// Overwrites every table of `params` by name. The checkpoint must
    /// hold exactly the tables of `params` with matching shapes.
    pub fn restore(&self, params: &mut ParamSet) -> std::result::Result<(), String> {
        if self.tables.len() != params.len() {
            return Err(format!(
                "checkpoint has {} tables, model expects {}",
                self.tables.len(),
                params.len()
            ));
        }
        for (name, value) in &self.tables {
            let id = params.id(name).ok_or_else(|| format!("model has no table `{name}`"))?;
            params
                .set_value(id, value.clone())
                .map_err(|e| format!("table `{name}`: {e}"))?;
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = Writer::with_magic(HRCK);
        w.u32(CHECKPOINT_VERSION);
        w.u64(self.epoch);
        w.usize(self.meta.len());
        for (k, v) in &self.meta {
            w.string(k);
            w.string(v);
        }
        w.usize(self.tables.len());
        for (name, m) in &self.tables {
            w.string(name);
            w.matrix(m);
        }
        match &self.adam {
            None => w.u8(0),
            Some(adam) => {
                w.u8(1);
                let c = adam.config;
                for v in [c.lr, c.beta1, c.beta2, c.eps] {
                    w.f64(v);
                }
                w.u64(adam.steps_taken());
                for (m, v) in adam.first_moments().iter().zip(adam.second_moments()) {
                    w.matrix(m);
                    w.matrix(v);
                }
            }
        }
        w.save(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = read_file(path)?;
        let mut r = Reader::new(path, &buf, HRCK)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!("checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"),
            ));
        }
        let epoch = r.u64()?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.usize()? {
            let k = r.string()?;
            meta.insert(k, r.string()?);
        }
        let n = r.usize()?;
        let mut tables = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            tables.push((name, r.matrix()?));
        }
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let config = AdamConfig {
                    lr: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                };
                let step = r.u64()?;
                let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
                for (name, t) in &tables {
                    let (a, b) = (r.matrix()?, r.matrix()?);
                    if a.shape() != t.shape() || b.shape() != t.shape() {
                        return Err(Error::format(path, format!("moment shape mismatch for `{name}`")));
                    }
                    m.push(a);
                    v.push(b);
                }
                Some(Adam::from_state(config, step, m, v))
            }
            f => return Err(Error::format(path, format!("bad optimizer flag {f}"))),
        };
        r.finish()?;
        Ok(Checkpoint {
            epoch,
            meta,
            tables,
            adam,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feat_header_and_body() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.feat");
        let mut bytes = b"FEAT".to_vec();
        bytes.extend_from_slice(&3u64.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&p, &bytes).unwrap();
        let f = read_features(&p, "text", 3).unwrap();
        assert_eq!(f.features().shape(), (3, 2));
        assert_eq!(f.features().get(2, 1), 6.5);
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_features(&p, "text", 3), Err(Error::Format { .. })));
    }

    #[test]
    fn feat_count_mismatch_names_both() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.feat");
        write_features(&p, &DenseMat::zeros(5, 2)).unwrap();
        let msg = read_features(&p, "visual", 6).unwrap_err().to_string();
        assert!(msg.contains('5') && msg.contains('6'), "{msg}");
    }

    #[test]
    fn feat_nan_row_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.feat");
        let m = DenseMat::from_fn(4, 2, |r, _| if r == 2 { f64::NAN } else { 1.0 });
        write_features(&p, &m).unwrap();
        assert!(matches!(
            read_features(&p, "text", 4),
            Err(Error::Core(hyperrec_core::Error::NonFinite { row: 2, .. }))
        ));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        write_embeddings(&p, &DenseMat::zeros(1, 1)).unwrap();
        assert!(read_csr(&p).is_err());
        assert!(read_features(&p, "t", 1).is_err());
    }

    #[test]
    fn invalid_csr_structure_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csr");
        let mut w = Writer::with_magic(CSR1);
        for v in [1u64, 1, 1, 0, 1, 3] {
            w.u64(v);
        }
        w.f64(1.0);
        w.save(&p).unwrap();
        let msg = read_csr(&p).unwrap_err().to_string();
        assert!(msg.contains("column"), "{msg}");
    }

    #[test]
    fn restore_requires_matching_tables() {
        let mut a = ParamSet::new();
        a.add("w", DenseMat::filled(2, 2, 1.5));
        let ck = Checkpoint::capture(&a, None, 3);
        let mut b = ParamSet::new();
        b.add("w", DenseMat::zeros(2, 2));
        ck.restore(&mut b).unwrap();
        assert_eq!(b, a);
        let mut c = ParamSet::new();
        c.add("v", DenseMat::zeros(2, 2));
        assert!(ck.restore(&mut c).is_err());
        let mut d = ParamSet::new();
        d.add("w", DenseMat::zeros(2, 3));
        assert!(ck.restore(&mut d).is_err());
    }
}
