//! Labeled feature datasets, their on-disk formats, and N-way k-shot
//! episode sampling.
//!
//! # Feature-store format
//!
//! All integers and floats little-endian:
//!
//! ```text
//! magic      "CFSL"                 4 bytes
//! version    u32 = 1
//! count      u64                    number of records
//! dim        u32
//! records    count × (class_id u32, dim × f64)
//! names_len  u64                    0 when there are no class names
//! names      names_len bytes UTF-8, "id\tname\n" lines in ascending id order
//! ```
//!
//! A file that ends right after the records (no `names_len`) is accepted as
//! having no names.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;

pub const FEATURE_MAGIC: &[u8; 4] = b"CFSL";
pub const FEATURE_VERSION: u32 = 1;
/// Bytes before the first record: magic, version, count, dim.
pub const FEATURE_HEADER_LEN: usize = 4 + 4 + 8 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub class_id: u32,
    pub vector: Vec<f64>,
}

/// Immutable labeled collection of fixed-dimension feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    dim: usize,
    records: Vec<Record>,
    class_names: Option<BTreeMap<u32, String>>,
    /// Record indices per class id, ascending.
    by_class: Vec<Vec<usize>>,
}

impl FeatureDataset {
    /// Validates and wraps records.
    ///
    /// Class ids must be dense in `[0, C)`, every vector must have `dim`
    /// finite entries.
    pub fn new(
        dim: usize,
        records: Vec<Record>,
        class_names: Option<BTreeMap<u32, String>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDataset("dim must be positive".into()));
        }
        let mut by_class: Vec<Vec<usize>> = Vec::new();
        for (i, r) in records.iter().enumerate() {
            if r.vector.len() != dim {
                return Err(Error::InvalidDataset(format!(
                    "record {i} has {} features, expected {dim}",
                    r.vector.len()
                )));
            }
            if let Some(f) = r.vector.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    record: i,
                    feature: f,
                });
            }
            let c = r.class_id as usize;
            if c >= by_class.len() {
                by_class.resize_with(c + 1, Vec::new);
            }
            by_class[c].push(i);
        }
        if let Some(missing) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::InvalidDataset(format!(
                "class ids not dense: class {missing} has no records"
            )));
        }
        Ok(Self {
            dim,
            records,
            class_names,
            by_class,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &Record {
        &self.records[i]
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn class_names(&self) -> Option<&BTreeMap<u32, String>> {
        self.class_names.as_ref()
    }

    /// Record indices of `class_id`, ascending.
    pub fn class_members(&self, class_id: usize) -> &[usize] {
        &self.by_class[class_id]
    }

    /// Stacks the given records' vectors into a matrix, one row per index.
    pub fn matrix<T: Scalar>(&self, indices: &[usize]) -> Matrix<T> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend(self.records[i].vector.iter().map(|&x| T::lit(x)));
        }
        Matrix::from_vec(indices.len(), self.dim, data)
    }

    /// Returns a copy with class ids replaced by `relabel(record index, id)`.
    /// The result is revalidated.
    pub fn relabeled(&self, relabel: impl Fn(usize, u32) -> u32) -> Result<Self> {
        let records = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| Record {
                class_id: relabel(i, r.class_id),
                vector: r.vector.clone(),
            })
            .collect();
        Self::new(self.dim, records, self.class_names.clone())
    }
}

/// Serializes `dataset` into the feature-store byte layout.
pub fn encode_features(dataset: &FeatureDataset) -> Vec<u8> {
    let mut buf =
        Vec::with_capacity(FEATURE_HEADER_LEN + dataset.len() * (4 + 8 * dataset.dim) + 8);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(dataset.dim as u32).to_le_bytes());
    for r in &dataset.records {
        buf.extend_from_slice(&r.class_id.to_le_bytes());
        for x in &r.vector {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let names = dataset
        .class_names
        .as_ref()
        .map(|m| {
            m.iter()
                .map(|(id, name)| format!("{id}\t{name}\n"))
                .collect::<String>()
        })
        .unwrap_or_default();
    buf.extend_from_slice(&(names.len() as u64).to_le_bytes());
    buf.extend_from_slice(names.as_bytes());
    buf
}

pub fn save_features(dataset: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(dataset)).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

/// Little-endian cursor over a byte slice that reports truncation against
/// the file it came from.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self {
            bytes,
            pos: 0,
            path,
        }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                context: format!(
                    "{context}: need {n} bytes at offset {}, {} left",
                    self.pos,
                    self.remaining()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: &'static str) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != expected.as_bytes() {
            return Err(Error::BadMagic {
                path: self.path.to_path_buf(),
                expected,
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self, context: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, context: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, context: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    pub(crate) fn malformed(&self, reason: impl Into<String>) -> Error {
        Error::Malformed {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.malformed(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureDataset> {
    let mut rd = Reader::new(bytes, path);
    rd.magic("CFSL")?;
    let version = rd.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::BadVersion {
            path: path.to_path_buf(),
            expected: FEATURE_VERSION,
            found: version,
        });
    }
    let count = rd.u64("record count")? as usize;
    let dim = rd.u32("dim")? as usize;
    let record_len = 4 + 8 * dim;
    if rd.remaining() / record_len.max(1) < count {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            context: format!(
                "header announces {count} records of {record_len} bytes, only {} bytes follow",
                rd.remaining()
            ),
        });
    }
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let class_id = rd.u32("class id")?;
        let mut vector = Vec::with_capacity(dim);
        for f in 0..dim {
            let x = rd.f64("feature")?;
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    record: i,
                    feature: f,
                });
            }
            vector.push(x);
        }
        records.push(Record { class_id, vector });
    }
    let mut class_names = None;
    if rd.remaining() > 0 {
        let len = rd.u64("class-name block length")? as usize;
        if len > 0 {
            let block = rd.take(len, "class-name block")?;
            let text = std::str::from_utf8(block)
                .map_err(|_| rd.malformed("class-name block is not UTF-8"))?;
            class_names = Some(parse_names(text).map_err(|r| rd.malformed(r))?);
        }
        rd.finish()?;
    }
    FeatureDataset::new(dim, records, class_names)
}

fn parse_names(text: &str) -> std::result::Result<BTreeMap<u32, String>, String> {
    let mut names = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (id, name) = line
            .split_once('\t')
            .ok_or_else(|| format!("class-name line without tab: {line:?}"))?;
        let id: u32 = id
            .parse()
            .map_err(|_| format!("bad class id in name block: {id:?}"))?;
        names.insert(id, name.to_string());
    }
    Ok(names)
}

/// Reads `label,f1,...,fd` lines. A first line whose feature fields are not
/// all numeric is taken as a header. Labels get dense ids in order of first
/// appearance.
pub fn import_csv(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_open_error(path, e))?;

    let mut ids: HashMap<String, u32> = HashMap::new();
    let mut names = BTreeMap::new();
    let mut records = Vec::new();
    let mut dim: Option<usize> = None;
    let mut first = true;

    for row in reader.records() {
        let row = row.map_err(|e| csv_open_error(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() == 1 && row[0].is_empty() {
            continue;
        }
        if row.len() < 2 {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                line,
                reason: "expected a label followed by at least one feature".into(),
            });
        }
        let parsed: std::result::Result<Vec<f64>, usize> = row
            .iter()
            .skip(1)
            .enumerate()
            .map(|(f, s)| s.parse::<f64>().map_err(|_| f))
            .collect();
        let vector = match parsed {
            Ok(v) => v,
            Err(_) if first => {
                first = false;
                continue;
            }
            Err(f) => {
                return Err(Error::Csv {
                    path: path.to_path_buf(),
                    line,
                    reason: format!("non-numeric feature field {}: {:?}", f + 1, &row[f + 1]),
                })
            }
        };
        first = false;
        match dim {
            None => dim = Some(vector.len()),
            Some(d) if d != vector.len() => {
                return Err(Error::Csv {
                    path: path.to_path_buf(),
                    line,
                    reason: format!("ragged row: {} features, expected {d}", vector.len()),
                })
            }
            Some(_) => {}
        }
        let label = row[0].to_string();
        let next = ids.len() as u32;
        let class_id = *ids.entry(label.clone()).or_insert_with(|| {
            names.insert(next, label);
            next
        });
        records.push(Record { class_id, vector });
    }

    let dim = dim.ok_or_else(|| Error::Csv {
        path: path.to_path_buf(),
        line: 0,
        reason: "no data rows".into(),
    })?;
    FeatureDataset::new(dim, records, Some(names))
}

fn csv_open_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Csv {
            path: path.to_path_buf(),
            line,
            reason: format!("{other:?}"),
        },
    }
}

/// N-way k-shot q-query shape of a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, q_query: usize) -> Result<Self> {
        let spec = Self {
            n_way,
            k_shot,
            q_query,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::param("n_way", "must be at least 2"));
        }
        if self.k_shot < 1 {
            return Err(Error::param("k_shot", "must be at least 1"));
        }
        if self.q_query < 1 {
            return Err(Error::param("q_query", "must be at least 1"));
        }
        Ok(())
    }

    pub fn support_len(&self) -> usize {
        self.n_way * self.k_shot
    }

    pub fn query_len(&self) -> usize {
        self.n_way * self.q_query
    }

    /// Total vertex count `N·(k+q)`.
    pub fn total(&self) -> usize {
        self.n_way * (self.k_shot + self.q_query)
    }
}

/// One sampled task. Support entries come first, grouped by episode label;
/// queries follow in the same grouping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub spec: EpisodeSpec,
    /// `(dataset index, episode label)` pairs.
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
    /// Dataset class id of each episode label.
    pub class_map: Vec<u32>,
}

impl Episode {
    /// Dataset indices in vertex order: support rows then query rows.
    pub fn vertex_indices(&self) -> Vec<usize> {
        self.support
            .iter()
            .chain(&self.query)
            .map(|&(i, _)| i)
            .collect()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|&(_, l)| l).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|&(_, l)| l).collect()
    }

    /// Vertex matrix `V` with rows `[0, N·k)` support and `[N·k, N·(k+q))`
    /// query.
    pub fn vertex_matrix<T: Scalar>(&self, dataset: &FeatureDataset) -> Matrix<T> {
        dataset.matrix(&self.vertex_indices())
    }
}

/// Samples an episode: `N` classes uniformly without replacement, then `k+q`
/// records per class uniformly without replacement; the first `k` drawn are
/// support.
pub fn sample_episode(dataset: &FeatureDataset, spec: EpisodeSpec, seed: u64) -> Result<Episode> {
    spec.validate()?;
    let classes = dataset.num_classes();
    if classes < spec.n_way {
        return Err(Error::Infeasible(format!(
            "{}-way episode needs {} classes, dataset has {classes}",
            spec.n_way, spec.n_way
        )));
    }
    let per_class = spec.k_shot + spec.q_query;
    let mut rng = rng_from_seed(seed);
    let chosen = index::sample(&mut rng, classes, spec.n_way).into_vec();

    let mut support = Vec::with_capacity(spec.support_len());
    let mut query = Vec::with_capacity(spec.query_len());
    let mut class_map = Vec::with_capacity(spec.n_way);
    for (label, &class) in chosen.iter().enumerate() {
        let members = dataset.class_members(class);
        if members.len() < per_class {
            return Err(Error::Infeasible(format!(
                "class {class} has {} records, episode needs k+q = {per_class}",
                members.len()
            )));
        }
        let picks = index::sample(&mut rng, members.len(), per_class).into_vec();
        support.extend(picks[..spec.k_shot].iter().map(|&p| (members[p], label)));
        query.extend(picks[spec.k_shot..].iter().map(|&p| (members[p], label)));
        class_map.push(class as u32);
    }
    Ok(Episode {
        spec,
        support,
        query,
        class_map,
    })
}

/// Checks that every class of the dataset could serve in a `spec` episode.
pub fn check_feasible(dataset: &FeatureDataset, spec: &EpisodeSpec) -> Result<()> {
    spec.validate()?;
    if dataset.num_classes() < spec.n_way {
        return Err(Error::Infeasible(format!(
            "{}-way episode needs {} classes, dataset has {}",
            spec.n_way,
            spec.n_way,
            dataset.num_classes()
        )));
    }
    let need = spec.k_shot + spec.q_query;
    if let Some(c) = (0..dataset.num_classes()).find(|&c| dataset.class_members(c).len() < need) {
        return Err(Error::Infeasible(format!(
            "class {c} has {} records, episode needs k+q = {need}",
            dataset.class_members(c).len()
        )));
    }
    Ok(())
}
