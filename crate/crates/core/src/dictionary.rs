//! The region dictionary: observed critical regions, frequency-ordered
//! lookup, and a versioned binary persistence format.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! magic            8 bytes  "ODLDICT\0"
//! format_version   u32
//! mpp_fingerprint  u64
//! entry_count      u64
//! theta_dim        u64
//! total_lookups, total_hits, total_misses, degenerate_fallbacks   4 x u64
//! entry_count x entry:
//!   kind u8 (0 = LP, 1 = QP), n_ineq u64, n_eq u64
//!   active_set      u64 len, u64 indices
//!   G, h, F, f      matrices as (u64 rows, u64 cols, f64 column-major), vectors as (u64 len, f64)
//!   dual payload    u8 tag; 0 => y_ineq, y_eq vectors; 1 => D matrix, e vector
//!   seed_theta      vector
//!   hit_count       u64
//! lookup_order     u64 len, u64 indices
//! ```

use std::collections::HashMap;
use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::mpregion::{CriticalRegion, DualMap, RegionKind};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ODLDICT\0";
/// Lookups between frequency reorderings.
pub const REORDER_INTERVAL: u64 = 256;

#[derive(Debug, Error)]
pub enum DictionaryError {
    #[error("fingerprint mismatch: dictionary {expected:016x}, got {got:016x}")]
    Fingerprint { expected: u64, got: u64 },
    #[error("a region with active set {0:?} is already stored")]
    Duplicate(Vec<usize>),
    #[error("malformed dictionary file: {0}")]
    Format(String),
    #[error("unsupported dictionary format version {0}")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lookup {
    /// Index into [`Dictionary::entries`].
    Hit(usize),
    Miss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryStats {
    pub entry_count: usize,
    pub hit_rate: f64,
    /// `(entry index, hits)`, most-hit first.
    pub hits_per_region: Vec<(usize, u64)>,
    /// Fewest regions whose hits reach 99% of all hits.
    pub k_covering_99: usize,
}

impl DictionaryStats {
    /// Smallest number of regions covering `share` of all hits.
    pub fn k_covering(&self, share: f64) -> usize {
        smallest_cover(self.hits_per_region.iter().map(|&(_, h)| h), share)
    }
}

pub(crate) fn smallest_cover(sorted_desc: impl Iterator<Item = u64> + Clone, share: f64) -> usize {
    let total: u64 = sorted_desc.clone().sum();
    if total == 0 {
        return 0;
    }
    let target = share * total as f64;
    let mut acc = 0u64;
    for (k, h) in sorted_desc.enumerate() {
        acc += h;
        if acc as f64 >= target * (1.0 - 1e-12) {
            return k + 1;
        }
    }
    unreachable!("cumulative hits reach the total")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    entries: Vec<CriticalRegion>,
    lookup_order: Vec<usize>,
    by_active_set: HashMap<Vec<usize>, usize>,
    mpp_fingerprint: u64,
    theta_dim: usize,
    since_reorder: u64,
    pub total_lookups: u64,
    pub total_hits: u64,
    pub total_misses: u64,
    /// Misses whose solve was degenerate and produced no entry.
    pub degenerate_fallbacks: u64,
}

impl Dictionary {
    pub fn new(mpp_fingerprint: u64, theta_dim: usize) -> Self {
        Dictionary {
            entries: Vec::new(),
            lookup_order: Vec::new(),
            by_active_set: HashMap::new(),
            mpp_fingerprint,
            theta_dim,
            since_reorder: 0,
            total_lookups: 0,
            total_hits: 0,
            total_misses: 0,
            degenerate_fallbacks: 0,
        }
    }

    pub fn fingerprint(&self) -> u64 {
        self.mpp_fingerprint
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_dim
    }

    pub fn entries(&self) -> &[CriticalRegion] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [CriticalRegion] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup_order(&self) -> &[usize] {
        &self.lookup_order
    }

    pub fn get(&self, index: usize) -> &CriticalRegion {
        &self.entries[index]
    }

    pub fn position_of(&self, active_set: &[usize]) -> Option<usize> {
        self.by_active_set.get(active_set).copied()
    }

    /// First region in lookup order containing `theta`. No side effects.
    pub fn find(&self, theta: &DVector<f64>) -> Option<usize> {
        self.lookup_order
            .iter()
            .copied()
            .find(|&i| self.entries[i].contains(theta))
    }

    pub fn record_hit(&mut self, index: usize) {
        self.entries[index].hit_count += 1;
        self.total_hits += 1;
        self.bump();
    }

    pub fn record_miss(&mut self) {
        self.total_misses += 1;
        self.bump();
    }

    pub fn record_degenerate(&mut self) {
        self.degenerate_fallbacks += 1;
    }

    fn bump(&mut self) {
        self.total_lookups += 1;
        self.since_reorder += 1;
        if self.since_reorder >= REORDER_INTERVAL {
            self.reorder();
        }
    }

    /// Stable sort of the lookup order by descending hit count.
    pub fn reorder(&mut self) {
        let entries = &self.entries;
        self.lookup_order
            .sort_by(|&a, &b| entries[b].hit_count.cmp(&entries[a].hit_count));
        self.since_reorder = 0;
    }

    pub fn lookup(&mut self, theta: &DVector<f64>) -> Lookup {
        match self.find(theta) {
            Some(i) => {
                self.record_hit(i);
                Lookup::Hit(i)
            }
            None => {
                self.record_miss();
                Lookup::Miss
            }
        }
    }

    /// Appends a region built from the program with `fingerprint`.
    pub fn insert(&mut self, fingerprint: u64, region: CriticalRegion) -> Result<usize, DictionaryError> {
        if fingerprint != self.mpp_fingerprint {
            return Err(DictionaryError::Fingerprint {
                expected: self.mpp_fingerprint,
                got: fingerprint,
            });
        }
        if region.theta_dim() != self.theta_dim {
            return Err(DictionaryError::Format(format!(
                "region has parameter dimension {}, dictionary {}",
                region.theta_dim(),
                self.theta_dim
            )));
        }
        if self.by_active_set.contains_key(&region.active_set) {
            return Err(DictionaryError::Duplicate(region.active_set.clone()));
        }
        let index = self.entries.len();
        self.by_active_set.insert(region.active_set.clone(), index);
        self.entries.push(region);
        self.lookup_order.push(index);
        Ok(index)
    }

    /// Union by active set; counters and hit counts are summed.
    pub fn merge(&mut self, other: Dictionary) -> Result<(), DictionaryError> {
        if other.mpp_fingerprint != self.mpp_fingerprint {
            return Err(DictionaryError::Fingerprint {
                expected: self.mpp_fingerprint,
                got: other.mpp_fingerprint,
            });
        }
        for region in other.entries {
            match self.by_active_set.get(&region.active_set) {
                Some(&i) => self.entries[i].hit_count += region.hit_count,
                None => {
                    self.insert(other.mpp_fingerprint, region)?;
                }
            }
        }
        self.total_lookups += other.total_lookups;
        self.total_hits += other.total_hits;
        self.total_misses += other.total_misses;
        self.degenerate_fallbacks += other.degenerate_fallbacks;
        self.reorder();
        Ok(())
    }

    pub fn stats(&self) -> DictionaryStats {
        let mut hits: Vec<(usize, u64)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, r)| (i, r.hit_count))
            .collect();
        hits.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let hit_rate = if self.total_lookups == 0 {
            0.0
        } else {
            self.total_hits as f64 / self.total_lookups as f64
        };
        let k = smallest_cover(hits.iter().map(|&(_, h)| h), 0.99);
        DictionaryStats {
            entry_count: self.entries.len(),
            hit_rate,
            hits_per_region: hits,
            k_covering_99: k,
        }
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<(), DictionaryError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u64::<LittleEndian>(self.mpp_fingerprint)?;
        w.write_u64::<LittleEndian>(self.entries.len() as u64)?;
        w.write_u64::<LittleEndian>(self.theta_dim as u64)?;
        for c in [self.total_lookups, self.total_hits, self.total_misses, self.degenerate_fallbacks] {
            w.write_u64::<LittleEndian>(c)?;
        }
        for r in &self.entries {
            w.write_u8(match r.kind {
                RegionKind::Mplp => 0,
                RegionKind::Mpqp => 1,
            })?;
            w.write_u64::<LittleEndian>(r.n_ineq as u64)?;
            w.write_u64::<LittleEndian>(r.n_eq as u64)?;
            write_indices(&mut w, &r.active_set)?;
            write_matrix(&mut w, &r.g)?;
            write_vector(&mut w, &r.h)?;
            write_matrix(&mut w, &r.f_mat)?;
            write_vector(&mut w, &r.f_vec)?;
            match &r.dual_map {
                DualMap::Constant { y_ineq, y_eq } => {
                    w.write_u8(0)?;
                    write_vector(&mut w, y_ineq)?;
                    write_vector(&mut w, y_eq)?;
                }
                DualMap::Affine { d, e } => {
                    w.write_u8(1)?;
                    write_matrix(&mut w, d)?;
                    write_vector(&mut w, e)?;
                }
            }
            write_vector(&mut w, &r.seed_theta)?;
            w.write_u64::<LittleEndian>(r.hit_count)?;
        }
        write_indices(&mut w, &self.lookup_order)?;
        w.flush()?;
        Ok(())
    }

    /// Reads a saved dictionary. With `expected_fingerprint`, the file must
    /// belong to that program.
    pub fn load<R: Read>(mut r: R, expected_fingerprint: Option<u64>) -> Result<Dictionary, DictionaryError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(DictionaryError::Format("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != FORMAT_VERSION {
            return Err(DictionaryError::Version(version));
        }
        let fingerprint = r.read_u64::<LittleEndian>().map_err(truncated)?;
        if let Some(expected) = expected_fingerprint {
            if expected != fingerprint {
                return Err(DictionaryError::Fingerprint {
                    expected,
                    got: fingerprint,
                });
            }
        }
        let count = read_len(&mut r)?;
        let theta_dim = read_len(&mut r)?;
        let mut dict = Dictionary::new(fingerprint, theta_dim);
        let mut counters = [0u64; 4];
        for c in counters.iter_mut() {
            *c = r.read_u64::<LittleEndian>().map_err(truncated)?;
        }
        for _ in 0..count {
            let kind = match r.read_u8().map_err(truncated)? {
                0 => RegionKind::Mplp,
                1 => RegionKind::Mpqp,
                k => return Err(DictionaryError::Format(format!("unknown region kind {k}"))),
            };
            let n_ineq = read_len(&mut r)?;
            let n_eq = read_len(&mut r)?;
            let active_set = read_indices(&mut r)?;
            let g = read_matrix(&mut r)?;
            let h = read_vector(&mut r)?;
            let f_mat = read_matrix(&mut r)?;
            let f_vec = read_vector(&mut r)?;
            let dual_map = match r.read_u8().map_err(truncated)? {
                0 => DualMap::Constant {
                    y_ineq: read_vector(&mut r)?,
                    y_eq: read_vector(&mut r)?,
                },
                1 => DualMap::Affine {
                    d: read_matrix(&mut r)?,
                    e: read_vector(&mut r)?,
                },
                t => return Err(DictionaryError::Format(format!("unknown dual payload {t}"))),
            };
            let seed_theta = read_vector(&mut r)?;
            let hit_count = r.read_u64::<LittleEndian>().map_err(truncated)?;
            let region = CriticalRegion {
                g,
                h,
                active_set,
                f_mat,
                f_vec,
                dual_map,
                kind,
                seed_theta,
                n_ineq,
                n_eq,
                hit_count,
            };
            check_region_shape(&region, theta_dim)?;
            dict.insert(fingerprint, region)?;
        }
        let order = read_indices(&mut r)?;
        let mut seen = vec![false; count];
        for &i in &order {
            if i >= count || std::mem::replace(&mut seen[i], true) {
                return Err(DictionaryError::Format("lookup order is not a permutation".into()));
            }
        }
        if order.len() != count {
            return Err(DictionaryError::Format("lookup order is not a permutation".into()));
        }
        dict.lookup_order = order;
        [dict.total_lookups, dict.total_hits, dict.total_misses, dict.degenerate_fallbacks] = counters;
        Ok(dict)
    }
}

fn check_region_shape(r: &CriticalRegion, theta_dim: usize) -> Result<(), DictionaryError> {
    let bad = |what: &str| Err(DictionaryError::Format(format!("inconsistent region shape: {what}")));
    if r.g.ncols() != theta_dim || r.f_mat.ncols() != theta_dim || r.seed_theta.len() != theta_dim {
        return bad("parameter dimension");
    }
    if r.g.nrows() != r.h.len() || r.f_mat.nrows() != r.f_vec.len() {
        return bad("halfspace or primal map");
    }
    if r.active_set.iter().any(|&i| i >= r.n_ineq) {
        return bad("active set index");
    }
    match &r.dual_map {
        DualMap::Constant { y_ineq, y_eq } if y_ineq.len() != r.n_ineq || y_eq.len() != r.n_eq => bad("dual vector"),
        DualMap::Affine { d, e }
            if d.nrows() != r.active_set.len() + r.n_eq || e.len() != d.nrows() || d.ncols() != theta_dim =>
        {
            bad("dual map")
        }
        _ => Ok(()),
    }
}

fn truncated(e: io::Error) -> DictionaryError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        DictionaryError::Format("unexpected end of file".into())
    } else {
        DictionaryError::Io(e)
    }
}

const MAX_LEN: u64 = 1 << 32;

fn read_len<R: Read>(r: &mut R) -> Result<usize, DictionaryError> {
    let n = r.read_u64::<LittleEndian>().map_err(truncated)?;
    if n > MAX_LEN {
        return Err(DictionaryError::Format(format!("implausible length {n}")));
    }
    Ok(n as usize)
}

fn write_indices<W: Write>(w: &mut W, idx: &[usize]) -> io::Result<()> {
    w.write_u64::<LittleEndian>(idx.len() as u64)?;
    for &i in idx {
        w.write_u64::<LittleEndian>(i as u64)?;
    }
    Ok(())
}

fn read_indices<R: Read>(r: &mut R) -> Result<Vec<usize>, DictionaryError> {
    let n = read_len(r)?;
    (0..n).map(|_| read_len(r)).collect()
}

fn write_vector<W: Write>(w: &mut W, v: &DVector<f64>) -> io::Result<()> {
    w.write_u64::<LittleEndian>(v.len() as u64)?;
    for &x in v.iter() {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_vector<R: Read>(r: &mut R) -> Result<DVector<f64>, DictionaryError> {
    let n = read_len(r)?;
    let mut data = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut data).map_err(truncated)?;
    Ok(DVector::from_vec(data))
}

fn write_matrix<W: Write>(w: &mut W, m: &DMatrix<f64>) -> io::Result<()> {
    w.write_u64::<LittleEndian>(m.nrows() as u64)?;
    w.write_u64::<LittleEndian>(m.ncols() as u64)?;
    for &x in m.iter() {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_matrix<R: Read>(r: &mut R) -> Result<DMatrix<f64>, DictionaryError> {
    let rows = read_len(r)?;
    let cols = read_len(r)?;
    let n = rows
        .checked_mul(cols)
        .filter(|&n| n as u64 <= MAX_LEN)
        .ok_or_else(|| DictionaryError::Format("implausible matrix size".into()))?;
    let mut data = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut data).map_err(truncated)?;
    Ok(DMatrix::from_vec(rows, cols, data))
}
