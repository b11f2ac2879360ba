//! Content-addressed memoisation of matrix exponentials.
//!
//! Arguments are identified by a cryptographic digest of their raw bytes, so
//! a lookup costs one hashing pass over the stored values. Entries live in
//! memory and, optionally, in a directory with one file per entry named by
//! the hex digest. Each file holds
//!
//! ```text
//! b"NRGC"  u64 rows  u64 cols  rows*cols × (f64 re, f64 im)
//! ```
//!
//! all little-endian, values in row-major order.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use sha2::Digest;

use crate::error::{Error, Result};
use crate::propagator::expm;
use crate::scalar::Scalar;

const FILE_MAGIC: &[u8; 4] = b"NRGC";

/// Streaming hasher handed out by a [`DigestEngine`].
pub trait MessageHasher {
    fn update(&mut self, bytes: &[u8]);
    fn finish(self: Box<Self>) -> Vec<u8>;
}

/// A cryptographic hash with at least 128 bits of output.
pub trait DigestEngine: Send + Sync {
    fn name(&self) -> &'static str;
    fn hasher(&self) -> Box<dyn MessageHasher>;
}

struct Sha2Hasher<D: Digest>(D);

impl<D: Digest> MessageHasher for Sha2Hasher<D> {
    fn update(&mut self, bytes: &[u8]) {
        Digest::update(&mut self.0, bytes);
    }
    fn finish(self: Box<Self>) -> Vec<u8> {
        self.0.finalize().to_vec()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sha256;

impl DigestEngine for Sha256 {
    fn name(&self) -> &'static str {
        "sha256"
    }
    fn hasher(&self) -> Box<dyn MessageHasher> {
        Box::new(Sha2Hasher(sha2::Sha256::new()))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sha512;

impl DigestEngine for Sha512 {
    fn name(&self) -> &'static str {
        "sha512"
    }
    fn hasher(&self) -> Box<dyn MessageHasher> {
        Box::new(Sha2Hasher(sha2::Sha512::new()))
    }
}

/// Compressed sparse row matrix, only used as a hashing representation.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T: Scalar> {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Scalar> CsrMatrix<T> {
    pub fn from_dense(a: &ArrayView2<'_, T>) -> Self {
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for row in a.rows() {
            for (j, &x) in row.iter().enumerate() {
                if x != T::zero() {
                    indices.push(j);
                    values.push(x);
                }
            }
            indptr.push(indices.len());
        }
        Self { rows: a.nrows(), cols: a.ncols(), indptr, indices, values }
    }
}

/// Matrix argument in either storage representation.
#[derive(Debug, Clone, Copy)]
pub enum MatrixRef<'a, T: Scalar> {
    Full(ArrayView2<'a, T>),
    Sparse(&'a CsrMatrix<T>),
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub digest: Vec<u8>,
    pub function_tag: String,
    pub scalar_params: Vec<u8>,
}

impl CacheKey {
    pub fn hex(&self) -> String {
        hex::encode(&self.digest)
    }
}

impl fmt::Debug for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CacheKey({}:{})", self.function_tag, self.hex())
    }
}

/// Buffers small writes before they reach the hasher.
struct Feeder {
    hasher: Box<dyn MessageHasher>,
    buf: Vec<u8>,
}

impl Feeder {
    fn new(engine: &dyn DigestEngine) -> Self {
        Self { hasher: engine.hasher(), buf: Vec::with_capacity(1 << 13) }
    }
    fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
        if self.buf.len() >= 1 << 13 {
            self.hasher.update(&self.buf);
            self.buf.clear();
        }
    }
    fn push_scalar<T: Scalar>(&mut self, x: T) {
        x.write_le_bytes(&mut self.buf);
        if self.buf.len() >= 1 << 13 {
            self.hasher.update(&self.buf);
            self.buf.clear();
        }
    }
    fn finish(mut self) -> Vec<u8> {
        self.hasher.update(&self.buf);
        self.hasher.finish()
    }
}

/// Digest of a matrix together with a function tag and the canonical bytes
/// of scalar parameters. Full and sparse representations of the same matrix
/// hash differently.
pub fn matrix_digest<T: Scalar>(
    engine: &dyn DigestEngine,
    m: MatrixRef<'_, T>,
    tag: &str,
    scalars: &[u8],
) -> CacheKey {
    let mut feed = Feeder::new(engine);
    feed.push(tag.as_bytes());
    feed.push(&[0]);
    feed.push(T::KIND.as_bytes());
    feed.push(&(scalars.len() as u64).to_le_bytes());
    feed.push(scalars);
    match m {
        MatrixRef::Full(a) => {
            feed.push(b"full");
            feed.push(&(a.nrows() as u64).to_le_bytes());
            feed.push(&(a.ncols() as u64).to_le_bytes());
            for &x in a.iter() {
                feed.push_scalar(x);
            }
        }
        MatrixRef::Sparse(s) => {
            feed.push(b"csr");
            for &i in s.indptr.iter().chain(&s.indices) {
                feed.push(&(i as u64).to_le_bytes());
            }
            for &x in &s.values {
                feed.push_scalar(x);
            }
            feed.push(&(s.rows as u64).to_le_bytes());
            feed.push(&(s.cols as u64).to_le_bytes());
        }
    }
    CacheKey { digest: feed.finish(), function_tag: tag.to_owned(), scalar_params: scalars.to_vec() }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub puts: u64,
    pub bytes_stored: u64,
}

#[derive(Debug, Clone)]
pub struct CacheConfig {
    /// Matrices with fewer rows than this bypass the cache.
    pub threshold: usize,
    /// Compare arguments element by element on every hit.
    pub verify: bool,
    /// Directory for the file-backed store.
    pub dir: Option<PathBuf>,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self { threshold: 512, verify: false, dir: None }
    }
}

#[derive(Clone)]
enum Stored {
    Real(Array2<f64>),
    Complex(Array2<Complex64>),
}

impl Stored {
    fn from_scalar<T: Scalar>(a: &Array2<T>) -> Self {
        match a.iter().map(|&x| f64::from_complex(x.to_complex())).collect::<Option<Vec<f64>>>() {
            Some(v) if T::KIND == f64::KIND => Stored::Real(Array2::from_shape_vec(a.dim(), v).unwrap()),
            _ => Stored::Complex(a.mapv(|x| x.to_complex())),
        }
    }

    fn to_scalar<T: Scalar>(&self) -> Option<Array2<T>> {
        match self {
            Stored::Real(a) => Some(a.mapv(T::from_f64)),
            Stored::Complex(a) => {
                let v: Option<Vec<T>> = a.iter().map(|&z| T::from_complex(z)).collect();
                v.map(|v| Array2::from_shape_vec(a.dim(), v).unwrap())
            }
        }
    }

    fn byte_len(&self) -> u64 {
        match self {
            Stored::Real(a) => (a.len() * 8) as u64,
            Stored::Complex(a) => (a.len() * 16) as u64,
        }
    }

    fn complex_view(&self) -> Array2<Complex64> {
        match self {
            Stored::Real(a) => a.mapv(|x| Complex64::new(x, 0.0)),
            Stored::Complex(a) => a.clone(),
        }
    }
}

struct Entry {
    value: Stored,
    argument: Option<Vec<u8>>,
}

/// Memoising store for [`cached_expm`].
pub struct ExpmCache {
    config: CacheConfig,
    engine: Arc<dyn DigestEngine>,
    memory: RwLock<HashMap<Vec<u8>, Entry>>,
    hits: AtomicU64,
    misses: AtomicU64,
    puts: AtomicU64,
    bytes: AtomicU64,
}

impl fmt::Debug for ExpmCache {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExpmCache")
            .field("config", &self.config)
            .field("engine", &self.engine.name())
            .field("stats", &self.stats())
            .finish()
    }
}

impl Default for ExpmCache {
    fn default() -> Self {
        Self::new(CacheConfig::default())
    }
}

impl ExpmCache {
    pub fn new(config: CacheConfig) -> Self {
        Self::with_engine(config, Arc::new(Sha256))
    }

    pub fn with_engine(config: CacheConfig, engine: Arc<dyn DigestEngine>) -> Self {
        if let Some(dir) = &config.dir {
            if let Err(e) = fs::create_dir_all(dir) {
                log::warn!("cannot create cache directory {}: {e}", dir.display());
            }
        }
        Self {
            config,
            engine,
            memory: RwLock::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            puts: AtomicU64::new(0),
            bytes: AtomicU64::new(0),
        }
    }

    /// A store that never caches anything.
    pub fn disabled() -> Self {
        Self::new(CacheConfig { threshold: usize::MAX, ..CacheConfig::default() })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn engine(&self) -> &dyn DigestEngine {
        self.engine.as_ref()
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            puts: self.puts.load(Ordering::Relaxed),
            bytes_stored: self.bytes.load(Ordering::Relaxed),
        }
    }

    pub fn len(&self) -> usize {
        self.memory.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all in-memory entries and resets the statistics. Files are
    /// left in place.
    pub fn clear(&self) {
        self.memory.write().unwrap().clear();
        for c in [&self.hits, &self.misses, &self.puts, &self.bytes] {
            c.store(0, Ordering::Relaxed);
        }
    }

    fn entry_path(&self, key: &CacheKey) -> Option<PathBuf> {
        self.config.dir.as_ref().map(|d| d.join(key.hex()))
    }

    fn lookup<T: Scalar>(&self, key: &CacheKey, argument: Option<&[u8]>) -> Option<Array2<T>> {
        {
            let map = self.memory.read().unwrap();
            if let Some(entry) = map.get(&key.digest) {
                let confirmed = match (argument, &entry.argument) {
                    (Some(a), Some(b)) => a == b.as_slice(),
                    (Some(_), None) => false,
                    _ => true,
                };
                if confirmed {
                    return entry.value.to_scalar();
                }
                return None;
            }
        }
        if argument.is_some() {
            // Files do not carry the argument, so they cannot be confirmed.
            return None;
        }
        let path = self.entry_path(key)?;
        match read_entry(&path) {
            Ok(c) => {
                let stored = Stored::Complex(c);
                let value = stored.to_scalar()?;
                let stored = Stored::from_scalar(&value);
                self.memory.write().unwrap().insert(key.digest.clone(), Entry { value: stored, argument: None });
                Some(value)
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => None,
            Err(e) => {
                log::warn!("cache read {} failed: {e}; recomputing", path.display());
                None
            }
        }
    }

    fn insert<T: Scalar>(&self, key: &CacheKey, value: &Array2<T>, argument: Option<Vec<u8>>) {
        let stored = Stored::from_scalar(value);
        let size = stored.byte_len();
        if let Some(path) = self.entry_path(key) {
            if let Err(e) = write_entry(&path, &stored.complex_view()) {
                log::warn!("cache write {} failed: {e}", path.display());
            }
        }
        self.memory.write().unwrap().insert(key.digest.clone(), Entry { value: stored, argument });
        self.puts.fetch_add(1, Ordering::Relaxed);
        self.bytes.fetch_add(size, Ordering::Relaxed);
    }
}

fn argument_bytes<T: Scalar>(a: &ArrayView2<'_, T>, dt: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(a.len() * 16 + 8);
    out.extend_from_slice(&dt.to_le_bytes());
    for &x in a.iter() {
        x.write_le_bytes(&mut out);
    }
    out
}

/// `exp(generator · dt)`, served from `store` when the argument has been
/// seen before. Matrices below the store's dimension threshold are
/// exponentiated directly and leave the statistics untouched.
pub fn cached_expm<T: Scalar>(store: &ExpmCache, generator: &ArrayView2<'_, T>, dt: f64) -> Result<Array2<T>> {
    if !dt.is_finite() {
        return Err(Error::NonFinite("time step"));
    }
    let compute = || expm(&generator.mapv(|x| x * T::from_f64(dt)).view());
    if generator.nrows() < store.config.threshold {
        return compute();
    }
    let key = matrix_digest(store.engine(), MatrixRef::Full(*generator), "expm", &dt.to_le_bytes());
    let argument = store.config.verify.then(|| argument_bytes(generator, dt));
    if let Some(hit) = store.lookup::<T>(&key, argument.as_deref()) {
        store.hits.fetch_add(1, Ordering::Relaxed);
        return Ok(hit);
    }
    store.misses.fetch_add(1, Ordering::Relaxed);
    let value = compute()?;
    store.insert(&key, &value, argument);
    Ok(value)
}

fn write_entry(path: &Path, m: &Array2<Complex64>) -> io::Result<()> {
    let mut bytes = Vec::with_capacity(20 + m.len() * 16);
    bytes.extend_from_slice(FILE_MAGIC);
    bytes.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for z in m.iter() {
        bytes.extend_from_slice(&z.re.to_le_bytes());
        bytes.extend_from_slice(&z.im.to_le_bytes());
    }
    // Write-then-rename keeps readers from seeing partial files.
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(tmp, path)
}

fn read_entry(path: &Path) -> io::Result<Array2<Complex64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| io::Error::new(io::ErrorKind::InvalidData, msg.to_owned());
    if bytes.len() < 20 || &bytes[..4] != FILE_MAGIC {
        return Err(bad("not a cache entry"));
    }
    let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
    let (rows, cols) = (word(4), word(12));
    if bytes.len() != 20 + rows * cols * 16 {
        return Err(bad("truncated cache entry"));
    }
    let values = bytes[20..]
        .chunks_exact(16)
        .map(|c| {
            Complex64::new(
                f64::from_le_bytes(c[..8].try_into().unwrap()),
                f64::from_le_bytes(c[8..].try_into().unwrap()),
            )
        })
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|_| bad("shape mismatch"))
}
