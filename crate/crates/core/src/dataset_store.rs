//! Binary corpus files, sliding windows, noise augmentation and batching.
//!
//! Corpus layout (little-endian throughout):
//!
//! ```text
//! magic "LMCS" | version u32 | series_count u32 | channels u32 | length u32
//! per series:  mode u8 | latents u16 | length * channels f32 (time-major)
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lmc_synth::{SeriesBlock, SeriesMode};

pub const CORPUS_MAGIC: &[u8; 4] = b"LMCS";
pub const CORPUS_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 20;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("not a corpus file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported corpus version {0}")]
    UnsupportedVersion(u32),
    #[error("corpus size mismatch: header declares {expected} bytes, file has {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("series {series}: invalid mode byte {byte}")]
    InvalidMode { series: usize, byte: u8 },
    #[error("window of {context}+{horizon} steps does not fit a series of length {length}")]
    WindowTooLong {
        context: usize,
        horizon: usize,
        length: usize,
    },
    #[error("stride and batch size must be >= 1")]
    ZeroStep,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusHeader {
    pub version: u32,
    pub series_count: u32,
    pub channels: u32,
    pub length: u32,
}

impl CorpusHeader {
    pub fn series_bytes(&self) -> u64 {
        1 + 2 + 4 * self.channels as u64 * self.length as u64
    }

    pub fn file_bytes(&self) -> u64 {
        HEADER_BYTES as u64 + self.series_count as u64 * self.series_bytes()
    }

    fn encode(&self) -> [u8; HEADER_BYTES] {
        let mut out = [0u8; HEADER_BYTES];
        out[..4].copy_from_slice(CORPUS_MAGIC);
        out[4..8].copy_from_slice(&self.version.to_le_bytes());
        out[8..12].copy_from_slice(&self.series_count.to_le_bytes());
        out[12..16].copy_from_slice(&self.channels.to_le_bytes());
        out[16..20].copy_from_slice(&self.length.to_le_bytes());
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self, StoreError> {
        if bytes.len() < HEADER_BYTES {
            return Err(StoreError::Truncated {
                expected: HEADER_BYTES as u64,
                actual: bytes.len() as u64,
            });
        }
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[..4]);
        if &magic != CORPUS_MAGIC {
            return Err(StoreError::BadMagic(magic));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let header = Self {
            version: word(4),
            series_count: word(8),
            channels: word(12),
            length: word(16),
        };
        if header.version != CORPUS_VERSION {
            return Err(StoreError::UnsupportedVersion(header.version));
        }
        Ok(header)
    }
}

/// What was written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSummary {
    pub series_count: usize,
    pub correlated: usize,
    pub independent: usize,
    pub channels: usize,
    pub length: usize,
    pub bytes: u64,
    /// Hex SHA-256 of the whole file.
    pub checksum: String,
}

/// Streams series blocks into a corpus file.
pub struct CorpusWriter {
    path: PathBuf,
    out: BufWriter<File>,
    header: CorpusHeader,
    correlated: usize,
    independent: usize,
}

impl CorpusWriter {
    pub fn create(path: impl AsRef<Path>, channels: usize, length: usize) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(io_err(&path))?;
        let header = CorpusHeader {
            version: CORPUS_VERSION,
            series_count: 0,
            channels: channels as u32,
            length: length as u32,
        };
        let mut out = BufWriter::new(file);
        out.write_all(&header.encode()).map_err(io_err(&path))?;
        Ok(Self {
            path,
            out,
            header,
            correlated: 0,
            independent: 0,
        })
    }

    pub fn push(&mut self, block: &SeriesBlock) -> Result<(), StoreError> {
        let (t, n) = block.values.dim();
        if t != self.header.length as usize || n != self.header.channels as usize {
            return Err(StoreError::ShapeMismatch {
                expected: format!("{}x{}", self.header.length, self.header.channels),
                got: format!("{t}x{n}"),
            });
        }
        let latents = u16::try_from(block.num_latents).map_err(|_| StoreError::ShapeMismatch {
            expected: "at most 65535 latents".into(),
            got: block.num_latents.to_string(),
        })?;
        let mut buf = Vec::with_capacity(self.header.series_bytes() as usize);
        buf.push(block.mode.as_byte());
        buf.extend_from_slice(&latents.to_le_bytes());
        for v in block.values.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        self.out.write_all(&buf).map_err(io_err(&self.path))?;
        self.header.series_count += 1;
        match block.mode {
            SeriesMode::Correlated => self.correlated += 1,
            SeriesMode::Independent => self.independent += 1,
        }
        Ok(())
    }

    pub fn finish(self) -> Result<CorpusSummary, StoreError> {
        let Self {
            path,
            out,
            header,
            correlated,
            independent,
        } = self;
        let mut file = out.into_inner().map_err(|e| io_err(&path)(e.into_error()))?;
        file.seek(SeekFrom::Start(0)).map_err(io_err(&path))?;
        file.write_all(&header.encode()).map_err(io_err(&path))?;
        file.sync_all().map_err(io_err(&path))?;
        drop(file);
        let (bytes, checksum) = file_checksum(&path)?;
        Ok(CorpusSummary {
            series_count: header.series_count as usize,
            correlated,
            independent,
            channels: header.channels as usize,
            length: header.length as usize,
            bytes,
            checksum,
        })
    }
}

/// Size and hex SHA-256 of a file.
pub fn file_checksum(path: impl AsRef<Path>) -> Result<(u64, String), StoreError> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(io_err(path))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let read = file.read(&mut buf).map_err(io_err(path))?;
        if read == 0 {
            break;
        }
        total += read as u64;
        hasher.update(&buf[..read]);
    }
    Ok((total, hex(&hasher.finalize())))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes every block of `blocks` (all `length x channels`) to `path`.
pub fn write_corpus<I>(
    path: impl AsRef<Path>,
    channels: usize,
    length: usize,
    blocks: I,
) -> Result<CorpusSummary, StoreError>
where
    I: IntoIterator<Item = SeriesBlock>,
{
    let mut writer = CorpusWriter::create(path, channels, length)?;
    for block in blocks {
        writer.push(&block)?;
    }
    writer.finish()
}

/// A corpus loaded into memory.
#[derive(Debug, Clone)]
pub struct CorpusFile {
    pub header: CorpusHeader,
    pub modes: Vec<SeriesMode>,
    pub latents: Vec<u16>,
    values: Vec<f32>,
}

impl CorpusFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }

    /// Reads only the 20-byte header.
    pub fn read_header(path: impl AsRef<Path>) -> Result<CorpusHeader, StoreError> {
        let path = path.as_ref();
        let mut file = File::open(path).map_err(io_err(path))?;
        let mut buf = [0u8; HEADER_BYTES];
        let read = file.read(&mut buf).map_err(io_err(path))?;
        CorpusHeader::decode(&buf[..read])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let header = CorpusHeader::decode(bytes)?;
        if bytes.len() as u64 != header.file_bytes() {
            return Err(StoreError::Truncated {
                expected: header.file_bytes(),
                actual: bytes.len() as u64,
            });
        }
        let count = header.series_count as usize;
        let per = header.channels as usize * header.length as usize;
        let stride = header.series_bytes() as usize;
        let mut modes = Vec::with_capacity(count);
        let mut latents = Vec::with_capacity(count);
        let mut values = Vec::with_capacity(count * per);
        for (i, rec) in bytes[HEADER_BYTES..].chunks_exact(stride).enumerate() {
            modes.push(SeriesMode::from_byte(rec[0]).ok_or(StoreError::InvalidMode {
                series: i,
                byte: rec[0],
            })?);
            latents.push(u16::from_le_bytes([rec[1], rec[2]]));
            values.extend(
                rec[3..]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
            );
        }
        Ok(Self {
            header,
            modes,
            latents,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.header.channels as usize
    }

    pub fn length(&self) -> usize {
        self.header.length as usize
    }

    /// Raw time-major values of one series.
    pub fn raw(&self, series: usize) -> &[f32] {
        let per = self.channels() * self.length();
        &self.values[series * per..(series + 1) * per]
    }

    pub fn series(&self, series: usize) -> SeriesBlock {
        let values = Array2::from_shape_vec(
            (self.length(), self.channels()),
            self.raw(series).iter().map(|&v| v as f64).collect(),
        )
        .expect("shape checked on load");
        SeriesBlock::from_values(values, self.modes[series], self.latents[series] as usize)
    }

    /// The window of `series` starting at `offset`.
    pub fn window(&self, series: usize, offset: usize, context: usize, horizon: usize) -> WindowSample {
        let n = self.channels();
        let raw = self.raw(series);
        let grab = |start: usize, len: usize| {
            Array2::from_shape_vec(
                (len, n),
                raw[start * n..(start + len) * n].iter().map(|&v| v as f64).collect(),
            )
            .expect("window inside series")
        };
        WindowSample {
            context: grab(offset, context),
            target: grab(offset + context, horizon),
            source: (series, offset),
        }
    }
}

/// A `(context, target)` pair cut from one series.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `context_len x channels`
    pub context: Array2<f64>,
    /// `horizon x channels`, starting right after the context.
    pub target: Array2<f64>,
    /// `(series index, offset)`
    pub source: (usize, usize),
}

/// Number of windows: `floor((length - context - horizon) / stride) + 1`.
pub fn window_count(
    length: usize,
    context: usize,
    horizon: usize,
    stride: usize,
) -> Result<usize, StoreError> {
    if stride == 0 {
        return Err(StoreError::ZeroStep);
    }
    if context + horizon > length {
        return Err(StoreError::WindowTooLong {
            context,
            horizon,
            length,
        });
    }
    Ok((length - context - horizon) / stride + 1)
}

/// Start offsets `0, stride, 2 stride, ...` of every window that fits.
pub fn window_offsets(
    length: usize,
    context: usize,
    horizon: usize,
    stride: usize,
) -> Result<impl Iterator<Item = usize>, StoreError> {
    let count = window_count(length, context, horizon, stride)?;
    Ok((0..count).map(move |i| i * stride))
}

pub fn extract_windows(
    series: &SeriesBlock,
    series_index: usize,
    context: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowSample>, StoreError> {
    Ok(window_offsets(series.length(), context, horizon, stride)?
        .map(|offset| WindowSample {
            context: series.values.slice(s![offset..offset + context, ..]).to_owned(),
            target: series
                .values
                .slice(s![offset + context..offset + context + horizon, ..])
                .to_owned(),
            source: (series_index, offset),
        })
        .collect())
}

/// Multiplies every context and target entry by an independent `N(1, sigma²)` factor.
pub fn augment_multiplicative_noise<R: Rng + ?Sized>(
    mut sample: WindowSample,
    sigma: f64,
    rng: &mut R,
) -> WindowSample {
    if sigma == 0.0 {
        return sample;
    }
    for v in sample.context.iter_mut().chain(sample.target.iter_mut()) {
        let z: f64 = rng.sample(StandardNormal);
        *v *= 1.0 + sigma * z;
    }
    sample
}

/// How windows are cut from a corpus and grouped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub context_len: usize,
    pub horizon: usize,
    pub stride: usize,
    pub batch_size: usize,
    pub curriculum: bool,
}

/// One epoch's window order.
///
/// With `curriculum`, windows of independent series come first (shuffled
/// among themselves), then windows of correlated series (shuffled among
/// themselves). Otherwise all windows are shuffled together.
pub fn epoch_order<R: Rng + ?Sized>(
    corpus: &CorpusFile,
    plan: &BatchPlan,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>, StoreError> {
    if plan.batch_size == 0 {
        return Err(StoreError::ZeroStep);
    }
    let offsets: Vec<usize> =
        window_offsets(corpus.length(), plan.context_len, plan.horizon, plan.stride)?.collect();
    let windows_of = |mode: Option<SeriesMode>| -> Vec<(usize, usize)> {
        (0..corpus.len())
            .filter(|&i| mode.is_none_or(|m| corpus.modes[i] == m))
            .flat_map(|i| offsets.iter().map(move |&o| (i, o)))
            .collect()
    };
    if plan.curriculum {
        let mut first = windows_of(Some(SeriesMode::Independent));
        let mut second = windows_of(Some(SeriesMode::Correlated));
        first.shuffle(rng);
        second.shuffle(rng);
        first.extend(second);
        Ok(first)
    } else {
        let mut all = windows_of(None);
        all.shuffle(rng);
        Ok(all)
    }
}

/// Batches of materialized windows in the order of [`epoch_order`].
pub struct BatchIter<'a> {
    corpus: &'a CorpusFile,
    plan: BatchPlan,
    order: Vec<(usize, usize)>,
    pos: usize,
}

impl BatchIter<'_> {
    pub fn order(&self) -> &[(usize, usize)] {
        &self.order
    }

    pub fn batches(&self) -> usize {
        self.order.len().div_ceil(self.plan.batch_size)
    }
}

pub fn batch_iterator<'a, R: Rng + ?Sized>(
    corpus: &'a CorpusFile,
    plan: BatchPlan,
    rng: &mut R,
) -> Result<BatchIter<'a>, StoreError> {
    let order = epoch_order(corpus, &plan, rng)?;
    Ok(BatchIter {
        corpus,
        plan,
        order,
        pos: 0,
    })
}

impl Iterator for BatchIter<'_> {
    type Item = Vec<WindowSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.plan.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end]
            .iter()
            .map(|&(s, o)| self.corpus.window(s, o, self.plan.context_len, self.plan.horizon))
            .collect();
        self.pos = end;
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn block(t: usize, n: usize, mode: SeriesMode, base: f64) -> SeriesBlock {
        let values = Array2::from_shape_fn((t, n), |(i, j)| base + i as f64 * 0.5 - j as f64 * 0.25);
        SeriesBlock::from_values(values, mode, if mode == SeriesMode::Independent { n } else { 1 })
    }

    #[test]
    fn file_size_follows_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.lmcs");
        let blocks = vec![
            block(4, 2, SeriesMode::Correlated, 0.0),
            block(4, 2, SeriesMode::Independent, 1.0),
        ];
        let summary = write_corpus(&path, 2, 4, blocks.clone()).unwrap();
        assert_eq!(summary.bytes, 20 + 2 * (1 + 2 + 32));
        assert_eq!(std::fs::metadata(&path).unwrap().len(), summary.bytes);
        assert_eq!((summary.correlated, summary.independent), (1, 1));

        let back = CorpusFile::open(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (i, b) in blocks.iter().enumerate() {
            let r = back.series(i);
            assert_eq!(r.values, b.values);
            assert_eq!(r.mode, b.mode);
            assert_eq!(r.num_latents, b.num_latents);
        }
    }

    #[test]
    fn empty_corpus_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.lmcs");
        let summary = write_corpus(&path, 3, 10, Vec::new()).unwrap();
        assert_eq!(summary.series_count, 0);
        let back = CorpusFile::open(&path).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.header.channels, 3);
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.lmcs");
        write_corpus(&path, 2, 4, vec![block(4, 2, SeriesMode::Correlated, 0.0)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        assert!(matches!(
            CorpusFile::from_bytes(&bytes),
            Err(StoreError::Truncated { .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(CorpusFile::from_bytes(&bytes), Err(StoreError::BadMagic(_))));
    }

    #[test]
    fn writer_rejects_wrong_shape() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = CorpusWriter::create(dir.path().join("s.lmcs"), 2, 4).unwrap();
        assert!(matches!(
            w.push(&block(5, 2, SeriesMode::Correlated, 0.0)),
            Err(StoreError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_count(1024, 96, 96, 1).unwrap(), 833);
        assert_eq!(window_count(192, 96, 96, 1).unwrap(), 1);
        assert!(matches!(
            window_count(191, 96, 96, 1),
            Err(StoreError::WindowTooLong { .. })
        ));
        assert!(window_count(300, 96, 96, 0).is_err());
    }

    #[test]
    fn windows_are_adjacent_slices() {
        let b = block(20, 2, SeriesMode::Correlated, 0.0);
        let ws = extract_windows(&b, 7, 5, 3, 4).unwrap();
        assert_eq!(ws.len(), (20 - 8) / 4 + 1);
        for w in &ws {
            let (_, off) = w.source;
            assert_eq!(w.source.0, 7);
            assert_eq!(w.context.row(0), b.values.row(off));
            assert_eq!(w.context.row(4), b.values.row(off + 4));
            assert_eq!(w.target.row(0), b.values.row(off + 5));
            assert_eq!(w.target.nrows(), 3);
        }
    }

    proptest! {
        #[test]
        fn window_count_matches_enumeration(
            length in 1usize..400,
            context in 1usize..120,
            horizon in 1usize..120,
            stride in 1usize..20,
        ) {
            let brute = (0..length).filter(|o| o % stride == 0 && o + context + horizon <= length).count();
            match window_count(length, context, horizon, stride) {
                Ok(c) => prop_assert_eq!(c, brute),
                Err(_) => prop_assert_eq!(brute, 0),
            }
        }

        #[test]
        fn augmentation_keeps_shape_and_finiteness(sigma in 0.0f64..0.5, seed in any::<u64>()) {
            let b = block(30, 3, SeriesMode::Correlated, -2.0);
            let w = extract_windows(&b, 0, 10, 5, 100).unwrap().remove(0);
            let out = augment_multiplicative_noise(w.clone(), sigma, &mut rng::derive(seed, &[]));
            prop_assert_eq!(out.context.dim(), w.context.dim());
            prop_assert_eq!(out.target.dim(), w.target.dim());
            prop_assert!(out.context.iter().chain(out.target.iter()).all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_sigma_is_identity_and_zero_stays_zero() {
        let b = block(30, 3, SeriesMode::Correlated, 0.0);
        let w = extract_windows(&b, 0, 10, 5, 100).unwrap().remove(0);
        let mut r = rng::derive(1, &[]);
        assert_eq!(augment_multiplicative_noise(w.clone(), 0.0, &mut r), w);
        let out = augment_multiplicative_noise(w.clone(), 0.3, &mut r);
        // entry (0, 0) of the fixture is exactly zero
        assert_eq!(w.context[[0, 0]], 0.0);
        assert_eq!(out.context[[0, 0]], 0.0);
    }

    fn mixed_corpus(dir: &Path) -> CorpusFile {
        let path = dir.join("m.lmcs");
        let blocks = vec![
            block(40, 2, SeriesMode::Correlated, 0.0),
            block(40, 2, SeriesMode::Independent, 1.0),
            block(40, 2, SeriesMode::Correlated, 2.0),
            block(40, 2, SeriesMode::Independent, 3.0),
            block(40, 2, SeriesMode::Independent, 4.0),
        ];
        write_corpus(&path, 2, 40, blocks).unwrap();
        CorpusFile::open(path).unwrap()
    }

    #[test]
    fn curriculum_puts_independent_first() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = mixed_corpus(dir.path());
        let plan = BatchPlan {
            context_len: 10,
            horizon: 10,
            stride: 5,
            batch_size: 3,
            curriculum: true,
        };
        let iter = batch_iterator(&corpus, plan, &mut rng::derive(3, &[])).unwrap();
        let per_series = window_count(40, 10, 10, 5).unwrap();
        let order = iter.order().to_vec();
        let n_indep = 3 * per_series;
        assert!(order[..n_indep].iter().all(|&(s, _)| corpus.modes[s] == SeriesMode::Independent));
        assert!(order[n_indep..].iter().all(|&(s, _)| corpus.modes[s] == SeriesMode::Correlated));
        let first = iter.take(1).next().unwrap();
        assert!(first.iter().all(|w| [1, 3, 4].contains(&w.source.0)));
    }

    #[test]
    fn shuffle_is_seeded_and_covers_every_window() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = mixed_corpus(dir.path());
        let plan = BatchPlan {
            context_len: 10,
            horizon: 10,
            stride: 5,
            batch_size: 4,
            curriculum: false,
        };
        let a = epoch_order(&corpus, &plan, &mut rng::derive(9, &[])).unwrap();
        let b = epoch_order(&corpus, &plan, &mut rng::derive(9, &[])).unwrap();
        assert_eq!(a, b);
        let mut emitted: Vec<_> = batch_iterator(&corpus, plan, &mut rng::derive(9, &[]))
            .unwrap()
            .flatten()
            .map(|w| w.source)
            .collect();
        emitted.sort();
        let mut all: Vec<_> = (0..5)
            .flat_map(|s| window_offsets(40, 10, 10, 5).unwrap().map(move |o| (s, o)))
            .collect();
        all.sort();
        assert_eq!(emitted, all);
    }
}
