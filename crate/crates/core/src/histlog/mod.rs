//! Append-only per-token training history.
//!
//! # File layout
//!
//! All values little-endian.
//!
//! ```text
//! "HLOG"          4 bytes
//! version         u32
//! record_count    u64   (patched at the end of every recorded epoch)
//! header_len      u32
//! header          header_len bytes of JSON (see HistoryHeader)
//! frames          repeated: payload_len u32 | payload | crc32(payload) u32
//! ```
//!
//! Payload of one record, with `F` the storage float (f32 or f64 per the
//! header), `d = d_model`, `V = vocab`, `L = n_layers`, `G = grad_layers.len()`:
//!
//! | field        | type          | meaning                                          |
//! |--------------|---------------|--------------------------------------------------|
//! | step         | u64           | global token-step index                          |
//! | epoch        | u32           |                                                  |
//! | sequence_id  | u32           | index into the training split                    |
//! | position     | u16           | input position (predicts token `position + 1`)   |
//! | seed_label   | u16           | seed that generated the sequence                 |
//! | next_token   | u16           | target token id                                  |
//! | reserved     | u16           | zero                                             |
//! | eta          | f64           | effective learning rate `lr * clip_scale`        |
//! | z            | F x d         | LM-head input                                    |
//! | s            | F x V         | softmax output                                   |
//! | u            | F x (L*d)     | attention-aggregated values, layer-major, heads in column blocks |
//! | a            | F x (L*d_ff)  | FFN hidden activations, layer-major              |
//! | grad_y       | F x (G*d)     | gradient at the attention output projection, per designated layer |
//! | grad_b       | F x (G*d)     | gradient at the FFN output projection, per designated layer |

mod dual;

use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::nncore::{HistorySink, ModelConfig, Precision, Real, StepRecord};

pub use dual::{
    dual_head_logits, dual_head_logits_batch, ffn_weights, mhsa_weights, reconstruct_delta, reconstruct_weight,
    WeightTarget, WeightedStep,
};

const MAGIC: &[u8; 4] = b"HLOG";
const VERSION: u32 = 1;
const FIXED: usize = 32;
const COUNT_OFFSET: u64 = 8;

#[derive(Debug, thiserror::Error)]
pub enum HistError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a history log: {0}")]
    Format(String),
    #[error("{0} was not recorded in this history")]
    NotRecorded(String),
    #[error("dual-form reconstruction needs plain SGD, but this history was trained with {0}")]
    NotSgd(String),
    #[error("history is subsampled (epoch stride {0}); exact reconstruction needs stride 1")]
    Subsampled(u32),
    #[error("history belongs to config {found}, expected {expected}")]
    ConfigHash { expected: String, found: String },
    #[error("out of range: {0}")]
    Range(String),
}

/// What a log contains. Stored as JSON after the fixed prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryHeader {
    pub config_hash: String,
    pub config: ModelConfig,
    pub storage: Precision,
    /// Only epochs divisible by the stride are recorded.
    pub epoch_stride: u32,
    /// 1-based layers whose attention and FFN output gradients are recorded.
    pub grad_layers: Vec<usize>,
    pub optimizer: String,
    pub plain_sgd: bool,
    pub d_model: usize,
    pub d_ff: usize,
    pub d_head: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab: usize,
}

impl HistoryHeader {
    pub fn new(config: &ModelConfig, storage: Precision, epoch_stride: u32, grad_layers: Vec<usize>, optimizer: &str, plain_sgd: bool) -> Self {
        Self {
            config_hash: config.hash(),
            config: config.clone(),
            storage,
            epoch_stride,
            grad_layers,
            optimizer: optimizer.to_string(),
            plain_sgd,
            d_model: config.d_model,
            d_ff: config.d_ff,
            d_head: config.d_head(),
            n_layers: config.n_layers,
            n_heads: config.n_heads,
            vocab: config.vocab,
        }
    }

    fn validate(&self) -> Result<(), HistError> {
        if self.n_heads == 0 || self.d_head * self.n_heads != self.d_model {
            return Err(HistError::Format("inconsistent head dimensions".into()));
        }
        if let Some(&l) = self.grad_layers.iter().find(|&&l| l == 0 || l > self.n_layers) {
            return Err(HistError::Format(format!("gradient layer {l} outside 1..={}", self.n_layers)));
        }
        Ok(())
    }

    fn n_values(&self) -> usize {
        let g = self.grad_layers.len();
        self.d_model + self.vocab + self.n_layers * (self.d_model + self.d_ff) + 2 * g * self.d_model
    }

    pub fn payload_len(&self) -> usize {
        FIXED + self.n_values() * self.storage.bytes()
    }

    pub fn is_recorded_epoch(&self, epoch: u32) -> bool {
        self.epoch_stride > 0 && epoch % self.epoch_stride == 0
    }

    /// Position of a designated gradient layer in the record.
    pub fn grad_slot(&self, layer: usize) -> Option<usize> {
        self.grad_layers.iter().position(|&l| l == layer)
    }
}

/// One supervised token position, widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub step: u64,
    pub epoch: u32,
    pub sequence_id: u32,
    pub position: u16,
    pub seed_label: u16,
    pub next_token: u16,
    pub eta: f64,
    pub z: Vec<f64>,
    pub s: Vec<f64>,
    pub u: Vec<f64>,
    pub a: Vec<f64>,
    pub grad_y: Vec<f64>,
    pub grad_b: Vec<f64>,
}

impl HistoryRecord {
    /// Aggregated value of `head` at 1-based `layer`.
    pub fn u_head(&self, h: &HistoryHeader, layer: usize, head: usize) -> &[f64] {
        let base = (layer - 1) * h.d_model + head * h.d_head;
        &self.u[base..base + h.d_head]
    }

    pub fn u_layer(&self, h: &HistoryHeader, layer: usize) -> &[f64] {
        &self.u[(layer - 1) * h.d_model..layer * h.d_model]
    }

    pub fn a_layer(&self, h: &HistoryHeader, layer: usize) -> &[f64] {
        &self.a[(layer - 1) * h.d_ff..layer * h.d_ff]
    }

    pub fn grad_y_layer(&self, h: &HistoryHeader, layer: usize) -> Option<&[f64]> {
        h.grad_slot(layer).map(|i| &self.grad_y[i * h.d_model..(i + 1) * h.d_model])
    }

    pub fn grad_b_layer(&self, h: &HistoryHeader, layer: usize) -> Option<&[f64]> {
        h.grad_slot(layer).map(|i| &self.grad_b[i * h.d_model..(i + 1) * h.d_model])
    }
}

fn write_prefix(w: &mut impl Write, header: &HistoryHeader, count: u64) -> io::Result<()> {
    let json = serde_json::to_vec(header).map_err(io::Error::other)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)
}

/// Streams records to disk during training.
pub struct HistoryWriter {
    header: HistoryHeader,
    path: PathBuf,
    out: BufWriter<File>,
    count: u64,
    payload: Vec<u8>,
    open_epoch: Option<u32>,
}

impl HistoryWriter {
    pub fn create(path: &Path, header: HistoryHeader) -> Result<Self, HistError> {
        header.validate()?;
        let mut out = BufWriter::new(File::create(path)?);
        write_prefix(&mut out, &header, 0)?;
        Ok(Self {
            payload: Vec::with_capacity(header.payload_len()),
            header,
            path: path.to_path_buf(),
            out,
            count: 0,
            open_epoch: None,
        })
    }

    /// Reopens a log for appending after training resumed at `next_epoch`,
    /// dropping any records from that epoch on (left over from an aborted epoch)
    /// and any torn trailing frame.
    pub fn resume(path: &Path, next_epoch: u32) -> Result<Self, HistError> {
        let mut reader = HistoryReader::open(path)?;
        let header = reader.header().clone();
        let mut keep_end = reader.data_start;
        let mut count = 0u64;
        while let Some(meta) = reader.next_frame_meta()? {
            if meta.epoch >= next_epoch {
                break;
            }
            // only whole, checksummed frames survive
            if reader.decode_rest(&meta)?.is_none() {
                break;
            }
            keep_end = reader.pos;
            count += 1;
        }
        drop(reader);
        let f = OpenOptions::new().read(true).write(true).open(path)?;
        f.set_len(keep_end)?;
        let mut out = BufWriter::new(f);
        out.seek(SeekFrom::Start(COUNT_OFFSET))?;
        out.write_all(&count.to_le_bytes())?;
        out.seek(SeekFrom::End(0))?;
        Ok(Self {
            payload: Vec::with_capacity(header.payload_len()),
            header,
            path: path.to_path_buf(),
            out,
            count,
            open_epoch: None,
        })
    }

    pub fn header(&self) -> &HistoryHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Flushes buffered frames and patches the record count.
    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()?;
        let f = self.out.get_mut();
        f.seek(SeekFrom::Start(COUNT_OFFSET))?;
        f.write_all(&self.count.to_le_bytes())?;
        f.seek(SeekFrom::End(0))?;
        Ok(())
    }

    pub fn finish(mut self) -> io::Result<u64> {
        self.flush()?;
        self.out.get_ref().sync_all()?;
        Ok(self.count)
    }

    /// Appends an already assembled record (fixtures, imports). Steps must
    /// keep increasing.
    pub fn write_record(&mut self, r: &HistoryRecord) -> Result<(), HistError> {
        let h = &self.header;
        let g = h.grad_layers.len() * h.d_model;
        let dims = [
            ("z", r.z.len(), h.d_model),
            ("s", r.s.len(), h.vocab),
            ("u", r.u.len(), h.n_layers * h.d_model),
            ("a", r.a.len(), h.n_layers * h.d_ff),
            ("grad_y", r.grad_y.len(), g),
            ("grad_b", r.grad_b.len(), g),
        ];
        if let Some((name, got, want)) = dims.iter().find(|(_, got, want)| got != want) {
            return Err(HistError::Range(format!("{name} has {got} values, expected {want}")));
        }
        self.payload.clear();
        self.payload.extend_from_slice(&r.step.to_le_bytes());
        self.payload.extend_from_slice(&r.epoch.to_le_bytes());
        self.payload.extend_from_slice(&r.sequence_id.to_le_bytes());
        self.payload.extend_from_slice(&r.position.to_le_bytes());
        self.payload.extend_from_slice(&r.seed_label.to_le_bytes());
        self.payload.extend_from_slice(&r.next_token.to_le_bytes());
        self.payload.extend_from_slice(&0u16.to_le_bytes());
        self.payload.extend_from_slice(&r.eta.to_le_bytes());
        for v in [&r.z, &r.s, &r.u, &r.a, &r.grad_y, &r.grad_b] {
            for &x in v.iter() {
                self.put(x);
            }
        }
        self.emit()?;
        Ok(())
    }

    fn emit(&mut self) -> io::Result<()> {
        let crc = crc32fast::hash(&self.payload);
        self.out.write_all(&(self.payload.len() as u32).to_le_bytes())?;
        self.out.write_all(&self.payload)?;
        self.out.write_all(&crc.to_le_bytes())?;
        self.count += 1;
        Ok(())
    }

    fn put<T: Real>(&mut self, x: T) {
        match self.header.storage {
            Precision::F32 => self.payload.extend_from_slice(&(x.as_f64() as f32).to_le_bytes()),
            Precision::F64 => self.payload.extend_from_slice(&x.as_f64().to_le_bytes()),
        }
    }

    fn put_row<T: Real>(&mut self, a: &ndarray::Array2<T>, p: usize) {
        for &x in a.row(p) {
            self.put(x);
        }
    }
}

impl<T: Real> HistorySink<T> for HistoryWriter {
    fn record(&mut self, rec: &StepRecord<'_, T>) -> io::Result<()> {
        if !self.header.is_recorded_epoch(rec.epoch) {
            return Ok(());
        }
        if self.open_epoch.is_some_and(|e| e != rec.epoch) {
            self.flush()?;
        }
        self.open_epoch = Some(rec.epoch);
        let n = rec.trace.n_positions();
        let toks = &rec.sequence.tokens;
        for p in 0..n {
            self.payload.clear();
            self.payload.extend_from_slice(&(rec.first_step + p as u64).to_le_bytes());
            self.payload.extend_from_slice(&rec.epoch.to_le_bytes());
            self.payload.extend_from_slice(&rec.sequence_id.to_le_bytes());
            self.payload.extend_from_slice(&(p as u16).to_le_bytes());
            self.payload.extend_from_slice(&rec.sequence.seed_id.to_le_bytes());
            self.payload.extend_from_slice(&toks[p + 1].to_le_bytes());
            self.payload.extend_from_slice(&0u16.to_le_bytes());
            self.payload.extend_from_slice(&rec.eta.to_le_bytes());
            self.put_row(&rec.trace.pre_head, p);
            self.put_row(&rec.trace.probs, p);
            for l in 0..self.header.n_layers {
                self.put_row(&rec.trace.u[l], p);
            }
            for l in 0..self.header.n_layers {
                self.put_row(&rec.trace.ffn_hidden[l], p);
            }
            for i in 0..self.header.grad_layers.len() {
                let l = self.header.grad_layers[i] - 1;
                self.put_row(&rec.grads.d_attn_out[l], p);
            }
            for i in 0..self.header.grad_layers.len() {
                let l = self.header.grad_layers[i] - 1;
                self.put_row(&rec.grads.d_ffn_out[l], p);
            }
            debug_assert_eq!(self.payload.len(), self.header.payload_len());
            self.emit()?;
        }
        Ok(())
    }
}

/// Which records a scan returns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecordFilter {
    /// Inclusive epoch range.
    pub epochs: Option<(u32, u32)>,
    pub seed_label: Option<u16>,
    /// Inclusive upper bound on the step index.
    pub up_to_step: Option<u64>,
    /// Keep only epochs divisible by this (in addition to the log's own stride).
    pub epoch_every: Option<u32>,
}

impl RecordFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn epochs(lo: u32, hi: u32) -> Self {
        Self {
            epochs: Some((lo, hi)),
            ..Self::default()
        }
    }

    pub fn up_to(step: Option<u64>) -> Self {
        Self {
            up_to_step: step,
            ..Self::default()
        }
    }

    fn accepts(&self, m: &FrameMeta) -> bool {
        self.epochs.map_or(true, |(lo, hi)| (lo..=hi).contains(&m.epoch))
            && self.seed_label.map_or(true, |s| s == m.seed_label)
            && self.up_to_step.map_or(true, |s| m.step <= s)
            && self.epoch_every.map_or(true, |k| k > 0 && m.epoch % k == 0)
    }
}

struct FrameMeta {
    len: usize,
    step: u64,
    epoch: u32,
    seed_label: u16,
}

/// Sequential reader. Complete frames are always returned; a torn or
/// corrupted tail ends the scan and sets [`HistoryReader::truncated`].
pub struct HistoryReader {
    header: HistoryHeader,
    declared: u64,
    input: BufReader<File>,
    data_start: u64,
    pos: u64,
    file_len: u64,
    head: [u8; FIXED],
    pending: usize,
    buf: Vec<u8>,
    truncated: bool,
    read: u64,
}

impl HistoryReader {
    pub fn open(path: &Path) -> Result<Self, HistError> {
        let f = File::open(path)?;
        let file_len = f.metadata()?.len();
        let mut input = BufReader::with_capacity(1 << 20, f);
        let mut prefix = [0u8; 20];
        input
            .read_exact(&mut prefix)
            .map_err(|_| HistError::Format(format!("{} is too short", path.display())))?;
        if &prefix[..4] != MAGIC {
            return Err(HistError::Format(format!("{} has bad magic", path.display())));
        }
        let version = u32::from_le_bytes(prefix[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(HistError::Format(format!("unsupported version {version}")));
        }
        let declared = u64::from_le_bytes(prefix[8..16].try_into().unwrap());
        let hlen = u32::from_le_bytes(prefix[16..20].try_into().unwrap()) as usize;
        let mut json = vec![0u8; hlen];
        input
            .read_exact(&mut json)
            .map_err(|_| HistError::Format("header truncated".into()))?;
        let header: HistoryHeader =
            serde_json::from_slice(&json).map_err(|e| HistError::Format(format!("bad header: {e}")))?;
        header.validate()?;
        let data_start = 20 + hlen as u64;
        Ok(Self {
            buf: Vec::with_capacity(header.payload_len()),
            header,
            declared,
            input,
            data_start,
            pos: data_start,
            file_len,
            head: [0; FIXED],
            pending: 0,
            truncated: false,
            read: 0,
        })
    }

    pub fn header(&self) -> &HistoryHeader {
        &self.header
    }

    /// Record count written in the file prefix.
    pub fn declared_count(&self) -> u64 {
        self.declared
    }

    /// True once a scan hit an incomplete or corrupted frame.
    pub fn truncated(&self) -> bool {
        self.truncated
    }

    /// Frames read so far (accepted or skipped).
    pub fn frames_read(&self) -> u64 {
        self.read
    }

    pub fn check_config(&self, config: &ModelConfig) -> Result<(), HistError> {
        let expected = config.hash();
        if expected != self.header.config_hash {
            return Err(HistError::ConfigHash {
                expected,
                found: self.header.config_hash.clone(),
            });
        }
        Ok(())
    }

    pub fn rewind(&mut self) -> Result<(), HistError> {
        self.input.seek(SeekFrom::Start(self.data_start))?;
        self.pos = self.data_start;
        self.pending = 0;
        self.truncated = false;
        self.read = 0;
        Ok(())
    }

    /// Reads the frame length and the fixed part of the next payload.
    fn next_frame_meta(&mut self) -> Result<Option<FrameMeta>, HistError> {
        if self.pending > 0 {
            self.skip_payload_rest()?;
        }
        if self.pos >= self.file_len {
            return Ok(None);
        }
        let mut lb = [0u8; 4];
        let expected = self.header.payload_len();
        if self.pos + 4 + expected as u64 + 4 > self.file_len {
            self.truncated = true;
            return Ok(None);
        }
        self.input.read_exact(&mut lb)?;
        let len = u32::from_le_bytes(lb) as usize;
        if len != expected {
            self.truncated = true;
            return Ok(None);
        }
        self.input.read_exact(&mut self.head)?;
        self.pos += 4 + FIXED as u64;
        self.pending = len - FIXED + 4;
        self.read += 1;
        Ok(Some(FrameMeta {
            len,
            step: u64::from_le_bytes(self.head[0..8].try_into().unwrap()),
            epoch: u32::from_le_bytes(self.head[8..12].try_into().unwrap()),
            seed_label: u16::from_le_bytes(self.head[18..20].try_into().unwrap()),
        }))
    }

    fn skip_payload_rest(&mut self) -> Result<(), HistError> {
        self.input.seek_relative(self.pending as i64)?;
        self.pos += self.pending as u64;
        self.pending = 0;
        Ok(())
    }

    fn decode_rest(&mut self, meta: &FrameMeta) -> Result<Option<HistoryRecord>, HistError> {
        let rest = meta.len - FIXED;
        self.buf.resize(rest + 4, 0);
        self.input.read_exact(&mut self.buf)?;
        self.pos += self.pending as u64;
        self.pending = 0;
        let crc = u32::from_le_bytes(self.buf[rest..].try_into().unwrap());
        let mut h = crc32fast::Hasher::new();
        h.update(&self.head);
        h.update(&self.buf[..rest]);
        if h.finalize() != crc {
            self.truncated = true;
            self.pos = self.file_len;
            return Ok(None);
        }
        let hd = &self.head;
        let w = self.header.storage.bytes();
        let mut vals = self.buf[..rest].chunks_exact(w).map(|c| match self.header.storage {
            Precision::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            Precision::F64 => f64::from_le_bytes(c.try_into().unwrap()),
        });
        let h = &self.header;
        let mut take = |n: usize| (&mut vals).take(n).collect::<Vec<f64>>();
        let g = h.grad_layers.len() * h.d_model;
        let z = take(h.d_model);
        let s = take(h.vocab);
        let u = take(h.n_layers * h.d_model);
        let a = take(h.n_layers * h.d_ff);
        let grad_y = take(g);
        let grad_b = take(g);
        Ok(Some(HistoryRecord {
            step: meta.step,
            epoch: meta.epoch,
            sequence_id: u32::from_le_bytes(hd[12..16].try_into().unwrap()),
            position: u16::from_le_bytes(hd[16..18].try_into().unwrap()),
            seed_label: meta.seed_label,
            next_token: u16::from_le_bytes(hd[20..22].try_into().unwrap()),
            eta: f64::from_le_bytes(hd[24..32].try_into().unwrap()),
            z,
            s,
            u,
            a,
            grad_y,
            grad_b,
        }))
    }

    /// Next record passing `filter`, or `None` at the end (or at a torn tail).
    pub fn next_filtered(&mut self, filter: &RecordFilter) -> Result<Option<HistoryRecord>, HistError> {
        while let Some(meta) = self.next_frame_meta()? {
            if filter.up_to_step.is_some_and(|s| meta.step > s) {
                self.skip_payload_rest()?;
                return Ok(None);
            }
            if filter.accepts(&meta) {
                match self.decode_rest(&meta)? {
                    Some(r) => return Ok(Some(r)),
                    None => return Ok(None),
                }
            }
            self.skip_payload_rest()?;
        }
        Ok(None)
    }

    /// Streaming iterator over records passing `filter`.
    pub fn query(&mut self, filter: RecordFilter) -> Query<'_> {
        Query { reader: self, filter }
    }

    /// Calls `f` on every record passing `filter`, from the start of the log.
    pub fn scan(&mut self, filter: &RecordFilter, mut f: impl FnMut(&HistoryRecord)) -> Result<u64, HistError> {
        self.rewind()?;
        let mut n = 0;
        while let Some(r) = self.next_filtered(filter)? {
            f(&r);
            n += 1;
        }
        Ok(n)
    }
}

pub struct Query<'a> {
    reader: &'a mut HistoryReader,
    filter: RecordFilter,
}

impl Iterator for Query<'_> {
    type Item = Result<HistoryRecord, HistError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.reader.next_filtered(&self.filter).transpose()
    }
}
