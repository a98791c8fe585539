//! Trace files: the serialized prediction events of a black-box LM, plus the token
//! embedding matrix file.
//!
//! Binary trace layout (little-endian):
//!
//! ```text
//! "KNNT" | version u32 | |V| u32 | d u32 | mode u8 | q u32 | count u64
//! count × ( d × f32 embedding | u32 gold | |V| × f32 probs  or  q × (u32 token, f32 prob) )
//! crc32 of the record section
//! ```
//!
//! The JSONL mirror has one header object on the first line followed by one object
//! per record with keys `embedding`, `gold`, `probs` or `topq`, and optional `context`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::EmbeddingMatrix;
use crate::codec::{self, ChecksumReader, ChecksumWriter};
use crate::error::{Error, Result};
use crate::types::{DenseDistribution, Embedding, SparseTopQ};

pub const TRACE_MAGIC: &[u8; 4] = b"KNNT";
pub const TRACE_VERSION: u32 = 1;
pub const MATRIX_MAGIC: &[u8; 4] = b"KNNW";
pub const MATRIX_VERSION: u32 = 1;

/// Size of the binary trace header in bytes.
pub const TRACE_HEADER_LEN: usize = 4 + 4 + 4 + 4 + 1 + 4 + 8;

/// Mass tolerance for f32 probability payloads.
pub const F32_MASS_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceAccess {
    Full,
    TopQ(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceHeader {
    pub version: u32,
    pub vocab_size: usize,
    pub dim: usize,
    pub access: TraceAccess,
    pub count: u64,
}

impl TraceHeader {
    pub fn new(vocab_size: usize, dim: usize, access: TraceAccess, count: u64) -> Result<Self> {
        let h = Self {
            version: TRACE_VERSION,
            vocab_size,
            dim,
            access,
            count,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != TRACE_VERSION {
            return Err(Error::FormatVersionMismatch {
                expected: TRACE_VERSION,
                found: self.version,
            });
        }
        if self.vocab_size == 0 || self.dim == 0 {
            return Err(Error::InvalidHeader("|V| and d must be positive".into()));
        }
        if let TraceAccess::TopQ(q) = self.access {
            if q == 0 || q > self.vocab_size {
                return Err(Error::InvalidHeader(format!(
                    "q = {q} must be in 1..={}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Bytes per binary record; records are fixed-stride.
    pub fn record_len(&self) -> usize {
        let probs = match self.access {
            TraceAccess::Full => 4 * self.vocab_size,
            TraceAccess::TopQ(q) => 8 * q,
        };
        4 * self.dim + 4 + probs
    }

    fn mode_code(&self) -> (u8, u32) {
        match self.access {
            TraceAccess::Full => (0, 0),
            TraceAccess::TopQ(q) => (1, q as u32),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceProbs {
    Full(Vec<f32>),
    TopQ(Vec<(u32, f32)>),
}

/// One prediction event: context embedding, gold next token, LM probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub embedding: Vec<f32>,
    pub gold: u32,
    pub probs: TraceProbs,
    /// Context token ids; carried by the JSONL mirror only.
    pub context: Option<Vec<u32>>,
}

/// LM probabilities of a record, widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub enum LmProbs {
    Dense(DenseDistribution),
    TopQ(SparseTopQ),
}

impl TraceRecord {
    pub fn embedding(&self) -> Result<Embedding> {
        Embedding::from_f32(&self.embedding)
    }

    pub fn lm_probs(&self, vocab_size: usize) -> Result<LmProbs> {
        match &self.probs {
            TraceProbs::Full(p) => {
                if p.len() != vocab_size {
                    return Err(Error::DimensionMismatch {
                        expected: vocab_size,
                        found: p.len(),
                    });
                }
                Ok(LmProbs::Dense(DenseDistribution::from_f32(p, F32_MASS_TOL)?))
            }
            TraceProbs::TopQ(entries) => {
                let wide = entries.iter().map(|&(t, p)| (t as usize, f64::from(p))).collect();
                Ok(LmProbs::TopQ(SparseTopQ::new(wide, vocab_size)?))
            }
        }
    }

    fn check_against(&self, h: &TraceHeader) -> Result<()> {
        let bad = |msg: String| Err(Error::ConsistencyViolation(msg));
        if self.embedding.len() != h.dim {
            return bad(format!("embedding length {} != d = {}", self.embedding.len(), h.dim));
        }
        match (&self.probs, h.access) {
            (TraceProbs::Full(p), TraceAccess::Full) if p.len() == h.vocab_size => Ok(()),
            (TraceProbs::TopQ(e), TraceAccess::TopQ(q)) if e.len() == q => Ok(()),
            _ => bad("probability payload does not match the header access mode".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Binary,
    Jsonl,
}

#[derive(Serialize, Deserialize)]
struct JsonHeader {
    format: String,
    version: u32,
    vocab_size: usize,
    d: usize,
    access: String,
    q: usize,
    count: u64,
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    embedding: Vec<f64>,
    gold: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    topq: Option<Vec<(u32, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    context: Option<Vec<u32>>,
}

fn widen(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&x| f64::from(x)).collect()
}

fn narrow(xs: &[f64]) -> Vec<f32> {
    xs.iter().map(|&x| x as f32).collect()
}

enum Sink {
    Binary(ChecksumWriter<BufWriter<File>>),
    Jsonl(BufWriter<File>),
}

/// Streaming trace writer; the record count is fixed up front by the header.
pub struct TraceWriter {
    header: TraceHeader,
    sink: Sink,
    written: u64,
}

impl TraceWriter {
    pub fn create(path: impl AsRef<Path>, header: TraceHeader, encoding: Encoding) -> Result<Self> {
        header.validate()?;
        let file = BufWriter::new(File::create(path)?);
        let sink = match encoding {
            Encoding::Binary => {
                let mut w = ChecksumWriter::new(file);
                let (mode, q) = header.mode_code();
                w.bytes(TRACE_MAGIC)?;
                w.u32(header.version)?;
                w.u32(header.vocab_size as u32)?;
                w.u32(header.dim as u32)?;
                w.u8(mode)?;
                w.u32(q)?;
                w.u64(header.count)?;
                w.begin_payload();
                Sink::Binary(w)
            }
            Encoding::Jsonl => {
                let mut w = file;
                let (access, q) = match header.access {
                    TraceAccess::Full => ("full", 0),
                    TraceAccess::TopQ(q) => ("top_q", q),
                };
                let jh = JsonHeader {
                    format: "KNNT".into(),
                    version: header.version,
                    vocab_size: header.vocab_size,
                    d: header.dim,
                    access: access.into(),
                    q,
                    count: header.count,
                };
                serde_json::to_writer(&mut w, &jh).map_err(std::io::Error::other)?;
                w.write_all(b"\n")?;
                Sink::Jsonl(w)
            }
        };
        Ok(Self {
            header,
            sink,
            written: 0,
        })
    }

    pub fn push(&mut self, record: &TraceRecord) -> Result<()> {
        if self.written >= self.header.count {
            return Err(Error::ConsistencyViolation(format!(
                "more records than the header count {}",
                self.header.count
            )));
        }
        record.check_against(&self.header)?;
        match &mut self.sink {
            Sink::Binary(w) => {
                for &v in &record.embedding {
                    w.f32(v)?;
                }
                w.u32(record.gold)?;
                match &record.probs {
                    TraceProbs::Full(p) => {
                        for &v in p {
                            w.f32(v)?;
                        }
                    }
                    TraceProbs::TopQ(e) => {
                        for &(t, p) in e {
                            w.u32(t)?;
                            w.f32(p)?;
                        }
                    }
                }
            }
            Sink::Jsonl(w) => {
                let (probs, topq) = match &record.probs {
                    TraceProbs::Full(p) => (Some(widen(p)), None),
                    TraceProbs::TopQ(e) => (None, Some(e.iter().map(|&(t, p)| (t, f64::from(p))).collect())),
                };
                let jr = JsonRecord {
                    embedding: widen(&record.embedding),
                    gold: record.gold,
                    probs,
                    topq,
                    context: record.context.clone(),
                };
                serde_json::to_writer(&mut *w, &jr).map_err(std::io::Error::other)?;
                w.write_all(b"\n")?;
            }
        }
        self.written += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        if self.written != self.header.count {
            return Err(Error::ConsistencyViolation(format!(
                "wrote {} records, header says {}",
                self.written, self.header.count
            )));
        }
        match self.sink {
            Sink::Binary(w) => {
                w.finish()?;
            }
            Sink::Jsonl(mut w) => w.flush()?,
        }
        Ok(())
    }
}

/// Writes a complete trace; `header.count` must equal `records.len()`.
pub fn write_trace(
    header: &TraceHeader,
    records: &[TraceRecord],
    path: impl AsRef<Path>,
    encoding: Encoding,
) -> Result<()> {
    if header.count != records.len() as u64 {
        return Err(Error::ConsistencyViolation(format!(
            "header count {} but {} records",
            header.count,
            records.len()
        )));
    }
    let mut w = TraceWriter::create(path, *header, encoding)?;
    for r in records {
        w.push(r)?;
    }
    w.finish()
}

enum Source {
    Binary(ChecksumReader<BufReader<File>>),
    Jsonl {
        lines: std::io::Lines<BufReader<File>>,
        line: usize,
    },
}

/// Streaming record iterator. Holds one record at a time.
pub struct TraceReader {
    header: TraceHeader,
    source: Source,
    next: u64,
    done: bool,
}

impl TraceReader {
    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    fn read_binary(r: &mut ChecksumReader<BufReader<File>>, h: &TraceHeader, index: u64) -> Result<TraceRecord> {
        let map = codec::at_record(index);
        let mut embedding = Vec::with_capacity(h.dim);
        r.f32s(&mut embedding, h.dim).map_err(&map)?;
        let gold = r.u32().map_err(&map)?;
        let probs = match h.access {
            TraceAccess::Full => {
                let mut p = Vec::with_capacity(h.vocab_size);
                r.f32s(&mut p, h.vocab_size).map_err(&map)?;
                TraceProbs::Full(p)
            }
            TraceAccess::TopQ(q) => {
                let mut e = Vec::with_capacity(q);
                for _ in 0..q {
                    let t = r.u32().map_err(&map)?;
                    let mut b = [0u8; 4];
                    r.exact(&mut b).map_err(&map)?;
                    e.push((t, f32::from_le_bytes(b)));
                }
                TraceProbs::TopQ(e)
            }
        };
        Ok(TraceRecord {
            embedding,
            gold,
            probs,
            context: None,
        })
    }

    fn read_jsonl(lines: &mut std::io::Lines<BufReader<File>>, line: &mut usize, index: u64) -> Result<TraceRecord> {
        let text = loop {
            match lines.next() {
                None => return Err(Error::corrupt(index, "missing record")),
                Some(l) => {
                    *line += 1;
                    let l = l?;
                    if !l.trim().is_empty() {
                        break l;
                    }
                }
            }
        };
        let jr: JsonRecord =
            serde_json::from_str(&text).map_err(|e| Error::corrupt(index, format!("line {line}: {e}")))?;
        let probs = match (jr.probs, jr.topq) {
            (Some(p), None) => TraceProbs::Full(narrow(&p)),
            (None, Some(e)) => TraceProbs::TopQ(e.into_iter().map(|(t, p)| (t, p as f32)).collect()),
            _ => return Err(Error::corrupt(index, "record needs exactly one of probs / topq")),
        };
        Ok(TraceRecord {
            embedding: narrow(&jr.embedding),
            gold: jr.gold,
            probs,
            context: jr.context,
        })
    }
}

impl Iterator for TraceReader {
    type Item = Result<TraceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if self.next == self.header.count {
            self.done = true;
            let end = match &mut self.source {
                Source::Binary(r) => r.verify(self.next),
                Source::Jsonl { lines, .. } => {
                    match lines.find(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty())) {
                        None => Ok(()),
                        Some(Err(e)) => Err(e.into()),
                        Some(Ok(_)) => Err(Error::corrupt(self.next, "more records than the header count")),
                    }
                }
            };
            return end.err().map(Err);
        }
        let index = self.next;
        let rec = match &mut self.source {
            Source::Binary(r) => Self::read_binary(r, &self.header, index),
            Source::Jsonl { lines, line } => Self::read_jsonl(lines, line, index),
        };
        if rec.is_err() {
            self.done = true;
        }
        self.next += 1;
        Some(rec)
    }
}

/// Opens a trace, detecting the encoding from the first bytes, and validates the header.
pub fn read_trace(path: impl AsRef<Path>) -> Result<(TraceHeader, TraceReader)> {
    let path = path.as_ref();
    let mut probe = [0u8; 4];
    let n = File::open(path)?.read(&mut probe)?;
    let file = BufReader::new(File::open(path)?);
    let (header, source) = if n == 4 && &probe == TRACE_MAGIC {
        let mut r = ChecksumReader::new(file);
        r.magic().map_err(codec::in_header)?;
        let version = r.u32().map_err(codec::in_header)?;
        codec::check_version(version, TRACE_VERSION)?;
        let vocab_size = r.u32().map_err(codec::in_header)? as usize;
        let dim = r.u32().map_err(codec::in_header)? as usize;
        let mode = r.u8().map_err(codec::in_header)?;
        let q = r.u32().map_err(codec::in_header)? as usize;
        let count = r.u64().map_err(codec::in_header)?;
        let access = match (mode, q) {
            (0, 0) => TraceAccess::Full,
            (0, q) => return Err(Error::InvalidHeader(format!("full mode with q = {q}"))),
            (1, q) => TraceAccess::TopQ(q),
            (m, _) => return Err(Error::InvalidHeader(format!("unknown access mode {m}"))),
        };
        let header = TraceHeader {
            version,
            vocab_size,
            dim,
            access,
            count,
        };
        header.validate()?;
        r.begin_payload();
        (header, Source::Binary(r))
    } else if n >= 1 && probe[0] == b'{' {
        let mut lines = file.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::InvalidHeader("empty file".into()))??;
        let jh: JsonHeader = serde_json::from_str(&first).map_err(|e| Error::InvalidHeader(e.to_string()))?;
        if jh.format != "KNNT" {
            return Err(Error::InvalidHeader(format!("unknown format {:?}", jh.format)));
        }
        codec::check_version(jh.version, TRACE_VERSION)?;
        let access = match jh.access.as_str() {
            "full" => TraceAccess::Full,
            "top_q" => TraceAccess::TopQ(jh.q),
            other => return Err(Error::InvalidHeader(format!("unknown access mode {other:?}"))),
        };
        let header = TraceHeader {
            version: jh.version,
            vocab_size: jh.vocab_size,
            dim: jh.d,
            access,
            count: jh.count,
        };
        header.validate()?;
        (header, Source::Jsonl { lines, line: 1 })
    } else {
        let mut found = [0u8; 4];
        found[..n].copy_from_slice(&probe[..n]);
        return Err(Error::BadMagic {
            expected: *TRACE_MAGIC,
            found,
        });
    };
    let reader = TraceReader {
        header,
        source,
        next: 0,
        done: false,
    };
    Ok((header, reader))
}

/// Reads every record into memory.
pub fn read_all(path: impl AsRef<Path>) -> Result<(TraceHeader, Vec<TraceRecord>)> {
    let (h, reader) = read_trace(path)?;
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((h, records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViolationKind {
    Dims,
    Token,
    Value,
    Mass,
    Order,
    Duplicate,
}

impl ViolationKind {
    pub fn name(self) -> &'static str {
        match self {
            ViolationKind::Dims => "dims",
            ViolationKind::Token => "token",
            ViolationKind::Value => "value",
            ViolationKind::Mass => "mass",
            ViolationKind::Order => "order",
            ViolationKind::Duplicate => "duplicate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub record: u64,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub records_checked: u64,
    pub violations: Vec<Violation>,
    /// Set when strict mode stopped at the first violation, or the file could not be decoded.
    pub stopped_early: bool,
    /// Decoding failure (truncation, checksum) if any.
    pub decode_error: Option<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty() && self.decode_error.is_none()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

/// Semantic checks of a single record against its header.
pub fn check_record(h: &TraceHeader, index: u64, r: &TraceRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |kind, detail: String| {
        out.push(Violation {
            record: index,
            kind,
            detail,
        })
    };
    if r.embedding.len() != h.dim {
        push(
            ViolationKind::Dims,
            format!("embedding length {} != {}", r.embedding.len(), h.dim),
        );
    }
    if r.embedding.iter().any(|v| !v.is_finite()) {
        push(ViolationKind::Value, "non-finite embedding entry".into());
    }
    if r.gold as usize >= h.vocab_size {
        push(
            ViolationKind::Token,
            format!("gold {} >= |V| = {}", r.gold, h.vocab_size),
        );
    }
    if let Some(ctx) = &r.context {
        if let Some(t) = ctx.iter().find(|&&t| t as usize >= h.vocab_size) {
            push(ViolationKind::Token, format!("context token {t} out of range"));
        }
    }
    match (&r.probs, h.access) {
        (TraceProbs::Full(p), TraceAccess::Full) => {
            if p.len() != h.vocab_size {
                push(
                    ViolationKind::Dims,
                    format!("{} probabilities for |V| = {}", p.len(), h.vocab_size),
                );
            }
            if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
                push(ViolationKind::Value, "negative or non-finite probability".into());
            }
            let mass: f64 = p.iter().map(|&x| f64::from(x)).sum();
            if (mass - 1.0).abs() > F32_MASS_TOL {
                push(ViolationKind::Mass, format!("probabilities sum to {mass}"));
            }
        }
        (TraceProbs::TopQ(e), TraceAccess::TopQ(q)) => {
            if e.len() != q {
                push(ViolationKind::Dims, format!("{} entries for q = {q}", e.len()));
            }
            if let Some((t, _)) = e.iter().find(|(t, _)| *t as usize >= h.vocab_size) {
                push(ViolationKind::Token, format!("top-q token {t} out of range"));
            }
            let mut ids: Vec<u32> = e.iter().map(|x| x.0).collect();
            ids.sort_unstable();
            if ids.windows(2).any(|w| w[0] == w[1]) {
                push(ViolationKind::Duplicate, "repeated top-q token".into());
            }
            if e.iter().any(|(_, x)| !x.is_finite() || *x < 0.0) {
                push(ViolationKind::Value, "negative or non-finite probability".into());
            }
            if e.windows(2).any(|w| w[0].1 < w[1].1) {
                push(ViolationKind::Order, "top-q entries not descending".into());
            }
            let mass: f64 = e.iter().map(|&(_, x)| f64::from(x)).sum();
            if mass > 1.0 + F32_MASS_TOL {
                push(ViolationKind::Mass, format!("top-q probabilities sum to {mass}"));
            }
        }
        _ => push(ViolationKind::Dims, "payload does not match the access mode".into()),
    }
    out
}

/// Checks every record of a trace. Decoding failures are reported, not raised; only
/// failing to open the file or parse its header is an error.
pub fn validate_trace(path: impl AsRef<Path>, strict: bool) -> Result<ValidationReport> {
    let (h, reader) = read_trace(path)?;
    let mut report = ValidationReport::default();
    for (i, rec) in reader.enumerate() {
        match rec {
            Ok(r) => {
                report.records_checked += 1;
                let v = check_record(&h, i as u64, &r);
                if !v.is_empty() {
                    report.violations.extend(v);
                    if strict {
                        report.stopped_early = true;
                        return Ok(report);
                    }
                }
            }
            Err(Error::Io(e)) => return Err(Error::Io(e)),
            Err(e) => {
                report.decode_error = Some(e.to_string());
                report.stopped_early = true;
                return Ok(report);
            }
        }
    }
    Ok(report)
}

pub fn write_embedding_matrix(w: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut out = ChecksumWriter::new(BufWriter::new(File::create(path)?));
    out.bytes(MATRIX_MAGIC)?;
    out.u32(MATRIX_VERSION)?;
    out.u32(w.vocab_size() as u32)?;
    out.u32(w.dim() as u32)?;
    out.begin_payload();
    for &v in w.data() {
        out.f32(v)?;
    }
    out.finish()?;
    Ok(())
}

pub fn read_embedding_matrix(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let mut r = ChecksumReader::new(BufReader::new(File::open(path)?));
    codec::check_magic(r.magic().map_err(codec::in_header)?, MATRIX_MAGIC)?;
    codec::check_version(r.u32().map_err(codec::in_header)?, MATRIX_VERSION)?;
    let vocab = r.u32().map_err(codec::in_header)? as usize;
    let dim = r.u32().map_err(codec::in_header)? as usize;
    if vocab == 0 || dim == 0 {
        return Err(Error::InvalidHeader("|V| and d must be positive".into()));
    }
    r.begin_payload();
    let mut data = Vec::with_capacity(vocab * dim);
    let mut row = Vec::with_capacity(dim);
    for i in 0..vocab {
        r.f32s(&mut row, dim).map_err(codec::at_record(i as u64))?;
        data.extend_from_slice(&row);
    }
    r.verify(vocab as u64)?;
    EmbeddingMatrix::new(vocab, dim, data).map_err(|e| Error::corrupt(0, e.to_string()))
}
