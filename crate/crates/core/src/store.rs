//! ACTD activation dumps and the JSON-lines sidecars.
//!
//! Layout of an ACTD v1 file:
//!
//! ```text
//! 0..4     magic "ACTD"
//! 4..8     u32 LE format version (1)
//! 8..12    u32 LE header length H
//! 12..12+H UTF-8 JSON header
//! payload  for each phenomenon in header order, for each sample in order:
//!          h_g as L x D f32 LE row-major, then h_u as L x D f32 LE row-major
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ACTD";
pub const FORMAT_VERSION: u32 = 1;

/// Rows with an L2 norm below this are treated as zero vectors.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Token counts (millions) of the standard power-of-two checkpoint schedule.
pub const STANDARD_SCHEDULE: [u64; 13] = [0, 1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    L2PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementType {
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenomenonCount {
    pub name: String,
    pub sample_count: usize,
}

/// JSON header of an ACTD dump.
///
/// `pair_ids` is optional; when absent, sample `i` of phenomenon `name` has
/// the id `"{name}:{i}"`. Unknown keys written by producers (pooling
/// conventions, hidden-state source, ...) are preserved in `extra`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub format_version: u32,
    pub model_id: String,
    pub checkpoint_tokens: u64,
    pub seed: u64,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub pooling: Pooling,
    pub normalization: Normalization,
    pub phenomena: Vec<PhenomenonCount>,
    pub element_type: ElementType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_ids: Option<Vec<Vec<String>>>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl DumpHeader {
    pub fn new(
        model_id: impl Into<String>,
        checkpoint_tokens: u64,
        seed: u64,
        num_layers: usize,
        hidden_dim: usize,
        phenomena: Vec<PhenomenonCount>,
    ) -> Self {
        DumpHeader {
            format_version: FORMAT_VERSION,
            model_id: model_id.into(),
            checkpoint_tokens,
            seed,
            num_layers,
            hidden_dim,
            pooling: Pooling::Mean,
            normalization: Normalization::None,
            phenomena,
            element_type: ElementType::F32,
            pair_ids: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn total_samples(&self) -> usize {
        self.phenomena.iter().map(|p| p.sample_count).sum()
    }

    /// Values per embedding matrix (L x D).
    pub fn matrix_len(&self) -> usize {
        self.num_layers * self.hidden_dim
    }

    pub fn on_standard_schedule(&self) -> bool {
        STANDARD_SCHEDULE.contains(&self.checkpoint_tokens)
    }

    pub fn pair_id(&self, phenomenon: usize, index: usize) -> String {
        match &self.pair_ids {
            Some(ids) => ids[phenomenon][index].clone(),
            None => default_pair_id(&self.phenomena[phenomenon].name, index),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Version { found: self.format_version, supported: FORMAT_VERSION });
        }
        if self.num_layers == 0 || self.hidden_dim == 0 {
            return Err(Error::Layout(format!(
                "num_layers and hidden_dim must be >= 1 (got {} x {})",
                self.num_layers, self.hidden_dim
            )));
        }
        let mut seen = HashSet::new();
        for p in &self.phenomena {
            if !seen.insert(p.name.as_str()) {
                return Err(Error::Layout(format!("duplicate phenomenon name {:?}", p.name)));
            }
            if p.sample_count < 2 {
                return Err(Error::Layout(format!(
                    "phenomenon {:?} has {} samples; at least 2 are required",
                    p.name, p.sample_count
                )));
            }
        }
        if let Some(ids) = &self.pair_ids {
            if ids.len() != self.phenomena.len()
                || ids.iter().zip(&self.phenomena).any(|(v, p)| v.len() != p.sample_count)
            {
                return Err(Error::Layout("pair_ids shape does not match phenomenon counts".into()));
            }
        }
        Ok(())
    }

    /// Serialized JSON header bytes as written into the file.
    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }
}

pub fn default_pair_id(phenomenon: &str, index: usize) -> String {
    format!("{phenomenon}:{index}")
}

/// Pooled grammatical/ungrammatical embeddings for one minimal pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub pair_id: String,
    pub phenomenon: String,
    /// L x D row-major.
    pub h_g: Vec<f32>,
    /// L x D row-major.
    pub h_u: Vec<f32>,
}

impl SamplePair {
    pub fn g_layer(&self, layer: usize, dim: usize) -> &[f32] {
        &self.h_g[layer * dim..(layer + 1) * dim]
    }

    pub fn u_layer(&self, layer: usize, dim: usize) -> &[f32] {
        &self.h_u[layer * dim..(layer + 1) * dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    pub header: DumpHeader,
    pub samples: Vec<SamplePair>,
}

impl ActivationDump {
    /// Index ranges into `samples`, one per phenomenon in header order.
    pub fn phenomenon_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.header
            .phenomena
            .iter()
            .map(|p| {
                let r = start..start + p.sample_count;
                start += p.sample_count;
                r
            })
            .collect()
    }
}

fn check_layout(header: &DumpHeader, samples: &[SamplePair]) -> Result<()> {
    header.validate()?;
    if samples.len() != header.total_samples() {
        return Err(Error::Layout(format!(
            "header declares {} samples but {} were supplied",
            header.total_samples(),
            samples.len()
        )));
    }
    let len = header.matrix_len();
    let mut it = samples.iter();
    for p in &header.phenomena {
        for i in 0..p.sample_count {
            let s = it.next().expect("count checked above");
            if s.phenomenon != p.name {
                return Err(Error::Layout(format!(
                    "sample {:?} has phenomenon {:?}, expected {:?} at position {i} (samples must be grouped in header order)",
                    s.pair_id, s.phenomenon, p.name
                )));
            }
            if s.h_g.len() != len || s.h_u.len() != len {
                return Err(Error::Layout(format!(
                    "sample {:?} has matrices of {} / {} values, expected {} ({} x {})",
                    s.pair_id,
                    s.h_g.len(),
                    s.h_u.len(),
                    len,
                    header.num_layers,
                    header.hidden_dim
                )));
            }
            if let Some(l) = first_non_finite_layer(&s.h_g, header.hidden_dim)
                .or_else(|| first_non_finite_layer(&s.h_u, header.hidden_dim))
            {
                return Err(Error::Data(format!(
                    "non-finite value in pair {:?} at layer {l}",
                    s.pair_id
                )));
            }
        }
    }
    Ok(())
}

fn first_non_finite_layer(m: &[f32], dim: usize) -> Option<usize> {
    m.iter().position(|v| !v.is_finite()).map(|i| i / dim)
}

/// Writes an ACTD v1 file.
///
/// If the header carries no `pair_ids` and the samples use non-default ids,
/// the ids are stored in the header so they survive the round trip.
pub fn write_dump(header: &DumpHeader, samples: &[SamplePair], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    check_layout(header, samples)?;

    let mut header = header.clone();
    let mut idx = 0;
    let mut ids: Vec<Vec<String>> = Vec::with_capacity(header.phenomena.len());
    let mut all_default = true;
    for p in &header.phenomena {
        let v: Vec<String> = samples[idx..idx + p.sample_count].iter().map(|s| s.pair_id.clone()).collect();
        all_default &= v.iter().enumerate().all(|(i, id)| *id == default_pair_id(&p.name, i));
        idx += p.sample_count;
        ids.push(v);
    }
    match &header.pair_ids {
        Some(existing) if *existing != ids => {
            return Err(Error::Layout("header pair_ids do not match sample pair ids".into()))
        }
        Some(_) => {}
        None if !all_default => header.pair_ids = Some(ids),
        None => {}
    }

    let json = header.to_json_bytes()?;
    let header_len = u32::try_from(json.len()).map_err(|_| Error::Layout("header too large".into()))?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&header_len.to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let mut buf = Vec::with_capacity(header.matrix_len() * 8);
    for s in samples {
        buf.clear();
        for v in s.h_g.iter().chain(&s.h_u) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Sequential reader over an ACTD file. Values are returned as stored,
/// without finiteness checks.
pub struct DumpReader {
    path: PathBuf,
    reader: BufReader<File>,
    header: DumpHeader,
    offset: u64,
    phenomenon: usize,
    index: usize,
    buf: Vec<u8>,
}

impl DumpReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut reader = BufReader::with_capacity(1 << 20, file);

        let mut prefix = [0u8; 12];
        let got = read_full(&mut reader, &mut prefix).map_err(|e| Error::io(&path, e))?;
        if got < 4 || &prefix[0..4] != MAGIC {
            let found = String::from_utf8_lossy(&prefix[..got.min(4)]).into_owned();
            return Err(Error::Format(format!("bad magic {found:?}, expected \"ACTD\"")));
        }
        if got < 12 {
            return Err(Error::Truncated { offset: got as u64, expected: (12 - got) as u64 });
        }
        let version = u32::from_le_bytes(prefix[4..8].try_into().unwrap());
        if version > FORMAT_VERSION || version == 0 {
            return Err(Error::Version { found: version, supported: FORMAT_VERSION });
        }
        let header_len = u32::from_le_bytes(prefix[8..12].try_into().unwrap()) as usize;
        let mut json = vec![0u8; header_len];
        let got = read_full(&mut reader, &mut json).map_err(|e| Error::io(&path, e))?;
        if got < header_len {
            return Err(Error::Truncated { offset: 12 + got as u64, expected: (header_len - got) as u64 });
        }
        let header: DumpHeader = serde_json::from_slice(&json)
            .map_err(|e| Error::Format(format!("invalid header JSON: {e}")))?;
        if header.format_version != version {
            return Err(Error::Format(format!(
                "header format_version {} disagrees with file version {version}",
                header.format_version
            )));
        }
        header.validate()?;
        let buf = vec![0u8; header.matrix_len() * 8];
        Ok(DumpReader {
            path,
            reader,
            header,
            offset: 12 + header_len as u64,
            phenomenon: 0,
            index: 0,
            buf,
        })
    }

    pub fn header(&self) -> &DumpHeader {
        &self.header
    }

    pub fn next_sample(&mut self) -> Result<Option<SamplePair>> {
        while self.phenomenon < self.header.phenomena.len()
            && self.index >= self.header.phenomena[self.phenomenon].sample_count
        {
            self.phenomenon += 1;
            self.index = 0;
        }
        if self.phenomenon >= self.header.phenomena.len() {
            let mut probe = [0u8; 1];
            let extra = read_full(&mut self.reader, &mut probe).map_err(|e| Error::io(&self.path, e))?;
            if extra > 0 {
                return Err(Error::Format(format!("trailing bytes after payload at offset {}", self.offset)));
            }
            return Ok(None);
        }
        let got = read_full(&mut self.reader, &mut self.buf).map_err(|e| Error::io(&self.path, e))?;
        if got < self.buf.len() {
            return Err(Error::Truncated {
                offset: self.offset + got as u64,
                expected: (self.buf.len() - got) as u64,
            });
        }
        self.offset += got as u64;
        let len = self.header.matrix_len();
        let mut values = self.buf.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()));
        let h_g: Vec<f32> = values.by_ref().take(len).collect();
        let h_u: Vec<f32> = values.collect();
        let pair = SamplePair {
            pair_id: self.header.pair_id(self.phenomenon, self.index),
            phenomenon: self.header.phenomena[self.phenomenon].name.clone(),
            h_g,
            h_u,
        };
        self.index += 1;
        Ok(Some(pair))
    }
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Reads and fully validates an ACTD file.
pub fn read_dump(path: impl AsRef<Path>) -> Result<ActivationDump> {
    let mut reader = DumpReader::open(path)?;
    let dim = reader.header().hidden_dim;
    let mut samples = Vec::with_capacity(reader.header().total_samples());
    while let Some(s) = reader.next_sample()? {
        if let Some(l) = first_non_finite_layer(&s.h_g, dim).or_else(|| first_non_finite_layer(&s.h_u, dim)) {
            return Err(Error::Data(format!("non-finite value in pair {:?} at layer {l}", s.pair_id)));
        }
        samples.push(s);
    }
    Ok(ActivationDump { header: reader.header, samples })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Defect {
    pub pair_id: String,
    pub layer: usize,
    /// "g" or "u".
    pub sentence: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub path: String,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fatal: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_tokens: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    pub phenomena: Vec<PhenomenonCount>,
    pub zero_norm_embeddings: usize,
    pub non_finite_values: usize,
    /// First few offending rows of each kind.
    pub zero_norm_locations: Vec<Defect>,
    pub non_finite_locations: Vec<Defect>,
    pub warnings: Vec<String>,
}

const MAX_LISTED_DEFECTS: usize = 20;

/// Scans a dump and reports its structure and defects. Format-level
/// problems are reported as a failed report; only I/O failures are errors.
pub fn validate_dump(path: impl AsRef<Path>) -> Result<ValidationReport> {
    let path = path.as_ref();
    let mut report = ValidationReport {
        path: path.display().to_string(),
        passed: false,
        fatal: None,
        model_id: None,
        checkpoint_tokens: None,
        seed: None,
        num_layers: None,
        hidden_dim: None,
        phenomena: Vec::new(),
        zero_norm_embeddings: 0,
        non_finite_values: 0,
        zero_norm_locations: Vec::new(),
        non_finite_locations: Vec::new(),
        warnings: Vec::new(),
    };
    let mut reader = match DumpReader::open(path) {
        Ok(r) => r,
        Err(e @ (Error::Io { .. } | Error::NotFound { .. })) => return Err(e),
        Err(e) => {
            report.fatal = Some(e.to_string());
            return Ok(report);
        }
    };
    let h = reader.header().clone();
    report.model_id = Some(h.model_id.clone());
    report.checkpoint_tokens = Some(h.checkpoint_tokens);
    report.seed = Some(h.seed);
    report.num_layers = Some(h.num_layers);
    report.hidden_dim = Some(h.hidden_dim);
    report.phenomena = h.phenomena.clone();
    if !h.on_standard_schedule() {
        report
            .warnings
            .push(format!("checkpoint_tokens {} is not on the power-of-two schedule", h.checkpoint_tokens));
    }

    let dim = h.hidden_dim;
    loop {
        let s = match reader.next_sample() {
            Ok(Some(s)) => s,
            Ok(None) => break,
            Err(e @ (Error::Io { .. } | Error::NotFound { .. })) => return Err(e),
            Err(e) => {
                report.fatal = Some(e.to_string());
                break;
            }
        };
        for (sentence, m) in [("g", &s.h_g), ("u", &s.h_u)] {
            for (layer, row) in m.chunks_exact(dim).enumerate() {
                let bad = row.iter().filter(|v| !v.is_finite()).count();
                if bad > 0 {
                    report.non_finite_values += bad;
                    if report.non_finite_locations.len() < MAX_LISTED_DEFECTS {
                        report.non_finite_locations.push(Defect { pair_id: s.pair_id.clone(), layer, sentence });
                    }
                    continue;
                }
                let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
                if norm < ZERO_NORM_EPS {
                    report.zero_norm_embeddings += 1;
                    if report.zero_norm_locations.len() < MAX_LISTED_DEFECTS {
                        report.zero_norm_locations.push(Defect { pair_id: s.pair_id.clone(), layer, sentence });
                    }
                }
            }
        }
    }
    if report.zero_norm_embeddings > 0 {
        report
            .warnings
            .push(format!("{} zero-norm layer embeddings", report.zero_norm_embeddings));
    }
    report.passed = report.fatal.is_none() && report.non_finite_values == 0;
    Ok(report)
}

/// Summed natural-log probabilities of a minimal pair's two sentences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogProbRecord {
    pub pair_id: String,
    #[serde(default)]
    pub phenomenon: String,
    pub g_logprob_sum: f64,
    pub g_token_count: u64,
    pub u_logprob_sum: f64,
    pub u_token_count: u64,
}

/// Reads a log-probability sidecar. Blank lines, `#` comment lines and a
/// JSON object carrying a top-level `"header"` key are skipped.
pub fn read_logprobs(path: impl AsRef<Path>) -> Result<Vec<LogProbRecord>> {
    let mut out = Vec::new();
    for_each_json_line(path.as_ref(), |line_no, value| {
        let rec: LogProbRecord =
            serde_json::from_value(value).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        if rec.g_token_count == 0 || rec.u_token_count == 0 {
            return Err(Error::Data(format!("line {line_no}: token counts must be >= 1 (pair {:?})", rec.pair_id)));
        }
        if !rec.g_logprob_sum.is_finite() || !rec.u_logprob_sum.is_finite() {
            return Err(Error::Data(format!("line {line_no}: non-finite log-probability (pair {:?})", rec.pair_id)));
        }
        out.push(rec);
        Ok(())
    })?;
    Ok(out)
}

/// Sentence text for a minimal pair, kept outside the binary dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMetadata {
    pub pair_id: String,
    pub phenomenon: String,
    pub sentence_good: String,
    pub sentence_bad: String,
}

pub fn read_metadata(path: impl AsRef<Path>) -> Result<Vec<PairMetadata>> {
    let mut out = Vec::new();
    for_each_json_line(path.as_ref(), |line_no, value| {
        out.push(serde_json::from_value(value).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?);
        Ok(())
    })?;
    Ok(out)
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(items: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn for_each_json_line(path: &Path, mut f: impl FnMut(usize, Value) -> Result<()>) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let value: Value =
            serde_json::from_str(trimmed).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        if value.get("header").is_some() {
            continue;
        }
        f(line_no, value)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (DumpHeader, Vec<SamplePair>) {
        let header = DumpHeader::new(
            "toy",
            4,
            1,
            2,
            3,
            vec![PhenomenonCount { name: "agr".into(), sample_count: 2 }],
        );
        let samples = (0..2)
            .map(|i| SamplePair {
                pair_id: default_pair_id("agr", i),
                phenomenon: "agr".into(),
                h_g: (0..6).map(|k| (k + i) as f32 * 0.5).collect(),
                h_u: (0..6).map(|k| -(k as f32) - i as f32).collect(),
            })
            .collect();
        (header, samples)
    }

    #[test]
    fn file_size_matches_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.actd");
        let (header, samples) = tiny();
        write_dump(&header, &samples, &path).unwrap();
        let json_len = header.to_json_bytes().unwrap().len();
        let size = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(size, 4 + 4 + 4 + json_len + 2 * 2 * (2 * 3 * 4));
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.actd");
        let (header, samples) = tiny();
        write_dump(&header, &samples, &path).unwrap();
        let dump = read_dump(&path).unwrap();
        assert_eq!(dump.header, header);
        assert_eq!(dump.samples, samples);
    }

    #[test]
    fn custom_pair_ids_survive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.actd");
        let (header, mut samples) = tiny();
        samples[0].pair_id = "blimp-17".into();
        write_dump(&header, &samples, &path).unwrap();
        let dump = read_dump(&path).unwrap();
        assert_eq!(dump.samples[0].pair_id, "blimp-17");
        assert_eq!(dump.samples[1].pair_id, "agr:1");
    }

    #[test]
    fn count_mismatch_is_layout_error() {
        let dir = tempfile::tempdir().unwrap();
        let (header, mut samples) = tiny();
        samples.push(samples[0].clone());
        let err = write_dump(&header, &samples, dir.path().join("a.actd")).unwrap_err();
        assert!(matches!(err, Error::Layout(_)), "{err}");
    }

    #[test]
    fn shape_mismatch_is_layout_error() {
        let dir = tempfile::tempdir().unwrap();
        let (header, mut samples) = tiny();
        samples[1].h_u.pop();
        let err = write_dump(&header, &samples, dir.path().join("a.actd")).unwrap_err();
        assert!(matches!(err, Error::Layout(_)), "{err}");
    }

    #[test]
    fn header_invariants() {
        let (mut header, _) = tiny();
        header.phenomena[0].sample_count = 1;
        assert!(matches!(header.validate(), Err(Error::Layout(_))));
        let (mut header, _) = tiny();
        header.phenomena.push(header.phenomena[0].clone());
        assert!(matches!(header.validate(), Err(Error::Layout(_))));
        let (mut header, _) = tiny();
        header.num_layers = 0;
        assert!(matches!(header.validate(), Err(Error::Layout(_))));
    }

    #[test]
    fn bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.actd");
        let (header, samples) = tiny();
        write_dump(&header, &samples, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[0..4].copy_from_slice(b"XXXX");
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_dump(&path), Err(Error::Format(_))));

        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_dump(&path), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn truncation_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.actd");
        let (header, samples) = tiny();
        write_dump(&header, &samples, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = bytes.len() - 10;
        std::fs::write(&path, &bytes[..cut]).unwrap();
        match read_dump(&path) {
            Err(Error::Truncated { offset, expected }) => {
                assert_eq!(offset as usize, cut);
                assert_eq!(expected, 10);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.actd");
        let (header, samples) = tiny();
        write_dump(&header, &samples, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_dump(&path), Err(Error::Format(_))));
    }

    fn patch_value(path: &Path, header: &DumpHeader, sample: usize, value_index: usize, v: f32) {
        let mut bytes = std::fs::read(path).unwrap();
        let start = 12 + header.to_json_bytes().unwrap().len() + sample * header.matrix_len() * 8 + value_index * 4;
        bytes[start..start + 4].copy_from_slice(&v.to_le_bytes());
        std::fs::write(path, &bytes).unwrap();
    }

    #[test]
    fn nan_is_data_error_naming_pair() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.actd");
        let (header, samples) = tiny();
        write_dump(&header, &samples, &path).unwrap();
        patch_value(&path, &header, 1, 4, f32::NAN);
        match read_dump(&path) {
            Err(Error::Data(msg)) => assert!(msg.contains("agr:1") && msg.contains("layer 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let report = validate_dump(&path).unwrap();
        assert!(!report.passed);
        assert_eq!(report.non_finite_values, 1);
        assert_eq!(report.non_finite_locations[0], Defect { pair_id: "agr:1".into(), layer: 1, sentence: "g" });
    }

    #[test]
    fn validation_reports_zero_rows_as_warning() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.actd");
        let (header, mut samples) = tiny();
        write_dump(&header, &samples, &path).unwrap();
        let clean = validate_dump(&path).unwrap();
        assert!(clean.passed);
        assert_eq!(clean.zero_norm_embeddings + clean.non_finite_values, 0);

        samples[0].h_u[3..6].fill(0.0);
        write_dump(&header, &samples, &path).unwrap();
        let before = std::fs::read(&path).unwrap();
        let report = validate_dump(&path).unwrap();
        assert!(report.passed);
        assert_eq!(report.zero_norm_embeddings, 1);
        assert_eq!(report.zero_norm_locations[0].layer, 1);
        assert!(!report.warnings.is_empty());
        assert_eq!(before, std::fs::read(&path).unwrap());
    }

    #[test]
    fn validate_missing_file_is_io_error() {
        assert!(matches!(validate_dump("/nonexistent/x.actd"), Err(Error::NotFound { .. })));
    }

    #[test]
    fn logprob_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lp.jsonl");
        std::fs::write(
            &path,
            "{\"header\": {\"bos\": false}}\n{\"pair_id\":\"p1\", \"g_logprob_sum\":-10.0, \"g_token_count\":5, \"u_logprob_sum\":-12.0, \"u_token_count\":5}\n\n",
        )
        .unwrap();
        let recs = read_logprobs(&path).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].pair_id, "p1");
        assert_eq!(recs[0].g_logprob_sum, -10.0);
        assert_eq!(recs[0].u_token_count, 5);

        std::fs::write(&path, "").unwrap();
        assert!(read_logprobs(&path).unwrap().is_empty());

        std::fs::write(&path, "{\"pair_id\":\"p1\",\"g_logprob_sum\":-1,\"g_token_count\":0,\"u_logprob_sum\":-1,\"u_token_count\":1}\n").unwrap();
        assert!(matches!(read_logprobs(&path), Err(Error::Data(_))));

        std::fs::write(&path, "\n{\"pair_id\":\"p1\",\"g_token_count\":1,\"u_logprob_sum\":-1,\"u_token_count\":1}\n").unwrap();
        match read_logprobs(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn metadata_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.jsonl");
        let rows = vec![PairMetadata {
            pair_id: "agr:0".into(),
            phenomenon: "agr".into(),
            sentence_good: "The author laughs.".into(),
            sentence_bad: "The author laugh.".into(),
        }];
        write_jsonl(&rows, &path).unwrap();
        assert_eq!(read_metadata(&path).unwrap(), rows);
    }
}
