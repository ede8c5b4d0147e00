//! Activation differences and the Syntactic Sensitivity Index.
//!
//! For phenomenon `p` and layer `l`, with `Δh_i = h_g,i − h_u,i`:
//!
//! * intra = mean cosine over unordered pairs of Δh within `p`
//! * inter = mean cosine between Δh in `p` and Δh of every other phenomenon
//! * ssi   = intra − inter
//!
//! Exact values are computed from per-cell sums of unit vectors: for unit
//! vectors `û_i` with sum `U`, `Σ_{i<j} û_i·û_j = (|U|² − Σ|û_i|²) / 2`, and
//! the cross-group sum is `U_p · U_rest`. This is O(n·D) per cell instead of
//! O(n²·D). The explicit pairwise kernel is kept for sampled estimates and
//! as a second route.

use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{ordered_sum, Backend, CHUNK};
use crate::fmt;
use crate::rng;
use crate::store::{ActivationDump, ZERO_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationPolicy {
    /// Scale each layer row of h_g and h_u to unit L2 norm, then subtract.
    #[default]
    NormalizeThenSubtract,
    SubtractRaw,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExcludedSample {
    pub pair_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhenomenonDeltas {
    pub name: String,
    pub pair_ids: Vec<String>,
    /// Retained samples, `[sample][layer][dim]` row-major.
    pub values: Vec<f64>,
}

/// Δh vectors grouped by phenomenon.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSet {
    pub model_id: String,
    pub seed: u64,
    pub checkpoint_tokens: u64,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub phenomena: Vec<PhenomenonDeltas>,
    pub excluded_samples: Vec<ExcludedSample>,
    /// (pair_id, layer) rows zeroed because h_g or h_u had zero norm.
    pub degenerate_rows: Vec<(String, usize)>,
}

impl DeltaSet {
    /// Builds a set directly from Δh vectors (`[sample][layer][dim]` per
    /// phenomenon). All-zero samples are excluded as in [`compute_deltas`].
    pub fn from_vectors(
        num_layers: usize,
        hidden_dim: usize,
        groups: Vec<(String, Vec<Vec<f64>>)>,
    ) -> Result<Self> {
        let stride = num_layers * hidden_dim;
        let mut excluded = Vec::new();
        let mut phenomena = Vec::with_capacity(groups.len());
        for (name, samples) in groups {
            let mut values = Vec::with_capacity(samples.len() * stride);
            let mut pair_ids = Vec::with_capacity(samples.len());
            for (i, s) in samples.into_iter().enumerate() {
                if s.len() != stride {
                    return Err(Error::Layout(format!(
                        "{name} sample {i} has {} values, expected {stride}",
                        s.len()
                    )));
                }
                let id = crate::store::default_pair_id(&name, i);
                if s.iter().all(|&v| v == 0.0) {
                    excluded.push(ExcludedSample { pair_id: id, reason: "zero difference at every layer".into() });
                    continue;
                }
                pair_ids.push(id);
                values.extend_from_slice(&s);
            }
            phenomena.push(PhenomenonDeltas { name, pair_ids, values });
        }
        Ok(DeltaSet {
            model_id: String::new(),
            seed: 0,
            checkpoint_tokens: 0,
            num_layers,
            hidden_dim,
            phenomena,
            excluded_samples: excluded,
            degenerate_rows: Vec::new(),
        })
    }

    pub fn stride(&self) -> usize {
        self.num_layers * self.hidden_dim
    }

    pub fn len(&self, p: usize) -> usize {
        self.phenomena[p].pair_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phenomena.iter().all(|p| p.pair_ids.is_empty())
    }

    pub fn is_computable(&self, p: usize) -> bool {
        self.len(p) >= 2
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.phenomena.iter().position(|p| p.name == name)
    }

    pub fn sample(&self, p: usize, i: usize) -> &[f64] {
        let s = self.stride();
        &self.phenomena[p].values[i * s..(i + 1) * s]
    }

    pub fn row(&self, p: usize, i: usize, layer: usize) -> &[f64] {
        let d = self.hidden_dim;
        &self.sample(p, i)[layer * d..(layer + 1) * d]
    }
}

pub fn compute_deltas(dump: &ActivationDump, policy: NormalizationPolicy) -> DeltaSet {
    compute_deltas_with(dump, policy, Backend::default())
}

pub fn compute_deltas_with(dump: &ActivationDump, policy: NormalizationPolicy, backend: Backend) -> DeltaSet {
    let h = &dump.header;
    let (layers, dim) = (h.num_layers, h.hidden_dim);

    let stride = layers * dim;
    let mut phenomena = Vec::with_capacity(h.phenomena.len());
    let mut excluded = Vec::new();
    let mut degenerate = Vec::new();
    for (pc, range) in h.phenomena.iter().zip(dump.phenomenon_ranges()) {
        let samples = &dump.samples[range];
        let mut values = vec![0.0f64; samples.len() * stride];
        let flags = backend.map_chunks_mut(&mut values, stride.max(1), |i, delta| {
            let s = &samples[i];
            let mut zeroed = Vec::new();
            for l in 0..layers {
                let g = s.g_layer(l, dim);
                let u = s.u_layer(l, dim);
                let out = &mut delta[l * dim..(l + 1) * dim];
                match policy {
                    NormalizationPolicy::NormalizeThenSubtract => {
                        let ng = norm_f32(g);
                        let nu = norm_f32(u);
                        if ng < ZERO_NORM_EPS || nu < ZERO_NORM_EPS {
                            zeroed.push(l);
                            continue;
                        }
                        for ((o, &a), &b) in out.iter_mut().zip(g).zip(u) {
                            *o = a as f64 / ng - b as f64 / nu;
                        }
                    }
                    NormalizationPolicy::SubtractRaw => {
                        for ((o, &a), &b) in out.iter_mut().zip(g).zip(u) {
                            *o = a as f64 - b as f64;
                        }
                    }
                }
            }
            let all_zero = delta.iter().all(|&v| v == 0.0);
            (zeroed, all_zero)
        });

        // Compact retained samples in place.
        let mut pair_ids = Vec::with_capacity(samples.len());
        let mut kept = 0;
        for (i, (zeroed, all_zero)) in flags.into_iter().enumerate() {
            let id = &samples[i].pair_id;
            degenerate.extend(zeroed.iter().map(|&l| (id.clone(), l)));
            if all_zero {
                let reason = if zeroed.len() == layers {
                    "zero-norm embedding at every layer"
                } else {
                    "zero difference at every layer"
                };
                excluded.push(ExcludedSample { pair_id: id.clone(), reason: reason.into() });
                continue;
            }
            if kept != i {
                values.copy_within(i * stride..(i + 1) * stride, kept * stride);
            }
            kept += 1;
            pair_ids.push(id.clone());
        }
        values.truncate(kept * stride);
        phenomena.push(PhenomenonDeltas { name: pc.name.clone(), pair_ids, values });
    }

    DeltaSet {
        model_id: h.model_id.clone(),
        seed: h.seed,
        checkpoint_tokens: h.checkpoint_tokens,
        num_layers: layers,
        hidden_dim: dim,
        phenomena,
        excluded_samples: excluded,
        degenerate_rows: degenerate,
    }
}

fn norm_f32(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators; the order is fixed, so results do not
    // depend on the caller.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = k * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Writes the unit vector of `v` into `out`; a zero vector stays zero.
/// Returns whether `v` was nonzero.
#[inline]
fn unit_into(v: &[f64], out: &mut [f64]) -> bool {
    let n = dot(v, v).sqrt();
    if n == 0.0 {
        out.fill(0.0);
        return false;
    }
    for (o, &x) in out.iter_mut().zip(v) {
        *o = x / n;
    }
    true
}

/// Seeded cap on the number of pairs averaged per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairSampling {
    pub cap: Option<u64>,
    pub seed: u64,
}

impl PairSampling {
    pub fn exact() -> Self {
        Self::default()
    }

    pub fn capped(cap: u64, seed: u64) -> Self {
        PairSampling { cap: Some(cap), seed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimilarityKernel {
    /// Exact means from per-cell unit-vector sums.
    #[default]
    UnitSum,
    /// Exact means from explicit enumeration of all pairs.
    Pairwise,
}

#[derive(Debug, Clone, Default)]
pub struct SsiOptions {
    pub sampling: PairSampling,
    pub kernel: SimilarityKernel,
    /// Restrict to these layers; all layers when `None`.
    pub layers: Option<Vec<usize>>,
    pub backend: Backend,
}

/// Mean cosine over a set of pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairMean {
    pub value: f64,
    pub n_pairs: u64,
}

const INTRA: u64 = 1;
const INTER: u64 = 2;

/// Unit vectors of one layer, all phenomena, concatenated in phenomenon order.
struct LayerUnits {
    dim: usize,
    offsets: Vec<usize>,
    units: Vec<f64>,
    nonzero: Vec<bool>,
}

impl LayerUnits {
    fn build(deltas: &DeltaSet, layer: usize) -> Self {
        let dim = deltas.hidden_dim;
        let mut offsets = Vec::with_capacity(deltas.phenomena.len() + 1);
        let mut total = 0;
        for p in 0..deltas.phenomena.len() {
            offsets.push(total);
            total += deltas.len(p);
        }
        offsets.push(total);
        let mut units = vec![0.0; total * dim];
        let mut nonzero = vec![false; total];
        let mut k = 0;
        for p in 0..deltas.phenomena.len() {
            for i in 0..deltas.len(p) {
                nonzero[k] = unit_into(deltas.row(p, i, layer), &mut units[k * dim..(k + 1) * dim]);
                k += 1;
            }
        }
        LayerUnits { dim, offsets, units, nonzero }
    }

    fn unit(&self, k: usize) -> &[f64] {
        &self.units[k * self.dim..(k + 1) * self.dim]
    }

    fn range(&self, p: usize) -> std::ops::Range<usize> {
        self.offsets[p]..self.offsets[p + 1]
    }

    fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Index of the `j`-th sample outside phenomenon `p`.
    fn complement_index(&self, p: usize, j: usize) -> usize {
        let r = self.range(p);
        if j < r.start {
            j
        } else {
            j + r.len()
        }
    }
}

/// Unit-vector sum of one phenomenon at one layer, chunked for a fixed
/// reduction order.
struct UnitSum {
    sum: Vec<f64>,
    sq_norms: f64,
}

fn unit_sum(units: &LayerUnits, p: usize) -> UnitSum {
    let r = units.range(p);
    let dim = units.dim;
    let mut sum = vec![0.0; dim];
    let mut sq_norms = 0.0;
    for chunk_start in r.clone().step_by(CHUNK) {
        let mut part = vec![0.0; dim];
        let mut part_sq = 0.0;
        for k in chunk_start..(chunk_start + CHUNK).min(r.end) {
            let u = units.unit(k);
            for (a, &b) in part.iter_mut().zip(u) {
                *a += b;
            }
            if units.nonzero[k] {
                part_sq += dot(u, u);
            }
        }
        for (a, b) in sum.iter_mut().zip(&part) {
            *a += b;
        }
        sq_norms += part_sq;
    }
    UnitSum { sum, sq_norms }
}

fn exact_unit_sum(units: &LayerUnits, sums: &[UnitSum], p: usize) -> (Option<PairMean>, Option<PairMean>) {
    let n = units.range(p).len() as u64;
    let intra = (n >= 2).then(|| {
        let s = &sums[p];
        let pairs = n * (n - 1) / 2;
        PairMean { value: ((dot(&s.sum, &s.sum) - s.sq_norms) / 2.0) / pairs as f64, n_pairs: pairs }
    });
    let others = (units.total() as u64) - n;
    let inter = (n >= 1 && others >= 1).then(|| {
        let mut rest = vec![0.0; units.dim];
        for (q, s) in sums.iter().enumerate() {
            if q != p {
                for (a, b) in rest.iter_mut().zip(&s.sum) {
                    *a += b;
                }
            }
        }
        let pairs = n * others;
        PairMean { value: dot(&sums[p].sum, &rest) / pairs as f64, n_pairs: pairs }
    });
    (intra, inter)
}

/// Decodes unordered pair index `k` (row-major over i < j) for `n` items.
fn decode_intra(k: u64, n: u64) -> (u64, u64) {
    // Row i starts at i*n - i*(i+1)/2.
    let start = |i: u64| i * n - i * (i + 1) / 2;
    let nf = n as f64;
    let kf = k as f64;
    let disc = (2.0 * nf - 1.0) * (2.0 * nf - 1.0) - 8.0 * kf;
    let mut i = (((2.0 * nf - 1.0) - disc.max(0.0).sqrt()) / 2.0).floor().max(0.0) as u64;
    i = i.min(n.saturating_sub(2));
    while i > 0 && start(i) > k {
        i -= 1;
    }
    while i + 1 < n - 1 && start(i + 1) <= k {
        i += 1;
    }
    (i, i + 1 + (k - start(i)))
}

/// Sums `f(k)` over `keys` in fixed chunks.
fn chunked_pair_sum<F>(backend: Backend, keys: &[u64], f: F) -> f64
where
    F: Fn(u64) -> f64 + Sync + Send,
{
    let parts = backend.map_chunks(keys.len(), |r| keys[r].iter().map(|&k| f(k)).fold(0.0, |a, b| a + b));
    ordered_sum(&parts)
}

fn sampled_keys(total: u64, cap: u64, seed: u64, p: usize, layer: usize, kind: u64) -> Vec<u64> {
    let mut rng = rng::stream(seed, &[p as u64, layer as u64, kind]);
    let amount = cap.min(total) as usize;
    let mut keys: Vec<u64> = index::sample(&mut rng, total as usize, amount).into_iter().map(|k| k as u64).collect();
    keys.sort_unstable();
    keys
}

fn intra_pairs(units: &LayerUnits, p: usize, layer: usize, sampling: &PairSampling, backend: Backend) -> Option<PairMean> {
    let r = units.range(p);
    let n = r.len() as u64;
    if n < 2 {
        return None;
    }
    let total = n * (n - 1) / 2;
    let base = r.start;
    let cos = |i: u64, j: u64| dot(units.unit(base + i as usize), units.unit(base + j as usize));
    match sampling.cap {
        Some(cap) if cap < total => {
            let keys = sampled_keys(total, cap, sampling.seed, p, layer, INTRA);
            let s = chunked_pair_sum(backend, &keys, |k| {
                let (i, j) = decode_intra(k, n);
                cos(i, j)
            });
            Some(PairMean { value: s / keys.len() as f64, n_pairs: keys.len() as u64 })
        }
        _ => {
            let parts = backend.map_range(n as usize, |i| {
                let i = i as u64;
                (i + 1..n).map(|j| cos(i, j)).fold(0.0, |a, b| a + b)
            });
            let s = ordered_sum(&parts);
            Some(PairMean { value: s / total as f64, n_pairs: total })
        }
    }
}

fn inter_pairs(units: &LayerUnits, p: usize, layer: usize, sampling: &PairSampling, backend: Backend) -> Option<PairMean> {
    let r = units.range(p);
    let n = r.len() as u64;
    let others = units.total() as u64 - n;
    if n == 0 || others == 0 {
        return None;
    }
    let total = n * others;
    let cos = |k: u64| {
        let i = r.start + (k / others) as usize;
        let j = units.complement_index(p, (k % others) as usize);
        dot(units.unit(i), units.unit(j))
    };
    match sampling.cap {
        Some(cap) if cap < total => {
            let keys = sampled_keys(total, cap, sampling.seed, p, layer, INTER);
            let s = chunked_pair_sum(backend, &keys, cos);
            Some(PairMean { value: s / keys.len() as f64, n_pairs: keys.len() as u64 })
        }
        _ => {
            let parts = backend.map_range(n as usize, |i| {
                let base = i as u64 * others;
                (0..others).map(|j| cos(base + j)).fold(0.0, |a, b| a + b)
            });
            Some(PairMean { value: ordered_sum(&parts) / total as f64, n_pairs: total })
        }
    }
}

fn check_cell(deltas: &DeltaSet, p: usize, layer: usize) -> Result<()> {
    if p >= deltas.phenomena.len() {
        return Err(Error::Config(format!("phenomenon index {p} out of range")));
    }
    if layer >= deltas.num_layers {
        return Err(Error::Config(format!("layer {layer} out of range (L = {})", deltas.num_layers)));
    }
    Ok(())
}

/// Mean cosine over unordered pairs within phenomenon `p` at `layer`.
/// `Ok(None)` marks an uncomputable cell (fewer than two retained samples).
pub fn intra_similarity(deltas: &DeltaSet, p: usize, layer: usize, sampling: &PairSampling) -> Result<Option<PairMean>> {
    check_cell(deltas, p, layer)?;
    let units = LayerUnits::build(deltas, layer);
    Ok(cell(&units, None, p, layer, sampling, SimilarityKernel::UnitSum, Backend::default()).0)
}

/// Mean cosine between phenomenon `p` and all other phenomena at `layer`.
pub fn inter_similarity(deltas: &DeltaSet, p: usize, layer: usize, sampling: &PairSampling) -> Result<Option<PairMean>> {
    check_cell(deltas, p, layer)?;
    let units = LayerUnits::build(deltas, layer);
    Ok(cell(&units, None, p, layer, sampling, SimilarityKernel::UnitSum, Backend::default()).1)
}

fn cell(
    units: &LayerUnits,
    sums: Option<&[UnitSum]>,
    p: usize,
    layer: usize,
    sampling: &PairSampling,
    kernel: SimilarityKernel,
    backend: Backend,
) -> (Option<PairMean>, Option<PairMean>) {
    let n = units.range(p).len() as u64;
    let others = units.total() as u64 - n;
    let capped = |total: u64| sampling.cap.is_some_and(|c| c < total);
    let use_sums = kernel == SimilarityKernel::UnitSum;

    let owned;
    let sums = match sums {
        Some(s) => s,
        None => {
            owned = (0..units.offsets.len() - 1).map(|q| unit_sum(units, q)).collect::<Vec<_>>();
            &owned
        }
    };
    let (exact_intra, exact_inter) = if use_sums { exact_unit_sum(units, sums, p) } else { (None, None) };

    let intra = if n >= 2 && (capped(n * (n - 1) / 2) || !use_sums) {
        intra_pairs(units, p, layer, sampling, backend)
    } else {
        exact_intra
    };
    let inter = if n >= 1 && others >= 1 && (capped(n * others) || !use_sums) {
        inter_pairs(units, p, layer, sampling, backend)
    } else {
        exact_inter
    };
    (intra.map(clamp_mean), inter.map(clamp_mean))
}

fn clamp_mean(m: PairMean) -> PairMean {
    debug_assert!(m.value.abs() <= 1.0 + 1e-9, "cosine mean out of range: {}", m.value);
    PairMean { value: m.value.clamp(-1.0, 1.0), ..m }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SsiEntry {
    pub phenomenon: String,
    pub layer: usize,
    pub intra: Option<f64>,
    pub inter: Option<f64>,
    pub ssi: Option<f64>,
    pub n_pairs_intra: u64,
    pub n_pairs_inter: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SsiTable {
    pub model_id: String,
    pub seed: u64,
    pub checkpoint_tokens: u64,
    pub phenomena: Vec<String>,
    pub layers: Vec<usize>,
    /// Phenomenon-major, layer-minor.
    pub entries: Vec<SsiEntry>,
}

pub const SSI_CSV_COLUMNS: [&str; 10] = [
    "model_id",
    "seed",
    "checkpoint_tokens",
    "phenomenon",
    "layer",
    "intra",
    "inter",
    "ssi",
    "n_pairs_intra",
    "n_pairs_inter",
];

impl SsiTable {
    pub fn get(&self, phenomenon: &str, layer: usize) -> Option<&SsiEntry> {
        let p = self.phenomena.iter().position(|n| n == phenomenon)?;
        let l = self.layers.iter().position(|&x| x == layer)?;
        self.entries.get(p * self.layers.len() + l)
    }

    pub fn ssi(&self, phenomenon: &str, layer: usize) -> Option<f64> {
        self.get(phenomenon, layer).and_then(|e| e.ssi)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(SSI_CSV_COLUMNS)?;
        for e in &self.entries {
            w.write_record([
                self.model_id.clone(),
                self.seed.to_string(),
                self.checkpoint_tokens.to_string(),
                e.phenomenon.clone(),
                e.layer.to_string(),
                fmt::opt(e.intra),
                fmt::opt(e.inter),
                fmt::opt(e.ssi),
                e.n_pairs_intra.to_string(),
                e.n_pairs_inter.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
        Ok(())
    }

    /// Reads a table written by [`SsiTable::write_csv`].
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(file);
        let headers = r.headers()?.clone();
        if headers.iter().ne(SSI_CSV_COLUMNS.iter().copied()) {
            return Err(Error::Format(format!("{}: unexpected SSI table columns", path.display())));
        }
        let mut table = SsiTable {
            model_id: String::new(),
            seed: 0,
            checkpoint_tokens: 0,
            phenomena: Vec::new(),
            layers: Vec::new(),
            entries: Vec::new(),
        };
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let bad = |field: &str| Error::Parse { line, message: format!("{}: invalid {field}", path.display()) };
            let int = |k: usize, field: &str| rec[k].parse::<u64>().map_err(|_| bad(field));
            let real = |k: usize, field: &str| fmt::parse_opt(&rec[k]).map_err(|_| bad(field));
            if i == 0 {
                table.model_id = rec[0].to_string();
                table.seed = int(1, "seed")?;
                table.checkpoint_tokens = int(2, "checkpoint_tokens")?;
            }
            let entry = SsiEntry {
                phenomenon: rec[3].to_string(),
                layer: int(4, "layer")? as usize,
                intra: real(5, "intra")?,
                inter: real(6, "inter")?,
                ssi: real(7, "ssi")?,
                n_pairs_intra: int(8, "n_pairs_intra")?,
                n_pairs_inter: int(9, "n_pairs_inter")?,
            };
            if !table.phenomena.contains(&entry.phenomenon) {
                table.phenomena.push(entry.phenomenon.clone());
            }
            if !table.layers.contains(&entry.layer) {
                table.layers.push(entry.layer);
            }
            table.entries.push(entry);
        }
        if table.entries.len() != table.phenomena.len() * table.layers.len() {
            return Err(Error::Format(format!("{}: table is not a full phenomenon x layer grid", path.display())));
        }
        Ok(table)
    }
}

pub fn compute_ssi(deltas: &DeltaSet, sampling: &PairSampling) -> Result<SsiTable> {
    compute_ssi_with(deltas, &SsiOptions { sampling: *sampling, ..Default::default() })
}

pub fn compute_ssi_with(deltas: &DeltaSet, opts: &SsiOptions) -> Result<SsiTable> {
    let computable = (0..deltas.phenomena.len()).filter(|&p| deltas.is_computable(p)).count();
    if computable < 2 {
        return Err(Error::Domain(format!(
            "SSI needs at least 2 phenomena with >= 2 retained samples ({computable} available)"
        )));
    }
    let layers: Vec<usize> = match &opts.layers {
        Some(ls) => {
            if let Some(&bad) = ls.iter().find(|&&l| l >= deltas.num_layers) {
                return Err(Error::Config(format!("layer {bad} out of range (L = {})", deltas.num_layers)));
            }
            ls.clone()
        }
        None => (0..deltas.num_layers).collect(),
    };
    let k = deltas.phenomena.len();

    // Cells are computed per layer; within a layer, phenomena run in
    // parallel and each pairwise sum is chunked over a fixed partition.
    let per_layer: Vec<Vec<(Option<PairMean>, Option<PairMean>)>> = layers
        .iter()
        .map(|&layer| {
            let units = LayerUnits::build(deltas, layer);
            let sums = opts.backend.map_range(k, |q| unit_sum(&units, q));
            opts.backend
                .map_range(k, |p| cell(&units, Some(&sums), p, layer, &opts.sampling, opts.kernel, opts.backend))
        })
        .collect();

    let mut entries = Vec::with_capacity(k * layers.len());
    for p in 0..k {
        for (li, &layer) in layers.iter().enumerate() {
            let (intra, inter) = per_layer[li][p];
            let ssi = match (intra, inter) {
                (Some(a), Some(b)) => Some(a.value - b.value),
                _ => None,
            };
            entries.push(SsiEntry {
                phenomenon: deltas.phenomena[p].name.clone(),
                layer,
                intra: intra.map(|m| m.value),
                inter: inter.map(|m| m.value),
                ssi,
                n_pairs_intra: intra.map_or(0, |m| m.n_pairs),
                n_pairs_inter: inter.map_or(0, |m| m.n_pairs),
            });
        }
    }
    Ok(SsiTable {
        model_id: deltas.model_id.clone(),
        seed: deltas.seed,
        checkpoint_tokens: deltas.checkpoint_tokens,
        phenomena: deltas.phenomena.iter().map(|p| p.name.clone()).collect(),
        layers,
        entries,
    })
}

/// Per-layer SSI averaged over phenomena.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerProfile {
    pub layers: Vec<usize>,
    /// `None` where no phenomenon was computable at that layer.
    pub values: Vec<Option<f64>>,
    /// Number of uncomputable (phenomenon, layer) entries skipped.
    pub skipped: usize,
}

impl LayerProfile {
    /// The profile as a dense vector, or an error naming the first gap.
    pub fn dense(&self) -> Result<Vec<f64>> {
        self.values
            .iter()
            .zip(&self.layers)
            .map(|(v, l)| v.ok_or_else(|| Error::Domain(format!("layer {l} has no computable phenomena"))))
            .collect()
    }
}

pub fn layer_profile(table: &SsiTable) -> LayerProfile {
    let nl = table.layers.len();
    let mut skipped = 0;
    let values = (0..nl)
        .map(|li| {
            let vals: Vec<f64> = (0..table.phenomena.len())
                .filter_map(|p| {
                    let v = table.entries[p * nl + li].ssi;
                    if v.is_none() {
                        skipped += 1;
                    }
                    v
                })
                .collect();
            (!vals.is_empty()).then(|| ordered_sum(&vals) / vals.len() as f64)
        })
        .collect();
    LayerProfile { layers: table.layers.clone(), values, skipped }
}
