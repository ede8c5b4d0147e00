//! Neuron-level specialization.
//!
//! A neuron is one coordinate `(layer, dim)` of the pooled representation.
//! Its response to sample `i` is `Δh_i[layer][dim]`. Responses are
//! standardized per neuron across every retained sample of every phenomenon
//! (population mean and standard deviation); the within-phenomenon
//! consistency is the mean product of standardized responses over unordered
//! sample pairs of that phenomenon. Distinctiveness is the z-score of that
//! consistency against the other phenomena's consistencies for the same
//! neuron.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Backend;
use crate::ssi::DeltaSet;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct NeuronId {
    pub layer: usize,
    pub dim: usize,
}

impl NeuronId {
    pub fn new(layer: usize, dim: usize) -> Self {
        NeuronId { layer, dim }
    }

    pub fn from_index(index: usize, hidden_dim: usize) -> Self {
        NeuronId { layer: index / hidden_dim, dim: index % hidden_dim }
    }

    pub fn index(self, hidden_dim: usize) -> usize {
        self.layer * hidden_dim + self.dim
    }
}

impl From<(usize, usize)> for NeuronId {
    fn from((layer, dim): (usize, usize)) -> Self {
        NeuronId { layer, dim }
    }
}

impl From<NeuronId> for (usize, usize) {
    fn from(n: NeuronId) -> Self {
        (n.layer, n.dim)
    }
}

/// How a neuron's within-phenomenon consistency is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConsistencyStrategy {
    /// Mean pairwise product of globally standardized responses.
    #[default]
    StandardizedPairProduct,
}

/// Consistency of every neuron for every phenomenon.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyMatrix {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub phenomena: Vec<String>,
    /// `values[p]` is `None` for phenomena with fewer than two samples;
    /// otherwise one value per neuron in `NeuronId::index` order.
    pub values: Vec<Option<Vec<f64>>>,
    /// Neurons with zero variance across all samples (consistency 0).
    pub zero_variance: Vec<NeuronId>,
}

impl ConsistencyMatrix {
    pub fn universe(&self) -> usize {
        self.num_layers * self.hidden_dim
    }

    fn index_of(&self, phenomenon: &str) -> Result<usize> {
        self.phenomena
            .iter()
            .position(|p| p == phenomenon)
            .ok_or_else(|| Error::Config(format!("unknown phenomenon {phenomenon:?}")))
    }
}

struct ChunkStats {
    /// [p][neuron in chunk]
    sums: Vec<Vec<f64>>,
    centered_sq: Vec<Vec<f64>>,
    mean: Vec<f64>,
    sd: Vec<f64>,
}

fn chunk_stats(deltas: &DeltaSet, range: std::ops::Range<usize>) -> ChunkStats {
    let k = deltas.phenomena.len();
    let w = range.len();
    let total: usize = (0..k).map(|p| deltas.len(p)).sum();

    let mut sums = vec![vec![0.0; w]; k];
    for (p, acc) in sums.iter_mut().enumerate() {
        for i in 0..deltas.len(p) {
            let row = &deltas.sample(p, i)[range.clone()];
            for (a, &x) in acc.iter_mut().zip(row) {
                *a += x;
            }
        }
    }
    let mean: Vec<f64> = (0..w)
        .map(|j| sums.iter().map(|s| s[j]).fold(0.0, |a, b| a + b) / total as f64)
        .collect();

    let mut centered_sq = vec![vec![0.0; w]; k];
    for (p, acc) in centered_sq.iter_mut().enumerate() {
        for i in 0..deltas.len(p) {
            let row = &deltas.sample(p, i)[range.clone()];
            for ((a, &x), &m) in acc.iter_mut().zip(row).zip(&mean) {
                *a += (x - m) * (x - m);
            }
        }
    }
    let sd: Vec<f64> = (0..w)
        .map(|j| (centered_sq.iter().map(|s| s[j]).fold(0.0, |a, b| a + b) / total as f64).sqrt())
        .collect();
    ChunkStats { sums, centered_sq, mean, sd }
}

fn is_zero_spread(sd: f64, mean: f64) -> bool {
    sd == 0.0 || sd <= 1e-12 * mean.abs()
}

pub fn consistency_matrix(deltas: &DeltaSet, strategy: ConsistencyStrategy, backend: Backend) -> Result<ConsistencyMatrix> {
    let ConsistencyStrategy::StandardizedPairProduct = strategy;
    let k = deltas.phenomena.len();
    let universe = deltas.num_layers * deltas.hidden_dim;
    if deltas.is_empty() {
        return Err(Error::Domain("no retained samples".into()));
    }

    let parts = backend.map_chunks(universe, |range| {
        let st = chunk_stats(deltas, range.clone());
        let mut values = vec![vec![0.0; range.len()]; k];
        let mut zero = Vec::new();
        for j in 0..range.len() {
            if is_zero_spread(st.sd[j], st.mean[j]) {
                zero.push(range.start + j);
                continue;
            }
            for p in 0..k {
                let n = deltas.len(p) as f64;
                if n < 2.0 {
                    continue;
                }
                // S = Σ z_i, Q = Σ z_i², z_i = (x_i − m) / sd.
                let s = (st.sums[p][j] - n * st.mean[j]) / st.sd[j];
                let q = st.centered_sq[p][j] / (st.sd[j] * st.sd[j]);
                values[p][j] = (s * s - q) / (n * (n - 1.0));
            }
        }
        (values, zero)
    });

    let mut values: Vec<Option<Vec<f64>>> = (0..k)
        .map(|p| deltas.is_computable(p).then(|| Vec::with_capacity(universe)))
        .collect();
    let mut zero_variance = Vec::new();
    for (chunk, zero) in parts {
        for (p, v) in chunk.into_iter().enumerate() {
            if let Some(dst) = values[p].as_mut() {
                dst.extend_from_slice(&v);
            }
        }
        zero_variance.extend(zero.into_iter().map(|j| NeuronId::from_index(j, deltas.hidden_dim)));
    }
    Ok(ConsistencyMatrix {
        num_layers: deltas.num_layers,
        hidden_dim: deltas.hidden_dim,
        phenomena: deltas.phenomena.iter().map(|p| p.name.clone()).collect(),
        values,
        zero_variance,
    })
}

/// Consistency of every neuron for phenomenon `p`, indexed by
/// [`NeuronId::index`].
pub fn neuron_consistency(deltas: &DeltaSet, p: usize) -> Result<Vec<f64>> {
    if p >= deltas.phenomena.len() {
        return Err(Error::Config(format!("phenomenon index {p} out of range")));
    }
    let m = consistency_matrix(deltas, ConsistencyStrategy::default(), Backend::default())?;
    m.values[p].clone().ok_or_else(|| {
        Error::Domain(format!("phenomenon {:?} has fewer than 2 retained samples", deltas.phenomena[p].name))
    })
}

/// z-score of each neuron's consistency for `phenomenon` against the other
/// computable phenomena. `None` where the background has zero spread.
pub fn distinctiveness_z(m: &ConsistencyMatrix, phenomenon: &str) -> Result<Vec<Option<f64>>> {
    let p = m.index_of(phenomenon)?;
    let own = m.values[p]
        .as_ref()
        .ok_or_else(|| Error::Domain(format!("phenomenon {phenomenon:?} has fewer than 2 retained samples")))?;
    let background: Vec<&Vec<f64>> =
        m.values.iter().enumerate().filter(|&(q, _)| q != p).filter_map(|(_, v)| v.as_ref()).collect();
    if background.len() < 2 {
        return Err(Error::Config(format!(
            "distinctiveness needs >= 3 computable phenomena ({} available)",
            background.len() + 1
        )));
    }
    let mut bg = vec![0.0; background.len()];
    Ok((0..m.universe())
        .map(|j| {
            for (b, v) in bg.iter_mut().zip(&background) {
                *b = v[j];
            }
            let mean = stats::mean(&bg);
            let sd = stats::sample_sd(&bg);
            (!is_zero_spread(sd, mean)).then(|| (own[j] - mean) / sd)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NeuronScore {
    pub neuron: NeuronId,
    pub consistency: f64,
    pub z: Option<f64>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronSelection {
    pub phenomenon: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub quantile: f64,
    pub z_threshold: f64,
    pub scores: Vec<NeuronScore>,
    pub selected_set: BTreeSet<NeuronId>,
    pub zero_variance: Vec<NeuronId>,
    pub undefined_z: Vec<NeuronId>,
}

pub const DEFAULT_QUANTILE: f64 = 0.25;
pub const DEFAULT_Z: f64 = 2.0;

/// Number of neurons in the top `quantile` of a universe of `n`.
pub fn top_count(quantile: f64, n: usize) -> usize {
    (((quantile * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Selects neurons in the top `quantile` of consistency whose
/// distinctiveness exceeds `z_threshold`. Ranking ties are broken by
/// ascending neuron id.
pub fn select_from(m: &ConsistencyMatrix, phenomenon: &str, quantile: f64, z_threshold: f64) -> Result<NeuronSelection> {
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::Config(format!("quantile must lie in [0, 1], got {quantile}")));
    }
    if z_threshold.is_nan() {
        return Err(Error::Config("z threshold is NaN".into()));
    }
    let p = m.index_of(phenomenon)?;
    let z = distinctiveness_z(m, phenomenon)?;
    let c = m.values[p].as_ref().expect("checked by distinctiveness_z");
    let n = m.universe();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| c[b].total_cmp(&c[a]).then(a.cmp(&b)));
    let mut in_top = vec![false; n];
    for &j in &order[..top_count(quantile, n)] {
        in_top[j] = true;
    }
    let zero: BTreeSet<usize> = m.zero_variance.iter().map(|id| id.index(m.hidden_dim)).collect();

    let mut scores = Vec::with_capacity(n);
    let mut selected_set = BTreeSet::new();
    let mut undefined_z = Vec::new();
    for j in 0..n {
        let neuron = NeuronId::from_index(j, m.hidden_dim);
        if z[j].is_none() {
            undefined_z.push(neuron);
        }
        let selected = in_top[j] && !zero.contains(&j) && z[j].is_some_and(|v| v > z_threshold);
        if selected {
            selected_set.insert(neuron);
        }
        scores.push(NeuronScore { neuron, consistency: c[j], z: z[j], selected });
    }
    Ok(NeuronSelection {
        phenomenon: phenomenon.to_string(),
        num_layers: m.num_layers,
        hidden_dim: m.hidden_dim,
        quantile,
        z_threshold,
        scores,
        selected_set,
        zero_variance: m.zero_variance.clone(),
        undefined_z,
    })
}

pub fn select_neurons(deltas: &DeltaSet, p: usize, quantile: f64, z_threshold: f64) -> Result<NeuronSelection> {
    let name = deltas
        .phenomena
        .get(p)
        .map(|x| x.name.clone())
        .ok_or_else(|| Error::Config(format!("phenomenon index {p} out of range")))?;
    let m = consistency_matrix(deltas, ConsistencyStrategy::default(), Backend::default())?;
    select_from(&m, &name, quantile, z_threshold)
}

/// Selections for every computable phenomenon.
pub fn select_all(deltas: &DeltaSet, quantile: f64, z_threshold: f64, backend: Backend) -> Result<Vec<NeuronSelection>> {
    let m = consistency_matrix(deltas, ConsistencyStrategy::default(), backend)?;
    m.phenomena
        .iter()
        .zip(&m.values)
        .filter(|(_, v)| v.is_some())
        .map(|(name, _)| select_from(&m, name, quantile, z_threshold))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Overlap {
    /// 100 · |A ∩ B| / |A ∪ B|.
    pub jaccard_percent: f64,
    /// 100 · |A ∩ B| / |A|.
    pub a_in_b_percent: f64,
    /// 100 · |A ∩ B| / |B|.
    pub b_in_a_percent: f64,
    pub intersection: usize,
    pub union: usize,
    /// Both sets were empty; all percentages are reported as 0.
    pub both_empty: bool,
}

pub fn neuron_overlap(a: &NeuronSelection, b: &NeuronSelection) -> Result<Overlap> {
    if (a.num_layers, a.hidden_dim) != (b.num_layers, b.hidden_dim) {
        return Err(Error::Config(format!(
            "neuron universes differ ({} x {} vs {} x {})",
            a.num_layers, a.hidden_dim, b.num_layers, b.hidden_dim
        )));
    }
    Ok(overlap_sets(&a.selected_set, &b.selected_set))
}

/// Overlap of two neuron sets drawn from the same universe.
pub fn overlap_sets(a: &BTreeSet<NeuronId>, b: &BTreeSet<NeuronId>) -> Overlap {
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    let pct = |num: usize, den: usize| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
    if union == 0 {
        log::warn!("neuron overlap of two empty selections is reported as 0%");
    }
    Overlap {
        jaccard_percent: pct(inter, union),
        a_in_b_percent: pct(inter, a.len()),
        b_in_a_percent: pct(inter, b.len()),
        intersection: inter,
        union,
        both_empty: union == 0,
    }
}

/// Serialized form of a selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub phenomenon: String,
    pub quantile: f64,
    pub z_threshold: f64,
    pub selected: Vec<SelectedNeuron>,
    pub flags: SelectionFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedNeuron {
    pub layer: usize,
    pub dim: usize,
    pub consistency: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectionFlags {
    pub zero_variance: Vec<NeuronId>,
    pub undefined_z: Vec<NeuronId>,
}

impl NeuronSelection {
    pub fn to_record(&self) -> SelectionRecord {
        let selected = self
            .scores
            .iter()
            .filter(|s| s.selected)
            .map(|s| SelectedNeuron {
                layer: s.neuron.layer,
                dim: s.neuron.dim,
                consistency: s.consistency,
                z: s.z.expect("selected neurons have a defined z"),
            })
            .collect();
        SelectionRecord {
            phenomenon: self.phenomenon.clone(),
            quantile: self.quantile,
            z_threshold: self.z_threshold,
            selected,
            flags: SelectionFlags { zero_variance: self.zero_variance.clone(), undefined_z: self.undefined_z.clone() },
        }
    }
}

impl SelectionRecord {
    pub fn neuron_set(&self) -> BTreeSet<NeuronId> {
        self.selected.iter().map(|s| NeuronId::new(s.layer, s.dim)).collect()
    }
}

/// File written by the `neurons` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionFile {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub selections: Vec<SelectionRecord>,
    pub summary: SelectionSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub counts: Vec<usize>,
    pub mean_selected: f64,
    /// Sample SD over phenomena; 0 with fewer than two phenomena.
    pub sd_selected: f64,
}

impl SelectionFile {
    pub fn new(num_layers: usize, hidden_dim: usize, selections: &[NeuronSelection]) -> Self {
        let counts: Vec<usize> = selections.iter().map(|s| s.selected_set.len()).collect();
        let xs: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let mean_selected = if xs.is_empty() { 0.0 } else { stats::mean(&xs) };
        let sd_selected = if xs.len() < 2 { 0.0 } else { stats::sample_sd(&xs) };
        SelectionFile {
            num_layers,
            hidden_dim,
            selections: selections.iter().map(NeuronSelection::to_record).collect(),
            summary: SelectionSummary { counts, mean_selected, sd_selected },
        }
    }
}
