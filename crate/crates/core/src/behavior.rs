//! Grammaticality-judgment accuracy, perplexity and ablation statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt;
use crate::neurons::NeuronId;
use crate::rng;
use crate::stats::{self, Alternative};
use crate::store::LogProbRecord;

/// Mean log-probability per token.
pub fn mean_logprob(sum_logprob: f64, token_count: u64) -> Result<f64> {
    if token_count == 0 {
        return Err(Error::Domain("token count must be >= 1".into()));
    }
    if !sum_logprob.is_finite() {
        return Err(Error::Domain(format!("log-probability sum is not finite ({sum_logprob})")));
    }
    Ok(sum_logprob / token_count as f64)
}

/// Per-sentence perplexity, `exp(−MP)`.
pub fn perplexity(sum_logprob: f64, token_count: u64) -> Result<f64> {
    Ok((-mean_logprob(sum_logprob, token_count)?).exp())
}

/// Phenomenon label of a record. Falls back to the `pair_id` prefix before
/// the last `:` when the record carries no label.
pub fn phenomenon_of(rec: &LogProbRecord) -> &str {
    if !rec.phenomenon.is_empty() {
        return &rec.phenomenon;
    }
    rec.pair_id.rsplit_once(':').map(|(p, _)| p).unwrap_or("")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairCounts {
    pub n_pairs: u64,
    pub n_correct: u64,
    pub n_ties: u64,
}

impl PairCounts {
    fn accuracy(&self) -> f64 {
        self.n_correct as f64 / self.n_pairs as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyResult {
    pub overall: f64,
    pub per_phenomenon: BTreeMap<String, f64>,
    pub n_pairs: u64,
    pub n_ties: u64,
    pub counts: BTreeMap<String, PairCounts>,
}

pub const ACCURACY_CSV_COLUMNS: [&str; 5] = ["phenomenon", "accuracy", "n_pairs", "n_correct", "n_ties"];

/// A pair is correct iff `MP(g) > MP(u)`; equality is a tie and counts as
/// incorrect.
pub fn accuracy(records: &[LogProbRecord]) -> Result<AccuracyResult> {
    if records.is_empty() {
        return Err(Error::Domain("accuracy needs at least one record".into()));
    }
    let mut total = PairCounts::default();
    let mut counts: BTreeMap<String, PairCounts> = BTreeMap::new();
    for rec in records {
        let g = mean_logprob(rec.g_logprob_sum, rec.g_token_count)?;
        let u = mean_logprob(rec.u_logprob_sum, rec.u_token_count)?;
        let entry = counts.entry(phenomenon_of(rec).to_string()).or_default();
        for c in [&mut total, entry] {
            c.n_pairs += 1;
            if g > u {
                c.n_correct += 1;
            } else if g == u {
                c.n_ties += 1;
            }
        }
    }
    Ok(AccuracyResult {
        overall: total.accuracy(),
        per_phenomenon: counts.iter().map(|(k, c)| (k.clone(), c.accuracy())).collect(),
        n_pairs: total.n_pairs,
        n_ties: total.n_ties,
        counts,
    })
}

impl AccuracyResult {
    pub fn correct(&self) -> u64 {
        self.counts.values().map(|c| c.n_correct).sum()
    }

    /// One row per phenomenon followed by an `overall` row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(ACCURACY_CSV_COLUMNS)?;
        for (name, c) in &self.counts {
            w.write_record([name.clone(), fmt::num(c.accuracy()), c.n_pairs.to_string(), c.n_correct.to_string(), c.n_ties.to_string()])?;
        }
        w.write_record([
            "overall".to_string(),
            fmt::num(self.overall),
            self.n_pairs.to_string(),
            self.correct().to_string(),
            self.n_ties.to_string(),
        ])?;
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }
}

/// Targeted and random ablation masks of equal size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMaskSet {
    pub seed: u64,
    pub targeted: Vec<NeuronId>,
    pub random: Vec<NeuronId>,
}

const MASK_STREAM: u64 = 0x6d61_736b;

/// Draws a random mask of the same size as `targeted`, uniformly without
/// replacement from the neurons not in `targeted`.
pub fn make_masks(targeted: &BTreeSet<NeuronId>, num_layers: usize, hidden_dim: usize, rng_seed: u64) -> Result<AblationMaskSet> {
    let universe = num_layers * hidden_dim;
    if targeted.is_empty() {
        return Err(Error::Config("targeted selection is empty".into()));
    }
    if let Some(bad) = targeted.iter().find(|n| n.layer >= num_layers || n.dim >= hidden_dim) {
        return Err(Error::Config(format!(
            "neuron ({}, {}) lies outside the {num_layers} x {hidden_dim} universe",
            bad.layer, bad.dim
        )));
    }
    let k = targeted.len();
    let complement: Vec<usize> =
        (0..universe).filter(|&j| !targeted.contains(&NeuronId::from_index(j, hidden_dim))).collect();
    if complement.len() < k {
        return Err(Error::Config(format!(
            "complement has {} neurons, fewer than the {k} needed for a disjoint random mask",
            complement.len()
        )));
    }
    let mut rng = rng::stream(rng_seed, &[MASK_STREAM]);
    let mut random: Vec<NeuronId> = rand::seq::index::sample(&mut rng, complement.len(), k)
        .into_iter()
        .map(|i| NeuronId::from_index(complement[i], hidden_dim))
        .collect();
    random.sort_unstable();
    Ok(AblationMaskSet { seed: rng_seed, targeted: targeted.iter().copied().collect(), random })
}

/// Paired comparison of perplexity increases for one side of the pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationSide {
    pub n_sentences: u64,
    pub mean_ppl_delta_targeted: f64,
    pub mean_ppl_delta_random: f64,
    /// Mean of `ΔPPL_targeted − ΔPPL_random`.
    pub mean_gap: f64,
    pub paired_t: f64,
    pub df: u64,
    /// One-sided, alternative: targeted > random.
    pub p_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationReport {
    /// Statistics over the grammatical sentences.
    #[serde(flatten)]
    pub grammatical: AblationSide,
    pub ungrammatical: AblationSide,
}

pub const ABLATION_CSV_COLUMNS: [&str; 8] =
    ["sentences", "n_sentences", "mean_ppl_delta_targeted", "mean_ppl_delta_random", "mean_gap", "t", "df", "p_value"];

fn index_by_pair(records: &[LogProbRecord], label: &str) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if map.insert(r.pair_id.clone(), i).is_some() {
            return Err(Error::Alignment(format!("{label} records repeat pair_id {:?}", r.pair_id)));
        }
    }
    Ok(map)
}

fn missing_ids<'a>(want: impl Iterator<Item = &'a String>, have: &HashMap<String, usize>) -> Vec<&'a str> {
    want.filter(|id| !have.contains_key(*id)).map(String::as_str).collect()
}

fn describe(ids: &[&str]) -> String {
    const SHOW: usize = 5;
    let shown: Vec<String> = ids.iter().take(SHOW).map(|s| format!("{s:?}")).collect();
    if ids.len() > SHOW {
        format!("{} (and {} more)", shown.join(", "), ids.len() - SHOW)
    } else {
        shown.join(", ")
    }
}

fn side(deltas_t: &[f64], deltas_r: &[f64]) -> Result<AblationSide> {
    let test = stats::paired_t(deltas_t, deltas_r, Alternative::Greater)?;
    let gaps: Vec<f64> = deltas_t.iter().zip(deltas_r).map(|(a, b)| a - b).collect();
    Ok(AblationSide {
        n_sentences: deltas_t.len() as u64,
        mean_ppl_delta_targeted: stats::mean(deltas_t),
        mean_ppl_delta_random: stats::mean(deltas_r),
        mean_gap: stats::mean(&gaps),
        paired_t: test.t,
        df: test.df as u64,
        p_value: test.p,
    })
}

/// Per-sentence `ΔPPL = PPL_after − PPL_baseline` under each ablation,
/// compared with a one-sided paired t-test across sentences.
pub fn ablation_report(baseline: &[LogProbRecord], after_targeted: &[LogProbRecord], after_random: &[LogProbRecord]) -> Result<AblationReport> {
    let base_idx = index_by_pair(baseline, "baseline")?;
    let mut aligned = Vec::with_capacity(2);
    for (label, recs) in [("targeted", after_targeted), ("random", after_random)] {
        let idx = index_by_pair(recs, label)?;
        let missing = missing_ids(baseline.iter().map(|r| &r.pair_id), &idx);
        if !missing.is_empty() {
            return Err(Error::Alignment(format!("{label} records lack pair_ids {}", describe(&missing))));
        }
        let extra = missing_ids(recs.iter().map(|r| &r.pair_id), &base_idx);
        if !extra.is_empty() {
            return Err(Error::Alignment(format!("baseline records lack pair_ids {} present in {label}", describe(&extra))));
        }
        aligned.push(baseline.iter().map(|r| &recs[idx[&r.pair_id]]).collect::<Vec<_>>());
    }

    let n = baseline.len();
    let mut g = [Vec::with_capacity(n), Vec::with_capacity(n)];
    let mut u = [Vec::with_capacity(n), Vec::with_capacity(n)];
    for (k, after) in aligned.iter().enumerate() {
        for (b, a) in baseline.iter().zip(after) {
            g[k].push(perplexity(a.g_logprob_sum, a.g_token_count)? - perplexity(b.g_logprob_sum, b.g_token_count)?);
            u[k].push(perplexity(a.u_logprob_sum, a.u_token_count)? - perplexity(b.u_logprob_sum, b.u_token_count)?);
        }
    }
    if g.iter().chain(&u).flatten().any(|v| !v.is_finite()) {
        return Err(Error::Data("perplexity overflow: a per-token log-probability is too negative".into()));
    }
    Ok(AblationReport { grammatical: side(&g[0], &g[1])?, ungrammatical: side(&u[0], &u[1])? })
}

impl AblationReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(ABLATION_CSV_COLUMNS)?;
        for (label, s) in [("grammatical", &self.grammatical), ("ungrammatical", &self.ungrammatical)] {
            w.write_record([
                label.to_string(),
                s.n_sentences.to_string(),
                fmt::num(s.mean_ppl_delta_targeted),
                fmt::num(s.mean_ppl_delta_random),
                fmt::num(s.mean_gap),
                fmt::num(s.paired_t),
                s.df.to_string(),
                fmt::num(s.p_value),
            ])?;
        }
        let mut inner = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        inner.flush().map_err(|e| Error::io(path, e))
    }
}
