//! Synthetic activation dumps with planted, known structure.
//!
//! Each sample's difference vector is built first,
//! `Δh = signal_scale · u_p + σ · g + planted`, and then split into unit-norm
//! `h_g`, `h_u` whose normalized difference is `c · Δh` for one dump-wide
//! constant `c` (reported as `delta_scale`). Cosines and per-neuron
//! standardized responses are invariant to that constant.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Backend;
use crate::neurons::NeuronId;
use crate::rng::{self, Gaussian};
use crate::store::{ActivationDump, DumpHeader, Normalization, PhenomenonCount, SamplePair};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignatureMode {
    /// Distinct standard basis vectors per phenomenon (per layer).
    Orthogonal,
    /// Independent Gaussian directions, normalized.
    RandomUnit,
    /// Unit vectors with pairwise cosine `cos θ`, `0 ≤ θ ≤ 90°`.
    SharedAngle { theta_degrees: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedSet {
    pub neurons: Vec<NeuronId>,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleStep {
    pub token_count: u64,
    pub signal_scale: f64,
}

fn default_signal_scale() -> f64 {
    1.0
}

fn default_model_id() -> String {
    "synthetic".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub phenomena: usize,
    pub samples_per_phenomenon: usize,
    pub layers: usize,
    pub dim: usize,
    pub signature_mode: SignatureMode,
    pub noise_sigma: f64,
    #[serde(default = "default_signal_scale")]
    pub signal_scale: f64,
    /// Keyed by phenomenon name (see [`phenomenon_name`]).
    #[serde(default)]
    pub planted_neurons: BTreeMap<String, PlantedSet>,
    pub rng_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_schedule: Option<Vec<ScheduleStep>>,
    #[serde(default = "default_model_id")]
    pub model_id: String,
    #[serde(default)]
    pub checkpoint_tokens: u64,
}

pub fn phenomenon_name(p: usize) -> String {
    format!("phenomenon_{p:02}")
}

const SIGNATURE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

impl SynthConfig {
    pub fn new(phenomena: usize, samples: usize, layers: usize, dim: usize, mode: SignatureMode, sigma: f64, seed: u64) -> Self {
        SynthConfig {
            phenomena,
            samples_per_phenomenon: samples,
            layers,
            dim,
            signature_mode: mode,
            noise_sigma: sigma,
            signal_scale: 1.0,
            planted_neurons: BTreeMap::new(),
            rng_seed: seed,
            checkpoint_schedule: None,
            model_id: default_model_id(),
            checkpoint_tokens: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.phenomena == 0 || self.layers == 0 || self.dim == 0 {
            return bad("phenomena, layers and dim must all be >= 1".into());
        }
        if self.samples_per_phenomenon < 2 {
            return bad(format!("samples_per_phenomenon must be >= 2, got {}", self.samples_per_phenomenon));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        let scales = std::iter::once(self.signal_scale)
            .chain(self.checkpoint_schedule.iter().flatten().map(|s| s.signal_scale));
        for s in scales {
            if !s.is_finite() {
                return bad(format!("signal_scale must be finite, got {s}"));
            }
        }
        match self.signature_mode {
            SignatureMode::Orthogonal if self.phenomena > self.dim => {
                return bad(format!("orthogonal signatures need phenomena <= dim ({} > {})", self.phenomena, self.dim));
            }
            SignatureMode::SharedAngle { theta_degrees } => {
                if !(0.0..=90.0).contains(&theta_degrees) {
                    return bad(format!("shared_angle theta must lie in [0, 90] degrees, got {theta_degrees}"));
                }
                if self.phenomena + 1 > self.dim {
                    return bad(format!("shared_angle signatures need phenomena + 1 <= dim ({} + 1 > {})", self.phenomena, self.dim));
                }
            }
            _ => {}
        }
        let names: Vec<String> = (0..self.phenomena).map(phenomenon_name).collect();
        for (name, set) in &self.planted_neurons {
            if !names.contains(name) {
                return bad(format!("planted_neurons names unknown phenomenon {name:?}"));
            }
            if !set.magnitude.is_finite() {
                return bad(format!("planted magnitude for {name:?} is not finite"));
            }
            if let Some(n) = set.neurons.iter().find(|n| n.layer >= self.layers || n.dim >= self.dim) {
                return bad(format!("planted neuron ({}, {}) for {name:?} is outside {} x {}", n.layer, n.dim, self.layers, self.dim));
            }
        }
        if let Some(steps) = &self.checkpoint_schedule {
            if steps.is_empty() {
                return bad("checkpoint_schedule is empty".into());
            }
            if steps.windows(2).any(|w| w[0].token_count >= w[1].token_count) {
                return bad("checkpoint_schedule token counts must be strictly increasing".into());
            }
        }
        Ok(())
    }

    /// `(token_count, signal_scale)` of every dump this config describes.
    pub fn steps(&self) -> Vec<ScheduleStep> {
        match &self.checkpoint_schedule {
            Some(s) => s.clone(),
            None => vec![ScheduleStep { token_count: self.checkpoint_tokens, signal_scale: self.signal_scale }],
        }
    }
}

/// Unit signature vectors, `[layer][phenomenon]`.
pub fn signatures(cfg: &SynthConfig) -> Result<Vec<Vec<Vec<f64>>>> {
    cfg.validate()?;
    let (k, d) = (cfg.phenomena, cfg.dim);
    let basis = |i: usize| {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    };
    Ok((0..cfg.layers)
        .map(|l| {
            let mut g = Gaussian::new(cfg.rng_seed, &[SIGNATURE_STREAM, l as u64]);
            match cfg.signature_mode {
                SignatureMode::Orthogonal => {
                    let axes = rand::seq::index::sample(g.rng_mut(), d, k).into_vec();
                    axes.into_iter().map(basis).collect()
                }
                SignatureMode::SharedAngle { theta_degrees } => {
                    let axes = rand::seq::index::sample(g.rng_mut(), d, k + 1).into_vec();
                    let cos = theta_degrees.to_radians().cos().max(0.0);
                    let (a, b) = (cos.sqrt(), (1.0 - cos).sqrt());
                    (0..k)
                        .map(|p| {
                            let mut v = vec![0.0; d];
                            v[axes[0]] = a;
                            v[axes[p + 1]] = b;
                            v
                        })
                        .collect()
                }
                SignatureMode::RandomUnit => (0..k)
                    .map(|_| loop {
                        let mut v = vec![0.0; d];
                        g.fill(&mut v);
                        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if n > 0.0 {
                            break v.into_iter().map(|x| x / n).collect();
                        }
                    })
                    .collect(),
            }
        })
        .collect())
}

/// Intended Δh of every sample of phenomenon `p`, `[sample][layer][dim]`
/// row-major, before the dump-wide scale.
fn phenomenon_deltas(cfg: &SynthConfig, sigs: &[Vec<Vec<f64>>], p: usize, signal_scale: f64) -> Vec<f64> {
    let (n, l, d) = (cfg.samples_per_phenomenon, cfg.layers, cfg.dim);
    let mut out = vec![0.0; n * l * d];
    let mut g = Gaussian::new(cfg.rng_seed, &[NOISE_STREAM, p as u64]);
    let planted = cfg.planted_neurons.get(&phenomenon_name(p));
    for sample in out.chunks_exact_mut(l * d) {
        g.fill(sample);
        for (layer, row) in sample.chunks_exact_mut(d).enumerate() {
            for (x, &u) in row.iter_mut().zip(&sigs[layer][p]) {
                *x = signal_scale * u + cfg.noise_sigma * *x;
            }
        }
        if let Some(set) = planted {
            for id in &set.neurons {
                sample[id.index(d)] += set.magnitude;
            }
        }
    }
    out
}

/// Intended Δh of one sample, `[layer][dim]` row-major, before scaling.
pub fn intended_delta(cfg: &SynthConfig, p: usize, i: usize, signal_scale: f64) -> Result<Vec<f64>> {
    let sigs = signatures(cfg)?;
    if p >= cfg.phenomena || i >= cfg.samples_per_phenomenon {
        return Err(Error::Config(format!("sample ({p}, {i}) is outside the configured dump")));
    }
    let stride = cfg.layers * cfg.dim;
    Ok(phenomenon_deltas(cfg, &sigs, p, signal_scale)[i * stride..(i + 1) * stride].to_vec())
}

/// Splits `c · Δh` into unit vectors `h_g`, `h_u` with `h_g − h_u = c · Δh`.
/// Requires `c · |Δh| ≤ 2`.
fn split(delta: &[f64], c: f64, h_g: &mut [f32], h_u: &mut [f32]) {
    let d = delta.len();
    let norm2: f64 = delta.iter().map(|x| x * x).sum();
    // Unit w orthogonal to Δh: an exactly-zero coordinate's axis when one
    // exists, otherwise the least-aligned axis with its Δh component removed.
    let mut w = vec![0.0; d];
    match delta.iter().position(|&x| x == 0.0) {
        Some(m) => w[m] = 1.0,
        None => {
            let m = (0..d).min_by(|&a, &b| delta[a].abs().total_cmp(&delta[b].abs())).expect("dim >= 1");
            w[m] = 1.0;
            let proj = delta[m] / norm2;
            for (wi, x) in w.iter_mut().zip(delta) {
                *wi -= proj * x;
            }
            let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            w.iter_mut().for_each(|x| *x /= wn);
        }
    }
    let s = (1.0 - c * c * norm2 / 4.0).max(0.0).sqrt();
    for j in 0..d {
        let half = c * delta[j] / 2.0;
        h_g[j] = (half + s * w[j]) as f32;
        h_u[j] = (-half + s * w[j]) as f32;
    }
}

fn max_row_norm(values: &[f64], d: usize) -> f64 {
    values.chunks_exact(d).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).fold(0.0, f64::max)
}

/// Generates the dump for one `(token_count, signal_scale)` step, returning it
/// with the dump-wide scale `c`.
pub fn generate_step(cfg: &SynthConfig, step: ScheduleStep, backend: Backend) -> Result<(ActivationDump, f64)> {
    let sigs = signatures(cfg)?;
    let (n, l, d) = (cfg.samples_per_phenomenon, cfg.layers, cfg.dim);

    // Two passes regenerate the same per-phenomenon streams so that only one
    // phenomenon's f64 buffer is alive per worker.
    let max_norm = backend
        .map_range(cfg.phenomena, |p| max_row_norm(&phenomenon_deltas(cfg, &sigs, p, step.signal_scale), d))
        .into_iter()
        .fold(0.0, f64::max);
    let c = if max_norm > 0.0 { 1.0 / max_norm } else { 1.0 };

    let header = DumpHeader {
        normalization: Normalization::L2PerLayer,
        ..DumpHeader::new(
            cfg.model_id.clone(),
            step.token_count,
            cfg.rng_seed,
            l,
            d,
            (0..cfg.phenomena).map(|p| PhenomenonCount { name: phenomenon_name(p), sample_count: n }).collect(),
        )
    };
    let groups = backend.map_range(cfg.phenomena, |p| {
        let deltas = phenomenon_deltas(cfg, &sigs, p, step.signal_scale);
        deltas
            .chunks_exact(l * d)
            .enumerate()
            .map(|(i, sample)| {
                let mut h_g = vec![0.0f32; l * d];
                let mut h_u = vec![0.0f32; l * d];
                for ((row, g), u) in sample.chunks_exact(d).zip(h_g.chunks_exact_mut(d)).zip(h_u.chunks_exact_mut(d)) {
                    split(row, c, g, u);
                }
                SamplePair { pair_id: header.pair_id(p, i), phenomenon: phenomenon_name(p), h_g, h_u }
            })
            .collect::<Vec<_>>()
    });
    let samples = groups.into_iter().flatten().collect();
    Ok((ActivationDump { header, samples }, c))
}

/// The dump at the config's own `checkpoint_tokens` and `signal_scale`.
pub fn generate(cfg: &SynthConfig) -> Result<ActivationDump> {
    let step = ScheduleStep { token_count: cfg.checkpoint_tokens, signal_scale: cfg.signal_scale };
    Ok(generate_step(cfg, step, Backend::default())?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpectedCell {
    pub phenomenon: String,
    pub layer: usize,
    pub intra: f64,
    pub inter: f64,
    pub ssi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepTruth {
    pub token_count: u64,
    pub signal_scale: f64,
    /// Closed-form SSI per cell; present only for noise-free configs whose
    /// phenomena all have nonzero Δh.
    pub expected: Option<Vec<ExpectedCell>>,
    /// Factor applied to every Δh before splitting; filled in by whoever
    /// generated the step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruth {
    pub generator: String,
    pub rng_seed: u64,
    pub model_id: String,
    pub phenomena: Vec<String>,
    pub signature_mode: SignatureMode,
    pub noise_sigma: f64,
    /// `[layer][phenomenon][dim]`.
    pub signatures: Vec<Vec<Vec<f64>>>,
    pub planted_neurons: BTreeMap<String, PlantedSet>,
    pub steps: Vec<StepTruth>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn expected_cells(cfg: &SynthConfig, sigs: &[Vec<Vec<f64>>], signal_scale: f64) -> Option<Vec<ExpectedCell>> {
    if cfg.noise_sigma != 0.0 || cfg.phenomena < 2 {
        return None;
    }
    // Without noise every sample of a phenomenon shares one Δh per layer.
    let d = cfg.dim;
    let mut cells = Vec::new();
    let vecs: Vec<Vec<Vec<f64>>> = (0..cfg.phenomena)
        .map(|p| {
            let first = &phenomenon_deltas(&SynthConfig { samples_per_phenomenon: 1, ..cfg.clone() }, sigs, p, signal_scale);
            first.chunks_exact(d).map(<[f64]>::to_vec).collect()
        })
        .collect();
    for (p, per_layer) in vecs.iter().enumerate() {
        for (l, v) in per_layer.iter().enumerate() {
            if v.iter().all(|&x| x == 0.0) || vecs.iter().any(|o| o[l].iter().all(|&x| x == 0.0)) {
                return None;
            }
            let inter = (0..cfg.phenomena).filter(|&q| q != p).map(|q| cosine(v, &vecs[q][l])).sum::<f64>()
                / (cfg.phenomena - 1) as f64;
            cells.push(ExpectedCell { phenomenon: phenomenon_name(p), layer: l, intra: 1.0, inter, ssi: 1.0 - inter });
        }
    }
    Some(cells)
}

pub fn ground_truth(cfg: &SynthConfig) -> Result<GroundTruth> {
    let sigs = signatures(cfg)?;
    let steps = cfg
        .steps()
        .into_iter()
        .map(|s| StepTruth {
            token_count: s.token_count,
            signal_scale: s.signal_scale,
            expected: expected_cells(cfg, &sigs, s.signal_scale),
            delta_scale: None,
        })
        .collect();
    Ok(GroundTruth {
        generator: rng::GENERATOR_ID.to_string(),
        rng_seed: cfg.rng_seed,
        model_id: cfg.model_id.clone(),
        phenomena: (0..cfg.phenomena).map(phenomenon_name).collect(),
        signature_mode: cfg.signature_mode,
        noise_sigma: cfg.noise_sigma,
        signatures: sigs,
        planted_neurons: cfg.planted_neurons.clone(),
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssi::{compute_deltas, compute_ssi, NormalizationPolicy, PairSampling};

    #[test]
    fn split_reproduces_difference() {
        for delta in [vec![0.3, -0.2, 0.0, 0.1], vec![0.3, -0.2, 0.05, 0.1]] {
            let mut g = vec![0.0f32; 4];
            let mut u = vec![0.0f32; 4];
            split(&delta, 2.0, &mut g, &mut u);
            let ng = g.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let nu = u.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            assert!((ng - 1.0).abs() < 1e-6 && (nu - 1.0).abs() < 1e-6);
            for j in 0..4 {
                let got = g[j] as f64 / ng - u[j] as f64 / nu;
                assert!((got - 2.0 * delta[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn engine_recovers_scaled_deltas() {
        let mut cfg = SynthConfig::new(3, 4, 2, 8, SignatureMode::RandomUnit, 0.7, 5);
        cfg.planted_neurons.insert(phenomenon_name(1), PlantedSet { neurons: vec![NeuronId::new(1, 3)], magnitude: 2.0 });
        let (dump, c) = generate_step(&cfg, ScheduleStep { token_count: 0, signal_scale: 1.0 }, Backend::default()).unwrap();
        let deltas = compute_deltas(&dump, NormalizationPolicy::default());
        for p in 0..3 {
            for i in 0..4 {
                let want = intended_delta(&cfg, p, i, 1.0).unwrap();
                for (a, b) in deltas.sample(p, i).iter().zip(&want) {
                    assert!((a - c * b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn orthogonal_noise_free_is_one() {
        let cfg = SynthConfig::new(4, 5, 3, 6, SignatureMode::Orthogonal, 0.0, 11);
        let t = compute_ssi(&compute_deltas(&generate(&cfg).unwrap(), NormalizationPolicy::default()), &PairSampling::exact()).unwrap();
        assert!(t.entries.iter().all(|e| (e.ssi.unwrap() - 1.0).abs() < 1e-9));
        let truth = ground_truth(&cfg).unwrap();
        assert!(truth.steps[0].expected.as_ref().unwrap().iter().all(|c| c.ssi == 1.0));
    }

    #[test]
    fn shared_angle_signatures() {
        let cfg = SynthConfig::new(3, 2, 2, 5, SignatureMode::SharedAngle { theta_degrees: 60.0 }, 0.0, 1);
        let sigs = signatures(&cfg).unwrap();
        for l in 0..2 {
            assert!((cosine(&sigs[l][0], &sigs[l][2]) - 0.5).abs() < 1e-12);
            assert!((cosine(&sigs[l][0], &sigs[l][0]) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn config_errors() {
        let cfg = SynthConfig::new(5, 2, 1, 4, SignatureMode::Orthogonal, 0.0, 1);
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        let mut cfg = SynthConfig::new(2, 2, 1, 4, SignatureMode::Orthogonal, 0.0, 1);
        cfg.planted_neurons.insert(phenomenon_name(0), PlantedSet { neurons: vec![NeuronId::new(1, 0)], magnitude: 1.0 });
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_and_parses() {
        let json = r#"{"phenomena":2,"samples_per_phenomenon":3,"layers":1,"dim":4,
            "signature_mode":{"shared_angle":{"theta_degrees":30}},"noise_sigma":0.1,"rng_seed":3,
            "planted_neurons":{"phenomenon_01":{"neurons":[[0,2]],"magnitude":0.5}}}"#;
        let cfg: SynthConfig = serde_json::from_str(json).unwrap();
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let seq = generate_step(&cfg, cfg.steps()[0], Backend::Sequential).unwrap();
        assert_eq!(seq.0, generate(&cfg).unwrap());
        let truth = serde_json::to_value(ground_truth(&cfg).unwrap()).unwrap();
        assert_eq!(truth["planted_neurons"]["phenomenon_01"]["neurons"], serde_json::json!([[0, 2]]));
    }
}
