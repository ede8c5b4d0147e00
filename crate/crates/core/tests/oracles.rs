//! Engine results against independent straight-line implementations and
//! reference values from scipy.stats.

use ssilab_core::behavior::ablation_report;
use ssilab_core::neurons::{consistency_matrix, ConsistencyStrategy};
use ssilab_core::rng::Gaussian;
use ssilab_core::ssi::{compute_deltas, compute_ssi, NormalizationPolicy, PairSampling};
use ssilab_core::stats::{self, Alternative};
use ssilab_core::store::{read_dump, write_dump, LogProbRecord};
use ssilab_core::synth::{generate, SignatureMode, SynthConfig};

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

#[test]
fn welch_against_formula_and_scipy() {
    let a = [0.98, 0.97, 0.99];
    let b = [0.66, 0.60, 0.70];
    let (sa, sb) = (var(&a) / 3.0, var(&b) / 3.0);
    let t = (mean(&a) - mean(&b)) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / 2.0 + sb * sb / 2.0);
    let r = stats::welch_t(&a, &b, Alternative::Greater).unwrap();
    assert!((r.t - t).abs() < 1e-9);
    assert!((r.df - df).abs() < 1e-9);
    // scipy.stats.ttest_ind(a, b, equal_var=False, alternative="greater")
    assert!((r.t - 11.025861429075036).abs() < 1e-9);
    assert!((r.df - 2.1576490924805536).abs() < 1e-9);
    assert!((r.p - 0.0030901137613632635).abs() < 1e-9);
}

#[test]
fn paired_t_against_scipy() {
    let x = [2.1, 2.6, 1.9, 2.4, 2.2, 2.8, 2.0];
    let y = [0.4, 0.6, 0.5, 0.3, 0.7, 0.6, 0.4];
    let r = stats::paired_t(&x, &y, Alternative::Greater).unwrap();
    assert!((r.t - 15.08471225079618).abs() < 1e-9);
    assert_eq!(r.df, 6.0);
    assert!((r.p - 2.675292528179707e-06).abs() < 1e-12);

    let r = stats::one_sample_t(&[0.05, -0.02, 0.03, 0.04, 0.01], 0.0, Alternative::TwoSided).unwrap();
    assert!((r.t - 1.7728105208558365).abs() < 1e-9);
    assert!((r.p - 0.15094405366901753).abs() < 1e-9);
}

#[test]
fn pearson_against_scipy() {
    let p = [0.1, 0.4, 0.35, 0.8, 0.55, 0.2, 0.9, 0.65, 0.3, 0.7, 0.45, 0.5];
    let q = [0.2, 0.5, 0.3, 0.7, 0.6, 0.1, 0.95, 0.6, 0.25, 0.8, 0.4, 0.45];
    let r = stats::pearson(&p, &q).unwrap().unwrap();
    assert!((r - 0.9518476260417842).abs() < 1e-12);
}

fn lp(id: usize, g: f64, u: f64) -> LogProbRecord {
    LogProbRecord {
        pair_id: format!("s:{id}"),
        phenomenon: "s".into(),
        g_logprob_sum: g,
        g_token_count: 8,
        u_logprob_sum: u,
        u_token_count: 9,
    }
}

#[test]
fn ablation_matches_textbook_paired_t() {
    let mut g = Gaussian::new(17, &[]);
    let n = 80;
    let base: Vec<LogProbRecord> = (0..n).map(|i| lp(i, -20.0 - 5.0 * g.sample().abs(), -25.0)).collect();
    let ppl = |r: &LogProbRecord| (-r.g_logprob_sum / r.g_token_count as f64).exp();
    // Pick log-probabilities so perplexity rises by ~2.0 (targeted) and ~0.5 (random).
    let shifted = |add: f64, g: &mut Gaussian| -> Vec<LogProbRecord> {
        base.iter()
            .map(|r| {
                let target = ppl(r) + add + 0.05 * g.sample();
                lp(r.pair_id[2..].parse().unwrap(), -target.ln() * r.g_token_count as f64, r.u_logprob_sum)
            })
            .collect()
    };
    let targeted = shifted(2.0, &mut g);
    let random = shifted(0.5, &mut g);
    let rep = ablation_report(&base, &targeted, &random).unwrap();

    let d: Vec<f64> = (0..n).map(|i| (ppl(&targeted[i]) - ppl(&base[i])) - (ppl(&random[i]) - ppl(&base[i]))).collect();
    let t = mean(&d) / (var(&d) / n as f64).sqrt();
    assert!((rep.grammatical.paired_t - t).abs() < 1e-9 * t.abs().max(1.0));
    assert_eq!(rep.grammatical.df, (n - 1) as u64);
    assert!(rep.grammatical.p_value < 1e-3);
    assert!((rep.grammatical.mean_ppl_delta_targeted - 2.0).abs() < 0.05);
    assert_eq!(rep.ungrammatical.paired_t, 0.0);
}

/// Cosine with zero-vector convention.
fn cos(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        ab / (na * nb)
    }
}

#[test]
fn ssi_and_consistency_via_disk() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..5u64 {
        let cfg = SynthConfig::new(3, 5, 2, 6, SignatureMode::RandomUnit, 0.8, seed);
        let dump = generate(&cfg).unwrap();
        let path = dir.path().join(format!("{seed}.actd"));
        write_dump(&dump.header, &dump.samples, &path).unwrap();
        let back = read_dump(&path).unwrap();

        // Straight-line Δh from the raw f32 payload.
        let (l, d) = (2, 6);
        let delta = |s: &ssilab_core::store::SamplePair, layer: usize| -> Vec<f64> {
            let g: Vec<f64> = s.h_g[layer * d..(layer + 1) * d].iter().map(|&x| x as f64).collect();
            let u: Vec<f64> = s.h_u[layer * d..(layer + 1) * d].iter().map(|&x| x as f64).collect();
            let ng = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            g.iter().zip(&u).map(|(a, b)| a / ng - b / nu).collect()
        };
        let by_p: Vec<Vec<&ssilab_core::store::SamplePair>> =
            (0..3).map(|p| back.samples.iter().filter(|s| s.phenomenon == back.header.phenomena[p].name).collect()).collect();

        let table = compute_ssi(&compute_deltas(&back, NormalizationPolicy::default()), &PairSampling::exact()).unwrap();
        for p in 0..3 {
            for layer in 0..l {
                let own: Vec<Vec<f64>> = by_p[p].iter().map(|s| delta(s, layer)).collect();
                let other: Vec<Vec<f64>> = (0..3).filter(|&q| q != p).flat_map(|q| by_p[q].iter().map(|s| delta(s, layer))).collect();
                let mut intra = (0.0, 0);
                for i in 0..own.len() {
                    for j in i + 1..own.len() {
                        intra.0 += cos(&own[i], &own[j]);
                        intra.1 += 1;
                    }
                }
                let mut inter = (0.0, 0);
                for a in &own {
                    for b in &other {
                        inter.0 += cos(a, b);
                        inter.1 += 1;
                    }
                }
                let want = intra.0 / intra.1 as f64 - inter.0 / inter.1 as f64;
                let got = table.ssi(&back.header.phenomena[p].name, layer).unwrap();
                assert!((got - want).abs() < 1e-9, "seed {seed} p {p} l {layer}: {got} vs {want}");
            }
        }

        let deltas = compute_deltas(&back, NormalizationPolicy::default());
        let m = consistency_matrix(&deltas, ConsistencyStrategy::default(), ssilab_core::Backend::Sequential).unwrap();
        for j in 0..l * d {
            let all: Vec<f64> = (0..3).flat_map(|q| (0..5).map(move |i| (q, i))).map(|(q, i)| deltas.sample(q, i)[j]).collect();
            let mu = mean(&all);
            let sd = (all.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
            for p in 0..3 {
                let z: Vec<f64> = (0..5).map(|i| (deltas.sample(p, i)[j] - mu) / sd).collect();
                let mut acc = 0.0;
                for a in 0..5 {
                    for b in a + 1..5 {
                        acc += z[a] * z[b];
                    }
                }
                let want = acc / 10.0;
                assert!((m.values[p].as_ref().unwrap()[j] - want).abs() < 1e-9);
            }
        }
    }
}
