use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context};
use serde::Serialize;
use serde_json::json;
use ssilab_core::behavior::{self, AblationMaskSet};
use ssilab_core::dynamics::{self, DivergencePoint, LongRow, ProgressionPoint};
use ssilab_core::manifest::{self, RunManifest, Trajectory};
use ssilab_core::neurons::{self, NeuronId, SelectionFile};
use ssilab_core::ssi::{self, NormalizationPolicy, PairSampling, SimilarityKernel, SsiOptions, SsiTable};
use ssilab_core::stats::Alternative;
use ssilab_core::{store, synth, Backend};

use crate::output::{self, input, write_json};
use crate::{Command, Kernel, Policy, SsiFlags};

pub fn run(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Ssi(a) => ssi_cmd(a),
        Command::Neurons(a) => neurons_cmd(a),
        Command::Masks(a) => masks_cmd(a),
        Command::Overlap(a) => overlap_cmd(a),
        Command::Accuracy(a) => accuracy_cmd(a),
        Command::AblationReport(a) => ablation_cmd(a),
        Command::Dynamics(a) => dynamics_cmd(a),
        Command::Diverge(a) => diverge_cmd(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Validate(a) => validate_cmd(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn options(f: &SsiFlags) -> SsiOptions {
    SsiOptions {
        sampling: match f.pair_cap {
            Some(cap) => PairSampling::capped(cap, f.seed),
            None => PairSampling { cap: None, seed: f.seed },
        },
        kernel: match f.kernel {
            Kernel::UnitSum => SimilarityKernel::UnitSum,
            Kernel::Pairwise => SimilarityKernel::Pairwise,
        },
        layers: f.layers.clone(),
        backend: Backend::default(),
    }
}

fn load_deltas(path: &Path, policy: NormalizationPolicy) -> anyhow::Result<ssi::DeltaSet> {
    let dump = store::read_dump(path).map_err(|e| input("dump", path, e))?;
    let deltas = ssi::compute_deltas_with(&dump, policy, Backend::default());
    if !deltas.excluded_samples.is_empty() {
        log::warn!("{} samples excluded (zero difference at every layer)", deltas.excluded_samples.len());
    }
    if !deltas.degenerate_rows.is_empty() {
        log::warn!("{} layer embeddings had zero norm; their differences were set to 0", deltas.degenerate_rows.len());
    }
    Ok(deltas)
}

fn ssi_cmd(a: crate::SsiArgs) -> anyhow::Result<()> {
    let policy = match a.policy {
        Policy::NormalizeThenSubtract => NormalizationPolicy::NormalizeThenSubtract,
        Policy::SubtractRaw => NormalizationPolicy::SubtractRaw,
    };
    let deltas = load_deltas(&a.dump, policy)?;
    let table = ssi::compute_ssi_with(&deltas, &options(&a.flags))?;
    output::atomic(&a.out, |tmp| Ok(table.write_csv(tmp)?))
}

fn neurons_cmd(a: crate::NeuronsArgs) -> anyhow::Result<()> {
    let deltas = load_deltas(&a.dump, NormalizationPolicy::default())?;
    let selections = neurons::select_all(&deltas, a.quantile, a.z, Backend::default())?;
    write_json(&a.out, &SelectionFile::new(deltas.num_layers, deltas.hidden_dim, &selections))
}

fn read_json<T: serde::de::DeserializeOwned>(role: &str, path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            anyhow::anyhow!("{role} not found: {}", path.display())
        } else {
            anyhow::Error::new(e).context(format!("reading {role} {}", path.display()))
        }
    })?;
    serde_json::from_str(&text).with_context(|| format!("parsing {role} {}", path.display()))
}

fn masks_cmd(a: crate::MasksArgs) -> anyhow::Result<()> {
    let file: SelectionFile = read_json("neuron selection", &a.neurons)?;
    let targeted: BTreeSet<NeuronId> = match &a.phenomenon {
        Some(p) => match file.selections.iter().find(|s| &s.phenomenon == p) {
            Some(s) => s.neuron_set(),
            None => bail!("phenomenon {p:?} not found in {}", a.neurons.display()),
        },
        None => file.selections.iter().flat_map(|s| s.neuron_set()).collect(),
    };
    let masks: AblationMaskSet = behavior::make_masks(&targeted, file.num_layers, file.hidden_dim, a.seed)?;
    output::write_json_compact(&a.out, &masks)
}

#[derive(Serialize)]
struct OverlapRow {
    phenomenon: String,
    #[serde(flatten)]
    overlap: neurons::Overlap,
}

fn overlap_cmd(a: crate::OverlapArgs) -> anyhow::Result<()> {
    let fa: SelectionFile = read_json("neuron selection", &a.a)?;
    let fb: SelectionFile = read_json("neuron selection", &a.b)?;
    if (fa.num_layers, fa.hidden_dim) != (fb.num_layers, fb.hidden_dim) {
        bail!(
            "neuron universes differ: {} x {} vs {} x {}",
            fa.num_layers,
            fa.hidden_dim,
            fb.num_layers,
            fb.hidden_dim
        );
    }
    let rows: Vec<OverlapRow> = fa
        .selections
        .iter()
        .filter_map(|sa| {
            let sb = fb.selections.iter().find(|sb| sb.phenomenon == sa.phenomenon)?;
            Some(OverlapRow {
                phenomenon: sa.phenomenon.clone(),
                overlap: neurons::overlap_sets(&sa.neuron_set(), &sb.neuron_set()),
            })
        })
        .collect();
    if rows.is_empty() {
        bail!("the two selections share no phenomena");
    }
    let mean = rows.iter().map(|r| r.overlap.jaccard_percent).sum::<f64>() / rows.len() as f64;
    write_json(&a.out, &json!({ "phenomena": rows, "mean_jaccard_percent": mean }))
}

fn read_logprobs(role: &str, path: &Path) -> anyhow::Result<Vec<store::LogProbRecord>> {
    store::read_logprobs(path).map_err(|e| input(role, path, e))
}

fn accuracy_cmd(a: crate::AccuracyArgs) -> anyhow::Result<()> {
    let result = behavior::accuracy(&read_logprobs("log-probabilities", &a.logprobs)?)?;
    if output::is_csv(&a.out) {
        output::atomic(&a.out, |tmp| Ok(result.write_csv(tmp)?))
    } else {
        write_json(&a.out, &result)
    }
}

fn ablation_cmd(a: crate::AblationArgs) -> anyhow::Result<()> {
    let report = behavior::ablation_report(
        &read_logprobs("baseline log-probabilities", &a.baseline)?,
        &read_logprobs("targeted log-probabilities", &a.targeted)?,
        &read_logprobs("random log-probabilities", &a.random)?,
    )?;
    if output::is_csv(&a.out) {
        output::atomic(&a.out, |tmp| Ok(report.write_csv(tmp)?))
    } else {
        write_json(&a.out, &report)
    }
}

fn load_run(path: &Path, opts: &SsiOptions) -> anyhow::Result<Trajectory> {
    let m = RunManifest::load(path).map_err(|e| input("manifest", path, e))?;
    manifest::load_trajectory(&m, opts).with_context(|| format!("run {:?}", m.run_id))
}

/// Progression points of several runs, standardized within model family.
fn standardized_progressions(runs: &[&Trajectory]) -> anyhow::Result<(Vec<Vec<ProgressionPoint>>, dynamics::StandardizeFlags)> {
    let mut all = Vec::new();
    let mut groups = Vec::new();
    let mut lens = Vec::new();
    for t in runs {
        let pts = if t.checkpoints.len() >= 2 { dynamics::progression(t)? } else { Vec::new() };
        groups.extend(std::iter::repeat_n(t.model_family.as_str(), pts.len()));
        lens.push(pts.len());
        all.extend(pts);
    }
    let flags = dynamics::standardize(&mut all, &groups)?;
    let mut out = Vec::new();
    let mut rest = all.into_iter();
    for n in lens {
        out.push(rest.by_ref().take(n).collect());
    }
    Ok((out, flags))
}

fn write_long(out: &Path, rows: &[LongRow]) -> anyhow::Result<()> {
    output::atomic(out, |tmp| Ok(dynamics::write_long_csv(rows, tmp)?))
}

fn dynamics_cmd(a: crate::DynamicsArgs) -> anyhow::Result<()> {
    let mut traj = load_run(&a.manifest, &options(&a.flags))?;
    if let Some(f) = a.final_ckpt {
        if !traj.checkpoints.contains(&f) {
            bail!("final checkpoint {f} is not listed in {}", a.manifest.display());
        }
        traj.checkpoints.retain(|&c| c <= f);
        traj.tables.retain(|&c, _| c <= f);
        traj.accuracies.retain(|&c, _| c <= f);
    }
    let (mut pts, flags) = standardized_progressions(&[&traj])?;
    let pts = pts.remove(0);
    if pts.is_empty() {
        bail!("run {:?} needs >= 2 checkpoints for a progression", traj.run_id);
    }
    let rows = dynamics::long_rows(&traj, &pts, None, a.boundary);
    let summary = a
        .summary
        .as_ref()
        .map(|_| -> anyhow::Result<_> {
            Ok(json!({
                "run_id": traj.run_id,
                "model_family": traj.model_family,
                "seed": traj.seed,
                "checkpoints": traj.checkpoints,
                "growth": dynamics::growth_test(&traj).ok(),
                "delta_ssi_delta_acc_r": dynamics::delta_correlation(&pts)?,
                "degenerate_groups": flags,
            }))
        })
        .transpose()?;
    write_long(&a.out, &rows)?;
    if let (Some(path), Some(s)) = (&a.summary, summary) {
        write_json(path, &s)?;
    }
    Ok(())
}

fn diverge_cmd(a: crate::DivergeArgs) -> anyhow::Result<()> {
    let opts = options(&a.flags);
    let ta = load_run(&a.manifest_a, &opts)?;
    let tb = load_run(&a.manifest_b, &opts)?;
    let points: Vec<DivergencePoint> = dynamics::divergence(&ta, &tb, a.boundary)?;
    let (pts, flags) = standardized_progressions(&[&ta, &tb])?;
    let mut rows = dynamics::long_rows(&ta, &pts[0], Some(&points), a.boundary);
    rows.extend(dynamics::long_rows(&tb, &pts[1], Some(&points), a.boundary));
    write_long(&a.out, &rows)?;
    if let Some(path) = &a.summary {
        let phases = match dynamics::phase_summary(&points) {
            Ok(s) => Some(s),
            Err(e) => {
                log::warn!("phase summary unavailable: {e}");
                None
            }
        };
        write_json(
            path,
            &json!({
                "run_a": ta.run_id,
                "run_b": tb.run_id,
                "boundary_tokens": a.boundary,
                "shared_checkpoints": points.iter().map(|p| p.checkpoint).collect::<BTreeSet<_>>(),
                "phases": phases,
                "degenerate_groups": flags,
            }),
        )?;
    }
    Ok(())
}

fn compare_cmd(a: crate::CompareArgs) -> anyhow::Result<()> {
    let mut profiles = Vec::new();
    let mut families = Vec::new();
    for (family, path) in &a.profiles {
        let table = SsiTable::read_csv(path).map_err(|e| input("SSI table", path, e))?;
        let profile = ssi::layer_profile(&table).dense().with_context(|| format!("profile {}", path.display()))?;
        profiles.push((path.display().to_string(), profile));
        families.push(family.clone());
    }
    let matrix = dynamics::profile_correlation_matrix(&profiles)?;
    let group = |(x, y): &(String, String)| -> anyhow::Result<Vec<f64>> {
        let v = dynamics::group_correlations(&matrix, &families, x, y)?;
        if v.len() < 2 {
            bail!("group {x}:{y} has {} defined correlations; Welch's test needs >= 2", v.len());
        }
        Ok(v)
    };
    let (ga, gb) = (group(&a.group_a)?, group(&a.group_b)?);
    let welch = dynamics::welch_t(&ga, &gb, Alternative::Greater)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    write_json(
        &a.out,
        &json!({
            "profiles": profiles.iter().zip(&families).map(|((id, p), f)| json!({"id": id, "family": f, "profile": p})).collect::<Vec<_>>(),
            "correlations": matrix,
            "group_a": {"families": [a.group_a.0, a.group_a.1], "n": ga.len(), "mean_r": mean(&ga), "values": ga},
            "group_b": {"families": [a.group_b.0, a.group_b.1], "n": gb.len(), "mean_r": mean(&gb), "values": gb},
            "welch": welch,
        }),
    )
}

fn synth_cmd(a: crate::SynthArgs) -> anyhow::Result<()> {
    let cfg: synth::SynthConfig = read_json("synth config", &a.config)?;
    cfg.validate()?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let scheduled = cfg.checkpoint_schedule.is_some();
    let mut entries = Vec::new();
    let mut scales = Vec::new();
    for step in cfg.steps() {
        let (dump, scale) = synth::generate_step(&cfg, step, Backend::default())?;
        scales.push(scale);
        let name = if scheduled { format!("ckpt_{}.actd", step.token_count) } else { "synth.actd".to_string() };
        output::atomic(&a.out.join(&name), |tmp| Ok(store::write_dump(&dump.header, &dump.samples, tmp)?))?;
        entries.push(manifest::CheckpointEntry { tokens: step.token_count, dump: Some(name.into()), ssi: None, logprobs: None });
    }
    let mut truth = synth::ground_truth(&cfg)?;
    for (step, scale) in truth.steps.iter_mut().zip(scales) {
        step.delta_scale = Some(scale);
    }
    write_json(&a.out.join("ground_truth.json"), &truth)?;
    if scheduled {
        let m = RunManifest {
            run_id: format!("{}-seed{}", cfg.model_id, cfg.rng_seed),
            model_family: cfg.model_id.clone(),
            seed: cfg.rng_seed,
            checkpoints: entries,
        };
        write_json(&a.out.join("manifest.json"), &m)?;
    }
    Ok(())
}

fn validate_cmd(a: crate::ValidateArgs) -> anyhow::Result<()> {
    let report = store::validate_dump(&a.dump).map_err(|e| input("dump", &a.dump, e))?;
    match &a.out {
        Some(out) => write_json(out, &report)?,
        None => {
            let mut text = serde_json::to_string_pretty(&report)?;
            text.push('\n');
            let mut stdout = std::io::stdout().lock();
            match stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e).context("writing report"),
                _ => {}
            }
        }
    }
    if !report.passed {
        let why = report.fatal.clone().unwrap_or_else(|| format!("{} non-finite values", report.non_finite_values));
        eprintln!("error: dump failed validation: {why}");
        std::process::exit(1);
    }
    Ok(())
}
