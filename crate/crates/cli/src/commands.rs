//! Executing run specs and recording their manifests.

use std::fs;
use std::path::Path;

use anyhow::Context;
use serde_json::json;
use tlnlab::io::{
    load_dataset, load_pretrained, read_json, save_pretrained, save_tln, write_dataset, write_json,
};
use tlnlab::pretrain::pretrain;
use tlnlab::seed::derive_seed;
use tlnlab::sweep::{
    best_setup, compare_variants, curves, initial_tln, render_curves, render_gains, run_sweep,
    train_seed, SweepConfig, SweepResult,
};
use tlnlab::synth::generate;
use tlnlab::tln::{make_freeze_plan, PretrainedNetwork, UnitRef};
use tlnlab::train::{evaluate, split_dataset, train, Dataset, EpochMetrics};
use tlnlab::tsne::{embed_features, embedding_csv, extract_features, kl_trace_lines, nn_purity};

use crate::config::config_error;
use crate::import::import_images;
use crate::manifest::{ChiSource, FileDigest, Manifest, RunSpec};

/// Raised by `rerun` when outputs differ from the recorded digests.
#[derive(Debug)]
pub struct Mismatch(pub Vec<String>);

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "outputs differ from the manifest: {}", self.0.join(", "))
    }
}

impl std::error::Error for Mismatch {}

fn metrics_lines(trace: &[EpochMetrics]) -> String {
    trace
        .iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
        .collect()
}

fn write(
    out: &Path,
    name: &str,
    text: impl AsRef<[u8]>,
    outputs: &mut Vec<String>,
) -> anyhow::Result<()> {
    let path = out.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    outputs.push(name.to_string());
    Ok(())
}

fn split_seed(seed: u64) -> u64 {
    derive_seed(seed, &["split"])
}

fn load_split(path: &Path, split: f64, seed: u64) -> anyhow::Result<(Dataset, Dataset)> {
    let ds = load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    Ok(split_dataset(&ds, split, split_seed(seed))?)
}

/// Evenly spaced indices, at most `max` of them.
fn spread(len: usize, max: usize) -> Vec<usize> {
    let k = len.min(max);
    (0..k).map(|i| i * len / k).collect()
}

fn obtain_chi(
    chi: &ChiSource,
    out: &Path,
    outputs: &mut Vec<String>,
) -> anyhow::Result<PretrainedNetwork> {
    match chi {
        ChiSource::Archive(p) => Ok(load_pretrained(p)?),
        ChiSource::Pretrain {
            source,
            architecture,
            train,
            seed,
        } => {
            let ds = load_dataset(source)?;
            let cfg = train.pretrain(ds.len());
            let (chi, trace) = pretrain(*architecture, &ds, &cfg, *seed)?;
            save_pretrained(&chi, &out.join("chi.tln"))?;
            outputs.push("chi.tln".into());
            write(out, "pretrain.jsonl", metrics_lines(&trace), outputs)?;
            Ok(chi)
        }
    }
}

/// Runs `spec`, writing into `out`. Returns output paths relative to `out`.
pub fn execute(spec: &RunSpec, out: &Path, jobs: usize) -> anyhow::Result<Vec<String>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut outputs = Vec::new();
    match spec {
        RunSpec::Synth { spec } => {
            write_dataset(&generate(spec)?, out)?;
            outputs.extend(["meta.json".to_string(), "data.bin".to_string()]);
            println!(
                "wrote {} images to {}",
                spec.classes * spec.per_class,
                out.display()
            );
        }
        RunSpec::Import {
            input,
            name,
            size,
            channels,
        } => {
            let ds = import_images(input, name, *size, *channels)?;
            write_dataset(&ds, out)?;
            outputs.extend(["meta.json".to_string(), "data.bin".to_string()]);
            println!("imported {} images in {} classes", ds.len(), ds.classes());
        }
        RunSpec::Pretrain {
            source,
            architecture,
            train,
            seed,
        } => {
            let ds = load_dataset(source)?;
            let cfg = train.pretrain(ds.len());
            let (chi, trace) = pretrain(*architecture, &ds, &cfg, *seed)?;
            save_pretrained(&chi, &out.join("chi.tln"))?;
            outputs.push("chi.tln".into());
            write(out, "metrics.jsonl", metrics_lines(&trace), &mut outputs)?;
            let acc = evaluate(&chi.network, &ds)?;
            let summary = json!({ "train_config": cfg, "train_accuracy": acc, "n": chi.depth() });
            write(
                out,
                "summary.json",
                serde_json::to_string_pretty(&summary)? + "\n",
                &mut outputs,
            )?;
            println!(
                "pretrained {} (N = {}): train accuracy {acc:.4}",
                architecture.name(),
                chi.depth()
            );
        }
        RunSpec::Finetune {
            chi,
            target,
            split,
            variant,
            allowed_sizes,
            train: settings,
            seed,
        } => {
            let chi = load_pretrained(chi)?;
            let (tr, te) = load_split(target, *split, *seed)?;
            let cfg = settings.finetune(tr.len());
            let tln_cfg = variant.tln_config(tr.classes(), allowed_sizes);
            let resolved = tln_cfg.resolve(chi.depth())?;
            let mut tln = initial_tln(&chi, variant, *seed, allowed_sizes, tr.classes(), 0)?;
            let plan = make_freeze_plan(&tln, resolved.nu)?;
            let run_seed = train_seed(*seed, &variant.name, resolved.nu, 0);
            let trace = train(&mut tln.network, &plan, &tr, Some(&te), &cfg, run_seed)?;
            let accuracy = evaluate(&tln.network, &te)?;
            save_tln(&tln, &out.join("tln.tln"))?;
            outputs.push("tln.tln".into());
            write(out, "metrics.jsonl", metrics_lines(&trace), &mut outputs)?;
            let summary = json!({
                "variant": variant.name,
                "notation": variant.notation.to_string(),
                "n": resolved.n, "kappa": resolved.kappa, "nu": resolved.nu, "tau": resolved.tau,
                "train_len": tr.len(), "test_len": te.len(),
                "train_config": cfg,
                "accuracy": accuracy,
            });
            write(
                out,
                "summary.json",
                serde_json::to_string_pretty(&summary)? + "\n",
                &mut outputs,
            )?;
            println!(
                "{} nu={}: test accuracy {accuracy:.4}",
                variant.notation, resolved.nu
            );
        }
        RunSpec::Sweep {
            chi,
            targets,
            split,
            variants,
            repeats,
            nus,
            allowed_sizes,
            train: settings,
            seed,
        } => {
            let chi = obtain_chi(chi, out, &mut outputs)?;
            let mut seen = Vec::new();
            for target in targets {
                let (tr, te) = load_split(target, *split, *seed)?;
                if seen.contains(&tr.name) {
                    return Err(config_error(format!(
                        "two targets are both named `{}`",
                        tr.name
                    )));
                }
                seen.push(tr.name.clone());
                let cfg = SweepConfig {
                    variants: variants.clone(),
                    master_seed: *seed,
                    train: settings.finetune(tr.len()),
                    dataset: tr.name.clone(),
                    repeats: *repeats,
                    allowed_sizes: allowed_sizes.clone(),
                    nus: nus.clone(),
                };
                let result = run_sweep(&chi, &tr, &te, &cfg, jobs)?;
                write(
                    out,
                    &format!("{}/sweep.json", tr.name),
                    result.to_json()? + "\n",
                    &mut outputs,
                )?;
                write(
                    out,
                    &format!("{}/sweep.csv", tr.name),
                    result.to_csv(),
                    &mut outputs,
                )?;
                println!("{}: {} cells", tr.name, result.cells.len());
                for v in variants {
                    let (nu, acc) = best_setup(&result, &v.name)?;
                    println!("  {:<16} best nu={nu:<2} accuracy {acc:.4}", v.name);
                }
            }
        }
        RunSpec::Tsne {
            chi,
            datasets,
            layer,
            softmax,
            max_per_dataset,
            tsne,
        } => {
            let chi = load_pretrained(chi)?;
            let mut features = None;
            for path in datasets {
                let ds = load_dataset(path)?;
                let sub = ds.subset(&spread(ds.len(), *max_per_dataset));
                let mut f = extract_features(&chi.network, &sub, layer.as_deref())?;
                if *softmax {
                    f = f.softmax();
                }
                features = Some(match features {
                    None => f,
                    Some(acc) => tlnlab::tsne::FeatureMatrix::concat(acc, f)?,
                });
            }
            let features =
                features.ok_or_else(|| config_error("tsne needs at least one dataset"))?;
            if tsne.perplexity.is_nan() || tsne.perplexity >= features.n as f64 {
                return Err(config_error(format!(
                    "perplexity {} needs more than {} samples",
                    tsne.perplexity, features.n
                )));
            }
            let emb = embed_features(&features, tsne)?;
            write(
                out,
                "tsne.csv",
                embedding_csv(&features, &emb),
                &mut outputs,
            )?;
            write(out, "kl.jsonl", kl_trace_lines(&emb), &mut outputs)?;
            let purity = nn_purity(&emb.coords, &features.origins);
            let summary = json!({ "n": features.n, "d": features.d, "kl": emb.kl, "origin_nn_purity": purity });
            write(
                out,
                "summary.json",
                serde_json::to_string_pretty(&summary)? + "\n",
                &mut outputs,
            )?;
            println!(
                "embedded {} points, KL {:.4}, origin 1-NN purity {purity:.3}",
                features.n, emb.kl
            );
        }
        RunSpec::Report {
            sweeps,
            baseline,
            target,
            nu,
        } => {
            let nu: UnitRef = nu.parse().map_err(|e| config_error(format!("--nu: {e}")))?;
            let results = sweeps
                .iter()
                .map(|p| -> anyhow::Result<SweepResult> { Ok(read_json(p)?) })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let mut text = String::new();
            for r in &results {
                let name = &r.manifest.config.dataset;
                write(out, &format!("{name}/sweep.csv"), r.to_csv(), &mut outputs)?;
                let points = curves(r);
                write(
                    out,
                    &format!("{name}/curves.csv"),
                    render_curves(&points),
                    &mut outputs,
                )?;
                text.push_str(&format!("== {name} (N = {}) ==\n", r.manifest.n));
                for p in &points {
                    text.push_str(&format!(
                        "{:<16} nu={:<2} {:6.2} ± {:5.2}  (R={})\n",
                        p.variant,
                        p.nu,
                        100.0 * p.mean,
                        100.0 * p.ci95,
                        p.repeats
                    ));
                }
                for s in &r.manifest.setups {
                    let (bnu, acc) = best_setup(r, &s.variant)?;
                    text.push_str(&format!(
                        "best {:<16} nu={bnu} ({:.2})\n",
                        s.variant,
                        100.0 * acc
                    ));
                }
                text.push('\n');
            }
            let names: Vec<String> = results[0]
                .manifest
                .config
                .variants
                .iter()
                .map(|v| v.name.clone())
                .collect();
            let base = baseline.clone().unwrap_or_else(|| names[0].clone());
            let targets: Vec<String> = match target {
                Some(t) => vec![t.clone()],
                None => names.iter().filter(|n| **n != base).cloned().collect(),
            };
            let mut gains_csv =
                String::from("baseline,target,nu,dataset,baseline_mean,target_mean,gain,ci95\n");
            for t in &targets {
                let table = compare_variants(&results, &base, t, nu)?;
                text.push_str(&render_gains(&table));
                text.push('\n');
                for row in &table.rows {
                    gains_csv.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        table.baseline,
                        table.target,
                        row.nu,
                        row.dataset,
                        row.baseline_mean,
                        row.target_mean,
                        row.gain,
                        row.ci95
                    ));
                }
                gains_csv.push_str(&format!(
                    "{},{},{},avg,,,{},\n",
                    table.baseline, table.target, table.nu, table.average
                ));
            }
            write(out, "gains.csv", gains_csv, &mut outputs)?;
            write(out, "report.txt", &text, &mut outputs)?;
            print!("{text}");
        }
    }
    Ok(outputs)
}

fn digest_inputs(spec: &RunSpec) -> anyhow::Result<Vec<FileDigest>> {
    spec.inputs()
        .iter()
        .map(|p| FileDigest::of(p, p.display().to_string()))
        .collect()
}

/// Executes `spec` and writes `manifest.json` into `out`.
pub fn run(spec: &RunSpec, out: &Path, jobs: usize) -> anyhow::Result<Manifest> {
    let inputs = digest_inputs(spec)?;
    let files = execute(spec, out, jobs)?;
    let outputs = files
        .into_iter()
        .map(|f| FileDigest::of(&out.join(&f), f))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let manifest = Manifest {
        tool: "tlnlab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        run: spec.clone(),
        run_hash: spec.hash(),
        jobs,
        inputs,
        outputs,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Replays a manifest into `out` and checks every output digest.
pub fn rerun(manifest_path: &Path, out: &Path, jobs: usize) -> anyhow::Result<()> {
    let recorded: Manifest =
        read_json(manifest_path).with_context(|| format!("reading {}", manifest_path.display()))?;
    let inputs = digest_inputs(&recorded.run)?;
    let mut diffs: Vec<String> = inputs
        .iter()
        .filter(|d| !recorded.inputs.contains(d))
        .map(|d| format!("input {}", d.path))
        .collect();
    if !diffs.is_empty() {
        return Err(Mismatch(diffs).into());
    }
    let fresh = run(&recorded.run, out, jobs)?;
    diffs.extend(
        recorded
            .outputs
            .iter()
            .filter(|d| !fresh.outputs.contains(d))
            .map(|d| d.path.clone()),
    );
    if !diffs.is_empty() {
        return Err(Mismatch(diffs).into());
    }
    println!("reproduced {} outputs bit-exactly", fresh.outputs.len());
    Ok(())
}
