use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sweep::SweepResult;
use crate::tln::UnitRef;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Half-width of a normal-approximation 95% interval of the mean.
fn ci95(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    1.96 * (var / xs.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub dataset: String,
    pub nu: usize,
    pub baseline_mean: f64,
    pub target_mean: f64,
    /// `100 · (target − baseline)`, in accuracy points.
    pub gain: f64,
    /// 95% half-width of the paired per-repeat gain, in points.
    pub ci95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainTable {
    pub baseline: String,
    pub target: String,
    pub nu: String,
    pub rows: Vec<GainRow>,
    /// Mean gain over the rows.
    pub average: f64,
}

/// Gain of `target` over `baseline` at setup `nu`, one row per sweep
/// (dataset) plus the average.
pub fn compare_variants(
    results: &[SweepResult],
    baseline: &str,
    target: &str,
    nu: UnitRef,
) -> Result<GainTable> {
    if results.is_empty() {
        return Err(Error::contract("no sweep results to compare"));
    }
    let mut rows = Vec::new();
    for r in results {
        let n = nu.resolve(r.manifest.n)?;
        let b = r.accuracies(baseline, n);
        let t = r.accuracies(target, n);
        if b.is_empty() || t.is_empty() {
            return Err(Error::contract(format!(
                "{}: no cells for `{}` at nu={n}",
                r.manifest.config.dataset,
                if b.is_empty() { baseline } else { target }
            )));
        }
        let paired: Vec<f64> = b.iter().zip(&t).map(|(b, t)| 100.0 * (t - b)).collect();
        let (bm, tm) = (mean(&b), mean(&t));
        rows.push(GainRow {
            dataset: r.manifest.config.dataset.clone(),
            nu: n,
            baseline_mean: bm,
            target_mean: tm,
            gain: 100.0 * (tm - bm),
            ci95: if b.len() == t.len() {
                ci95(&paired)
            } else {
                0.0
            },
        });
    }
    let average = rows.iter().map(|r| r.gain).sum::<f64>() / rows.len() as f64;
    Ok(GainTable {
        baseline: baseline.to_string(),
        target: target.to_string(),
        nu: nu.to_string(),
        rows,
        average,
    })
}

/// The setup with the best repeat-averaged accuracy. Ties go to the larger ν.
pub fn best_setup(result: &SweepResult, variant: &str) -> Result<(usize, f64)> {
    let nus = result
        .setups(variant)
        .ok_or_else(|| Error::contract(format!("variant `{variant}` not in sweep")))?;
    let mut sorted = nus.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let mut best: Option<(usize, f64)> = None;
    for nu in sorted {
        let acc = result.accuracies(variant, nu);
        if acc.is_empty() {
            continue;
        }
        let m = mean(&acc);
        if best.is_none_or(|(_, b)| m > b) {
            best = Some((nu, m));
        }
    }
    best.ok_or_else(|| Error::contract(format!("variant `{variant}` has no cells")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub variant: String,
    pub nu: usize,
    pub mean: f64,
    pub ci95: f64,
    pub repeats: usize,
}

/// Accuracy-versus-ν curve per variant, ν descending.
pub fn curves(result: &SweepResult) -> Vec<CurvePoint> {
    let mut out = Vec::new();
    for s in &result.manifest.setups {
        for &nu in &s.nus {
            let acc = result.accuracies(&s.variant, nu);
            if acc.is_empty() {
                continue;
            }
            out.push(CurvePoint {
                variant: s.variant.clone(),
                nu,
                mean: mean(&acc),
                ci95: ci95(&acc),
                repeats: acc.len(),
            });
        }
    }
    out
}

pub fn render_curves(points: &[CurvePoint]) -> String {
    let mut out = String::from("variant,nu,mean,ci95,repeats\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.variant, p.nu, p.mean, p.ci95, p.repeats
        ));
    }
    out
}

/// Fixed-width text table with one row per dataset and an average row.
pub fn render_gains(table: &GainTable) -> String {
    let mut out = format!(
        "gain of `{}` over `{}` at nu = {} (accuracy points)\n",
        table.target, table.baseline, table.nu
    );
    out.push_str(&format!(
        "{:<20} {:>4} {:>9} {:>9} {:>8} {:>8}\n",
        "dataset", "nu", "baseline", "target", "gain", "ci95"
    ));
    for r in &table.rows {
        out.push_str(&format!(
            "{:<20} {:>4} {:>9.2} {:>9.2} {:>+8.2} {:>8.2}\n",
            r.dataset,
            r.nu,
            100.0 * r.baseline_mean,
            100.0 * r.target_mean,
            r.gain,
            r.ci95
        ));
    }
    out.push_str(&format!(
        "{:<20} {:>4} {:>9} {:>9} {:>+8.2}\n",
        "avg.", "", "", "", table.average
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::Granularity;
    use crate::sweep::{Cell, SweepConfig, SweepManifest, VariantSetups, VariantSpec};
    use crate::tln::{parse_tln, SourceMeta};
    use crate::train::{Budget, TrainConfig};

    /// A result for N = 8 with `acc[variant][i]` at ν = 8 − i for every repeat.
    fn fake(dataset: &str, acc: &[(&str, Vec<Vec<f64>>)]) -> SweepResult {
        let variants: Vec<VariantSpec> = acc
            .iter()
            .map(|(name, _)| VariantSpec::new(*name, parse_tln("[chi]_1^psi").unwrap()))
            .collect();
        let mut cells = Vec::new();
        let mut setups = Vec::new();
        for (name, rows) in acc {
            let nus: Vec<usize> = (0..rows.len()).map(|i| 8 - i).collect();
            for (i, reps) in rows.iter().enumerate() {
                for (r, &a) in reps.iter().enumerate() {
                    cells.push(Cell {
                        variant: name.to_string(),
                        nu: 8 - i,
                        repeat: r,
                        seed: 0,
                        accuracy: a,
                        trace: vec![],
                    });
                }
            }
            setups.push(VariantSetups {
                variant: name.to_string(),
                notation: "[chi]_1^psi".into(),
                nus,
            });
        }
        let config = SweepConfig {
            variants,
            master_seed: 0,
            train: TrainConfig::new(Budget {
                iterations: 1,
                batch_size: 2,
            }),
            dataset: dataset.into(),
            repeats: 1,
            allowed_sizes: vec![],
            nus: None,
        };
        SweepResult {
            manifest: SweepManifest {
                config_hash: config.content_hash(),
                config,
                source: SourceMeta {
                    dataset: "src".into(),
                    classes: 8,
                    architecture: "toy-alexnet".into(),
                    granularity: Granularity::Layer,
                },
                n: 8,
                train_len: 0,
                test_len: 0,
                epoch_len: 1,
                setups,
            },
            cells,
        }
    }

    fn flat(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&a| vec![a]).collect()
    }

    #[test]
    fn best_setup_monotone_ties_and_planted_peak() {
        // ν = 8..1, accuracy growing as ν falls.
        let r = fake(
            "d",
            &[("a", flat(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]))],
        );
        assert_eq!(best_setup(&r, "a").unwrap().0, 1);
        let r = fake("d", &[("a", flat(&[0.5; 8]))]);
        assert_eq!(best_setup(&r, "a").unwrap(), (8, 0.5));
        // Peak at ν = 3 = N − 5.
        let r = fake(
            "d",
            &[("a", flat(&[0.4, 0.5, 0.55, 0.6, 0.62, 0.7, 0.66, 0.6]))],
        );
        assert_eq!(best_setup(&r, "a").unwrap().0, 3);
        assert!(best_setup(&r, "zzz").is_err());
    }

    #[test]
    fn gain_is_a_difference_in_points() {
        let r = fake("d", &[("trad", flat(&[0.62])), ("prop", flat(&[0.65]))]);
        let t =
            compare_variants(std::slice::from_ref(&r), "trad", "prop", UnitRef::Abs(8)).unwrap();
        assert!((t.rows[0].gain - 3.0).abs() < 1e-9);
        let same = compare_variants(std::slice::from_ref(&r), "prop", "prop", UnitRef::N).unwrap();
        assert_eq!(same.rows[0].gain, 0.0);
        let back = compare_variants(std::slice::from_ref(&r), "prop", "trad", UnitRef::N).unwrap();
        assert_eq!(back.rows[0].gain, -t.rows[0].gain);
        assert!(matches!(
            compare_variants(&[r], "trad", "prop", UnitRef::Abs(2)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn average_column_over_datasets() {
        let a = fake("a", &[("x", flat(&[0.5])), ("y", flat(&[0.6]))]);
        let b = fake("b", &[("x", flat(&[0.5])), ("y", flat(&[0.52]))]);
        let t = compare_variants(&[a, b], "x", "y", UnitRef::N).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert!((t.average - 6.0).abs() < 1e-9);
        let text = render_gains(&t);
        assert!(text.contains("avg."));
        assert!(text.lines().count() == 5);
    }

    #[test]
    fn curves_average_repeats() {
        let r = fake("d", &[("a", vec![vec![0.5, 0.7], vec![0.6, 0.6]])]);
        let c = curves(&r);
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].nu, c[0].repeats), (8, 2));
        assert!((c[0].mean - 0.6).abs() < 1e-12);
        assert!(c[0].ci95 > 0.0 && c[1].ci95 == 0.0);
    }
}
