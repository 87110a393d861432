//! The full leave-one-domain-out ablation: each of the four variants trains
//! once per held-out target (and per seed repetition), is scored on the
//! target with all five metrics, and has its extractor features probed for
//! residual domain information. Results aggregate into a per-metric table
//! with per-target columns, the cross-target average, and the gain over the
//! DeepAll baseline.

use rayon::prelude::*;
use serde_json::json;

use crate::config::AppConfig;
use crate::metrics::{MetricsReport, METRIC_NAMES};
use crate::probe::{domain_probe_accuracy, export_features, ProbeReport};
use crate::rng::derive_seed;
use crate::synth::{DomainDataset, Subject};
use crate::trainer::{run_single_target, TrainConfig, TrainError, TrainLog, Variant};

pub struct RunOutcome {
    pub variant: Variant,
    pub target_domain: usize,
    pub target_name: String,
    pub rep: usize,
    pub seed: u64,
    pub report: MetricsReport,
    pub probe_accuracy: f64,
    pub bundle: crate::models::ModelBundle,
    pub log: TrainLog,
}

#[derive(Clone, Debug)]
pub struct MetricRow {
    pub per_target: Vec<Option<f64>>,
    pub avg: Option<f64>,
    pub gain: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub targets: Vec<String>,
    pub variants: Vec<Variant>,
    /// rows[variant_index][metric_index]
    pub rows: Vec<[MetricRow; 5]>,
    pub seeds: usize,
}

pub struct AblationOutcome {
    pub runs: Vec<RunOutcome>,
    pub table: AblationTable,
    pub probe: Vec<ProbeReport>,
}

/// Run the whole ablation. Work items are independent and execute in
/// parallel; each run derives its own seed from (config seed, repetition,
/// target), so results do not depend on scheduling.
pub fn run_ablation(app: &AppConfig, domains: &[DomainDataset]) -> Result<AblationOutcome, TrainError> {
    if domains.len() < 3 {
        return Err(TrainError::BadData(format!(
            "leave-one-out ablation needs at least 3 domains, got {}",
            domains.len()
        )));
    }
    let variants = Variant::ALL;
    let mut jobs = Vec::new();
    for &variant in &variants {
        for target in domains {
            for rep in 0..app.experiment_seeds {
                jobs.push((variant, target.domain_id, rep));
            }
        }
    }

    let runs: Vec<RunOutcome> = jobs
        .par_iter()
        .map(|&(variant, target_domain, rep)| -> Result<RunOutcome, TrainError> {
            let cfg = TrainConfig {
                variant,
                seed: derive_seed(app.seed, &format!("rep/{rep}")),
                ..app.train_config()
            };
            let run = run_single_target(&cfg, domains, target_domain)?;
            let source_subjects: Vec<&Subject> = domains
                .iter()
                .filter(|d| d.domain_id != target_domain)
                .flat_map(|d| d.subjects.iter())
                .collect();
            let records = export_features(&run.bundle, &source_subjects, cfg.batch_size.max(1))
                .map_err(|e| TrainError::BadData(e.to_string()))?;
            let probe_accuracy = domain_probe_accuracy(&records, app.probe_folds)
                .map_err(|e| TrainError::BadData(e.to_string()))?;
            Ok(RunOutcome {
                variant,
                target_domain,
                target_name: run.target_name.clone(),
                rep,
                seed: run.seed,
                report: run.report,
                probe_accuracy,
                bundle: run.bundle,
                log: run.log,
            })
        })
        .collect::<Result<_, _>>()?;

    let table = aggregate(app, domains, &variants, &runs);
    let probe = aggregate_probe(app, domains.len(), &variants, &runs);
    Ok(AblationOutcome { runs, table, probe })
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

fn aggregate(
    app: &AppConfig,
    domains: &[DomainDataset],
    variants: &[Variant],
    runs: &[RunOutcome],
) -> AblationTable {
    let targets: Vec<String> = domains.iter().map(|d| d.spec.name.clone()).collect();
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let row: [MetricRow; 5] = std::array::from_fn(|metric| {
            let per_target: Vec<Option<f64>> = domains
                .iter()
                .map(|d| {
                    mean_defined(
                        runs.iter()
                            .filter(|r| r.variant == variant && r.target_domain == d.domain_id)
                            .map(|r| r.report.avg[metric]),
                    )
                })
                .collect();
            let avg = mean_defined(per_target.iter().copied());
            MetricRow { per_target, avg, gain: None }
        });
        rows.push(row);
    }
    let baseline: Vec<Option<f64>> = {
        let bi = variants.iter().position(|v| *v == Variant::DeepAll).unwrap_or(0);
        (0..5).map(|m| rows[bi][m].avg).collect()
    };
    for row in &mut rows {
        for (m, base) in baseline.iter().enumerate() {
            if let (Some(a), Some(b)) = (row[m].avg, base) {
                row[m].gain = Some(a - b);
            }
        }
    }
    AblationTable { targets, variants: variants.to_vec(), rows, seeds: app.experiment_seeds }
}

fn aggregate_probe(
    app: &AppConfig,
    k_domains: usize,
    variants: &[Variant],
    runs: &[RunOutcome],
) -> Vec<ProbeReport> {
    variants
        .iter()
        .map(|&variant| {
            let accs: Vec<f64> = runs
                .iter()
                .filter(|r| r.variant == variant)
                .map(|r| r.probe_accuracy)
                .collect();
            ProbeReport {
                variant: variant.as_str().to_string(),
                accuracy: accs.iter().sum::<f64>() / accs.len().max(1) as f64,
                k: k_domains - 1,
                folds: app.probe_folds,
                seed: app.seed,
            }
        })
        .collect()
}

impl AblationTable {
    pub fn probe_accuracy_of(outcome: &AblationOutcome, variant: Variant) -> Option<f64> {
        outcome
            .probe
            .iter()
            .find(|p| p.variant == variant.as_str())
            .map(|p| p.accuracy)
    }

    pub fn value(&self, variant: Variant, metric: usize) -> Option<f64> {
        let vi = self.variants.iter().position(|v| *v == variant)?;
        self.rows[vi][metric].avg
    }

    fn cell(v: Option<f64>) -> String {
        v.map_or("NA".to_string(), |x| format!("{x:.3}"))
    }

    /// Plain-text table: one section per metric, rows per variant, columns
    /// per target plus avg and gain.
    pub fn to_text(&self) -> String {
        let arrow = ["(higher is better)", "(lower is better)", "(lower is better)", "(higher is better)", "(higher is better)"];
        let mut out = format!(
            "Leave-one-domain-out ablation, {} seed repetition(s) per cell\n",
            self.seeds
        );
        for (m, name) in METRIC_NAMES.iter().enumerate() {
            out.push_str(&format!("\n{} {}\n", name, arrow[m]));
            out.push_str(&format!("{:<10}", "model"));
            for t in &self.targets {
                out.push_str(&format!("{:>10}", format!("->{t}")));
            }
            out.push_str(&format!("{:>10}{:>10}\n", "avg", "gain"));
            for (vi, variant) in self.variants.iter().enumerate() {
                out.push_str(&format!("{:<10}", variant.as_str()));
                for cell in &self.rows[vi][m].per_target {
                    out.push_str(&format!("{:>10}", Self::cell(*cell)));
                }
                out.push_str(&format!(
                    "{:>10}{:>10}\n",
                    Self::cell(self.rows[vi][m].avg),
                    Self::cell(self.rows[vi][m].gain)
                ));
            }
        }
        out
    }

    /// CSV: variant,metric,<target columns>,avg,gain.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,metric");
        for t in &self.targets {
            out.push_str(&format!(",target_{t}"));
        }
        out.push_str(",avg,gain\n");
        let cell = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        for (vi, variant) in self.variants.iter().enumerate() {
            for (m, name) in METRIC_NAMES.iter().enumerate() {
                out.push_str(&format!("{},{}", variant.as_str(), name));
                for c in &self.rows[vi][m].per_target {
                    out.push_str(&format!(",{}", cell(*c)));
                }
                out.push_str(&format!(",{},{}\n", cell(self.rows[vi][m].avg), cell(self.rows[vi][m].gain)));
            }
        }
        out
    }
}

pub fn probe_json(probe: &[ProbeReport]) -> serde_json::Value {
    json!(probe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::build_benchmark;

    #[test]
    fn ablation_shape_and_deepall_gain() {
        // smallest viable end-to-end ablation
        let domains = build_benchmark(31, 3, 5, 32, 32).unwrap();
        let mut app = AppConfig::default();
        app.epochs = 1;
        app.batch_size = 4;
        app.base_channels = 2;
        app.data_n_per_domain = 5;
        app.data_height = 32;
        app.data_width = 32;
        let outcome = run_ablation(&app, &domains).unwrap();

        assert_eq!(outcome.runs.len(), 4 * 3);
        assert_eq!(outcome.table.rows.len(), 4);
        assert_eq!(outcome.table.targets, vec!["D0", "D1", "D2"]);
        // 4 variants x 5 metrics x (3 targets + avg + gain) cells
        let cells: usize = outcome
            .table
            .rows
            .iter()
            .flat_map(|r| r.iter())
            .map(|mr| mr.per_target.len() + 2)
            .sum();
        assert_eq!(cells, 4 * 5 * (3 + 2));

        let deepall = outcome.table.variants.iter().position(|v| *v == Variant::DeepAll).unwrap();
        for m in 0..5 {
            if outcome.table.rows[deepall][m].avg.is_some() {
                assert_eq!(outcome.table.rows[deepall][m].gain, Some(0.0));
            }
        }
        let text = outcome.table.to_text();
        for name in METRIC_NAMES {
            assert!(text.contains(name));
        }
        let csv = outcome.table.to_csv();
        assert!(csv.starts_with("variant,metric,target_D0,target_D1,target_D2,avg,gain"));
        assert_eq!(outcome.probe.len(), 4);
        for p in &outcome.probe {
            assert!(p.accuracy >= 0.0 && p.accuracy <= 1.0);
            assert_eq!(p.k, 2);
        }
    }

    #[test]
    fn refuses_two_domain_ablation() {
        let domains = build_benchmark(32, 3, 4, 32, 32).unwrap();
        let app = AppConfig::default();
        assert!(run_ablation(&app, &domains[..2]).is_err());
    }
}
