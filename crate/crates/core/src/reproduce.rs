//! Reproduction bundles: each runs one Digit-scale experiment, writes CSV
//! and JSON data and a markdown report with pass/fail checks.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::attack::TriggerMode;
use crate::defense::{
    blur_defense_sweep, check_prune_curve, fine_prune_sweep, max_success_rise,
    multilayer_tuning_sweep, DefenseSweepResult, SweepPoint,
};
use crate::error::{Error, Result};
use crate::harness::{split_for, AttackRun, Workbench};
use crate::metrics::{run_seed, write_json, write_records_csv, Aggregate, MetricsRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Bundle {
    Table2Digit,
    Table4Digit,
    Fig4,
    Fig6,
    Fig7,
    Fig8,
    Fig9,
}

impl Bundle {
    pub const ALL: [Bundle; 7] = [
        Bundle::Table2Digit,
        Bundle::Table4Digit,
        Bundle::Fig4,
        Bundle::Fig6,
        Bundle::Fig7,
        Bundle::Fig8,
        Bundle::Fig9,
    ];

    pub fn name(self) -> &'static str {
        self.definition().name
    }

    pub fn parse(name: &str) -> Result<Bundle> {
        Bundle::ALL
            .into_iter()
            .find(|b| b.name() == name)
            .ok_or_else(|| {
                let known: Vec<&str> = Bundle::ALL.iter().map(|b| b.name()).collect();
                Error::Config(format!(
                    "unknown bundle {name:?}; expected one of {}",
                    known.join(", ")
                ))
            })
    }

    pub fn definition(self) -> &'static BundleDefinition {
        &DEFINITIONS[self as usize]
    }
}

/// What a bundle measures, the published numbers it is compared against and
/// its pass/fail tolerances.
#[derive(Debug)]
pub struct BundleDefinition {
    pub name: &'static str,
    pub title: &'static str,
    pub reference: &'static str,
    pub runs: usize,
    pub tolerances: &'static [(&'static str, f64)],
}

impl BundleDefinition {
    pub fn tolerance(&self, key: &str) -> f64 {
        self.tolerances
            .iter()
            .find(|(k, _)| *k == key)
            .map(|&(_, v)| v)
            .unwrap_or_else(|| panic!("bundle {} has no tolerance {key}", self.name))
    }
}

static DEFINITIONS: [BundleDefinition; 7] = [
    BundleDefinition {
        name: "table2-digit",
        title: "Digit multi-image attack",
        reference:
            "attack success 96.6%, infected-student accuracy 97.3%, clean-teacher student 96.0%",
        runs: 1,
        tolerances: &[("min_success", 0.85), ("accuracy_band", 0.02)],
    },
    BundleDefinition {
        name: "table4-digit",
        title: "Digit single-image attack",
        reference: "attack success 46.6% with one target image",
        runs: 5,
        tolerances: &[("min_success", 0.25), ("accuracy_band", 0.02)],
    },
    BundleDefinition {
        name: "fig4",
        title: "Random versus optimized triggers",
        reference: "random triggers below 20% success",
        runs: 20,
        tolerances: &[("max_random_median", 0.30), ("min_optimized", 0.85)],
    },
    BundleDefinition {
        name: "fig6",
        title: "Multiple targets",
        reference: "success drops gracefully from 1 to 3 targets",
        runs: 3,
        tolerances: &[("max_targets", 3.0), ("accuracy_band", 0.03)],
    },
    BundleDefinition {
        name: "fig7",
        title: "Fine-pruning",
        reference: "success falls only with heavy loss of accuracy",
        runs: 1,
        tolerances: &[("success_floor", 0.20), ("min_accuracy_loss", 0.20)],
    },
    BundleDefinition {
        name: "fig8",
        title: "Input blurring",
        reference: "success decreases with kernel size",
        runs: 1,
        tolerances: &[("rise_band", 0.05)],
    },
    BundleDefinition {
        name: "fig9",
        title: "Tuning more layers",
        reference: "success drops to 0% once a layer before K_t is tuned",
        runs: 1,
        tolerances: &[("max_success_violated", 0.05), ("success_band", 0.05)],
    },
];

/// One pass/fail line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub requirement: String,
    pub passed: bool,
}

impl Check {
    fn new(name: &str, measured: f64, requirement: String, passed: bool) -> Check {
        Check {
            name: name.to_string(),
            measured,
            requirement,
            passed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BundleOutcome {
    pub bundle: &'static str,
    pub synthetic: bool,
    pub checks: Vec<Check>,
    /// Free-form findings, including shape divergences.
    pub notes: Vec<String>,
}

impl BundleOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_markdown(&self, def: &BundleDefinition) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {} ({})\n", def.title, def.name);
        let _ = writeln!(s, "Reference result: {}.\n", def.reference);
        if self.synthetic {
            let _ = writeln!(
                s,
                "**Synthetic data**: MNIST was not found, numbers are not comparable.\n"
            );
        }
        let _ = writeln!(s, "| check | measured | requirement | result |");
        let _ = writeln!(s, "|---|---|---|---|");
        for c in &self.checks {
            let _ = writeln!(
                s,
                "| {} | {:.4} | {} | {} |",
                c.name,
                c.measured,
                c.requirement,
                if c.passed { "PASS" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "\nOverall: **{}**",
            if self.passed() { "PASS" } else { "FAIL" }
        );
        if !self.notes.is_empty() {
            let _ = writeln!(s, "\n## Notes\n");
            for n in &self.notes {
                let _ = writeln!(s, "- {n}");
            }
        }
        s
    }
}

/// Runs bundles against one workbench, reusing the default attack.
pub struct Session<'a> {
    pub bench: &'a Workbench,
    pub default_run: AttackRun,
    out_dir: Option<PathBuf>,
}

impl<'a> Session<'a> {
    pub fn new(bench: &'a Workbench, out_dir: Option<&Path>) -> Result<Self> {
        let default_run = bench.default_attack()?;
        log::info!(
            "default attack: success {:.4} accuracy {:.4}",
            default_run.success[0],
            default_run.clean_accuracy
        );
        Ok(Session {
            bench,
            default_run,
            out_dir: out_dir.map(Path::to_path_buf),
        })
    }

    fn dir(&self, bundle: Bundle) -> Result<Option<PathBuf>> {
        match &self.out_dir {
            None => Ok(None),
            Some(d) => {
                let d = d.join(bundle.name());
                std::fs::create_dir_all(&d)?;
                Ok(Some(d))
            }
        }
    }

    fn finish(&self, bundle: Bundle, outcome: BundleOutcome) -> Result<BundleOutcome> {
        if let Some(d) = self.dir(bundle)? {
            std::fs::write(
                d.join("report.md"),
                outcome.to_markdown(bundle.definition()),
            )?;
            write_json(&outcome, d.join("checks.json"))?;
        }
        Ok(outcome)
    }

    fn write_records(&self, bundle: Bundle, agg: &Aggregate) -> Result<()> {
        if let Some(d) = self.dir(bundle)? {
            write_records_csv(&agg.records, d.join("runs.csv"))?;
            write_json(agg, d.join("summary.json"))?;
        }
        Ok(())
    }

    fn write_sweep(&self, bundle: Bundle, sweep: &DefenseSweepResult) -> Result<()> {
        if let Some(d) = self.dir(bundle)? {
            sweep.write_csv(d.join("sweep.csv"))?;
            write_json(sweep, d.join("summary.json"))?;
        }
        Ok(())
    }

    fn outcome(&self, bundle: Bundle, checks: Vec<Check>, notes: Vec<String>) -> BundleOutcome {
        BundleOutcome {
            bundle: bundle.name(),
            synthetic: self.bench.pools.synthetic,
            checks,
            notes,
        }
    }

    fn record(&self, name: &str, seed: u64, success: f64, accuracy: f64) -> MetricsRecord {
        MetricsRecord {
            experiment: name.to_string(),
            seed,
            attack_success_rate: success,
            clean_accuracy: accuracy,
            eval_samples: self.bench.split.eval.len(),
            test_samples: self.bench.split.student_test.len(),
        }
    }

    fn base_seed(&self) -> u64 {
        self.bench.config.experiment.seed
    }

    pub fn run(&self, bundle: Bundle) -> Result<BundleOutcome> {
        log::info!("bundle {}", bundle.name());
        match bundle {
            Bundle::Table2Digit => self.table2(),
            Bundle::Table4Digit => self.table4(),
            Bundle::Fig4 => self.fig4(),
            Bundle::Fig6 => self.fig6(),
            Bundle::Fig7 => self.fig7(),
            Bundle::Fig8 => self.fig8(),
            Bundle::Fig9 => self.fig9(),
        }
    }

    fn table2(&self) -> Result<BundleOutcome> {
        let b = Bundle::Table2Digit;
        let def = b.definition();
        let bench = self.bench;
        let run = &self.default_run;
        let clean_success = crate::metrics::attack_success_rate(
            &bench.baseline_student,
            &run.infection.triggers[0],
            bench.split.eval.images(),
            bench.split.target_label(),
        )?;
        let agg = Aggregate::from_records(
            def.name,
            vec![
                self.record(
                    "clean-teacher",
                    self.base_seed(),
                    clean_success,
                    bench.baseline_accuracy,
                ),
                self.record(
                    "infected",
                    self.base_seed(),
                    run.success[0],
                    run.clean_accuracy,
                ),
            ],
        );
        self.write_records(b, &agg)?;
        let min = def.tolerance("min_success");
        let band = def.tolerance("accuracy_band");
        let drop = bench.baseline_accuracy - run.clean_accuracy;
        let on_test = crate::metrics::attack_success_rate_on(
            &run.student,
            &run.infection.triggers[0],
            &bench.split.student_test,
            bench.split.target_label(),
        )?;
        let inj = &run.infection.injection;
        let notes = vec![
            format!(
                "clean-teacher student accuracy {:.4}",
                bench.baseline_accuracy
            ),
            format!("trigger on the clean-teacher student: success {clean_success:.4}"),
            format!(
                "success on poisoned non-target student test images {on_test:.4} (X_eval {:.4}, difference {:+.4})",
                run.success[0],
                on_test - run.success[0]
            ),
            format!(
                "injection: poisoned gap {:.5}, baseline clean gap {:.5}, closer fraction {:.4}",
                inj.poisoned_gap[0], inj.baseline_gap[0], inj.closer_fraction[0]
            ),
        ];
        let checks = vec![
            Check::new(
                "attack success",
                run.success[0],
                format!(">= {min}"),
                run.success[0] >= min,
            ),
            Check::new(
                "accuracy drop",
                drop,
                format!("|drop| <= {band}"),
                drop.abs() <= band,
            ),
        ];
        self.finish(b, self.outcome(b, checks, notes))
    }

    fn table4(&self) -> Result<BundleOutcome> {
        let b = Bundle::Table4Digit;
        let def = b.definition();
        let bench = self.bench;
        let mut records = Vec::new();
        let mut baselines = Vec::new();
        for i in 0..def.runs {
            let seed = run_seed(self.base_seed(), i);
            let split = split_for(
                &bench.config,
                &bench.pools,
                &[bench.config.data.target_label],
                1,
                seed,
            )?;
            let run = bench
                .reseeded(seed)
                .run_attack(&split, TriggerMode::Optimized)?;
            let baseline = bench.baseline_accuracy_for(&split)?;
            log::info!(
                "single image run {i}: success {:.4}, accuracy {:.4} (clean {baseline:.4})",
                run.success[0],
                run.clean_accuracy
            );
            records.push(self.record("single-image", seed, run.success[0], run.clean_accuracy));
            baselines.push(baseline);
        }
        let baseline = baselines.iter().sum::<f64>() / baselines.len() as f64;
        let agg = Aggregate::from_records(def.name, records);
        self.write_records(b, &agg)?;
        let min = def.tolerance("min_success");
        let band = def.tolerance("accuracy_band");
        let mean = agg.attack_success_rate.mean;
        let multi = self.default_run.success[0];
        let drop = baseline - agg.clean_accuracy.mean;
        let checks = vec![
            Check::new("mean success", mean, format!(">= {min}"), mean >= min),
            Check::new(
                "mean success below multi-image",
                mean,
                format!("< {multi:.4}"),
                mean < multi,
            ),
            Check::new(
                "mean accuracy drop",
                drop,
                format!("|drop| <= {band}"),
                drop.abs() <= band,
            ),
        ];
        let notes = vec![
            format!(
                "success range {:.4}..{:.4} over {} runs",
                agg.attack_success_rate.min, agg.attack_success_rate.max, agg.runs
            ),
            format!(
                "mean infected accuracy {:.4}; clean-teacher students on the same splits {baseline:.4}; default-split clean-teacher student {:.4}",
                agg.clean_accuracy.mean, bench.baseline_accuracy
            ),
        ];
        self.finish(b, self.outcome(b, checks, notes))
    }

    fn fig4(&self) -> Result<BundleOutcome> {
        let b = Bundle::Fig4;
        let def = b.definition();
        let bench = self.bench;
        let prepared = bench.prepare_attack(&bench.split)?;
        let mut records = Vec::new();
        for i in 0..def.runs {
            let seed = run_seed(self.base_seed() ^ 0x7261, i);
            let run = bench.run_prepared(&prepared, &bench.split, TriggerMode::Random(seed))?;
            log::info!("random trigger {i}: success {:.4}", run.success[0]);
            records.push(self.record("random-trigger", seed, run.success[0], run.clean_accuracy));
        }
        let agg = Aggregate::from_records(def.name, records);
        self.write_records(b, &agg)?;
        let mut rates: Vec<f64> = agg.records.iter().map(|r| r.attack_success_rate).collect();
        rates.sort_by(f64::total_cmp);
        let median = median(&rates);
        let max_median = def.tolerance("max_random_median");
        let min_opt = def.tolerance("min_optimized");
        let opt = self.default_run.success[0];
        let checks = vec![
            Check::new(
                "random median success",
                median,
                format!("< {max_median}"),
                median < max_median,
            ),
            Check::new(
                "optimized success",
                opt,
                format!("> {min_opt}"),
                opt > min_opt,
            ),
        ];
        let below = rates.iter().filter(|&&r| r < opt).count();
        let notes = vec![format!(
            "{below} of {} random triggers score below the optimized trigger",
            rates.len()
        )];
        self.finish(b, self.outcome(b, checks, notes))
    }

    fn fig6(&self) -> Result<BundleOutcome> {
        let b = Bundle::Fig6;
        let def = b.definition();
        let bench = self.bench;
        let max_targets = def.tolerance("max_targets") as usize;
        let labels = target_labels(bench.config.data.target_label, max_targets);
        let mut points = Vec::new();
        let mut baselines = vec![0.0; max_targets];
        for n in 1..=max_targets {
            for i in 0..def.runs {
                let seed = run_seed(self.base_seed(), i);
                let split = split_for(
                    &bench.config,
                    &bench.pools,
                    &labels[..n],
                    bench.config.data.target_count,
                    seed,
                )?;
                let run = bench
                    .reseeded(seed)
                    .run_attack(&split, TriggerMode::Optimized)?;
                let baseline = bench.baseline_accuracy_for(&split)?;
                baselines[n - 1] += baseline / def.runs as f64;
                log::info!(
                    "{n} targets, run {i}: success {:?}, accuracy {:.4} (clean {baseline:.4})",
                    run.success,
                    run.clean_accuracy
                );
                points.push(SweepPoint {
                    sweep_param: n as f64,
                    attack_success_rate: run.mean_success(),
                    clean_accuracy: run.clean_accuracy,
                    seed,
                });
            }
        }
        let sweep = DefenseSweepResult::new("multi-target", points);
        self.write_sweep(b, &sweep)?;
        let mean_at = |n: usize, acc: bool| {
            let pts: Vec<&SweepPoint> = sweep
                .points
                .iter()
                .filter(|p| p.sweep_param == n as f64)
                .collect();
            pts.iter()
                .map(|p| {
                    if acc {
                        p.clean_accuracy
                    } else {
                        p.attack_success_rate
                    }
                })
                .sum::<f64>()
                / pts.len() as f64
        };
        let one = mean_at(1, false);
        let last = mean_at(max_targets, false);
        let band = def.tolerance("accuracy_band");
        let mut checks = vec![Check::new(
            &format!("per-target success, 1 vs {max_targets} targets"),
            one - last,
            format!("{one:.4} >= {last:.4}"),
            one >= last,
        )];
        let mut notes = Vec::new();
        for n in 1..=max_targets {
            let drop = baselines[n - 1] - mean_at(n, true);
            checks.push(Check::new(
                &format!("accuracy drop, {n} targets"),
                drop,
                format!("|drop| <= {band}"),
                drop.abs() <= band,
            ));
            notes.push(format!(
                "{n} targets: mean per-target success {:.4}, accuracy {:.4}, clean-teacher students on the same splits {:.4}",
                mean_at(n, false),
                mean_at(n, true),
                baselines[n - 1]
            ));
        }
        self.finish(b, self.outcome(b, checks, notes))
    }

    fn fig7(&self) -> Result<BundleOutcome> {
        let b = Bundle::Fig7;
        let def = b.definition();
        let bench = self.bench;
        let run = &self.default_run;
        let sweep = fine_prune_sweep(
            &run.student,
            &run.infection.triggers[0],
            &bench.config.defense.prune_fractions,
            bench.config.defense.prune_layer,
            &bench.split.student,
            bench.split.eval.images(),
            &bench.split.student_test,
            bench.split.target_label(),
            &bench.config.transfer,
        )?;
        self.write_sweep(b, &sweep)?;
        let mut checks = Vec::new();
        if let Some(p) = sweep.at(0.0) {
            let exact =
                p.attack_success_rate == run.success[0] && p.clean_accuracy == run.clean_accuracy;
            checks.push(Check::new(
                "fraction 0 equals undefended",
                p.attack_success_rate - run.success[0],
                "exact".into(),
                exact,
            ));
        }
        let floor = def.tolerance("success_floor");
        let loss = def.tolerance("min_accuracy_loss");
        let shape = check_prune_curve(&sweep, run.clean_accuracy, floor, loss);
        let mut notes = vec!["pruned units verified exactly zero after fine-tuning".to_string()];
        match shape.first_defeated {
            Some(f) => notes.push(format!("success first below {floor} at fraction {f:.2}")),
            None => notes.push(format!("success never falls below {floor} on this grid")),
        }
        if !shape.matches {
            notes.push(format!(
                "DIVERGENCE from the expected shape: {} pruning levels defeat the attack while losing less than {loss} accuracy (first at fraction {:.2})",
                shape.violations.len(),
                shape.violations[0].sweep_param
            ));
        }
        checks.push(Check::new(
            "low-success points lost accuracy",
            shape.violations.len() as f64,
            format!("no point with success < {floor} and accuracy loss < {loss}"),
            shape.matches,
        ));
        self.finish(b, self.outcome(b, checks, notes))
    }

    fn fig8(&self) -> Result<BundleOutcome> {
        let b = Bundle::Fig8;
        let def = b.definition();
        let bench = self.bench;
        let run = &self.default_run;
        let sweep = blur_defense_sweep(
            &run.student,
            &run.infection.triggers[0],
            bench.split.eval.images(),
            &bench.split.student_test,
            bench.split.target_label(),
            &bench.config.defense.blur_kernels,
        )?;
        self.write_sweep(b, &sweep)?;
        let mut checks = Vec::new();
        if let Some(p) = sweep.at(1.0) {
            let exact =
                p.attack_success_rate == run.success[0] && p.clean_accuracy == run.clean_accuracy;
            checks.push(Check::new(
                "kernel 1 equals undefended",
                p.attack_success_rate - run.success[0],
                "exact".into(),
                exact,
            ));
        }
        let band = def.tolerance("rise_band");
        let rise = max_success_rise(&sweep);
        checks.push(Check::new(
            "largest success rise with kernel size",
            rise,
            format!("<= {band}"),
            rise <= band,
        ));
        self.finish(b, self.outcome(b, checks, Vec::new()))
    }

    fn fig9(&self) -> Result<BundleOutcome> {
        let b = Bundle::Fig9;
        let def = b.definition();
        let bench = self.bench;
        let run = &self.default_run;
        let sweep = multilayer_tuning_sweep(
            &run.infection.teacher,
            &bench.split.student,
            &run.infection.triggers[0],
            bench.split.eval.images(),
            &bench.split.student_test,
            bench.split.target_label(),
            &bench.config.defense.frozen_counts,
            &bench.config.transfer,
        )?;
        self.write_sweep(b, &sweep)?;
        let kt = bench.config.trigger.inject_layer as f64;
        let max_violated = def.tolerance("max_success_violated");
        let band = def.tolerance("success_band");
        let mut checks = Vec::new();
        let mut notes = Vec::new();
        for p in &sweep.points {
            if p.sweep_param < kt {
                checks.push(Check::new(
                    &format!("K={} (tunes a layer before K_t)", p.sweep_param),
                    p.attack_success_rate,
                    format!("<= {max_violated}"),
                    p.attack_success_rate <= max_violated,
                ));
            } else {
                let diff = p.attack_success_rate - run.success[0];
                checks.push(Check::new(
                    &format!("K={} (K >= K_t)", p.sweep_param),
                    p.attack_success_rate,
                    format!("within {band} of {:.4}", run.success[0]),
                    diff.abs() <= band,
                ));
            }
            notes.push(format!(
                "K={}: success {:.4}, accuracy {:.4}",
                p.sweep_param, p.attack_success_rate, p.clean_accuracy
            ));
        }
        self.finish(b, self.outcome(b, checks, notes))
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// `first` followed by the next student digits, wrapping within 5..=9.
pub fn target_labels(first: usize, count: usize) -> Vec<usize> {
    (0..count).map(|i| 5 + (first - 5 + i) % 5).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for b in Bundle::ALL {
            assert_eq!(Bundle::parse(b.name()).unwrap(), b);
            assert!(!b.definition().tolerances.is_empty());
        }
        assert_eq!(
            Bundle::parse("fig5").unwrap_err().family(),
            crate::ErrorFamily::Config
        );
    }

    #[test]
    fn median_and_labels() {
        assert_eq!(median(&[0.1, 0.2, 0.9]), 0.2);
        assert_eq!(median(&[0.1, 0.2, 0.4, 0.9]), 0.30000000000000004);
        assert_eq!(target_labels(6, 3), vec![6, 7, 8]);
        assert_eq!(target_labels(9, 2), vec![9, 5]);
    }

    #[test]
    fn markdown_lists_every_check() {
        let o = BundleOutcome {
            bundle: "fig8",
            synthetic: true,
            checks: vec![
                Check::new("a", 0.5, ">= 0.1".into(), true),
                Check::new("b", 0.01, "<= 0".into(), false),
            ],
            notes: vec!["n".into()],
        };
        let md = o.to_markdown(Bundle::Fig8.definition());
        assert!(md.contains("| a | 0.5000 | >= 0.1 | PASS |"));
        assert!(md.contains("| b | 0.0100 | <= 0 | FAIL |"));
        assert!(md.contains("Synthetic data"));
        assert!(md.contains("Overall: **FAIL**"));
    }
}
