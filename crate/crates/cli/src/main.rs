use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use latent_backdoor::attack::{infect, TriggerMode};
use latent_backdoor::config::{ExperimentConfig, DATA_ROOT_ENV};
use latent_backdoor::container::{
    load_model, load_trigger, save_model, save_trigger, TriggerRecord,
};
use latent_backdoor::defense::{blur_defense_sweep, fine_prune_sweep, multilayer_tuning_sweep};
use latent_backdoor::harness::{
    default_split, evaluate, load_pools, load_pools_or_synthetic, mask_for, train_teacher,
    transfer, write_infection_report, Workbench,
};
use latent_backdoor::metrics::{write_json, write_records_csv, Aggregate};
use latent_backdoor::reproduce::{Bundle, Session};
use latent_backdoor::ErrorFamily;

#[derive(Parser)]
#[command(
    name = "latent-backdoor",
    version,
    about = "Latent backdoor attack pipeline and defense sweeps",
    after_help = "The MNIST directory defaults to $LBD_DATA_ROOT, then data/mnist."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default configuration.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the clean teacher on the teacher task.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain, optimize a trigger, inject and wipe.
    Infect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trigger: PathBuf,
        /// Injection report (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Skip optimization and inject a random pattern with this seed.
        #[arg(long)]
        random_trigger: Option<u64>,
    },
    /// Build and fine-tune a student from a teacher.
    Transfer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure attack success and clean accuracy of a student.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        trigger: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run a defense sweep and write its CSV.
    Defend {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        defense: Defense,
        /// Student for fine-prune and blur.
        #[arg(long)]
        student: Option<PathBuf>,
        /// Infected teacher for multilayer tuning.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        trigger: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run reproduction bundles and write reports.
    Reproduce {
        #[arg(long)]
        config: PathBuf,
        /// Bundle name, or `all`.
        #[arg(long)]
        bundle: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Defense {
    FinePrune,
    Blur,
    Multilayer,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let family = e
        .chain()
        .find_map(|c| c.downcast_ref::<latent_backdoor::Error>())
        .map(|e| e.family())
        .unwrap_or(ErrorFamily::Internal);
    family.exit_code() as u8
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(path)?)
}

fn parent_dir(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).map_err(latent_backdoor::Error::from)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig { out } => {
            parent_dir(&out)?;
            ExperimentConfig::default().save(&out)?;
        }
        Command::TrainTeacher { config, out } => {
            let cfg = load_config(&config)?;
            let pools = load_pools(&cfg)?;
            let split = default_split(&cfg, &pools)?;
            let (teacher, log) = train_teacher(&cfg, &split)?;
            let acc = latent_backdoor::train::accuracy(
                &teacher,
                &pools.test.relabeled(&split.teacher_relabel),
            )?;
            log::info!(
                "teacher loss {:.4} -> {:.4}, test accuracy {acc:.4}",
                log.initial_loss,
                log.final_loss()
            );
            parent_dir(&out)?;
            save_model(&teacher, &out)?;
            write_json(&log, out.with_extension("log.json"))?;
        }
        Command::Infect {
            config,
            teacher,
            out,
            trigger,
            report,
            random_trigger,
        } => {
            let cfg = load_config(&config)?;
            let pools = load_pools(&cfg)?;
            let split = default_split(&cfg, &pools)?;
            let teacher = load_model(&teacher)?;
            let mask = mask_for(&cfg, teacher.input_shape())?;
            let mode = match random_trigger {
                Some(seed) => TriggerMode::Random(seed),
                None => TriggerMode::Optimized,
            };
            let inf = infect(
                &teacher,
                &split.targets,
                &split.nontarget,
                &mask,
                cfg.trigger.inject_layer,
                mode,
                &cfg.attack,
            )?;
            let inj = &inf.injection;
            log::info!(
                "poisoned gap {:.5} (baseline {:.5}), closer fraction {:.4}",
                inj.poisoned_gap[0],
                inj.baseline_gap[0],
                inj.closer_fraction[0]
            );
            parent_dir(&out)?;
            parent_dir(&trigger)?;
            save_model(&inf.teacher, &out)?;
            let record = TriggerRecord {
                trigger: inf.triggers[0].clone(),
                target_name: format!("digit {}", cfg.data.target_label),
                seed: cfg.attack.seed,
            };
            save_trigger(&record, &trigger)?;
            if let Some(path) = report {
                parent_dir(&path)?;
                write_infection_report(&inf, &path)?;
            }
        }
        Command::Transfer {
            config,
            teacher,
            out,
        } => {
            let cfg = load_config(&config)?;
            let pools = load_pools(&cfg)?;
            let split = default_split(&cfg, &pools)?;
            let teacher = load_model(&teacher)?;
            let (student, log) = transfer(&cfg.transfer, &teacher, &split)?;
            log::info!(
                "student loss {:.4} -> {:.4}",
                log.initial_loss,
                log.final_loss()
            );
            parent_dir(&out)?;
            save_model(&student, &out)?;
        }
        Command::Evaluate {
            config,
            student,
            trigger,
            out_dir,
        } => {
            let cfg = load_config(&config)?;
            let pools = load_pools(&cfg)?;
            let split = default_split(&cfg, &pools)?;
            let student = load_model(&student)?;
            let trigger = load_trigger(&trigger)?;
            let record = evaluate(
                &cfg.experiment.name,
                cfg.experiment.seed,
                &student,
                &trigger.trigger,
                split.target_label(),
                &split,
            )?;
            println!(
                "attack_success_rate {:.4} clean_accuracy {:.4}",
                record.attack_success_rate, record.clean_accuracy
            );
            std::fs::create_dir_all(&out_dir).map_err(latent_backdoor::Error::from)?;
            let agg = Aggregate::from_records(&cfg.experiment.name, vec![record]);
            write_records_csv(&agg.records, out_dir.join("runs.csv"))?;
            write_json(&agg, out_dir.join("summary.json"))?;
        }
        Command::Defend {
            config,
            defense,
            student,
            teacher,
            trigger,
            out,
        } => {
            let cfg = load_config(&config)?;
            let pools = load_pools(&cfg)?;
            let split = default_split(&cfg, &pools)?;
            let trigger = load_trigger(&trigger)?.trigger;
            let target = split.target_label();
            let need = |p: Option<PathBuf>, what: &str| -> Result<_> {
                let p = p.ok_or_else(|| {
                    latent_backdoor::Error::Config(format!("--{what} is required for this defense"))
                })?;
                Ok(load_model(p)?)
            };
            let sweep = match defense {
                Defense::FinePrune => fine_prune_sweep(
                    &need(student, "student")?,
                    &trigger,
                    &cfg.defense.prune_fractions,
                    cfg.defense.prune_layer,
                    &split.student,
                    split.eval.images(),
                    &split.student_test,
                    target,
                    &cfg.transfer,
                )?,
                Defense::Blur => blur_defense_sweep(
                    &need(student, "student")?,
                    &trigger,
                    split.eval.images(),
                    &split.student_test,
                    target,
                    &cfg.defense.blur_kernels,
                )?,
                Defense::Multilayer => multilayer_tuning_sweep(
                    &need(teacher, "teacher")?,
                    &split.student,
                    &trigger,
                    split.eval.images(),
                    &split.student_test,
                    target,
                    &cfg.defense.frozen_counts,
                    &cfg.transfer,
                )?,
            };
            parent_dir(&out)?;
            sweep.write_csv(&out)?;
        }
        Command::Reproduce {
            config,
            bundle,
            out_dir,
        } => {
            let cfg = load_config(&config)?;
            let bundles = if bundle == "all" {
                Bundle::ALL.to_vec()
            } else {
                vec![Bundle::parse(&bundle)?]
            };
            let pools = load_pools_or_synthetic(&cfg)?;
            if pools.synthetic {
                log::warn!(
                    "MNIST not found (set {DATA_ROOT_ENV}); reports are flagged as synthetic"
                );
            }
            let bench = Workbench::prepare(&cfg, pools)?;
            let session = Session::new(&bench, Some(&out_dir))?;
            let mut summary =
                String::from("# Reproduction summary\n\n| bundle | result |\n|---|---|\n");
            for b in bundles {
                let outcome = session.run(b)?;
                let verdict = if outcome.passed() { "PASS" } else { "FAIL" };
                println!("{}: {verdict}", b.name());
                summary.push_str(&format!("| {} | {verdict} |\n", b.name()));
            }
            std::fs::write(out_dir.join("README.md"), summary)
                .map_err(latent_backdoor::Error::from)?;
        }
    }
    Ok(())
}
