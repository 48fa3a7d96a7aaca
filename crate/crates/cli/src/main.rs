use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use patchdesign::config::RunConfig;
use patchdesign::dataset::{load_csv, save_csv, DatasetRecord};
use patchdesign::designcvae::{disentanglement_audit, train_cvae};
use patchdesign::emodel::{resonant_freq_tm10, s11_curve, DesignParams, FrequencyGrid};
use patchdesign::pipeline::{generate_dataset, load_cvae, load_surrogate, load_vae, save_checkpoint, split_records};
use patchdesign::respsearch::{InitStrategy, Notch, TargetSpec};
use patchdesign::respvae::{reconstruction_rmse, train_vae};
use patchdesign::scoring::{oracle_score, save_scores, surrogate_score, train_surrogate, ScoreMethod};
use patchdesign::train::{save_history, EpochLog};
use patchdesign::tto::{
    penalty, run_search, save_experiment, scaling_experiment, summarize, target_and_mask, Axis, Models, SearchContext,
};
use patchdesign::{Error, Result};

#[derive(Parser)]
#[command(
    name = "patchdesign",
    version,
    about = "Generative inverse design of coax-fed rectangular patch antennas"
)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample designs, simulate them and write the dataset CSV.
    Dataset {
        /// Output CSV; defaults to the configured dataset path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model and write its checkpoint and loss history.
    Train {
        /// Model to train.
        #[arg(value_enum)]
        stage: Stage,
        /// Also run the disentanglement audit after CVAE training.
        #[arg(long)]
        audit: bool,
    },
    /// Search for designs matching a target response.
    Design {
        #[command(flatten)]
        spec: SpecArgs,
        /// Number of curves decoded from the response latent search.
        #[arg(long)]
        curves: Option<usize>,
        /// Number of designs sampled per curve.
        #[arg(long)]
        designs: Option<usize>,
        /// Candidate scorer: `surrogate` or `oracle`.
        #[arg(long)]
        scorer: Option<ScoreMethod>,
        /// Latent search initialization: `random` or `k-closest`.
        #[arg(long)]
        init: Option<InitStrategy>,
        /// Refine design latents with the geometric penalty.
        #[arg(long)]
        optimize: bool,
    },
    /// Test-time scaling experiment over pool sizes.
    Experiment {
        /// Pool dimension that is scaled.
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated pool sizes along the axis.
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
        /// Comma-separated repetition seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Candidate scorer: `surrogate` or `oracle`.
        #[arg(long, default_value = "surrogate")]
        scorer: ScoreMethod,
    },
    /// Score one design triple.
    Evaluate {
        /// Patch length in mm.
        #[arg(long, allow_negative_numbers = true)]
        l: f64,
        /// Patch width in mm.
        #[arg(long, allow_negative_numbers = true)]
        w: f64,
        /// Feed offset from the patch centre along L, in mm.
        #[arg(long, allow_negative_numbers = true)]
        p: f64,
        #[command(flatten)]
        spec: SpecArgs,
    },
}

#[derive(Args)]
struct SpecArgs {
    /// Target notch `f_ghz:bw_ghz:depth_db`; repeat for several.
    #[arg(long = "notch", allow_hyphen_values = true)]
    notches: Vec<Notch>,
}

impl SpecArgs {
    fn spec(&self, grid: &FrequencyGrid) -> Result<Option<TargetSpec>> {
        if self.notches.is_empty() {
            return Ok(None);
        }
        let spec = TargetSpec::new(self.notches.clone());
        spec.validate(grid)?;
        Ok(Some(spec))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Vae,
    Cvae,
    Surrogate,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Curves,
    Designs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    let hash = cfg.hash();
    info!("config hash {hash}");
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    let name = match &cli.command {
        Command::Dataset { .. } => "dataset",
        Command::Train { .. } => "train",
        Command::Design { .. } => "design",
        Command::Experiment { .. } => "experiment",
        Command::Evaluate { .. } => "evaluate",
    };
    std::fs::write(
        cfg.paths.out_dir.join(format!("{name}_config.toml")),
        cfg.resolved_toml(),
    )?;

    match cli.command {
        Command::Dataset { out } => cmd_dataset(&cfg, &hash, out),
        Command::Train { stage, audit } => cmd_train(&cfg, &hash, stage, audit),
        Command::Design {
            spec,
            curves,
            designs,
            scorer,
            init,
            optimize,
        } => {
            let mut budget = cfg.budget;
            budget.n_curves = curves.unwrap_or(budget.n_curves);
            budget.n_designs = designs.unwrap_or(budget.n_designs);
            budget.scorer = scorer.unwrap_or(budget.scorer);
            budget.init = init.unwrap_or(budget.init);
            budget.optimize_zx |= optimize;
            let spec = spec
                .spec(&cfg.grid)?
                .ok_or_else(|| Error::InvalidSpec("at least one --notch is required".into()))?;
            cfg.budget = budget;
            cmd_design(&cfg, &hash, &spec)
        }
        Command::Experiment {
            axis,
            budgets,
            seeds,
            scorer,
        } => {
            let axis = match axis {
                AxisArg::Curves => Axis::Curves,
                AxisArg::Designs => Axis::Designs,
            };
            cmd_experiment(&cfg, &hash, axis, budgets, seeds, scorer)
        }
        Command::Evaluate { l, w, p, spec } => cmd_evaluate(&cfg, DesignParams::new(l, w, p), spec.spec(&cfg.grid)?),
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<Vec<DatasetRecord>> {
    let file = load_csv(&cfg.paths.dataset)?;
    if file.grid != cfg.grid {
        return Err(Error::Config(format!(
            "dataset grid {:?} does not match the configured grid {:?}",
            file.grid, cfg.grid
        )));
    }
    Ok(file.records)
}

fn cmd_dataset(cfg: &RunConfig, hash: &str, out: Option<PathBuf>) -> Result<()> {
    let path = out.unwrap_or_else(|| cfg.paths.dataset.clone());
    let records = generate_dataset(cfg)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_csv(&path, &records, &cfg.grid, hash)?;
    let range = |f: fn(&DatasetRecord) -> f64| {
        records
            .iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
    };
    let (l, w, p) = (range(|r| r.design.l), range(|r| r.design.w), range(|r| r.design.p));
    println!("{} records written to {}", records.len(), path.display());
    println!(
        "L [{:.3}, {:.3}] mm  W [{:.3}, {:.3}] mm  p [{:.3}, {:.3}] mm",
        l.0, l.1, w.0, w.1, p.0, p.1
    );
    Ok(())
}

fn logger(stage: &'static str) -> impl FnMut(&EpochLog) {
    move |log: &EpochLog| {
        let vals: Vec<String> = log.values.iter().map(|(k, v)| format!("{k}={v:.4e}")).collect();
        info!("{stage} epoch {}: {}", log.epoch, vals.join(" "));
    }
}

fn cmd_train(cfg: &RunConfig, hash: &str, stage: Stage, audit: bool) -> Result<()> {
    let records = load_dataset(cfg)?;
    let (train, val) = split_records(cfg, &records)?;
    info!("{} training and {} validation records", train.len(), val.len());
    let out = &cfg.paths.out_dir;
    match stage {
        Stage::Vae => {
            let (vae, hist) = train_vae(&train, &val, &cfg.arch, &cfg.vae, &mut logger("vae"))?;
            save_checkpoint(vae.to_checkpoint(), &cfg.paths.vae, hash)?;
            save_history(&out.join("vae_history.csv"), &hist, hash)?;
            println!("validation notch-band RMSE {:.4} dB", reconstruction_rmse(&vae, &val)?);
        }
        Stage::Cvae => {
            let vae = load_vae(&cfg.paths.vae)?;
            let (cvae, hist) = train_cvae(&train, &val, &vae, &cfg.cvae, &mut logger("cvae"))?;
            save_checkpoint(cvae.to_checkpoint(), &cfg.paths.cvae, hash)?;
            save_history(&out.join("cvae_history.csv"), &hist, hash)?;
            if audit {
                println!(
                    "disentanglement ratio {:.4}",
                    disentanglement_audit(&cvae, &train, &val, &cfg.audit)?
                );
            }
        }
        Stage::Surrogate => {
            let (sur, hist) = train_surrogate(&train, &val, &cfg.arch, &cfg.surrogate, &mut logger("surrogate"))?;
            save_checkpoint(sur.to_checkpoint(), &cfg.paths.surrogate, hash)?;
            save_history(&out.join("surrogate_history.csv"), &hist, hash)?;
            println!(
                "validation 2-sigma coverage {:.3}",
                patchdesign::scoring::coverage(&sur, &val, 2.0)?
            );
        }
    }
    println!("checkpoint written");
    Ok(())
}

fn write_curve(path: &Path, grid: &FrequencyGrid, cols: &[(&str, &[f64])], hash: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# config_hash={hash}")?;
    let names: Vec<&str> = cols.iter().map(|(n, _)| *n).collect();
    writeln!(w, "f_ghz,{}", names.join(","))?;
    for i in 0..grid.n {
        let vals: Vec<String> = cols.iter().map(|(_, v)| format!("{:.8e}", v[i])).collect();
        writeln!(w, "{:.8e},{}", grid.freq(i), vals.join(","))?;
    }
    Ok(())
}

fn cmd_design(cfg: &RunConfig, hash: &str, spec: &TargetSpec) -> Result<()> {
    let vae = load_vae(&cfg.paths.vae)?;
    let cvae = load_cvae(&cfg.paths.cvae)?;
    let surrogate = match cfg.budget.scorer {
        ScoreMethod::Surrogate => Some(load_surrogate(&cfg.paths.surrogate)?),
        ScoreMethod::Oracle => None,
    };
    let dataset = load_dataset(cfg)?;
    let oracle = cfg.oracle();
    let ctx = SearchContext {
        dataset: &dataset,
        substrate: &cfg.substrate,
        grid: &cfg.grid,
        search: &cfg.search,
        penalty: &cfg.penalty,
        oracle: &oracle,
    };
    let models = Models {
        vae: &vae,
        cvae: &cvae,
        surrogate: surrogate.as_ref(),
    };
    let ranked = run_search(spec, &cfg.budget, models, ctx)?;
    let out = &cfg.paths.out_dir;
    save_scores(&out.join("design_candidates.csv"), &ranked, hash)?;
    println!(
        "{:>4}  {:>9}  {:>9}  {:>8}  {:>12}  feasible",
        "rank", "L_mm", "W_mm", "p_mm", "score"
    );
    for (i, c) in ranked.iter().take(10).enumerate() {
        println!(
            "{:>4}  {:>9.3}  {:>9.3}  {:>8.3}  {:>12.5e}  {}{}",
            i + 1,
            c.design.l,
            c.design.w,
            c.design.p,
            c.score.value,
            c.score.feasible,
            if c.nudged { " (feed nudged)" } else { "" }
        );
    }
    let (y_star, mask) = target_and_mask(spec, &cfg.grid, &cfg.search)?;
    write_curve(
        &out.join("design_target_curve.csv"),
        &cfg.grid,
        &[("target_db", &y_star), ("mask", &mask)],
        hash,
    )?;
    if let Some(best) = ranked.iter().find(|c| c.design.feasible()) {
        let curve = s11_curve(&best.design, &cfg.substrate, &cfg.cavity, &cfg.grid)?;
        write_curve(
            &out.join("design_best_curve.csv"),
            &cfg.grid,
            &[("s11_db", &curve.values)],
            hash,
        )?;
    }
    println!(
        "{} candidates written to {}",
        ranked.len(),
        out.join("design_candidates.csv").display()
    );
    Ok(())
}

fn cmd_experiment(
    cfg: &RunConfig,
    hash: &str,
    axis: Axis,
    budgets: Option<Vec<usize>>,
    seeds: Option<Vec<u64>>,
    scorer: ScoreMethod,
) -> Result<()> {
    let vae = load_vae(&cfg.paths.vae)?;
    let cvae = load_cvae(&cfg.paths.cvae)?;
    let surrogate = match scorer {
        ScoreMethod::Surrogate => Some(load_surrogate(&cfg.paths.surrogate)?),
        ScoreMethod::Oracle => None,
    };
    let dataset = load_dataset(cfg)?;
    let oracle = cfg.oracle();
    let ctx = SearchContext {
        dataset: &dataset,
        substrate: &cfg.substrate,
        grid: &cfg.grid,
        search: &cfg.search,
        penalty: &cfg.penalty,
        oracle: &oracle,
    };
    let models = Models {
        vae: &vae,
        cvae: &cvae,
        surrogate: surrogate.as_ref(),
    };
    let budgets = budgets.unwrap_or_else(|| cfg.experiment.budgets.clone());
    let seeds: Vec<u64> = seeds.unwrap_or_else(|| cfg.experiment.seeds.clone());
    // Experiment seeds are offsets of the run seed so `--seed` shifts them all.
    let run_seeds: Vec<u64> = seeds
        .iter()
        .map(|&s| patchdesign::train::mix(cfg.budget.seed, s))
        .collect();
    let targets = cfg.experiment.target_specs()?;
    let mut rows = scaling_experiment(&targets, axis, &budgets, &run_seeds, scorer, models, ctx)?;
    for r in &mut rows {
        r.seed = seeds[run_seeds.iter().position(|&s| s == r.seed).expect("seed from the list")];
    }
    let stem = format!("experiment_{axis}");
    save_experiment(&cfg.paths.out_dir, &stem, &rows, hash)?;
    for s in summarize(&rows) {
        println!(
            "{:>4} {:>12}  mean {:.4e}  std {:.4e}  min {:.4e}  max {:.4e}",
            s.budget, s.strategy, s.mean, s.std, s.min, s.max
        );
    }
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, design: DesignParams, spec: Option<TargetSpec>) -> Result<()> {
    if !design.is_finite() {
        return Err(Error::Invalid(format!("design values must be finite, got {design}")));
    }
    let feasible = design.feasible();
    println!("design      {design}");
    println!("feasible    {feasible}");
    println!("penalty     {:.6e}", penalty(&design));
    if feasible {
        println!("f_r,TM10    {:.6} GHz", resonant_freq_tm10(&design, &cfg.substrate)?);
    }
    if let Some(spec) = spec {
        let (y_star, mask) = target_and_mask(&spec, &cfg.grid, &cfg.search)?;
        let s = oracle_score(&design, &y_star, &mask, &cfg.substrate, &cfg.grid, &cfg.oracle())?;
        println!("oracle      {:.6e}", s.value);
        if cfg.paths.surrogate.exists() {
            let sur = load_surrogate(&cfg.paths.surrogate)?;
            println!(
                "surrogate   {:.6e}",
                surrogate_score(&design, &y_star, &mask, &sur)?.value
            );
        }
    }
    Ok(())
}
