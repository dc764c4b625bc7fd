use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fedlens::config::ExperimentConfig;
use fedlens::defense::{build_defense, read_contributions_jsonl, replay, write_contributions_jsonl, DefenseKind};
use fedlens::experiment::{
    attack_sweep, compare_defenses, format_summary, learning_curves, run_scored, summarize, write_csv, SweepGrid,
};
use fedlens::fl::{DefenseMode, RunOptions};
use fedlens::metrics::Metric;
use fedlens::robust_stats::premise_trials;

#[derive(Parser)]
#[command(name = "fedlens", version, about = "Perception-poisoning simulation and gradient forensics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the defense: stdlens, spatial, spectral or none.
    #[arg(long)]
    defense: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// One federation run.
    Run {
        #[command(flatten)]
        common: Common,
        /// Let the defense analyse but never revoke.
        #[arg(long)]
        observe_only: bool,
        /// Also write every per-class contribution for offline replay.
        #[arg(long)]
        dump_gradients: bool,
        /// Also write benign, undefended and defended source-class AP curves.
        #[arg(long)]
        curves: bool,
    },
    /// Several defenses on the same seeded attack streams.
    CompareDefenses {
        #[command(flatten)]
        common: Common,
        /// Comma-separated defenses.
        #[arg(long, default_value = "stdlens,spatial,spectral,none")]
        defenses: String,
        /// Seeds as a list `0,3,7` or a range `0..10`.
        #[arg(long, default_value = "0..10")]
        seeds: String,
    },
    /// Grid over malicious fraction, skip rate, poisoned share and onset.
    AttackSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "0..3")]
        seeds: String,
        #[arg(long, value_delimiter = ',')]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        betas: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        gammas: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        onsets: Vec<usize>,
    },
    /// Separation premise and empirical separability on random mixtures.
    VerifyStats {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
    /// Offline forensics on a gradient dump written by `run --dump-gradients`.
    Replay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gradients: PathBuf,
    },
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if a >= b {
            bail!("empty seed range {text}");
        }
        return Ok((a..b).collect());
    }
    text.split(',').map(|s| s.trim().parse().with_context(|| format!("bad seed {s:?}"))).collect()
}

fn parse_defense(name: &str) -> Result<DefenseKind> {
    DefenseKind::parse(name.trim()).with_context(|| format!("unknown defense {name:?}; expected stdlens, spatial, spectral or none"))
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.federation.master_seed = seed;
    }
    if let Some(d) = &common.defense {
        config.defense.kind = parse_defense(d)?;
    }
    Ok(config.validate()?)
}

fn create(out: &Path, name: &str) -> Result<File> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(name);
    File::create(&path).with_context(|| format!("writing {}", path.display()))
}

fn run(common: &Common, observe_only: bool, dump_gradients: bool, curves: bool) -> Result<()> {
    let config = load(common)?;
    let options = RunOptions {
        defense_mode: if observe_only { DefenseMode::ObserveOnly } else { DefenseMode::Enforce },
        record_gradients: dump_gradients,
    };
    let scored = run_scored(&config, options)?;
    let out = &common.out;
    fs::write(out_path(out, "config.toml")?, config.to_toml_string())?;
    scored.output.log.write_jsonl(create(out, "run_log.jsonl")?)?;
    let classes = config.task.classes;
    let ap_rows: Vec<Vec<String>> = scored
        .output
        .log
        .records
        .iter()
        .map(|r| {
            std::iter::once(r.round.to_string())
                .chain((0..classes).map(|c| r.ap.get(c).copied().flatten().map_or(String::new(), |v| v.to_string())))
                .collect()
        })
        .collect();
    let mut w = csv_writer(out, "ap_curve.csv")?;
    w.write_record(std::iter::once("round".to_string()).chain((0..classes).map(|c| format!("ap_class_{c}"))))?;
    for row in ap_rows {
        w.write_record(row)?;
    }
    w.flush()?;
    serde_json::to_writer_pretty(create(out, "score.json")?, &scored.score)?;
    let timings: Vec<_> = scored.output.timings.clone();
    write_csv(&timings, create(out, "timings.csv")?)?;
    if dump_gradients {
        write_contributions_jsonl(&scored.output.gradients, create(out, "gradients.jsonl")?)?;
    }
    if curves {
        write_csv(&learning_curves(&config)?, create(out, "learning_curves.csv")?)?;
    }
    let s = &scored.score;
    let class = fedlens::experiment::source_class(&config);
    println!(
        "defense {}: revoked {} malicious, {} honest; precision@max recall {} (round {}); purge {}; final AP class {class} {}",
        config.defense.kind.name(),
        s.revoked_malicious,
        s.revoked_honest,
        Metric(s.precision_at_max_recall),
        s.round_of_max_recall.map_or("-".into(), |r| r.to_string()),
        s.time_to_purge.map_or("never".into(), |r| format!("round {r}")),
        Metric(scored.output.final_ap(class)),
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn out_path(out: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out.join(name))
}

fn csv_writer(out: &Path, name: &str) -> Result<csv::Writer<File>> {
    Ok(csv::Writer::from_writer(create(out, name)?))
}

fn compare(common: &Common, defenses: &str, seeds: &str) -> Result<()> {
    let config = load(common)?;
    let kinds: Vec<DefenseKind> = defenses.split(',').map(parse_defense).collect::<Result<_>>()?;
    let seeds = parse_seeds(seeds)?;
    let cmp = compare_defenses(&config, &kinds, &seeds)?;
    let summary = summarize(&cmp.rows);
    write_csv(&cmp.rows, create(&common.out, "comparison.csv")?)?;
    write_csv(&summary, create(&common.out, "comparison_summary.csv")?)?;
    write_csv(&cmp.timings, create(&common.out, "timings.csv")?)?;
    print!("{}", format_summary(&summary));
    println!("wrote {}", common.out.display());
    Ok(())
}

fn sweep(common: &Common, seeds: &str, grid: SweepGrid) -> Result<()> {
    let config = load(common)?;
    if config.attack.is_none() {
        bail!("attack-sweep needs an [attack] section in the configuration");
    }
    let rows = attack_sweep(&config, &grid, &parse_seeds(seeds)?)?;
    write_csv(&rows, create(&common.out, "sweep.csv")?)?;
    println!("{:>6} {:>6} {:>6} {:>6} {:>6} {:>10} {:>7} {:>7}", "seed", "m", "beta", "gamma", "onset", "precision", "recall", "honest");
    for r in &rows {
        println!(
            "{:>6} {:>6.2} {:>6.2} {:>6.2} {:>6} {:>10} {:>7.2} {:>7}",
            r.seed,
            r.malicious_fraction,
            r.beta,
            r.gamma,
            r.onset,
            Metric(r.precision_at_max_recall).to_string(),
            r.max_recall,
            r.revoked_honest
        );
    }
    println!("wrote {}", common.out.display());
    Ok(())
}

fn verify_stats(seed: u64, out: &Path, trials: usize, samples: usize) -> Result<()> {
    let rows = premise_trials(seed, trials, samples)?;
    write_csv(&rows, create(out, "verify_stats.csv")?)?;
    println!("{:>5} {:>4} {:>6} {:>10} {:>10} {:>8} {:>9} {:>8} {:>8}", "trial", "dim", "m", "gap^2", "bound", "premise", "separable", "honest", "poisoned");
    for r in &rows {
        println!(
            "{:>5} {:>4} {:>6.3} {:>10.3} {:>10.3} {:>8} {:>9} {:>8.4} {:>8.4}",
            r.trial, r.dim, r.m, r.delta_norm_sq, r.bound, r.premise_holds, r.separable, r.honest_violation, r.poisoned_violation
        );
    }
    let held = rows.iter().filter(|r| r.premise_holds).count();
    let sep = rows.iter().filter(|r| r.premise_holds && r.separable).count();
    println!("premise held in {held}/{}; separable in {sep}/{held} of those", rows.len());
    println!("wrote {}", out.display());
    Ok(())
}

fn replay_cmd(common: &Common, gradients: &Path) -> Result<()> {
    let config = load(common)?;
    let stream = read_contributions_jsonl(File::open(gradients).with_context(|| format!("reading {}", gradients.display()))?)?;
    let Some(mut defense) = build_defense(&config.federation, &config.defense) else {
        bail!("replay needs a defense other than none");
    };
    let reports = replay(&stream, defense.as_mut(), config.federation.forensic_window);
    let mut w = std::io::BufWriter::new(create(&common.out, "replay.jsonl")?);
    for r in &reports {
        serde_json::to_writer(&mut w, r)?;
        std::io::Write::write_all(&mut w, b"\n")?;
    }
    for r in reports.iter().filter(|r| !r.flagged_classes.is_empty()) {
        println!("round {}: flagged {:?} revoked {:?} watchlisted {:?}", r.round, r.flagged_classes, r.revoked, r.watchlisted);
    }
    println!("wrote {}", common.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { common, observe_only, dump_gradients, curves } => run(common, *observe_only, *dump_gradients, *curves),
        Command::CompareDefenses { common, defenses, seeds } => compare(common, defenses, seeds),
        Command::AttackSweep { common, seeds, fractions, betas, gammas, onsets } => sweep(
            common,
            seeds,
            SweepGrid {
                malicious_fractions: fractions.clone(),
                betas: betas.clone(),
                gammas: gammas.clone(),
                onsets: onsets.clone(),
            },
        ),
        Command::VerifyStats { seed, out, trials, samples } => verify_stats(*seed, out, *trials, *samples),
        Command::Replay { common, gradients } => replay_cmd(common, gradients),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
