use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rlpt_core::analysis::{eigen_cam, write_pgm};
use rlpt_core::config::ExperimentConfig;
use rlpt_core::data::synth::{write_synthetic_corpus, SynthSpec};
use rlpt_core::data::{curate, curate_with_pattern, DatasetManifest, GameRegistry, Regime, ReplayDataset, StackedObservation, FRAME_LEN, STACK_DEPTH};
use rlpt_core::evalstats::{aggregate_report, NormalizationTable, Report, ScoreRecord, ScoreTable};
use rlpt_core::finetune::{
    evaluate_policy, expert_dataset, finetune_offline_bc, finetune_online_rl, ChainEnv, EnvironmentAdapter, CHAIN_HORIZON,
};
use rlpt_core::model::{Checkpoint, EncoderStack};
use rlpt_core::pretrain::pretrain;

#[derive(Parser)]
#[command(name = "rlpt", version, about = "Visual pre-training and fine-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment document (TOML). Built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set optimizer.epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset manifest from a replay root.
    Curate(Common),
    /// Pre-train an encoder on a curated dataset.
    Pretrain(Common),
    /// Offline behavior cloning on a frozen backbone.
    FinetuneBc(Common),
    /// Online distributional Q-learning on a frozen backbone.
    FinetuneRl(Common),
    /// Aggregate statistics over the score files named in the config.
    Evaluate(Common),
    /// Aggregate every fine-tuning score found under the output directory.
    Report(Common),
    /// Saliency map of one observation.
    Cam(Common),
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Curate(c) => ("curate", c),
            Command::Pretrain(c) => ("pretrain", c),
            Command::FinetuneBc(c) => ("finetune-bc", c),
            Command::FinetuneRl(c) => ("finetune-rl", c),
            Command::Evaluate(c) => ("evaluate", c),
            Command::Report(c) => ("report", c),
            Command::Cam(c) => ("cam", c),
        }
    }
}

const FAILED: &str = "FAILED";
const SCORES: &str = "scores.csv";

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (name, common) = cli.command.parts();
    let cfg = match load_config(common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let run_dir = cfg.run_dir(name);
    match execute(name, &cfg, &run_dir) {
        Ok(()) => {
            println!("{}", run_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if run_dir.is_dir() {
                let _ = std::fs::write(run_dir.join(FAILED), format!("{e:#}\n"));
            }
            ExitCode::FAILURE
        }
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    Ok(match &c.config {
        Some(path) => ExperimentConfig::load(path, &c.overrides)?,
        None => ExperimentConfig::from_str_in("", Path::new("."), &c.overrides)?,
    })
}

fn execute(name: &str, cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let _ = std::fs::remove_file(run_dir.join(FAILED));
    std::fs::write(run_dir.join("config.toml"), cfg.to_toml()?)?;
    let run = serde_json::json!({ "command": name, "config_hash": cfg.hash(), "seed": cfg.seed });
    std::fs::write(run_dir.join("run.json"), serde_json::to_string_pretty(&run)? + "\n")?;
    match name {
        "curate" => cmd_curate(cfg, run_dir),
        "pretrain" => cmd_pretrain(cfg, run_dir),
        "finetune-bc" => cmd_finetune_bc(cfg, run_dir),
        "finetune-rl" => cmd_finetune_rl(cfg, run_dir),
        "evaluate" => cmd_evaluate(cfg, run_dir),
        "report" => cmd_report(cfg, run_dir),
        "cam" => cmd_cam(cfg, run_dir),
        other => bail!("unknown command `{other}`"),
    }
}

fn manifest(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    if let Some(path) = &cfg.data.manifest {
        return Ok(DatasetManifest::load(path)?);
    }
    let games = cfg.data.games();
    let pattern = cfg.data.pattern()?;
    if let Some(s) = &cfg.data.synthetic {
        let spec = SynthSpec {
            runs: pattern.runs.clone(),
            checkpoints: pattern.checkpoints.clone(),
            per_checkpoint: s.per_checkpoint,
            episode_len: (s.episode_len[0], s.episode_len[1]),
            seed: cfg.seed,
        };
        write_synthetic_corpus(&cfg.data.replay_root, &games, &spec)?;
    }
    Ok(match cfg.data.regime {
        Regime::Custom => curate_with_pattern(Regime::Custom, &pattern, &cfg.data.replay_root, &games)?,
        r if cfg.data.pattern.is_some() => curate_with_pattern(r, &pattern, &cfg.data.replay_root, &games)?,
        r => curate(r, &cfg.data.replay_root, &games)?,
    })
}

fn cmd_curate(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    let m = manifest(cfg)?;
    m.save(&run_dir.join("manifest.toml"))?;
    log::info!("{} transitions over {} games", m.total_count, m.games().len());
    Ok(())
}

fn cmd_pretrain(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    let m = manifest(cfg)?;
    m.save(&run_dir.join("manifest.toml"))?;
    let ds = ReplayDataset::load(&m)?;
    let report = pretrain(&cfg.pretrain_config(), &ds, run_dir)?;
    log::info!("{} steps, checkpoint {}", report.steps, report.final_checkpoint.display());
    Ok(())
}

fn checkpoint(path: &Option<PathBuf>, key: &str) -> Result<Checkpoint> {
    let path = path.as_ref().with_context(|| format!("`{key}` must name a checkpoint"))?;
    Checkpoint::load(path, None).with_context(|| format!("loading {}", path.display()))
}

fn environment(game: &str) -> Option<Box<dyn EnvironmentAdapter>> {
    (game == ChainEnv::GAME).then(|| Box::new(ChainEnv::default()) as Box<dyn EnvironmentAdapter>)
}

fn save_stack(stack: &EncoderStack, path: &Path) -> Result<()> {
    Checkpoint { meta: serde_json::json!({ "stack": stack.meta() }), params: stack.params.clone(), mirror: None }.save(path)?;
    Ok(())
}

fn record_score(cfg: &ExperimentConfig, run_dir: &Path, protocol: &str, score: f64) -> Result<()> {
    let method = cfg.finetune.method.clone().unwrap_or_else(|| cfg.objective.kind.name().to_string());
    let rec = ScoreRecord { game: cfg.finetune.game.clone(), method, seed: cfg.seed, protocol: protocol.into(), score };
    let path = run_dir.join(SCORES);
    let _ = std::fs::remove_file(&path);
    ScoreTable::append_csv(&path, &rec)?;
    Ok(())
}

fn cmd_finetune_bc(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    let ckpt = checkpoint(&cfg.finetune.checkpoint, "finetune.checkpoint")?;
    let game = cfg.finetune.game.as_str();
    let mut spec = cfg.finetune.bc.clone();
    spec.seed = cfg.seed;
    let dataset = if game == ChainEnv::GAME {
        expert_dataset(CHAIN_HORIZON, spec.expected_transitions)?
    } else {
        let m = curate(Regime::Expert, &cfg.data.replay_root, &[game.to_string()])?;
        ReplayDataset::load(&m)?
    };
    let out = finetune_offline_bc(&ckpt, game, &dataset, &spec, run_dir)?;
    save_stack(&out.stack, &run_dir.join("adapted.rpck"))?;
    match environment(game) {
        Some(mut env) => {
            let r = &cfg.finetune.rainbow;
            let returns = evaluate_policy(env.as_mut(), r.eval_episodes, r.max_episode_steps, |o| out.act(o, game))?;
            let mean = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
            log::info!("mean greedy return {mean:.4} over {} episodes", returns.len());
            record_score(cfg, run_dir, "offline_bc", mean)?;
        }
        None => log::warn!("no environment adapter for {game}; score not recorded"),
    }
    Ok(())
}

fn cmd_finetune_rl(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    let ckpt = checkpoint(&cfg.finetune.checkpoint, "finetune.checkpoint")?;
    let game = cfg.finetune.game.as_str();
    let mut env = environment(game).with_context(|| format!("no environment adapter for `{game}`"))?;
    let out = finetune_online_rl(&ckpt, env.as_mut(), &cfg.finetune.rainbow, cfg.seed, run_dir)?;
    save_stack(&out.stack, &run_dir.join("adapted.rpck"))?;
    log::info!("{} env steps, {} updates, mean greedy return {:.4}", out.env_steps, out.updates, out.mean_return);
    record_score(cfg, run_dir, "online_rl", out.mean_return)
}

fn refs(cfg: &ExperimentConfig) -> Result<NormalizationTable> {
    Ok(match &cfg.evaluate.refs {
        Some(p) => NormalizationTable::read_csv(p)?,
        None => NormalizationTable::builtin(),
    })
}

fn write_report(report: &Report, run_dir: &Path) -> Result<()> {
    let text = report.to_string();
    print!("{text}");
    std::fs::write(run_dir.join("report.txt"), &text)?;
    report.write_csv(&run_dir.join("report.csv"))?;
    std::fs::write(run_dir.join("iqm.svg"), iqm_svg(report))?;
    Ok(())
}

fn cmd_evaluate(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    if cfg.evaluate.scores.is_empty() {
        bail!("`evaluate.scores` lists no score files");
    }
    let mut table = ScoreTable::new();
    for p in &cfg.evaluate.scores {
        table.extend(ScoreTable::read_csv(p).with_context(|| format!("reading {}", p.display()))?)?;
    }
    let report = aggregate_report(&table, &refs(cfg)?, &GameRegistry::builtin(), &cfg.evaluate.report)?;
    write_report(&report, run_dir)
}

fn cmd_report(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    let registry = GameRegistry::builtin();
    let mut table = ScoreTable::new();
    let mut skipped = 0;
    for entry in walkdir::WalkDir::new(&cfg.out_dir).sort_by_file_name() {
        let entry = entry?;
        if entry.file_name() != SCORES || entry.path().parent().is_some_and(|d| d.join(FAILED).exists()) {
            continue;
        }
        for r in ScoreTable::read_csv(entry.path())?.records() {
            if registry.contains(&r.game) {
                table.insert(r.clone())?;
            } else {
                skipped += 1;
            }
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} scores on games outside the evaluation suite");
    }
    if table.is_empty() {
        bail!("no scores for evaluation games under {}", cfg.out_dir.display());
    }
    table.write_csv(&run_dir.join("scores.csv"))?;
    let report = aggregate_report(&table, &refs(cfg)?, &registry, &cfg.evaluate.report)?;
    write_report(&report, run_dir)
}

fn cmd_cam(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    let ckpt = checkpoint(&cfg.cam.checkpoint, "cam.checkpoint")?;
    let stack = EncoderStack::from_checkpoint(&ckpt)?;
    let path = cfg.cam.observation.as_ref().context("`cam.observation` must name a raw observation file")?;
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() != STACK_DEPTH * FRAME_LEN {
        bail!("{} holds {} bytes, expected {}", path.display(), bytes.len(), STACK_DEPTH * FRAME_LEN);
    }
    let frames: Vec<&[u8]> = bytes.chunks(FRAME_LEN).collect();
    let obs = StackedObservation::from_frames([frames[0], frames[1], frames[2], frames[3]]);
    let map = eigen_cam(&stack, &obs, cfg.cam.stage)?;
    write_pgm(&map, &run_dir.join("cam.pgm"))?;
    Ok(())
}

/// Horizontal bars of IQM with interval whiskers, one panel per protocol and distribution.
fn iqm_svg(report: &Report) -> String {
    let (row_h, label_w, plot_w) = (18.0, 180.0, 400.0);
    let hi = report.rows.iter().map(|r| r.ci_high.max(r.iqm)).fold(1.0f64, f64::max);
    let lo = report.rows.iter().map(|r| r.ci_low.min(r.iqm)).fold(0.0f64, f64::min);
    let x = |v: f64| label_w + (v - lo) / (hi - lo) * plot_w;
    let mut body = String::new();
    let mut y = 10.0;
    let mut group = None;
    for r in &report.rows {
        let g = (r.protocol.as_str(), r.distribution);
        if group != Some(g) {
            y += row_h;
            body += &format!("<text x=\"4\" y=\"{y}\" font-weight=\"bold\">{} / {}</text>\n", r.protocol, r.distribution.as_str());
            group = Some(g);
        }
        y += row_h;
        let (x0, x1) = (x(0.0).min(x(r.iqm)), x(0.0).max(x(r.iqm)));
        body += &format!("<text x=\"12\" y=\"{y}\">{}</text>\n", r.method);
        body += &format!("<rect x=\"{x0:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#4c72b0\"/>\n", y - 12.0, x1 - x0, row_h - 6.0);
        body += &format!(
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            x(r.ci_low),
            y - 6.0,
            x(r.ci_high),
            y - 6.0
        );
    }
    let (height, width, zero) = (y + row_h, label_w + plot_w + 20.0, x(0.0));
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <line x1=\"{zero:.1}\" y1=\"0\" x2=\"{zero:.1}\" y2=\"{height}\" stroke=\"#999\"/>\n{body}</svg>\n"
    )
}
