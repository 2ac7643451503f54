use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use pcs::ablation::run_mode_ablation;
use pcs::checkpoint::Checkpoint;
use pcs::compaction::{compact_network, plan_for, CompactNetwork, ScaleMode};
use pcs::compaction::plan::{propagate_masks, PlanReport};
use pcs::cost::graph::{builtin_graph, NetGraph, BUILTINS};
use pcs::cost::{format_table, human, network_totals};
use pcs::data::{synth_dataset, DatasetFile};
use pcs::network::{Gate, Network};
use pcs::train::{evaluate, evaluate_with, train, write_metrics_csv, write_salience_csv, write_steps_csv, RunConfig, TrainOutcome};

macro_rules! out {
    ($($t:tt)*) => {
        writeln!(std::io::stdout().lock(), $($t)*)?
    };
}

#[derive(Parser)]
#[command(name = "pcs", version, about = "Progressive channel-shrinking: train, compact, cost and evaluate small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write metrics.csv, salience.csv, steps.csv and model.ckpt.
    Train {
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Remove zero-salience channels from a trained checkpoint.
    Compact {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-layer kept/total report as JSON.
        #[arg(long)]
        plan_report: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ModeArg::Static)]
        mode: ModeArg,
        /// Channels with running salience at or below this are removed.
        #[arg(long, default_value_t = 0.0)]
        epsilon: f32,
    },
    /// Print MAdds, MAC and parameter counts for a graph file or builtin.
    Cost {
        /// Graph JSON file, or one of resnet18, resnet34, vgg16, toy-cnn.
        graph: String,
        /// Plan report JSON (as written by `compact --plan-report`).
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Emit the full report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Evaluate a checkpoint on a synthetic dataset spec (or run config).
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        /// Gate for uncompacted checkpoints.
        #[arg(long, value_enum, default_value_t = GateArg::Masked)]
        gate: GateArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        /// Write one predicted class per line.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Train pcs, matched truncation and input-dependent runs and compare them.
    Ablate {
        config: PathBuf,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        /// Validation inputs probed for mask agreement.
        #[arg(long, default_value_t = 100)]
        probe: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Static,
    Dynamic,
}

#[derive(Clone, Copy, ValueEnum)]
enum GateArg {
    Salience,
    Masked,
    Static,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

fn config_help() -> String {
    let defaults = serde_json::to_string_pretty(&RunConfig::default()).unwrap_or_default();
    format!("Config file: a flat JSON object; missing keys take these defaults:\n{defaults}")
}

fn main() -> ExitCode {
    let command = Cli::command()
        .mut_subcommand("train", |c| c.after_help(config_help()))
        .mut_subcommand("ablate", |c| c.after_help(config_help()));
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.chain().any(|c| c.downcast_ref::<std::io::Error>().is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe)) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Compact {
            checkpoint,
            out,
            plan_report,
            mode,
            epsilon,
        } => cmd_compact(&checkpoint, &out, plan_report.as_deref(), mode, epsilon),
        Command::Cost { graph, plan, json } => cmd_cost(&graph, plan.as_deref(), json),
        Command::Eval {
            checkpoint,
            dataset,
            gate,
            split,
            batch,
            predictions,
        } => cmd_eval(&checkpoint, &dataset, gate, split, batch, predictions.as_deref()),
        Command::Ablate { config, out, probe } => cmd_ablate(&config, &out, probe),
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn write_run(dir: &Path, prefix: &str, out: &TrainOutcome, image_size: usize) -> anyhow::Result<()> {
    let layers = out.layer_names();
    write_metrics_csv(&out.metrics, &layers, create(&dir.join(format!("{prefix}metrics.csv")))?)?;
    write_salience_csv(&out.salience, create(&dir.join(format!("{prefix}salience.csv")))?)?;
    write_steps_csv(&out.steps, create(&dir.join(format!("{prefix}steps.csv")))?)?;
    let mut ckpt = out.net.to_checkpoint()?;
    ckpt.set_meta("image_size", &image_size)?;
    ckpt.save(&dir.join(format!("{prefix}model.ckpt")))?;
    Ok(())
}

fn cmd_train(config: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let outcome = train(&cfg)?;
    write_run(out, "", &outcome, cfg.image_size)?;
    if let Some(last) = outcome.metrics.iter().rev().find(|m| m.split == "val") {
        out!(
            "epochs {} val accuracy {:.4} val loss {:.4} zeros {:?}",
            cfg.total_epochs(),
            last.accuracy,
            last.task_loss,
            last.zeros
        );
    }
    out!("wrote {}", out.display());
    Ok(())
}

fn cmd_compact(checkpoint: &Path, out: &Path, report: Option<&Path>, mode: ModeArg, epsilon: f32) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.kind()? != "pcs" {
        bail!("{} is not a trained pcs checkpoint", checkpoint.display());
    }
    let net = Network::from_checkpoint(&ckpt)?;
    let hw: usize = ckpt.meta("image_size").unwrap_or(32);
    let plan = plan_for(&net, hw, epsilon)?;
    let mode = match mode {
        ModeArg::Static => ScaleMode::Static,
        ModeArg::Dynamic => ScaleMode::Dynamic,
    };
    let compact = compact_network(&net, &plan, mode)?;
    compact.to_checkpoint()?.save(out)?;
    let plan_report = PlanReport::new(&plan);
    if let Some(path) = report {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &plan_report)?;
        writeln!(w)?;
        w.flush()?;
    }
    let kept: usize = plan_report.layers.iter().map(|r| r.kept).sum();
    let total: usize = plan_report.layers.iter().map(|r| r.total).sum();
    out!(
        "kept {kept}/{total} channels, MAdds {} at {hw}x{hw}, wrote {}",
        human(compact.measured_madds(hw)),
        out.display()
    );
    Ok(())
}

fn load_graph(name: &str) -> anyhow::Result<NetGraph> {
    if BUILTINS.contains(&name) {
        return Ok(builtin_graph(name)?);
    }
    let path = Path::new(name);
    if !path.exists() {
        bail!("`{name}` is neither a graph file nor a builtin ({})", BUILTINS.join(", "));
    }
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {name}"))?;
    let graph = NetGraph::from_json(&text)?;
    graph.validate()?;
    Ok(graph)
}

fn cmd_cost(graph: &str, plan: Option<&Path>, json: bool) -> anyhow::Result<()> {
    let graph = load_graph(graph)?;
    let plan = match plan {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            let report: PlanReport = serde_json::from_str(&text)?;
            Some(propagate_masks(&graph, &report.masks(&graph)?)?)
        }
        None => None,
    };
    let report = network_totals(&graph, plan.as_ref())?;
    if json {
        out!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    out!("{}", format_table(&report).trim_end());
    Ok(())
}

fn load_dataset(path: &Path) -> anyhow::Result<pcs::data::Split> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let (spec, seed) = match serde_json::from_str::<DatasetFile>(&text) {
        Ok(f) => (f.spec, f.seed),
        Err(_) => {
            let cfg = RunConfig::from_json(&text).context("not a dataset spec or run config")?;
            (cfg.dataset(), cfg.seed)
        }
    };
    Ok(synth_dataset(&spec, seed)?)
}

fn cmd_eval(
    checkpoint: &Path,
    dataset: &Path,
    gate: GateArg,
    split: SplitArg,
    batch: usize,
    predictions: Option<&Path>,
) -> anyhow::Result<()> {
    if batch == 0 {
        bail!("--batch must be positive");
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = load_dataset(dataset)?;
    let data = match split {
        SplitArg::Train => &data.train,
        SplitArg::Val => &data.val,
    };
    let eval = match ckpt.kind()?.as_str() {
        "pcs" => {
            let gate = match gate {
                GateArg::Salience => Gate::Salience,
                GateArg::Masked => Gate::Masked,
                GateArg::Static => Gate::Static,
            };
            evaluate(&Network::from_checkpoint(&ckpt)?, data, gate, batch)?
        }
        "compact" => {
            let net = CompactNetwork::from_checkpoint(&ckpt)?;
            evaluate_with(data, batch, |x| net.predict(x))?
        }
        other => bail!("unknown checkpoint kind `{other}`"),
    };
    if let Some(path) = predictions {
        let mut w = create(path)?;
        for p in &eval.predictions {
            writeln!(w, "{p}")?;
        }
        w.flush()?;
    }
    out!("samples {} accuracy {:.4} loss {:.6}", data.len(), eval.accuracy, eval.loss);
    Ok(())
}

fn cmd_ablate(config: &Path, out: &Path, probe: usize) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let ablation = run_mode_ablation(&cfg, probe)?;
    write_run(out, "pcs_", &ablation.pcs, cfg.image_size)?;
    write_run(out, "truncation_", &ablation.truncation, cfg.image_size)?;
    write_run(out, "input_dependent_", &ablation.input_dependent, cfg.image_size)?;
    let mut w = create(&out.join("report.json"))?;
    serde_json::to_writer_pretty(&mut w, &ablation.report)?;
    writeln!(w)?;
    w.flush()?;
    out!("{:<16} {:>9} {:>12} {:>10} {:>12}", "mode", "accuracy", "loss var", "agreement", "pruned MAdds");
    let r = &ablation.report;
    for m in [&r.pcs, &r.truncation, &r.input_dependent] {
        out!(
            "{:<16} {:>9.4} {:>12.6} {:>10.3} {:>12}",
            m.mode,
            m.val_accuracy,
            m.loss_variance,
            m.agreement_rate,
            human(m.pruned_madds)
        );
    }
    out!("wrote {}", out.display());
    Ok(())
}
