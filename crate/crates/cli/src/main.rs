use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fda_core::attacks::{attack_batch, circular_shift_targets};
use fda_core::corpus::{generate, load_corpus, save_corpus, split_of, ImageStorage, Split};
use fda_core::eval::{dump_attention_heatmap, run_experiment, Defense, ExperimentPlan, FlatConfig, RunConfig};
use fda_core::vlm::{load_checkpoint, save_checkpoint, train};
use fda_core::{AttackMode, CorpusItem, FunctionWordDictionary, GateMode, Model, PlacementSpec, TokenSequence};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "fda", version, about = "Function-word de-attention: corpus, training, attacks and evaluation")]
struct Cli {
    /// flat `key = value` configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// override one configuration key; may be repeated
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus into `<out>/corpus.jsonl`
    GenCorpus,
    /// Train one model on the train split
    Train {
        /// checkpoint to write (default `<out>/model.fdackpt`)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Attack the test split of one model and write per-item results
    Attack {
        #[arg(long)]
        model: PathBuf,
    },
    /// Compare a baseline checkpoint against defended checkpoints
    Eval {
        #[arg(long)]
        baseline: PathBuf,
        /// defended model, `LABEL=PATH`; may be repeated
        #[arg(long = "defense", value_name = "LABEL=PATH")]
        defenses: Vec<String>,
    },
    /// Train one model per `ablate.placements` entry and evaluate them all
    Ablate,
    /// Write one fusion attention map as CSV plus a JSON summary
    DumpAttn {
        #[arg(long)]
        model: PathBuf,
        /// CSV path (default `<out>/attn_L<l>_H<h>_<stage>.csv`)
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    match cli.command {
        Command::GenCorpus => gen_corpus(&cfg),
        Command::Train { checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| cfg.out.join("model.fdackpt"));
            train_cmd(&cfg, &path)
        }
        Command::Attack { model } => attack_cmd(&cfg, &model),
        Command::Eval { baseline, defenses } => eval_cmd(&cfg, &baseline, &defenses),
        Command::Ablate => ablate_cmd(&cfg),
        Command::DumpAttn { model, output } => dump_attn_cmd(&cfg, &model, output),
    }
}

/// Config file, then `--set` overrides, then the dedicated global flags.
fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut flat = match &cli.config {
        Some(p) => FlatConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => FlatConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set `{kv}`: expected KEY=VALUE"))?;
        flat.set(k.trim(), v.trim());
    }
    let mut cfg = RunConfig::from_flat(&flat)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if cfg.threads == Some(0) {
        bail!("threads must be at least 1");
    }
    Ok(cfg)
}

fn corpus(cfg: &RunConfig) -> Result<Vec<CorpusItem>> {
    match &cfg.corpus_path {
        Some(p) => load_corpus(p).with_context(|| format!("loading corpus {}", p.display())),
        None => Ok(generate(cfg.seed, cfg.corpus_n, cfg.test_ratio)?),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn gen_corpus(cfg: &RunConfig) -> Result<()> {
    let items = generate(cfg.seed, cfg.corpus_n, cfg.test_ratio)?;
    let path = cfg.out.join("corpus.jsonl");
    let storage = if cfg.inline_images { ImageStorage::Inline } else { ImageStorage::Files };
    save_corpus(&items, &path, storage)?;
    let test = items.iter().filter(|it| it.split == Split::Test).count();
    println!("wrote {} items ({} train, {test} test) to {}", items.len(), items.len() - test, path.display());
    Ok(())
}

fn trained_model(cfg: &RunConfig, placement: Option<PlacementSpec>, train_items: &[CorpusItem]) -> Result<(Model, serde_json::Value)> {
    let mut mc = cfg.model_config();
    if let Some(p) = placement {
        mc.placement = p;
    }
    let mut model = Model::new(mc)?;
    if let Some(d) = &cfg.dictionary {
        model = model.with_dictionary(FunctionWordDictionary::load(d)?);
    }
    let report = train(&mut model, train_items, &cfg.train_config())?;
    log::info!(
        "trained `{}`: loss {:.4} -> {:.4}",
        model.config().placement,
        report.initial_loss,
        report.final_loss
    );
    Ok((model, serde_json::to_value(&report)?))
}

fn train_cmd(cfg: &RunConfig, path: &Path) -> Result<()> {
    let items = corpus(cfg)?;
    let (model, report) = trained_model(cfg, None, &split_of(&items, Split::Train))?;
    save_checkpoint(&model, path)?;
    write_json(&path.with_extension("train.json"), &report)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn sequences(model: &Model, items: &[CorpusItem]) -> Result<Vec<TokenSequence>> {
    Ok(items
        .iter()
        .map(|it| it.sequence(model.config().max_len))
        .collect::<fda_core::Result<_>>()?)
}

fn attack_cmd(cfg: &RunConfig, model_path: &Path) -> Result<()> {
    let model = load_checkpoint(model_path)?;
    let items = split_of(&corpus(cfg)?, Split::Test);
    let images: Vec<_> = items.iter().map(|it| it.image.clone()).collect();
    let seqs = sequences(&model, &items)?;
    let shifted = circular_shift_targets(&seqs)?;
    let attacker_dict = FunctionWordDictionary::builtin();

    let mut runs = Vec::new();
    for ac in cfg.attack_configs() {
        let targets = (ac.mode == AttackMode::Targeted).then_some(shifted.targets.as_slice());
        let results = attack_batch(&model, &images, &seqs, targets, &attacker_dict, &ac)?;
        let mean_loss = results.iter().map(|r| r.best_loss).sum::<f64>() / results.len() as f64;
        println!("{:<28} mean best loss {mean_loss:.4}", ac.label());
        let per_item: Vec<_> = items
            .iter()
            .zip(&results)
            .map(|(it, r)| Ok(json!({ "item": it.id, "result": serde_json::to_value(r)? })))
            .collect::<Result<_>>()?;
        runs.push(json!({
            "attack": ac.label(),
            "family": ac.family.to_string(),
            "mode": format!("{:?}", ac.mode).to_lowercase(),
            "epsilon": ac.epsilon,
            "mean_best_loss": mean_loss,
            "items": per_item,
        }));
    }
    let path = cfg.out.join("attacks.json");
    write_json(&path, &json!({ "seed": cfg.seed, "model": model_path, "runs": runs }))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn plan_for(cfg: &RunConfig, baseline: Defense, items: Vec<CorpusItem>) -> ExperimentPlan {
    let mut plan = ExperimentPlan::new(baseline, items, cfg.attack_configs());
    plan.ks = cfg.ks.clone();
    plan.seed = cfg.seed;
    plan.out_dir = Some(cfg.out.clone());
    plan
}

fn finish(plan: &ExperimentPlan) -> Result<()> {
    let out = run_experiment(plan)?;
    print!("{}", out.table);
    if let Some(dir) = &plan.out_dir {
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, baseline: &Path, defenses: &[String]) -> Result<()> {
    let items = split_of(&corpus(cfg)?, Split::Test);
    let mut plan = plan_for(cfg, Defense::new("no-defense", load_checkpoint(baseline)?), items);
    for d in defenses {
        let (label, path) = d
            .split_once('=')
            .with_context(|| format!("--defense `{d}`: expected LABEL=PATH"))?;
        plan.defenses.push(Defense::new(label, load_checkpoint(Path::new(path))?));
    }
    finish(&plan)
}

fn ablate_cmd(cfg: &RunConfig) -> Result<()> {
    let items = corpus(cfg)?;
    let train_items = split_of(&items, Split::Train);
    let (base, _) = trained_model(cfg, Some(PlacementSpec::none()), &train_items)?;
    let mut plan = plan_for(cfg, Defense::new("no-defense", base), split_of(&items, Split::Test));
    for p in &cfg.ablate_placements {
        let (model, _) = trained_model(cfg, Some(p.clone()), &train_items)?;
        let label = match cfg.model.gate_mode {
            GateMode::Learnable => format!("fda {p}"),
            GateMode::Fixed(g) => format!("fda {p} g={g}"),
        };
        plan.defenses.push(Defense::new(label, model));
    }
    finish(&plan)
}

fn dump_attn_cmd(cfg: &RunConfig, model_path: &Path, output: Option<PathBuf>) -> Result<()> {
    let model = load_checkpoint(model_path)?;
    let items = split_of(&corpus(cfg)?, Split::Test);
    let Some(item) = items.get(cfg.heatmap_item) else {
        bail!("heatmap.item {} out of range ({} test items)", cfg.heatmap_item, items.len());
    };
    let seq = item.sequence(model.config().max_len)?;
    let (l, h, stage) = (cfg.heatmap_layer, cfg.heatmap_head, cfg.heatmap_stage);
    let path = output.unwrap_or_else(|| cfg.out.join(format!("attn_L{l}_H{h}_{stage}.csv")));
    let summary = dump_attention_heatmap(&model, &item.image, &seq, l, h, stage, &path)?;
    println!(
        "wrote {} ({}×{}, gate {:.4}, values in [{:.4}, {:.4}])",
        path.display(),
        summary.rows,
        summary.cols,
        summary.gate,
        summary.min,
        summary.max
    );
    Ok(())
}
