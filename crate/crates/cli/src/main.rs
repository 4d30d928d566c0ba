//! `semapix`: train, sample, evaluate, ablate and inspect.

mod config;
mod exit;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use semapix::data::caption::{parse_prompt, template_help};
use semapix::data::{attribute_oracle, World, WorldConfig};
use semapix::eval::{
    ablate_architecture, ablate_representation, ablate_routing, evaluate, pretrained_base, AblationBudget,
    EvalConfig, Representation,
};
use semapix::model::{classify_id, route_tokens, Checkpoint, MoTParams, RoutingPolicy, Token};
use semapix::sampler::{generate_image, read_trace, write_trace, DecodeConfig};
use semapix::tokenizers::{validate_sequence, Special};
use semapix::training::{pretrain_understanding, MetricsLog, TrainMode, Trainer};

use config::{read_toml, TrainFile};
use exit::{Exit, WithCode};

#[derive(Parser, Debug)]
#[command(name = "semapix", version, about = "Toy semantic-to-pixel image generation on a frozen understanding model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// Output directory [default: $SEMAPIX_OUT/<command>, else runs/<command>]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the configured stages (or the recipe presets) and write checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// TOML run description; the recipe presets when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run only the stage with this name.
        #[arg(long)]
        stage: Option<String>,
        /// Resume from a trainer checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate one image from a prompt such as "red square top-left".
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "ids")]
        prompt: Option<String>,
        /// Raw comma-separated prompt ids instead of a text prompt.
        #[arg(long)]
        ids: Option<String>,
        /// 0 decodes greedily.
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        /// 0 keeps every candidate.
        #[arg(long, default_value_t = 0)]
        top_k: usize,
    },
    /// Score a checkpoint on the toy benchmarks.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// TOML evaluation counts.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run one comparison table.
    Ablate {
        which: Ablation,
        #[command(flatten)]
        common: Common,
        /// TOML budget; `--smoke` or the standard budget when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        smoke: bool,
        /// Parallel legs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print a token trace with classes and routing and check its grammar.
    Inspect { trace: PathBuf },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Ablation {
    Representation,
    Architecture,
    Routing,
}

fn out_dir(common: &Common, command: &str) -> anyhow::Result<PathBuf> {
    let dir = match &common.out {
        Some(d) => d.clone(),
        None => std::env::var_os("SEMAPIX_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(command),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, v: &Value) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    semapix::model::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn manifest(out: &Path, command: &str, seed: u64, resolved: Value, outputs: &[&str]) -> anyhow::Result<()> {
    write_json(
        &out.join("manifest.json"),
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "checkpoint_format": semapix::model::CHECKPOINT_VERSION,
            "seed": seed,
            "config": resolved,
            "outputs": outputs,
        }),
    )
}

fn train(common: Common, config: Option<PathBuf>, only: Option<String>, resume: Option<PathBuf>) -> Result<(), Exit> {
    let mut file = match &config {
        Some(p) => read_toml::<TrainFile>(p)?,
        None => TrainFile::presets(),
    };
    if let Some(s) = common.seed {
        file.seed = s;
    }
    if let Some(name) = &only {
        file.stages.retain(|s| &s.name == name);
        if file.stages.is_empty() {
            return Err(anyhow!("stage: no stage named {name:?}")).code(2);
        }
    }
    file.validate().code(2)?;
    let out = out_dir(&common, "train")?;
    manifest(
        &out,
        "train",
        file.seed,
        json!({ "run": file, "resume": resume }),
        &["metrics.csv", "<stage>.ckpt"],
    )?;
    let mut metrics = MetricsLog::append(&out.join("metrics.csv"))?;

    let (world, mut params, first, resumed) = match &resume {
        Some(path) => {
            let t = Trainer::load(path).code(4)?;
            let idx = file
                .stages
                .iter()
                .position(|s| s.name == t.stage.name)
                .ok_or_else(|| anyhow!("stage: checkpoint stage {:?} is not in the config", t.stage.name))
                .code(2)?;
            (t.world.clone(), t.params.clone(), idx, Some(t))
        }
        None => {
            let world = World::fit(file.world.clone(), &file.tokenizer)?;
            let mut p = MoTParams::init(file.backbone.model(&world, file.architecture), file.seed)?;
            if let Some(pc) = &file.pretrain {
                eprintln!("pretraining the understanding side ({} steps)", pc.steps);
                p = pretrain_understanding(p, &world, pc, file.seed, |s| metrics.write(s))?;
            } else {
                p.copy_und_to_gen();
            }
            (world, p, 0, None)
        }
    };
    let mut resumed = resumed;
    for (i, stage) in file.stages.iter().enumerate().skip(first) {
        let mut t = match resumed.take() {
            Some(t) => t,
            None => Trainer::new(params, &world, stage.clone(), file.seed + i as u64, TrainMode::Generation)?,
        };
        eprintln!("stage {} ({} steps from {})", stage.name, stage.total_steps(), t.step_count());
        let every = file.checkpoint_every;
        while !t.is_done() {
            let until = if every > 0 { (t.step_count() / every + 1) * every } else { stage.total_steps() };
            t.run(Some(until), |s| metrics.write(s))?;
            if every > 0 && !t.is_done() {
                t.save(&out.join(format!("{}-step{}.ckpt", stage.name, t.step_count())))?;
            }
        }
        t.frozen_report().into_result()?;
        t.save(&out.join(format!("{}.ckpt", stage.name)))?;
        params = t.finish()?;
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

/// Model, world and tokenizer from any checkpoint that carries a tokenizer.
fn load_model(path: &Path) -> Result<(MoTParams<f32>, World), Exit> {
    let ckpt = Checkpoint::load(path)
        .with_context(|| format!("cannot load checkpoint {}", path.display()))
        .code(4)?;
    let world = World::from_checkpoint(&ckpt)
        .with_context(|| format!("checkpoint {}", path.display()))
        .code(4)?;
    Ok((ckpt.params, world))
}

fn generate(
    common: Common,
    checkpoint: PathBuf,
    prompt: Option<String>,
    ids: Option<String>,
    temperature: f64,
    top_k: usize,
) -> Result<(), Exit> {
    let (params, world) = load_model(&checkpoint)?;
    let (mut seq, wanted) = match (&prompt, &ids) {
        (Some(text), _) => {
            let a = parse_prompt(text).code(2)?;
            (world.t2i_prompt(&a)?.finish(), Some(a))
        }
        (None, Some(list)) => {
            let mut b = world.builder();
            for part in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let id: u32 = part.parse().with_context(|| format!("bad id {part:?}")).code(2)?;
                b.push(id, false).code(2)?;
            }
            (b.finish(), None)
        }
        (None, None) => return Err(anyhow!("give --prompt or --ids; {}", template_help())).code(2),
    };
    route_tokens(&mut seq, RoutingPolicy::default());
    let seed = common.seed.unwrap_or(0);
    let decode = DecodeConfig {
        temperature,
        top_k,
        seed,
    };
    let g = generate_image(&seq, &params, world.block_spec(), decode).code(2)?;
    let out = out_dir(&common, "generate")?;
    manifest(
        &out,
        "generate",
        seed,
        json!({
            "checkpoint": checkpoint,
            "prompt": prompt,
            "ids": ids,
            "temperature": temperature,
            "top_k": top_k,
        }),
        &["trace.tsv", "image.ppm", "verdict.json"],
    )?;
    let mut all: Vec<u32> = seq
        .tokens
        .iter()
        .filter_map(|t| match t {
            Token::Id(i) => Some(*i),
            Token::Slot(_) => None,
        })
        .collect();
    all.extend(&g.tokens);
    fs::write(out.join("trace.tsv"), write_trace(&all, &world.layout, world.block_spec())?)
        .context("writing trace")?;
    let img = world.tokenizer.decode(&g.block.sem_ids, &g.block.pix_ids)?;
    fs::write(out.join("image.ppm"), img.to_ppm()).context("writing image")?;
    let seen = attribute_oracle(&img);
    let words = |a: &semapix::data::Attributes| format!("{} {} {}", a.color.word(), a.shape.word(), a.position.word());
    let verdict = json!({
        "prompt": wanted.as_ref().map(words),
        "oracle": seen.as_ref().map(words),
        "match": wanted.is_some() && wanted == seen,
        "sem_ids": g.block.sem_ids,
        "pix_ids": g.block.pix_ids,
    });
    write_json(&out.join("verdict.json"), &verdict)?;
    println!(
        "oracle: {}  match: {}",
        seen.as_ref().map_or("unreadable".into(), words),
        verdict["match"]
    );
    Ok(())
}

fn eval(common: Common, checkpoint: PathBuf, config: Option<PathBuf>) -> Result<(), Exit> {
    let (params, world) = load_model(&checkpoint)?;
    let mut cfg = match &config {
        Some(p) => read_toml::<EvalConfig>(p)?,
        None => EvalConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let world = world.for_evaluation()?;
    let report = evaluate(&params, &world, &cfg, RoutingPolicy::default())?;
    let out = out_dir(&common, "eval")?;
    manifest(&out, "eval", cfg.seed, json!({ "checkpoint": checkpoint, "eval": cfg }), &["report.json"])?;
    write_json(&out.join("report.json"), &serde_json::to_value(report).context("report")?)?;
    println!("{}", serde_json::to_string_pretty(&report).context("report")?);
    Ok(())
}

fn ablate(which: Ablation, common: Common, config: Option<PathBuf>, smoke: bool, jobs: usize) -> Result<(), Exit> {
    let budget = match &config {
        Some(p) => read_toml::<AblationBudget>(p)?,
        None if smoke => AblationBudget::smoke(),
        None => AblationBudget::default(),
    };
    let seed = common.seed.unwrap_or(0);
    let name = format!("{which:?}").to_lowercase();
    let out = out_dir(&common, "ablate")?;
    manifest(
        &out,
        "ablate",
        seed,
        json!({ "which": name, "budget": budget, "jobs": jobs }),
        &[&format!("{name}.csv"), &format!("{name}.txt")],
    )?;
    let world = World::fit(WorldConfig::default(), &budget.tokenizer)?;
    eprintln!("pretraining the understanding side ({} steps)", budget.pretrain.steps);
    let und = pretrained_base(&world, &budget, seed)?;
    let table = match which {
        Ablation::Representation => ablate_representation(&world, &und, &Representation::GRID, &budget, seed, jobs)?,
        Ablation::Architecture => ablate_architecture(&world, &und, &budget, seed, jobs)?,
        Ablation::Routing => ablate_routing(&world, &und, &budget, seed, jobs)?,
    };
    fs::write(out.join(format!("{name}.csv")), table.to_csv()?).context("writing table")?;
    let pretty = table.pretty();
    fs::write(out.join(format!("{name}.txt")), &pretty).context("writing table")?;
    print!("{pretty}");
    Ok(())
}

fn inspect(trace: PathBuf) -> Result<(), Exit> {
    let text = fs::read_to_string(&trace)
        .with_context(|| format!("reading {}", trace.display()))
        .code(2)?;
    let (layout, spec, ids) = read_trace(&text).code(2)?;
    let policy = RoutingPolicy::default();
    for (pos, &id) in ids.iter().enumerate() {
        match classify_id(&layout, id) {
            Ok((class, special)) => {
                let name = special.map_or(format!("{class:?}"), |s: Special| s.name().to_string());
                println!("{pos}\t{id}\t{name}\t{}", policy.route(class, special).label());
            }
            Err(e) => println!("{pos}\t{id}\t<{e}>"),
        }
    }
    let blocks = validate_sequence(&ids, spec, &layout).code(5)?;
    println!("ok: {} tokens, {} image block(s)", ids.len(), blocks.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            common,
            config,
            stage,
            checkpoint,
        } => train(common, config, stage, checkpoint),
        Command::Generate {
            common,
            checkpoint,
            prompt,
            ids,
            temperature,
            top_k,
        } => generate(common, checkpoint, prompt, ids, temperature, top_k),
        Command::Eval {
            common,
            checkpoint,
            config,
        } => eval(common, checkpoint, config),
        Command::Ablate {
            which,
            common,
            config,
            smoke,
            jobs,
        } => ablate(which, common, config, smoke, jobs),
        Command::Inspect { trace } => inspect(trace),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
