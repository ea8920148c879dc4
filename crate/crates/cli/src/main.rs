use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use irbindiff_core::config::{Ablation, PipelineConfig};
use irbindiff_core::pipeline::Pipeline;
use irbindiff_core::synth::synth_corpus;
use irbindiff_core::Error;

#[derive(Parser)]
#[command(name = "irbindiff", version, about = "LLVM-IR function embeddings for binary similarity search")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Ablation to apply; may be repeated.
    #[arg(long = "ablate", global = true, value_name = "no_norm|no_plm|no_graph")]
    ablate: Vec<Ablation>,

    /// Override the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Parse the corpus, filter functions, build the vocabulary.
    Prepare,
    /// Pretrain the block language model.
    Pretrain,
    /// Embed every basic block with the pretrained model.
    EmbedBlocks,
    /// Train the graph encoder contrastively.
    Train,
    /// Embed the evaluation functions.
    Embed,
    /// Score the retrieval tasks.
    Eval,
    /// Write a synthetic corpus into the configured corpus directory.
    Synth,
    /// Every stage from prepare to eval.
    Run,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => return Err(Error::Argument("--config <file> is required".into())),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    for &a in &cli.ablate {
        config.ablations.enable(a);
    }
    config.validate()?;
    Ok(config)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    let config = load_config(cli)?;
    if let Command::Synth = cli.command {
        let s = &config.synth;
        let summary = synth_corpus(&config.corpus_dir, s.n_groups, s.variants, config.seed)?;
        println!(
            "wrote {} functions in {} groups ({} files) to {}",
            summary.n_functions,
            summary.n_groups,
            summary.files.len(),
            config.corpus_dir.display()
        );
        return Ok(());
    }
    let pipeline = Pipeline::new(config)?;
    match cli.command {
        Command::Prepare => print_json(&pipeline.prepare()?)?,
        Command::Pretrain => match pipeline.pretrain()? {
            Some(report) => print_json(&report)?,
            None => println!("pretraining skipped under no_plm"),
        },
        Command::EmbedBlocks => println!("embedded {} blocks", pipeline.embed_blocks()?),
        Command::Train => print_json(&pipeline.train()?)?,
        Command::Embed => println!("embedded {} functions", pipeline.embed()?),
        Command::Eval => print_json(&pipeline.eval()?)?,
        Command::Run => print_json(&pipeline.run_all()?)?,
        Command::Synth => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 1 } else { 2 })
        }
    }
}
