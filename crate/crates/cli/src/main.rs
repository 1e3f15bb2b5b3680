use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use aliasblock::assemble::{default_plan, BlockDesign, BlockTypePlan};
use aliasblock::balance::{BalanceOptions, FeatureSpec};
use aliasblock::data::{load_population, synthesize_population, Schema, StudyPopulation, SynthConfig};
use aliasblock::outcome::{outcome_report, OutcomeOptions};
use aliasblock::pipeline::{
    self, assemble_from_log, balance_report, default_features, load_or_synthesize, match_population, to_json,
    validate_design_against_log, MatchingLog, PipelineConfig, StageError,
};
use aliasblock::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_VALIDATION: u8 = 4;

#[derive(Parser)]
#[command(name = "aliasblock", version, about = "Blocked difference-in-differences designs from a fractional factorial")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic population CSV.
    Synth(SynthArgs),
    /// Steps 1 and 2: balanced samples for every group.
    Match(ConfigArgs),
    /// Step 3: blocks from a population and a matching log.
    Assemble(AssembleArgs),
    /// Permutation balance table for a design.
    Balance(BalanceArgs),
    /// Block DiDs, rank tests and sensitivity analysis.
    Outcomes(OutcomesArgs),
    /// Every stage, writing all artifacts.
    Pipeline(ConfigArgs),
    /// Re-check a pipeline output directory from its files.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON synthesis config; `--seed` alone uses the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Same size for all eight groups.
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON pipeline config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Tolerance for every matching covariate, in template SD units.
    #[arg(long)]
    epsilon: Option<f64>,
    /// JSON object of per-covariate tolerances.
    #[arg(long)]
    epsilon_file: Option<PathBuf>,
    /// Comma-separated balance features such as `age,age*IU*TIME`.
    #[arg(long)]
    features: Option<String>,
}

#[derive(Args)]
struct PopulationArgs {
    #[arg(long)]
    population: PathBuf,
    /// Accept 0/1 eligibility columns.
    #[arg(long)]
    zero_one: bool,
    /// JSON list of block-type plans; defaults to the six standard types.
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Args)]
struct AssembleArgs {
    #[command(flatten)]
    pop: PopulationArgs,
    #[arg(long)]
    log: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct BalanceArgs {
    #[command(flatten)]
    pop: PopulationArgs,
    #[arg(long)]
    design: PathBuf,
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: u64,
    /// Output directory for balance.csv and balance.json.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct OutcomesArgs {
    #[command(flatten)]
    pop: PopulationArgs,
    #[arg(long)]
    design: PathBuf,
    /// JSON outcome options.
    #[arg(long)]
    options: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    dir: PathBuf,
    /// Population CSV; defaults to population.csv inside the directory.
    #[arg(long)]
    population: Option<PathBuf>,
    #[arg(long)]
    plan: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Infeasible(_) => EXIT_INFEASIBLE,
        Error::Validation(_) => EXIT_VALIDATION,
        _ => EXIT_CONFIG,
    }
}

fn fail(e: anyhow::Error) -> ExitCode {
    eprintln!("error: {e:#}");
    let code = e
        .chain()
        .find_map(|c| {
            c.downcast_ref::<StageError>()
                .map(|s| exit_code(&s.error))
                .or_else(|| c.downcast_ref::<Error>().map(exit_code))
        })
        .unwrap_or(EXIT_CONFIG);
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).map_err(Error::from).with_context(|| format!("reading {}", path.display()))?;
    let value = serde_json::from_str(&text).map_err(Error::from).with_context(|| format!("parsing {}", path.display()))?;
    Ok(value)
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    fs::write(path, bytes).map_err(Error::from).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn plan_from(path: Option<&Path>) -> anyhow::Result<Vec<BlockTypePlan>> {
    match path {
        Some(p) => read_json(p),
        None => Ok(default_plan()),
    }
}

fn load(args: &PopulationArgs) -> anyhow::Result<StudyPopulation> {
    let pop = load_population(
        &args.population,
        Schema {
            zero_one_eligibility: args.zero_one,
        },
    )
    .with_context(|| format!("loading {}", args.population.display()))?;
    Ok(pop)
}

fn load_design(path: &Path, pop: &StudyPopulation, plan: Vec<BlockTypePlan>) -> anyhow::Result<BlockDesign> {
    let file = fs::File::open(path).map_err(Error::from).with_context(|| format!("opening {}", path.display()))?;
    BlockDesign::read_csv(file, pop, plan).with_context(|| format!("reading {}", path.display()))
}

fn features_from(text: Option<&str>, pop: &StudyPopulation) -> anyhow::Result<Vec<String>> {
    let names = match text {
        Some(t) => FeatureSpec::parse_list(t)?.iter().map(FeatureSpec::name).collect(),
        None => default_features(pop),
    };
    Ok(names)
}

fn pipeline_config(args: &ConfigArgs) -> anyhow::Result<PipelineConfig> {
    let mut cfg: PipelineConfig = read_json(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epsilon {
        cfg.epsilon = e;
    }
    if let Some(path) = &args.epsilon_file {
        let map: BTreeMap<String, f64> = read_json(path)?;
        cfg.epsilons.extend(map);
    }
    if let Some(f) = &args.features {
        cfg.features = Some(FeatureSpec::parse_list(f)?.iter().map(FeatureSpec::name).collect());
    }
    // Relative input paths are taken from the config file's directory.
    if let (Some(input), Some(dir)) = (&cfg.input, args.config.parent()) {
        if input.is_relative() && !dir.as_os_str().is_empty() {
            cfg.input = Some(dir.join(input));
        }
    }
    cfg.validate().context("invalid config")?;
    Ok(cfg)
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth(a) => {
            let mut cfg = match (&a.config, a.seed) {
                (Some(p), _) => read_json::<SynthConfig>(p)?,
                (None, Some(seed)) => SynthConfig::new(seed),
                (None, None) => return Err(Error::InvalidInput("give --config or --seed".into()).into()),
            };
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            if let Some(n) = a.group_size {
                cfg.group_sizes = [n; 8];
            }
            let pop = synthesize_population(&cfg)?;
            let mut buf = Vec::new();
            pop.write_csv(&mut buf)?;
            write_file(&a.out, &buf)?;
            eprintln!("wrote {} individuals to {}", pop.len(), a.out.display());
        }
        Command::Match(a) => {
            let cfg = pipeline_config(&a)?;
            let pop = load_or_synthesize(&cfg).context("population stage failed")?;
            let log = match_population(&pop, &cfg).context("matching stage failed")?;
            write_file(&a.out.join(pipeline::SOLVER_LOG), to_json(&log)?.as_bytes())?;
            if cfg.synth.is_some() {
                let mut buf = Vec::new();
                pop.write_csv(&mut buf)?;
                write_file(&a.out.join(pipeline::POPULATION_FILE), &buf)?;
            }
            eprintln!("s̄ = {}", log.s_bar);
        }
        Command::Assemble(a) => {
            let pop = load(&a.pop)?;
            let plan = plan_from(a.pop.plan.as_deref())?;
            let log: MatchingLog = read_json(&a.log)?;
            log.validate(&pop).context("matching log")?;
            let (design, _) = assemble_from_log(&pop, &log, &plan).context("assembly stage failed")?;
            validate_design_against_log(&pop, &design, &log)?;
            let mut buf = Vec::new();
            design.write_csv(&pop, &mut buf)?;
            write_file(&a.out, &buf)?;
            eprintln!("{} blocks", design.blocks.len());
        }
        Command::Balance(a) => {
            let pop = load(&a.pop)?;
            let design = load_design(&a.design, &pop, plan_from(a.pop.plan.as_deref())?)?;
            let d = BalanceOptions::default();
            let opts = BalanceOptions {
                draws: a.draws.unwrap_or(d.draws),
                tau: a.tau.unwrap_or(d.tau),
                seed: a.seed,
            };
            let features = features_from(a.features.as_deref(), &pop)?;
            let table = balance_report(&pop, &design, &features, &opts).context("balance stage failed")?;
            let mut csv = Vec::new();
            table.write_csv(&mut csv)?;
            write_file(&a.out.join(pipeline::BALANCE_CSV), &csv)?;
            write_file(&a.out.join(pipeline::BALANCE_JSON), to_json(&table)?.as_bytes())?;
        }
        Command::Outcomes(a) => {
            let pop = load(&a.pop)?;
            let design = load_design(&a.design, &pop, plan_from(a.pop.plan.as_deref())?)?;
            let opts = match &a.options {
                Some(p) => read_json(p)?,
                None => OutcomeOptions::default(),
            };
            let report = outcome_report(&design, &pop, &opts).context("outcomes stage failed")?;
            write_file(&a.out, to_json(&report)?.as_bytes())?;
        }
        Command::Pipeline(a) => {
            let cfg = pipeline_config(&a)?;
            let out = pipeline::run_pipeline(&cfg, &a.out)?;
            eprintln!(
                "s̄ = {}, {} blocks, artifacts in {}",
                out.matching.s_bar,
                out.design.blocks.len(),
                a.out.display()
            );
        }
        Command::Validate(a) => {
            let plan = plan_from(a.plan.as_deref())?;
            let summary = pipeline::validate_directory(&a.dir, a.population.as_deref(), plan)?;
            println!("{}", serde_json::to_string(&summary).map_err(Error::from)?);
        }
    }
    Ok(())
}
