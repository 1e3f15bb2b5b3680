//! End-to-end orchestration: population → template → Steps 1–2 → blocks →
//! balance → outcomes, with file artifacts and a file-only validator.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assemble::{assemble_design, default_plan, sample_slots, AssemblyNotes, BlockDesign, BlockTypePlan, CovariatePolicy};
use crate::balance::{balance_table, BalanceOptions, BalanceTable, FeatureSpec};
use crate::data::{
    build_template, eligibility_link, load_population, standardize, synthesize_population, Group, Schema,
    StudyPopulation, SynthConfig, Template, GROUP_COUNT,
};
use crate::error::{invalid, Error, Result};
use crate::outcome::{outcome_report, OutcomeOptions, OutcomeReport};
use crate::solver::{run_steps_1_2, Certificate, Mode, PartitionProblem, SolverOptions};

pub const DEFAULT_EPSILON: f64 = 0.05;

pub const DESIGN_FILE: &str = "design.csv";
pub const BALANCE_CSV: &str = "balance.csv";
pub const BALANCE_JSON: &str = "balance.json";
pub const OUTCOMES_FILE: &str = "outcomes.json";
pub const SOLVER_LOG: &str = "solver_log.json";
pub const POPULATION_FILE: &str = "population.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Population CSV; exclusive with `synth`.
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub zero_one_eligibility: bool,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Per-covariate tolerances overriding `epsilon`.
    #[serde(default)]
    pub epsilons: BTreeMap<String, f64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Covariates balanced by the matching; defaults to every covariate that
    /// does not encode eligibility.
    #[serde(default)]
    pub match_covariates: Option<Vec<String>>,
    #[serde(default)]
    pub plan: Option<Vec<BlockTypePlan>>,
    /// Balance features in the `age*LE` language; defaults to every covariate
    /// alone and with LE, IU, LE·IU, LE·TIME and IU·TIME.
    #[serde(default)]
    pub features: Option<Vec<String>>,
    #[serde(default)]
    pub draws: Option<usize>,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub outcome: OutcomeOptions,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default = "default_mode")]
    pub step2_mode: Mode,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_samples() -> usize {
    3
}
fn default_mode() -> Mode {
    Mode::Feasibility
}

impl PipelineConfig {
    pub fn synthetic(seed: u64, synth: SynthConfig) -> Self {
        PipelineConfig {
            seed,
            input: None,
            synth: Some(synth),
            zero_one_eligibility: false,
            epsilon: DEFAULT_EPSILON,
            epsilons: BTreeMap::new(),
            samples: 3,
            match_covariates: None,
            plan: None,
            features: None,
            draws: None,
            tau: None,
            outcome: OutcomeOptions::default(),
            solver: SolverOptions::default(),
            step2_mode: Mode::Feasibility,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.input, &self.synth) {
            (Some(_), Some(_)) => return Err(invalid("give either `input` or `synth`, not both")),
            (None, None) => return Err(invalid("one of `input` or `synth` is required")),
            _ => {}
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid(format!("epsilon {} must be positive", self.epsilon)));
        }
        if let Some((k, v)) = self.epsilons.iter().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(invalid(format!("epsilon for `{k}` is {v}; must be positive")));
        }
        if self.samples == 0 {
            return Err(invalid("samples must be at least 1"));
        }
        validate_plan_for(&self.plan(), self.samples)?;
        if let Some(d) = self.draws {
            if d == 0 {
                return Err(invalid("draws must be positive"));
            }
        }
        if let Some(t) = self.tau {
            if !(t > 0.0 && t <= 1.0) {
                return Err(invalid(format!("tau {t} must lie in (0, 1]")));
            }
        }
        for g in &self.outcome.gammas {
            if !(*g >= 1.0) {
                return Err(invalid(format!("gamma {g} must be ≥ 1")));
            }
        }
        Ok(())
    }

    pub fn plan(&self) -> Vec<BlockTypePlan> {
        self.plan.clone().unwrap_or_else(default_plan)
    }

    pub fn balance_options(&self) -> BalanceOptions {
        let d = BalanceOptions::default();
        BalanceOptions {
            draws: self.draws.unwrap_or(d.draws),
            tau: self.tau.unwrap_or(d.tau),
            seed: self.seed,
        }
    }
}

fn validate_plan_for(plan: &[BlockTypePlan], samples: usize) -> Result<()> {
    crate::assemble::validate_plan(plan, samples)
}

/// Every covariate alone and interacted with LE, IU, LE·IU, LE·TIME, IU·TIME.
pub fn default_features(pop: &StudyPopulation) -> Vec<String> {
    let suffixes = ["", "*LE", "*IU", "*LE*IU", "*LE*TIME", "*IU*TIME"];
    suffixes
        .iter()
        .flat_map(|s| pop.covariate_names().iter().map(move |c| format!("{c}{s}")))
        .collect()
}

pub fn default_match_covariates(pop: &StudyPopulation) -> Vec<String> {
    pop.covariate_names()
        .iter()
        .filter(|c| eligibility_link(c).is_none())
        .cloned()
        .collect()
}

#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed", self.stage)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

trait Stage<T> {
    fn stage(self, name: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, name: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage: name, error })
    }
}

// ---------------------------------------------------------------------------
// Matching log

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLog {
    pub group: Group,
    pub label: String,
    pub available: usize,
    pub step1_s: usize,
    pub step1_certificate: Certificate,
    pub step2_certificate: Certificate,
    pub achieved_epsilons: Vec<f64>,
    /// Member ids of each sample, in slot order.
    pub samples: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingLog {
    pub covariates: Vec<String>,
    pub template_means: Vec<f64>,
    pub template_scales: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub samples_per_group: usize,
    pub s_bar: usize,
    pub step1_min: usize,
    pub mode: Mode,
    pub solver: SolverOptions,
    pub groups: Vec<GroupLog>,
    #[serde(default)]
    pub assembly: Vec<AssemblyNotes>,
}

impl MatchingLog {
    /// `[group][slot]` population indices.
    pub fn sample_indices(&self, pop: &StudyPopulation) -> Result<Vec<Vec<Vec<usize>>>> {
        let index: HashMap<&str, usize> = pop.records().iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
        let mut out = vec![Vec::new(); GROUP_COUNT];
        for g in &self.groups {
            let mut samples = Vec::new();
            for s in &g.samples {
                samples.push(
                    s.iter()
                        .map(|id| {
                            index
                                .get(id.as_str())
                                .copied()
                                .ok_or_else(|| Error::Validation(format!("unknown individual `{id}` in matching log")))
                        })
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            out[g.group.index()] = samples;
        }
        Ok(out)
    }

    /// Re-checks every Step-2 sample from the population alone: sizes,
    /// group membership, disjointness and the balance constraints.
    pub fn validate(&self, pop: &StudyPopulation) -> Result<()> {
        if self.groups.len() != GROUP_COUNT {
            return Err(Error::Validation(format!("matching log lists {} groups", self.groups.len())));
        }
        let cols: Vec<usize> = self
            .covariates
            .iter()
            .map(|c| pop.covariate_index(c))
            .collect::<Result<_>>()?;
        let k = cols.len();
        if self.template_means.len() != k || self.template_scales.len() != k || self.epsilons.len() != k {
            return Err(Error::Validation("template and tolerances disagree with the covariate list".into()));
        }
        let samples = self.sample_indices(pop)?;
        let mut used = vec![false; pop.len()];
        for (g, log) in self.groups.iter().enumerate() {
            if log.group.index() != g {
                return Err(Error::Validation("groups out of order in matching log".into()));
            }
            let group_samples = &samples[g];
            if group_samples.len() != self.samples_per_group {
                return Err(Error::Validation(format!(
                    "group {} has {} samples, expected {}",
                    log.group,
                    group_samples.len(),
                    self.samples_per_group
                )));
            }
            for (p, sample) in group_samples.iter().enumerate() {
                if sample.len() != self.s_bar {
                    return Err(Error::Validation(format!(
                        "group {} sample {p} has {} members, expected {}",
                        log.group,
                        sample.len(),
                        self.s_bar
                    )));
                }
                let mut dev = vec![0.0; k];
                for &i in sample {
                    let rec = &pop.records()[i];
                    if rec.group() != log.group {
                        return Err(Error::Validation(format!("{} is not in group {}", rec.id, log.group)));
                    }
                    if std::mem::replace(&mut used[i], true) {
                        return Err(Error::Validation(format!("{} appears in two samples", rec.id)));
                    }
                    for (j, &c) in cols.iter().enumerate() {
                        dev[j] += (rec.x[c] - self.template_means[j]) / self.template_scales[j];
                    }
                }
                if self.mode == Mode::Feasibility {
                    let s = self.s_bar as f64;
                    for j in 0..k {
                        if dev[j].abs() > self.epsilons[j] * s + crate::solver::BALANCE_TOL * (1.0 + s) {
                            return Err(Error::Validation(format!(
                                "group {} sample {p}: `{}` imbalance {:.4} exceeds {:.4}",
                                log.group,
                                self.covariates[j],
                                dev[j].abs() / s,
                                self.epsilons[j]
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Stages

pub fn load_or_synthesize(cfg: &PipelineConfig) -> Result<StudyPopulation> {
    match (&cfg.input, &cfg.synth) {
        (Some(path), None) => load_population(
            path,
            Schema {
                zero_one_eligibility: cfg.zero_one_eligibility,
            },
        ),
        (None, Some(s)) => synthesize_population(s),
        _ => Err(invalid("one of `input` or `synth` is required")),
    }
}

fn subset_template(full: &Template, names: &[String]) -> Result<Template> {
    let mut means = Vec::new();
    let mut scales = Vec::new();
    for n in names {
        let i = full
            .names
            .iter()
            .position(|m| m == n)
            .ok_or_else(|| Error::UnknownName(n.clone()))?;
        means.push(full.means[i]);
        scales.push(full.scales[i]);
    }
    Template::new(names.to_vec(), means, scales)
}

/// Steps 1 and 2 on every group.
pub fn match_population(pop: &StudyPopulation, cfg: &PipelineConfig) -> Result<MatchingLog> {
    let names = cfg
        .match_covariates
        .clone()
        .unwrap_or_else(|| default_match_covariates(pop));
    for n in cfg.epsilons.keys() {
        if !names.contains(n) {
            return Err(invalid(format!("tolerance given for `{n}`, which is not a matching covariate")));
        }
    }
    let full = build_template(pop)?;
    let template = subset_template(&full, &names)?;
    let std_pop = standardize(pop, &full)?;
    let cols: Vec<usize> = names.iter().map(|n| pop.covariate_index(n)).collect::<Result<_>>()?;
    let epsilons: Vec<f64> = names
        .iter()
        .map(|n| cfg.epsilons.get(n).copied().unwrap_or(cfg.epsilon))
        .collect();
    let members = pop.group_members();
    let problems: Vec<PartitionProblem> = members
        .iter()
        .enumerate()
        .map(|(g, m)| {
            let rows = m
                .iter()
                .map(|&i| cols.iter().map(|&c| std_pop.records()[i].x[c]).collect())
                .collect();
            PartitionProblem::new(rows, vec![0.0; names.len()], epsilons.clone(), cfg.samples).map_err(|e| {
                invalid(format!("group {}: {e}", Group::from_index(g).expect("eight groups")))
            })
        })
        .collect::<Result<_>>()?;
    let steps = run_steps_1_2(&problems, cfg.step2_mode, &cfg.solver)?;
    if steps.s_bar == 0 {
        return Err(Error::Infeasible("the common sample size s̄ is zero".into()));
    }
    let groups = (0..GROUP_COUNT)
        .map(|g| {
            let group = Group::from_index(g).expect("eight groups");
            let sol = &steps.step2[g];
            let samples = sol
                .samples(cfg.samples)
                .into_iter()
                .map(|s| s.into_iter().map(|i| pop.records()[members[g][i]].id.clone()).collect())
                .collect();
            GroupLog {
                group,
                label: group.label().to_string(),
                available: members[g].len(),
                step1_s: steps.step1[g].s,
                step1_certificate: steps.step1[g].certificate.clone(),
                step2_certificate: sol.certificate.clone(),
                achieved_epsilons: sol.achieved_epsilons.clone(),
                samples,
            }
        })
        .collect();
    Ok(MatchingLog {
        covariates: names,
        template_means: template.means,
        template_scales: template.scales,
        epsilons,
        samples_per_group: cfg.samples,
        s_bar: steps.s_bar,
        step1_min: steps.step1_min,
        mode: cfg.step2_mode,
        solver: cfg.solver.clone(),
        groups,
        assembly: Vec::new(),
    })
}

pub fn assemble_from_log(
    pop: &StudyPopulation,
    log: &MatchingLog,
    plan: &[BlockTypePlan],
) -> Result<(BlockDesign, Vec<AssemblyNotes>)> {
    let samples = log.sample_indices(pop)?;
    assemble_design(pop, &samples, plan, &CovariatePolicy::for_population(pop))
}

pub fn balance_report(
    pop: &StudyPopulation,
    design: &BlockDesign,
    features: &[String],
    opts: &BalanceOptions,
) -> Result<BalanceTable> {
    let specs: Vec<FeatureSpec> = features.iter().map(|f| FeatureSpec::parse(f)).collect::<Result<_>>()?;
    balance_table(design, pop, &specs, opts)
}

/// Checks that the design only uses the matched samples, each in its slot.
pub fn validate_design_against_log(pop: &StudyPopulation, design: &BlockDesign, log: &MatchingLog) -> Result<()> {
    design.validate(pop)?;
    let samples = log.sample_indices(pop)?;
    let slots = sample_slots(&design.plan);
    let mut slot_of: HashMap<usize, u8> = HashMap::new();
    for (g, group_samples) in samples.iter().enumerate() {
        for (p, sample) in group_samples.iter().enumerate() {
            let t = *slots[g]
                .get(p)
                .ok_or_else(|| Error::Validation(format!("group {} has no slot {p}", g + 1)))?;
            for &i in sample {
                slot_of.insert(i, t);
            }
        }
    }
    for b in &design.blocks {
        for m in &b.members {
            if slot_of.get(&m.individual) != Some(&b.type_id) {
                return Err(Error::Validation(format!(
                    "block {}: {} was not matched into a sample for type {}",
                    b.block_id,
                    pop.records()[m.individual].id,
                    b.type_id
                )));
            }
        }
    }
    let expected = log.s_bar * design.plan.len();
    if design.blocks.len() != expected {
        return Err(Error::Validation(format!(
            "design has {} blocks, expected {expected}",
            design.blocks.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Whole pipeline

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub population: StudyPopulation,
    pub matching: MatchingLog,
    pub design: BlockDesign,
    pub balance: BalanceTable,
    pub outcomes: Option<OutcomeReport>,
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Runs every stage in memory.
pub fn run_in_memory(cfg: &PipelineConfig) -> std::result::Result<PipelineOutput, StageError> {
    cfg.validate().stage("config")?;
    let pop = load_or_synthesize(cfg).stage("population")?;
    let mut matching = match_population(&pop, cfg).stage("matching")?;
    let plan = cfg.plan();
    let (design, notes) = assemble_from_log(&pop, &matching, &plan).stage("assembly")?;
    matching.assembly = notes;
    validate_design_against_log(&pop, &design, &matching).stage("assembly")?;
    let features = cfg.features.clone().unwrap_or_else(|| default_features(&pop));
    let balance = balance_report(&pop, &design, &features, &cfg.balance_options()).stage("balance")?;
    let has_outcomes = design
        .blocks
        .iter()
        .all(|b| b.members.iter().all(|m| pop.records()[m.individual].outcome.is_some()));
    let outcomes = if has_outcomes {
        Some(outcome_report(&design, &pop, &cfg.outcome).stage("outcomes")?)
    } else {
        None
    };
    Ok(PipelineOutput {
        population: pop,
        matching,
        design,
        balance,
        outcomes,
    })
}

/// Writes all artifacts into `out_dir`; on failure nothing written by this
/// call is left behind.
pub fn write_artifacts(out: &PipelineOutput, cfg: &PipelineConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<(&str, Vec<u8>)> = Vec::new();
    let mut design_csv = Vec::new();
    out.design.write_csv(&out.population, &mut design_csv)?;
    files.push((DESIGN_FILE, design_csv));
    let mut balance_csv = Vec::new();
    out.balance.write_csv(&mut balance_csv)?;
    files.push((BALANCE_CSV, balance_csv));
    files.push((BALANCE_JSON, to_json(&out.balance)?.into_bytes()));
    if let Some(o) = &out.outcomes {
        files.push((OUTCOMES_FILE, to_json(o)?.into_bytes()));
    }
    files.push((SOLVER_LOG, to_json(&out.matching)?.into_bytes()));
    if cfg.synth.is_some() {
        let mut pop_csv = Vec::new();
        out.population.write_csv(&mut pop_csv)?;
        files.push((POPULATION_FILE, pop_csv));
    }

    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = out_dir.join(name);
        if let Err(e) = fs::write(&path, bytes) {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            let _ = fs::remove_file(&path);
            return Err(e.into());
        }
        written.push(path);
    }
    Ok(written)
}

pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> std::result::Result<PipelineOutput, StageError> {
    let out = run_in_memory(cfg)?;
    write_artifacts(&out, cfg, out_dir).stage("output")?;
    Ok(out)
}

/// Re-checks a pipeline output directory from its files alone.
pub fn validate_directory(dir: &Path, population: Option<&Path>, plan: Vec<BlockTypePlan>) -> Result<ValidationSummary> {
    let pop_path = population
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join(POPULATION_FILE));
    let pop = load_population(&pop_path, Schema::default())?;
    let log: MatchingLog = serde_json::from_str(&fs::read_to_string(dir.join(SOLVER_LOG))?)?;
    log.validate(&pop)?;
    let design = BlockDesign::read_csv(fs::File::open(dir.join(DESIGN_FILE))?, &pop, plan)?;
    validate_design_against_log(&pop, &design, &log)?;
    Ok(ValidationSummary {
        s_bar: log.s_bar,
        blocks: design.blocks.len(),
        individuals: design.blocks.len() * 4,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub s_bar: usize,
    pub blocks: usize,
    pub individuals: usize,
}
