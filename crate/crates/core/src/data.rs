//! Individual records, treatment groups derived from eligibility covariates,
//! the balance template, and a synthetic population generator.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// One of the eight eligibility × period cells, numbered 1..=8.
///
/// Groups 1–4 are the before-period cells ~BR, ~Br, ~bR, ~br and groups 5–8
/// the after-period cells BR, Br, bR, br.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Group(u8);

pub const GROUP_COUNT: usize = 8;

impl Group {
    pub fn new(g: u8) -> Result<Self> {
        if (1..=8).contains(&g) {
            Ok(Group(g))
        } else {
            Err(invalid(format!("group must be in 1..=8, got {g}")))
        }
    }

    pub fn all() -> impl Iterator<Item = Group> {
        (1..=8).map(Group)
    }

    pub fn number(self) -> u8 {
        self.0
    }

    /// 0-based position, handy for indexing per-group arrays.
    pub fn index(self) -> usize {
        (self.0 - 1) as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Group::new(i as u8 + 1)
    }

    /// (w′, w″, w‴) for this cell.
    pub fn eligibility(self) -> [i8; 3] {
        let i = self.index();
        let le = if i & 1 == 0 { 1 } else { -1 };
        let iu = if i & 2 == 0 { 1 } else { -1 };
        let time = if i & 4 == 0 { -1 } else { 1 };
        [le, iu, time]
    }

    pub fn is_after(self) -> bool {
        self.0 >= 5
    }

    pub fn label(self) -> &'static str {
        crate::design::reference::GROUP_LABELS[self.index()]
    }

    /// Accepts a label such as `~BR` or a number `1`..`8`.
    pub fn parse(text: &str) -> Result<Self> {
        let t = text.trim();
        if let Some(i) = crate::design::reference::GROUP_LABELS.iter().position(|l| *l == t) {
            return Group::from_index(i);
        }
        t.parse::<u8>()
            .map_err(|_| invalid(format!("unknown group `{t}`")))
            .and_then(Group::new)
    }

    /// Same eligibility cell in the other period.
    pub fn counterpart(self) -> Group {
        Group(((self.index() ^ 4) + 1) as u8)
    }
}

impl TryFrom<u8> for Group {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Group::new(v)
    }
}

impl From<Group> for u8 {
    fn from(g: Group) -> u8 {
        g.0
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

fn check_sign(v: i8, what: &str) -> Result<()> {
    if v == 1 || v == -1 {
        Ok(())
    } else {
        Err(invalid(format!("{what} must be ±1, got {v}")))
    }
}

pub fn derive_group(w_prime: i8, w_dprime: i8, w_tprime: i8) -> Result<Group> {
    check_sign(w_prime, "w_prime")?;
    check_sign(w_dprime, "w_dprime")?;
    check_sign(w_tprime, "w_tprime")?;
    let mut i = 0u8;
    if w_prime == -1 {
        i |= 1;
    }
    if w_dprime == -1 {
        i |= 2;
    }
    if w_tprime == 1 {
        i |= 4;
    }
    Ok(Group(i + 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualRecord {
    pub id: String,
    pub x: Vec<f64>,
    pub w_prime: i8,
    pub w_dprime: i8,
    pub w_tprime: i8,
    pub outcome: Option<f64>,
}

impl IndividualRecord {
    pub fn group(&self) -> Group {
        derive_group(self.w_prime, self.w_dprime, self.w_tprime)
            .expect("record eligibility validated on construction")
    }

    pub fn eligibility(&self) -> [i8; 3] {
        [self.w_prime, self.w_dprime, self.w_tprime]
    }

    fn validate(&self, k: usize) -> Result<()> {
        if self.x.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: self.x.len(),
            });
        }
        derive_group(self.w_prime, self.w_dprime, self.w_tprime)?;
        if let Some(r) = self.outcome {
            if !(r >= 0.0) || !r.is_finite() {
                return Err(invalid(format!("record {}: outcome must be finite and ≥ 0", self.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyPopulation {
    covariate_names: Vec<String>,
    records: Vec<IndividualRecord>,
}

impl StudyPopulation {
    pub fn new(covariate_names: Vec<String>, records: Vec<IndividualRecord>) -> Result<Self> {
        let k = covariate_names.len();
        let mut names = HashSet::new();
        for n in &covariate_names {
            if !names.insert(n.as_str()) {
                return Err(invalid(format!("duplicate covariate name `{n}`")));
            }
        }
        let mut ids = HashSet::new();
        for r in &records {
            r.validate(k)?;
            if !ids.insert(r.id.as_str()) {
                return Err(invalid(format!("duplicate id `{}`", r.id)));
            }
        }
        Ok(StudyPopulation {
            covariate_names,
            records,
        })
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn records(&self) -> &[IndividualRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    /// Record indices per group, in file order.
    pub fn group_members(&self) -> [Vec<usize>; GROUP_COUNT] {
        let mut out: [Vec<usize>; GROUP_COUNT] = Default::default();
        for (i, r) in self.records.iter().enumerate() {
            out[r.group().index()].push(i);
        }
        out
    }

    pub fn group_counts(&self) -> [usize; GROUP_COUNT] {
        let mut out = [0; GROUP_COUNT];
        for r in &self.records {
            out[r.group().index()] += 1;
        }
        out
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = vec!["id", "w_prime", "w_dprime", "w_tprime", "outcome"];
        header.extend(self.covariate_names.iter().map(String::as_str));
        header.push("group");
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.id.clone(),
                r.w_prime.to_string(),
                r.w_dprime.to_string(),
                r.w_tprime.to_string(),
                r.outcome.map(|v| v.to_string()).unwrap_or_default(),
            ];
            row.extend(r.x.iter().map(f64::to_string));
            row.push(r.group().number().to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// How eligibility columns are coded in an input file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    /// Accept 0/1 eligibility columns and map 0 → −1. Never applied silently.
    pub zero_one_eligibility: bool,
}

const REQUIRED: [&str; 5] = ["id", "w_prime", "w_dprime", "w_tprime", "outcome"];

pub fn read_population<R: Read>(reader: R, schema: Schema) -> Result<StudyPopulation> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let mut pos = [0usize; 5];
    for (slot, name) in pos.iter_mut().zip(REQUIRED) {
        *slot = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse {
                row: 0,
                column: name.to_string(),
                message: "missing column".into(),
            })?;
    }
    let group_col = header.iter().position(|h| h == "group");
    let cov_cols: Vec<usize> = (0..header.len())
        .filter(|c| !pos.contains(c) && Some(*c) != group_col)
        .collect();
    let covariate_names: Vec<String> = cov_cols.iter().map(|&c| header[c].clone()).collect();

    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let parse_err = |c: usize, message: String| Error::Parse {
            row,
            column: header[c].clone(),
            message,
        };
        let id = field(pos[0]).to_string();
        if id.is_empty() {
            return Err(parse_err(pos[0], "empty id".into()));
        }
        if !ids.insert(id.clone()) {
            return Err(parse_err(pos[0], format!("duplicate id `{id}`")));
        }
        let mut w = [0i8; 3];
        for (j, slot) in w.iter_mut().enumerate() {
            let c = pos[1 + j];
            let raw = field(c);
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(c, format!("not a number: `{raw}`")))?;
            *slot = match (v, schema.zero_one_eligibility) {
                (1.0, _) => 1,
                (-1.0, false) => -1,
                (0.0, true) => -1,
                _ => {
                    let allowed = if schema.zero_one_eligibility { "{0, 1}" } else { "{-1, +1}" };
                    return Err(parse_err(c, format!("eligibility value {raw} outside {allowed}")));
                }
            };
        }
        let raw = field(pos[4]);
        let outcome = if raw.is_empty() {
            None
        } else {
            Some(
                raw.parse::<f64>()
                    .map_err(|_| parse_err(pos[4], format!("not a number: `{raw}`")))?,
            )
        };
        let mut x = Vec::with_capacity(cov_cols.len());
        for &c in &cov_cols {
            let raw = field(c);
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(c, format!("non-numeric covariate `{raw}`")))?;
            if !v.is_finite() {
                return Err(parse_err(c, "covariate must be finite".into()));
            }
            x.push(v);
        }
        let record = IndividualRecord {
            id,
            x,
            w_prime: w[0],
            w_dprime: w[1],
            w_tprime: w[2],
            outcome,
        };
        if let Some(gc) = group_col {
            let raw = field(gc);
            if !raw.is_empty() && raw != record.group().number().to_string() {
                return Err(parse_err(gc, format!("group {raw} inconsistent with eligibility")));
            }
        }
        records.push(record);
    }
    StudyPopulation::new(covariate_names, records)
}

pub fn load_population(path: impl AsRef<Path>, schema: Schema) -> Result<StudyPopulation> {
    let f = std::fs::File::open(path)?;
    read_population(std::io::BufReader::new(f), schema)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub names: Vec<String>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Template {
    pub fn new(names: Vec<String>, means: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        if means.len() != names.len() || scales.len() != names.len() {
            return Err(Error::DimensionMismatch {
                expected: names.len(),
                found: means.len().min(scales.len()),
            });
        }
        if let Some(i) = scales.iter().position(|&s| !(s > 0.0)) {
            return Err(invalid(format!("scale for `{}` must be positive", names[i])));
        }
        Ok(Template {
            names,
            means,
            scales,
        })
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// Template means are the unweighted average of the eight group means; scales
/// are pooled standard deviations (a constant covariate gets scale 1).
pub fn build_template(pop: &StudyPopulation) -> Result<Template> {
    let k = pop.covariate_names().len();
    let members = pop.group_members();
    if let Some(g) = members.iter().position(Vec::is_empty) {
        return Err(invalid(format!("group {} is empty", Group(g as u8 + 1))));
    }
    let mut means = vec![0.0; k];
    for m in &members {
        for (j, mean) in means.iter_mut().enumerate() {
            let gm = m.iter().map(|&i| pop.records[i].x[j]).sum::<f64>() / m.len() as f64;
            *mean += gm / GROUP_COUNT as f64;
        }
    }
    let n = pop.len() as f64;
    let scales = (0..k)
        .map(|j| {
            let mu = pop.records.iter().map(|r| r.x[j]).sum::<f64>() / n;
            let ss: f64 = pop.records.iter().map(|r| (r.x[j] - mu).powi(2)).sum();
            let sd = if pop.len() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        })
        .collect();
    Template::new(pop.covariate_names().to_vec(), means, scales)
}

pub fn standardize(pop: &StudyPopulation, template: &Template) -> Result<StudyPopulation> {
    let k = pop.covariate_names().len();
    if template.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: template.len(),
        });
    }
    if let Some(i) = template.scales.iter().position(|&s| !(s > 0.0)) {
        return Err(invalid(format!("zero scale for `{}`", template.names[i])));
    }
    let records = pop
        .records
        .iter()
        .map(|r| IndividualRecord {
            x: r
                .x
                .iter()
                .zip(template.means.iter().zip(&template.scales))
                .map(|(v, (m, s))| (v - m) / s)
                .collect(),
            ..r.clone()
        })
        .collect();
    Ok(StudyPopulation {
        covariate_names: pop.covariate_names.clone(),
        records,
    })
}

/// Standard synthetic covariates, in balance-table order.
pub const SYNTH_COVARIATES: [&str; 21] = [
    "temporary_layoff",
    "female",
    "age",
    "secondary_education",
    "tertiary_education",
    "apprenticeship",
    "married",
    "single",
    "divorced",
    "female_x_married",
    "female_x_single",
    "female_x_divorced",
    "blue_collar",
    "seasonal",
    "manufacturing",
    "prior_wage",
    "le",
    "relative_employment",
    "iu",
    "worked_3_of_5",
    "age_ge_50",
];

/// Covariates that encode eligibility and therefore cannot be matched to the
/// template within a group.
pub const ELIGIBILITY_COVARIATES: [&str; 4] = ["prior_wage", "le", "relative_employment", "iu"];

/// Eligibility factor (0 = w′, 1 = w″) that a covariate determines, if any.
pub fn eligibility_link(name: &str) -> Option<usize> {
    match name {
        "prior_wage" | "le" => Some(0),
        "relative_employment" | "iu" => Some(1),
        _ => None,
    }
}

/// Months of benefit before and after the reform for one individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenefitSchedule {
    /// Before: fewer than 3 of the last 5 years worked.
    pub before_short: f64,
    /// Before: at least 3 of the last 5 years worked.
    pub before_long: f64,
    /// After, extended duration, under 50.
    pub extended_under_50: f64,
    /// After, extended duration, 50 and over.
    pub extended_50_plus: f64,
}

impl Default for BenefitSchedule {
    fn default() -> Self {
        BenefitSchedule {
            before_short: 20.0,
            before_long: 30.0,
            extended_under_50: 39.0,
            extended_50_plus: 52.0,
        }
    }
}

impl BenefitSchedule {
    pub fn months(&self, age_ge_50: bool, worked_3_of_5: bool, iu: bool, after: bool) -> f64 {
        let base = if worked_3_of_5 {
            self.before_long
        } else {
            self.before_short
        };
        match (after, iu, age_ge_50) {
            (true, true, false) => self.extended_under_50,
            (true, true, true) => self.extended_50_plus,
            _ => base,
        }
    }
}

/// Outcome model R = ξ(x, w′, w″) + η(x, w′, w‴) + effects + noise, in weeks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutcomeModel {
    pub base: f64,
    /// ξ: linear covariate effects (name, weeks per unit of the covariate).
    pub covariate_effects: Vec<(String, f64)>,
    /// ξ: terms in w′, w″ and w′w″.
    pub le: f64,
    pub iu: f64,
    pub le_iu: f64,
    /// ξ: effect of (age − 46)/5 scaled by w″.
    pub age_iu: f64,
    /// η: terms in w‴ and w′w‴.
    pub time: f64,
    pub le_time: f64,
    /// η: effect of (age − 46)/5 scaled by w‴.
    pub age_time: f64,
    /// Effect of extended duration averaged over the replacement-rate levels.
    pub tau: f64,
    /// Extra duration effect under a raised replacement rate; applied as
    /// +δ/2 to BR and −δ/2 to Br.
    pub tau_r_shift: f64,
    /// Effect of a raised replacement rate (BR and bR).
    pub r_effect: f64,
    /// Weeks per extra benefit month for extended-duration groups.
    pub dose_per_month: f64,
    /// A w″×w‴ term; any nonzero value violates the estimability assumptions.
    pub iu_time_shift: f64,
    pub noise_sd: f64,
}

impl Default for OutcomeModel {
    fn default() -> Self {
        OutcomeModel {
            base: 18.0,
            covariate_effects: vec![
                ("female".into(), 0.6),
                ("age".into(), 0.03),
                ("seasonal".into(), -0.9),
                ("blue_collar".into(), 0.3),
            ],
            le: 1.0,
            iu: -1.5,
            le_iu: 0.5,
            age_iu: 0.2,
            time: 1.0,
            le_time: 0.5,
            age_time: 0.1,
            tau: 5.0,
            tau_r_shift: 1.0,
            r_effect: 0.5,
            dose_per_month: 0.0,
            iu_time_shift: 0.0,
            noise_sd: 0.5,
        }
    }
}

impl OutcomeModel {
    /// Every term zero: outcomes are identically 0 before clamping.
    pub fn null() -> Self {
        OutcomeModel {
            base: 0.0,
            covariate_effects: Vec::new(),
            le: 0.0,
            iu: 0.0,
            le_iu: 0.0,
            age_iu: 0.0,
            time: 0.0,
            le_time: 0.0,
            age_time: 0.0,
            tau: 0.0,
            tau_r_shift: 0.0,
            r_effect: 0.0,
            dose_per_month: 0.0,
            iu_time_shift: 0.0,
            noise_sd: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    #[serde(default = "default_sizes")]
    pub group_sizes: [usize; GROUP_COUNT],
    #[serde(default = "default_wage_cut")]
    pub wage_cut: f64,
    #[serde(default = "default_re_cut")]
    pub re_cut: f64,
    /// Standard deviation (in covariate SD units) of per-group mean shifts.
    #[serde(default = "default_group_shift")]
    pub group_shift: f64,
    #[serde(default)]
    pub benefits: BenefitSchedule,
    #[serde(default)]
    pub outcome: OutcomeModel,
}

fn default_sizes() -> [usize; GROUP_COUNT] {
    [1000; GROUP_COUNT]
}
fn default_wage_cut() -> f64 {
    12610.0
}
fn default_re_cut() -> f64 {
    0.40
}
fn default_group_shift() -> f64 {
    0.1
}

impl SynthConfig {
    pub fn new(seed: u64) -> Self {
        SynthConfig {
            seed,
            group_sizes: default_sizes(),
            wage_cut: default_wage_cut(),
            re_cut: default_re_cut(),
            group_shift: default_group_shift(),
            benefits: BenefitSchedule::default(),
            outcome: OutcomeModel::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(g) = self.group_sizes.iter().position(|&n| n == 0) {
            return Err(invalid(format!("group {} has size 0", g + 1)));
        }
        if !(self.outcome.noise_sd >= 0.0) {
            return Err(invalid("noise scale must be ≥ 0"));
        }
        if !(self.wage_cut > 0.0) || !(self.re_cut > 0.0 && self.re_cut < 1.0) {
            return Err(invalid("thresholds out of range"));
        }
        if !(self.group_shift >= 0.0) {
            return Err(invalid("group shift must be ≥ 0"));
        }
        Ok(())
    }
}

fn bernoulli<R: Rng>(rng: &mut R, p: f64) -> f64 {
    if rng.random::<f64>() < p.clamp(0.0, 1.0) {
        1.0
    } else {
        0.0
    }
}

/// Draws from `dist` until `accept` holds.
fn draw_until<R: Rng, D: Distribution<f64>>(rng: &mut R, dist: &D, accept: impl Fn(f64) -> bool) -> f64 {
    loop {
        let v = dist.sample(rng);
        if accept(v) {
            return v;
        }
    }
}

/// Generates a population with exactly the configured group sizes.
///
/// Prior wage and relative employment are drawn from fixed distributions
/// conditioned on the side of the cut implied by the group, so w′ = +1 iff
/// wage ≤ `wage_cut` and w″ = +1 iff relative employment ≥ `re_cut`.
pub fn synthesize_population(cfg: &SynthConfig) -> Result<StudyPopulation> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let wage = LogNormal::new(14000f64.ln(), 0.30).expect("valid lognormal");
    let re = Beta::new(3.0, 4.7).expect("valid beta");
    let noise = Normal::new(0.0, cfg.outcome.noise_sd.max(0.0)).map_err(|e| invalid(e.to_string()))?;

    // Per-group mean shifts for the freely varying covariates.
    let free = 8;
    let shifts: Vec<Vec<f64>> = (0..GROUP_COUNT)
        .map(|_| (0..free).map(|_| cfg.group_shift * unit.sample(&mut rng)).collect())
        .collect();

    let covariate_names: Vec<String> = SYNTH_COVARIATES.iter().map(|s| s.to_string()).collect();
    let effect_index: Vec<(usize, f64)> = cfg
        .outcome
        .covariate_effects
        .iter()
        .map(|(name, b)| {
            SYNTH_COVARIATES
                .iter()
                .position(|c| c == name)
                .map(|i| (i, *b))
                .ok_or_else(|| Error::UnknownName(name.clone()))
        })
        .collect::<Result<_>>()?;

    let total: usize = cfg.group_sizes.iter().sum();
    let width = total.to_string().len();
    let mut records = Vec::with_capacity(total);
    for g in Group::all() {
        let [le, iu, time] = g.eligibility();
        let sh = &shifts[g.index()];
        let binary = |rng: &mut ChaCha8Rng, p: f64, s: f64| bernoulli(rng, p + s * (p * (1.0 - p)).sqrt());
        for _ in 0..cfg.group_sizes[g.index()] {
            let temporary_layoff = binary(&mut rng, 0.32, sh[0]);
            let female = binary(&mut rng, 0.55, sh[1]);
            let age = (40.0 + 15.0 * rng.random::<f64>().powf(1.3) + 1.5 * sh[2]).clamp(40.0, 55.999);
            let edu: f64 = rng.random();
            let (secondary, tertiary) = if edu < 0.04 {
                (0.0, 1.0)
            } else if edu < 0.09 {
                (1.0, 0.0)
            } else {
                (0.0, 0.0)
            };
            let apprenticeship = binary(&mut rng, 0.28, sh[3]);
            let m: f64 = rng.random::<f64>() + 0.05 * sh[4];
            let (married, single, divorced) = if m < 0.68 {
                (1.0, 0.0, 0.0)
            } else if m < 0.81 {
                (0.0, 1.0, 0.0)
            } else if m < 0.96 {
                (0.0, 0.0, 1.0)
            } else {
                (0.0, 0.0, 0.0)
            };
            let blue_collar = binary(&mut rng, 0.75, sh[5]);
            let seasonal = binary(&mut rng, 0.40, sh[6]);
            let manufacturing = binary(&mut rng, 0.16, sh[7]);
            let prior_wage = draw_until(&mut rng, &wage, |v| (v <= cfg.wage_cut) == (le == 1));
            let relative_employment = draw_until(&mut rng, &re, |v| (v >= cfg.re_cut) == (iu == 1));
            let worked_3_of_5 = bernoulli(&mut rng, 0.45 + 0.5 * relative_employment);
            let age_ge_50 = if age >= 50.0 { 1.0 } else { 0.0 };
            let x = vec![
                temporary_layoff,
                female,
                age,
                secondary,
                tertiary,
                apprenticeship,
                married,
                single,
                divorced,
                female * married,
                female * single,
                female * divorced,
                blue_collar,
                seasonal,
                manufacturing,
                prior_wage.round(),
                le as f64,
                relative_employment,
                iu as f64,
                worked_3_of_5,
                age_ge_50,
            ];
            let o = &cfg.outcome;
            let (le, iu, time) = (le as f64, iu as f64, time as f64);
            let age_c = (age - 46.0) / 5.0;
            let xi = o.base
                + effect_index.iter().map(|&(i, b)| b * x[i]).sum::<f64>()
                + o.le * le
                + o.iu * iu
                + o.le_iu * le * iu
                + o.age_iu * age_c * iu;
            let eta = o.time * time + o.le_time * le * time + o.age_time * age_c * time;
            let mut effect = 0.0;
            match g.number() {
                5 => effect += o.tau + 0.5 * o.tau_r_shift + o.r_effect,
                6 => effect += o.tau - 0.5 * o.tau_r_shift,
                7 => effect += o.r_effect,
                _ => {}
            }
            if g.is_after() && iu > 0.0 {
                let extra = cfg.benefits.months(age_ge_50 > 0.0, worked_3_of_5 > 0.0, true, true)
                    - cfg.benefits.months(age_ge_50 > 0.0, worked_3_of_5 > 0.0, true, false);
                effect += o.dose_per_month * extra;
            }
            let shift = o.iu_time_shift * iu * time;
            let e = if o.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let outcome = (xi + eta + effect + shift + e).max(0.0);
            records.push(IndividualRecord {
                id: format!("i{:0width$}", records.len() + 1),
                x,
                w_prime: le as i8,
                w_dprime: iu as i8,
                w_tprime: time as i8,
                outcome: Some(outcome),
            });
        }
    }
    StudyPopulation::new(covariate_names, records)
}
