//! Acceptance criteria. Each test prints one PASS/FAIL line. The tests hold a
//! shared lock so wall-clock budgets are measured without interference.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use aliasblock::assemble::default_plan;
use aliasblock::assign::optimal_assignment;
use aliasblock::balance::{truncated_product, FeatureSpec};
use aliasblock::data::{eligibility_link, SynthConfig};
use aliasblock::design::reference::{benefit_contrast, benefit_design, difference_in_differences, half_fraction};
use aliasblock::design::{
    alias_relations, contrast_orthogonality, estimable_contrast, interaction_column, matrix_rank, DesignMatrix,
};
use aliasblock::outcome::{amplify, signed_rank_gamma, tail};
use aliasblock::pipeline::{run_in_memory, run_pipeline, PipelineConfig};
use aliasblock::solver::{
    brute_force_fixed, brute_force_partition, fixed_size_partition, max_size_partition, FixedOutcome, Mode,
    PartitionProblem, SolverOptions,
};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(name: &str, ok: bool, detail: String) {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

fn unit(d: &DesignMatrix, name: &str) -> Vec<f64> {
    d.column_names().map(|n| if n == name { 1.0 } else { 0.0 }).collect()
}

#[test]
fn table_1_half_fraction() {
    let _g = serial();
    let t = Instant::now();
    let d = half_fraction();
    let ab = interaction_column(&d, &["A", "B"]).unwrap();
    let c_is_ab = d.column("C").unwrap() == ab.as_slice();
    // A factorial effect is high minus low, i.e. twice the coefficient.
    let r = estimable_contrast(&d, &[2.0, 0.0, 0.0], None).unwrap();
    let weights_ok = r.estimable && r.weights.as_deref() == Some(&[0.5, 0.5, -0.5, -0.5][..]);
    let elapsed = t.elapsed();
    report(
        "table 1 half fraction",
        c_is_ab && weights_ok && elapsed < Duration::from_millis(1),
        format!("C = AB: {c_is_ab}, A weights {:?}, {elapsed:?}", r.weights),
    );
}

#[test]
fn table_2_difference_in_differences() {
    let _g = serial();
    let d = difference_in_differences();
    let r = estimable_contrast(&d, &unit(&d, "treatment"), None).unwrap();
    let h = [1.0, -1.0, -1.0, 1.0];
    let proportional = r.estimable && r.contrast.as_ref().is_some_and(|c| c.is_proportional_to(&h, 1e-12));
    let inter = interaction_column(&d, &["eligible", "time"]).unwrap();
    let aug = d.with_column("eligible*time", inter).unwrap();
    let r2 = estimable_contrast(&aug, &unit(&aug, "treatment"), None).unwrap();
    report(
        "table 2 difference in differences",
        proportional && !r2.estimable,
        format!("weights {:?}, estimable with interaction: {}", r.weights, r2.estimable),
    );
}

#[test]
fn table_3_benefit_design() {
    let _g = serial();
    let d = benefit_design();
    let full_rank = matrix_rank(&d.matrix()) == d.n_columns() && alias_relations(&d).is_empty();
    let le_time = interaction_column(&d, &["LE", "TIME"]).unwrap();
    let iu_time = interaction_column(&d, &["IU", "TIME"]).unwrap();
    let aug = d.clone().with_column("LE*TIME", le_time.clone()).unwrap();
    let deps = alias_relations(&aug);
    // LE×TIME = 2·(R/r) − LE, checked elementwise.
    let rr = d.column("R/r").unwrap();
    let le = d.column("LE").unwrap();
    let identity = le_time.iter().zip(rr).zip(le).all(|((x, r), l)| *x == 2.0 * r - l);
    let dep_ok = deps.len() == 1
        && deps[0].coefficient("LE*TIME") == 1.0
        && deps[0].coefficient("R/r") == -2.0
        && deps[0].coefficient("LE") == 1.0
        && deps[0].terms.iter().filter(|(_, c)| *c != 0.0).count() == 3;
    let h = benefit_contrast();
    let before = estimable_contrast(&d, &unit(&d, "B/b"), None).unwrap();
    let after = estimable_contrast(&aug, &unit(&aug, "B/b"), None).unwrap();
    let same_h = before.estimable
        && after.estimable
        && before.weights.as_deref() == Some(h.weights())
        && after.weights.as_deref() == Some(h.weights());
    let o1 = contrast_orthogonality(&h, &le_time).unwrap();
    let o2 = contrast_orthogonality(&h, &iu_time).unwrap();
    report(
        "table 3 benefit design",
        full_rank && identity && dep_ok && same_h && o1.value == 0.0 && o2.value != 0.0,
        format!(
            "full rank {full_rank}, dependency {}, h unchanged {same_h}, (h, w'w''') = {}, (h, w''w''') = {}",
            deps.first().map(|d| d.to_string()).unwrap_or_default(),
            o1.value,
            o2.value
        ),
    );
}

fn random_problem(rng: &mut ChaCha8Rng) -> PartitionProblem {
    let n = rng.random_range(2..=12);
    let p = rng.random_range(1..=2);
    let k = rng.random_range(1..=3);
    let rows = (0..n)
        .map(|_| (0..k).map(|_| (rng.random_range(-20..=20) as f64) / 10.0).collect())
        .collect();
    let means = (0..k).map(|_| rng.random_range(-3..=3) as f64 / 10.0).collect();
    let eps = (0..k).map(|_| rng.random_range(1..=8) as f64 / 10.0).collect();
    PartitionProblem::new(rows, means, eps, p).unwrap()
}

#[test]
fn solver_matches_brute_force() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let opts = SolverOptions::default();
    let mut mismatches = Vec::new();
    let mut fixed_checks = 0;
    for case in 0..200 {
        let prob = random_problem(&mut rng);
        let oracle = brute_force_partition(&prob).unwrap();
        let got = max_size_partition(&prob, &opts).unwrap();
        if got.s != oracle.s || !got.certificate.proved_optimal {
            mismatches.push(format!("case {case}: max size {} vs {}", got.s, oracle.s));
        }
        for s in 1..=prob.n_units() / prob.samples {
            for mode in [Mode::Feasibility, Mode::MinTotalEpsilon] {
                fixed_checks += 1;
                let want = brute_force_fixed(&prob, s, mode).unwrap();
                let have = fixed_size_partition(&prob, s, mode, &opts).unwrap();
                let same = match (&want, &have) {
                    (None, FixedOutcome::Infeasible) => true,
                    (Some(w), FixedOutcome::Solved(h)) => match mode {
                        Mode::Feasibility => prob.check(s, &h.assignment, true).is_ok(),
                        Mode::MinTotalEpsilon => {
                            (w.total_epsilon() - h.total_epsilon()).abs() <= 1e-9 * (1.0 + w.total_epsilon())
                        }
                    },
                    _ => false,
                };
                if !same {
                    mismatches.push(format!("case {case}: s = {s}, {mode:?}"));
                }
            }
        }
    }
    let elapsed = t.elapsed();
    report(
        "solver oracle equivalence",
        mismatches.is_empty() && elapsed < Duration::from_secs(60),
        format!("200 instances, {fixed_checks} fixed-size checks, {} mismatches {:?}, {elapsed:?}", mismatches.len(), mismatches.first()),
    );
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn assignment_matches_enumeration() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let perms: Vec<Vec<Vec<usize>>> = (0..=7).map(permutations).collect();
    let mut bad = 0;
    for _ in 0..500 {
        let n = rng.random_range(1..=7);
        // Integer costs keep every sum exact.
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(0..100) as f64);
        let best = perms[n]
            .iter()
            .map(|p| p.iter().enumerate().map(|(r, &c)| m[(r, c)]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let a = optimal_assignment(&m).unwrap();
        let recomputed: f64 = a.columns.iter().enumerate().map(|(r, &c)| m[(r, c)]).sum();
        let mut seen = a.columns.clone();
        seen.sort_unstable();
        if a.cost != best || recomputed != best || seen != (0..n).collect::<Vec<_>>() {
            bad += 1;
        }
    }
    let elapsed = t.elapsed();
    report(
        "assignment oracle",
        bad == 0 && elapsed < Duration::from_secs(10),
        format!("500 matrices, {bad} mismatches, {elapsed:?}"),
    );
}

fn fisher(p: &[f64]) -> f64 {
    let x = -2.0 * p.iter().map(|v| v.ln()).sum::<f64>();
    ChiSquared::new(2.0 * p.len() as f64).unwrap().sf(x)
}

#[test]
fn truncated_product_oracles() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut fisher_err: f64 = 0.0;
    for _ in 0..1000 {
        let l = rng.random_range(1..=12);
        let p: Vec<f64> = (0..l).map(|_| rng.random_range(1e-6..1.0)).collect();
        fisher_err = fisher_err.max((truncated_product(&p, 1.0).unwrap() - fisher(&p)).abs());
    }
    let all_above = (0..200).all(|_| {
        let l = rng.random_range(1..=10);
        let p: Vec<f64> = (0..l).map(|_| rng.random_range(0.2000001..=1.0)).collect();
        truncated_product(&p, 0.2).unwrap() == 1.0
    });
    let draws = 1_000_000;
    let mut worst_z: f64 = 0.0;
    for case in 0..20 {
        let l = 2 + case % 9;
        let p: Vec<f64> = (0..l)
            .map(|_| if rng.random_bool(0.6) { rng.random_range(0.001..0.2) } else { rng.random_range(0.0..1.0) })
            .collect();
        let w: f64 = p.iter().filter(|&&v| v <= 0.2).product();
        let mut mc = ChaCha8Rng::seed_from_u64(1000 + case as u64);
        let mut hits = 0usize;
        for _ in 0..draws {
            let mut prod = 1.0;
            for _ in 0..l {
                let u: f64 = mc.random();
                if u <= 0.2 {
                    prod *= u;
                }
            }
            if prod <= w {
                hits += 1;
            }
        }
        let est = hits as f64 / draws as f64;
        let exact = truncated_product(&p, 0.2).unwrap();
        let se = (exact * (1.0 - exact) / draws as f64).sqrt().max(1.0 / draws as f64);
        worst_z = worst_z.max((est - exact).abs() / se);
    }
    report(
        "truncated product",
        fisher_err <= 1e-9 && all_above && worst_z <= 3.0,
        format!("max |tau=1 - Fisher| {fisher_err:.2e}, all-above gives 1: {all_above}, worst MC z {worst_z:.2}"),
    );
}

/// One-sided sign-flip p-value by enumerating all 2^n sign patterns.
fn sign_flip_p(values: &[f64]) -> f64 {
    let nz: Vec<f64> = values.iter().copied().filter(|v| *v != 0.0).collect();
    let n = nz.len();
    let abs: Vec<f64> = nz.iter().map(|v| v.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|a| {
            let below = abs.iter().filter(|b| *b < a).count() as f64;
            let ties = abs.iter().filter(|b| *b == a).count() as f64;
            below + (ties + 1.0) / 2.0
        })
        .collect();
    let t: f64 = ranks.iter().zip(&nz).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
    let mut hits = 0u64;
    for mask in 0u32..(1 << n) {
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if s >= t - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

#[test]
fn sensitivity_properties() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for n in 1..=20 {
        for rep in 0..5 {
            let v: Vec<f64> = (0..n)
                .map(|_| {
                    let x: f64 = rng.random_range(-1.0..2.0);
                    // Every other dataset has ties.
                    if rep % 2 == 0 { x } else { (x * 4.0).round() / 4.0 }
                })
                .collect();
            if v.iter().all(|x| *x == 0.0) {
                continue;
            }
            let got = signed_rank_gamma(&v, 1.0).unwrap();
            worst = worst.max((got.upper_p - sign_flip_p(&v)).abs());
        }
    }
    let gammas: Vec<f64> = (0..=16).map(|i| 1.0 + 0.25 * i as f64).collect();
    let mut monotone = true;
    for _ in 0..50 {
        let n = rng.random_range(3..=60);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..2.5)).collect();
        let ps: Vec<f64> = gammas.iter().map(|&g| signed_rank_gamma(&v, g).unwrap().upper_p).collect();
        monotone &= ps.windows(2).all(|w| w[1] >= w[0]);
    }
    let amp = amplify(2.0, 5.0).unwrap();
    report(
        "sensitivity",
        worst <= 0.02 && monotone && amp == 11.0 / 7.0,
        format!("max |gamma=1 - enumeration| {worst:.2e}, monotone {monotone}, amplify(2,5) = {amp}"),
    );
}

#[test]
fn tail_transform_properties() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cont: f64 = 0.0;
    let mut slope: f64 = 0.0;
    let mut exact = true;
    for _ in 0..1000 {
        let beta: f64 = rng.random_range(0.01..100.0);
        let h = 1e-7 * beta;
        for s in [1.0, -1.0] {
            let at = tail(s * beta, beta);
            let out = tail(s * (beta + h), beta);
            let inn = tail(s * (beta - h), beta);
            cont = cont.max((out - at).abs() / beta).max((at - s * beta).abs() / beta);
            slope = slope.max(((out - at) / (s * h) - 1.0).abs()).max(((at - inn) / (s * h) - 1.0).abs());
        }
        exact &= tail(2.0 * beta, beta) == 1.5 * beta && tail(-2.0 * beta, beta) == -1.5 * beta;
    }
    let beta = 1.7;
    let mut ys: Vec<f64> = (0..100_000).map(|_| rng.random_range(-100.0 * beta..100.0 * beta)).collect();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    let t: Vec<f64> = ys.iter().map(|&y| tail(y, beta)).collect();
    let monotone = t.windows(2).all(|w| w[1] > w[0]);
    report(
        "tail transform",
        cont <= 1e-6 && slope <= 1e-6 && exact && monotone,
        format!("continuity {cont:.1e}, slope error {slope:.1e}, t(2b) = 1.5b: {exact}, strictly increasing: {monotone}"),
    );
}

#[test]
fn end_to_end_synthetic_recovery() {
    let _g = serial();
    let t = Instant::now();
    let plan = default_plan();
    let (mut non_aliased, mut non_aliased_ok) = (0usize, 0usize);
    let (mut target, mut target_ok) = (0usize, 0usize);
    let mut target_types = BTreeMap::new();
    let mut a_ok = true;
    let mut d_ok = true;
    let mut lines = Vec::new();
    for seed in 1..=10u64 {
        let synth = SynthConfig::new(seed);
        let tau = synth.outcome.tau;
        let delta = synth.outcome.tau_r_shift;
        let cfg = PipelineConfig::synthetic(seed, synth);
        let out = run_in_memory(&cfg).unwrap();
        let m = &out.matching;
        a_ok &= m.validate(&out.population).is_ok()
            && m.groups.iter().all(|g| {
                g.samples.len() == 3
                    && g.samples.iter().all(|s| s.len() == m.s_bar)
                    && g.achieved_epsilons.iter().all(|e| *e <= 0.05 + 1e-9)
            });
        for (f, row) in out.balance.features.iter().zip(&out.balance.cells) {
            let spec = FeatureSpec::parse(f).unwrap();
            let is_target = spec.factor_positions() == [1, 2]
                && spec.covariate.as_deref().is_some_and(|c| eligibility_link(c).is_none());
            for c in row {
                if !c.aliased {
                    non_aliased += 1;
                    non_aliased_ok += (c.p_value > 0.05) as usize;
                } else if is_target {
                    target += 1;
                    target_ok += (c.p_value < 0.01) as usize;
                    *target_types.entry(c.type_id).or_insert(0) += 1;
                }
            }
        }
        let o = out.outcomes.as_ref().unwrap();
        let med_err = o.pooled.median - tau;
        let hl_err = o.comparison.hl_estimate - delta;
        d_ok &= med_err.abs() <= 0.5 && hl_err.abs() <= 0.5;
        lines.push(format!("seed {seed}: s̄ {} median {:+.3} HL {:+.3}", m.s_bar, med_err, hl_err));
    }
    let elapsed = t.elapsed();
    for l in &lines {
        println!("  {l}");
    }
    let expected_types: Vec<u8> = plan
        .iter()
        .filter(|p| p.aliases(&[1, 2]))
        .map(|p| p.type_id)
        .collect();
    let types: Vec<u8> = target_types.keys().copied().collect();
    let frac = non_aliased_ok as f64 / non_aliased as f64;
    report("end-to-end (a) step-2 samples", a_ok, format!("all samples of size s̄ and within tolerance: {a_ok}"));
    report(
        "end-to-end (b) non-aliased balance",
        frac >= 0.95,
        format!("{non_aliased_ok}/{non_aliased} = {:.4} of p-values > 0.05", frac),
    );
    report(
        "end-to-end (c) aliased x*IU*TIME cells",
        target > 0 && target_ok == target && types == expected_types,
        format!("{target_ok}/{target} with p < 0.01, types {types:?}"),
    );
    report("end-to-end (d) effect recovery", d_ok, "median within 0.5 of tau and HL within 0.5 of the B-effect difference on every seed".into());
    report(
        "end-to-end runtime",
        elapsed < Duration::from_secs(600),
        format!("{elapsed:?} for 10 seeds"),
    );
}

#[test]
fn pipeline_is_deterministic() {
    let _g = serial();
    let mut synth = SynthConfig::new(42);
    synth.group_sizes = [400; 8];
    let cfg = PipelineConfig::synthetic(42, synth);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(&cfg, a.path()).unwrap();
    run_pipeline(&cfg, b.path()).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| std::fs::read(a.path().join(n)).ok() != std::fs::read(b.path().join(n)).ok())
        .collect();
    report(
        "determinism",
        !names.is_empty() && differing.is_empty(),
        format!("{} files compared, differing: {differing:?}", names.len()),
    );
}
