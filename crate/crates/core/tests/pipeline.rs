use std::collections::HashSet;

use aliasblock::assemble::{default_plan, BlockDesign};
use aliasblock::data::{OutcomeModel, SynthConfig};
use aliasblock::pipeline::{run_in_memory, run_pipeline, validate_directory, PipelineConfig};

fn small(seed: u64, n: usize) -> PipelineConfig {
    let mut synth = SynthConfig::new(seed);
    synth.group_sizes = [n; 8];
    let mut cfg = PipelineConfig::synthetic(seed, synth);
    cfg.features = Some(vec!["age".into(), "female*IU*TIME".into()]);
    cfg.draws = Some(500);
    cfg
}

#[test]
fn design_structure() {
    let out = run_in_memory(&small(8, 400)).unwrap();
    let s = out.matching.s_bar;
    assert!(s > 0);
    assert_eq!(out.design.blocks.len(), 6 * s);
    for (t, count) in out.design.type_counts() {
        assert_eq!(count, s, "type {t}");
    }
    let mut seen = HashSet::new();
    for b in &out.design.blocks {
        let plan = out.design.plan_for(b.type_id).unwrap();
        for (m, r) in b.members.iter().zip(&plan.roles) {
            assert_eq!(m.role, *r);
            assert_eq!(out.population.records()[m.individual].group(), r.group);
            assert!(seen.insert(m.individual));
        }
    }
    let mut buf = Vec::new();
    out.design.write_csv(&out.population, &mut buf).unwrap();
    assert_eq!(buf.iter().filter(|&&c| c == b'\n').count(), 1 + 4 * 6 * s);
    let back = BlockDesign::read_csv(buf.as_slice(), &out.population, default_plan()).unwrap();
    assert_eq!(back.blocks, out.design.blocks);
}

#[test]
fn directory_validates_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&small(9, 400), dir.path()).unwrap();
    let summary = validate_directory(dir.path(), None, default_plan()).unwrap();
    assert_eq!(summary.s_bar, out.matching.s_bar);
    assert_eq!(summary.blocks, out.design.blocks.len());
}

#[test]
fn null_effect_gives_calibrated_gamma_one_pvalues() {
    let mut p: Vec<f64> = (100..120u64)
        .map(|seed| {
            let mut cfg = small(seed, 400);
            let synth = cfg.synth.as_mut().unwrap();
            synth.outcome = OutcomeModel {
                tau: 0.0,
                tau_r_shift: 0.0,
                ..OutcomeModel::default()
            };
            cfg.outcome.gammas = vec![1.0];
            let out = run_in_memory(&cfg).unwrap();
            out.outcomes.unwrap().sensitivity[0].upper_p
        })
        .collect();
    p.sort_by(f64::total_cmp);
    // Kolmogorov–Smirnov distance to the uniform; 0.294 is the 5% critical
    // value for 20 draws.
    let n = p.len() as f64;
    let d = p
        .iter()
        .enumerate()
        .map(|(i, &v)| ((i + 1) as f64 / n - v).max(v - i as f64 / n))
        .fold(0.0, f64::max);
    assert!(d < 0.294, "KS distance {d}, p-values {p:?}");
}
