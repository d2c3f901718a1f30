//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use knuth_synth::cnf::{brute_force_sat, PropagationOptions, Satisfiability, SubproblemState};
use knuth_synth::config::RunConfig;
use knuth_synth::dimacs::write_dimacs;
use knuth_synth::dpll::{
    dpll_solve, hybrid_solve, BranchingPolicy, FixedOrderPolicy, JwPolicy, PolicySpec, UniformPolicy,
};
use knuth_synth::fixtures::planted_short_proof_formula;
use knuth_synth::generator::gen_r3sat;
use knuth_synth::harness::{
    bench, knuth_efficiency_experiment, make_training_set, train_iteration, BenchPolicy, InstanceSet,
};
use knuth_synth::knuth::{
    depth_update_value, estimate_tree_size, node_estimate_from_path, sample_path, DepthBound, PathTerminal,
};
use knuth_synth::mcfs::{rollout_policy_pi, run_episode, Engine, McfsConfig, NodeRole, RolloutPolicy};
use knuth_synth::model::{ConstantValue, ModelError, UniformPrior, ValueModel};
use knuth_synth::subsolver::{SubsolverCache, SubsolverHandle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{brute_sat, exact_expectation, random_clauses, root, unsat_instances};

const EXACT_REL_TOL: f64 = 1e-9;
const SAMPLED_SIGMAS: f64 = 3.0;
const SAMPLED_PASS_FRACTION: f64 = 0.95;
const PLANTED_MIN_SEEDS: usize = 95;
const EFFICIENCY_RATIO: f64 = 0.5;
const EFFICIENCY_PASS_FRACTION: f64 = 0.70;
const TRAIN_STRICT_FRACTION: f64 = 0.30;
const VALUE_FRACTION: f64 = 0.90;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let spent = start.elapsed();
    if spent <= limit {
        Ok(())
    } else {
        Err(format!("took {spent:?}, limit {limit:?}"))
    }
}

type PolicyFactory = Box<dyn Fn() -> Box<dyn BranchingPolicy>>;
type Criterion = (&'static str, fn() -> Outcome);

fn policies() -> Vec<(&'static str, PolicyFactory)> {
    vec![
        ("jw", Box::new(|| Box::new(JwPolicy) as Box<dyn BranchingPolicy>)),
        (
            "fixed",
            Box::new(|| Box::new(FixedOrderPolicy) as Box<dyn BranchingPolicy>),
        ),
    ]
}

fn dpll_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases: Vec<(u32, Vec<Vec<i32>>)> = (0..500)
        .map(|_| {
            let n = rng.gen_range(6..=12);
            let density = rng.gen_range(1.0..7.0);
            let m = (density * n as f64) as usize;
            (n, random_clauses(&mut rng, n, m))
        })
        .collect();
    let two_var: Vec<Vec<i32>> = vec![
        vec![1],
        vec![-1],
        vec![2],
        vec![-2],
        vec![1, 2],
        vec![1, -2],
        vec![-1, 2],
        vec![-1, -2],
    ];
    for a in &two_var {
        for b in &two_var {
            for c in &two_var {
                cases.push((2, vec![a.clone(), b.clone(), c.clone()]));
            }
        }
    }
    let mut runs = 0;
    for (i, (n, clauses)) in cases.iter().enumerate() {
        let expected = brute_sat(*n, clauses);
        for pure in [false, true] {
            let r = root(*n, clauses, pure);
            let mut list: Vec<Box<dyn BranchingPolicy>> = vec![
                Box::new(UniformPolicy::new(i as u64)),
                Box::new(JwPolicy),
                Box::new(FixedOrderPolicy),
            ];
            for p in list.iter_mut() {
                let got = dpll_solve(&r, p.as_mut(), None).map_err(|e| e.to_string())?.outcome;
                if (got == Satisfiability::Satisfiable) != expected {
                    return Err(format!("case {i} ({n} vars, pure={pure}, {}) disagrees", p.name()));
                }
                runs += 1;
            }
        }
    }
    within(Duration::from_secs(60), start)?;
    Ok(format!(
        "{runs} solver runs over {} formulas agree with enumeration",
        cases.len()
    ))
}

fn fifty_instances() -> Vec<(u32, Vec<Vec<i32>>)> {
    unsat_instances(&mut ChaCha8Rng::seed_from_u64(2), 50, 12)
}

fn knuth_exact() -> Outcome {
    let start = Instant::now();
    let sub = SubsolverHandle::default();
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for (n, clauses) in fifty_instances() {
        let r = root(n, &clauses, true);
        for (name, make) in policies() {
            let truth = dpll_solve(&r, make().as_mut(), None)
                .map_err(|e| e.to_string())?
                .tree_size as f64;
            let exp = exact_expectation(&r, make().as_mut(), None, n);
            worst = worst.max((exp - truth).abs() / truth);
            checks += 1;
            for ell in 1..=3 {
                let truth = hybrid_solve(&r, make().as_mut(), &sub, ell)
                    .map_err(|e| e.to_string())?
                    .tree_size as f64;
                let bound = DepthBound { ell, subsolver: &sub };
                let exp = exact_expectation(&r, make().as_mut(), Some(bound), ell as u32);
                let rel = (exp - truth).abs() / truth;
                if rel > EXACT_REL_TOL {
                    return Err(format!("{name}, ell={ell}: expectation {exp} vs hybrid size {truth}"));
                }
                worst = worst.max(rel);
                checks += 1;
            }
        }
    }
    within(Duration::from_secs(300), start)?;
    check(
        worst <= EXACT_REL_TOL,
        format!("{checks} exact expectations, worst relative error {worst:.2e}"),
    )
}

fn knuth_sampled() -> Outcome {
    let start = Instant::now();
    let mut ok = 0;
    let mut total = 0;
    for (i, (n, clauses)) in fifty_instances().into_iter().enumerate() {
        let r = root(n, &clauses, true);
        for (_, make) in policies() {
            let truth = dpll_solve(&r, make().as_mut(), None)
                .map_err(|e| e.to_string())?
                .tree_size as f64;
            let est =
                estimate_tree_size(&r, make().as_mut(), None, 10_000, 1000 + i as u64).map_err(|e| e.to_string())?;
            total += 1;
            if (est.mean - truth).abs() <= SAMPLED_SIGMAS * est.std_error() {
                ok += 1;
            }
        }
    }
    within(Duration::from_secs(300), start)?;
    let frac = ok as f64 / total as f64;
    check(
        frac >= SAMPLED_PASS_FRACTION,
        format!("{ok}/{total} sampled means within 3 standard errors"),
    )
}

fn backup_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let instances = unsat_instances(&mut rng, 40, 12);
    let sub = SubsolverHandle::default();
    let mut conflict_paths = 0;
    for i in 0..10_000 {
        let (n, clauses) = &instances[i % instances.len()];
        let r = root(*n, clauses, i % 2 == 0);
        let ell = rng.gen_range(0..=5);
        let bound = (ell < 5).then_some(DepthBound { ell, subsolver: &sub });
        let mut p: Box<dyn BranchingPolicy> = if rng.gen() {
            Box::new(JwPolicy)
        } else {
            Box::new(FixedOrderPolicy)
        };
        let path = sample_path(&r, p.as_mut(), bound, &mut rng).map_err(|e| e.to_string())?;
        let whole = node_estimate_from_path(&path).map_err(|e| e.to_string())?;
        let d0 = depth_update_value(&path, 0).map_err(|e| e.to_string())?;
        if d0 != whole {
            return Err(format!("path {i}: d=0 value {d0} vs estimate {whole}"));
        }
        if path.terminal == PathTerminal::Conflict {
            conflict_paths += 1;
            let last = depth_update_value(&path, path.len()).map_err(|e| e.to_string())?;
            if last != 1.0 {
                return Err(format!("path {i}: terminal value {last}"));
            }
        }
    }
    Ok(format!("10000 paths, {conflict_paths} with conflict terminals"))
}

fn rollout_shape() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let instances = unsat_instances(&mut rng, 20, 12);
    for i in 0..1000 {
        let (n, clauses) = &instances[i % instances.len()];
        let r = root(*n, clauses, true);
        let cfg = McfsConfig {
            ell: 1 + i % 5,
            ..McfsConfig::default()
        };
        let mut engine = Engine::new(cfg, &UniformPrior, None, SubsolverHandle::default(), i as u64);
        engine.search(&r, i % 7).map_err(|e| e.to_string())?;
        let tree = engine.rollout(&r).map_err(|e| e.to_string())?;
        let stepped: Vec<usize> = tree.stepped().collect();
        let terminals: Vec<usize> = tree.terminals().collect();
        if terminals.len() != 1 {
            return Err(format!("rollout {i}: {} path terminals", terminals.len()));
        }
        let mut chain = HashSet::new();
        let mut at = tree.nodes[terminals[0]].parent;
        while let Some(p) = at {
            if !matches!(tree.nodes[p].role, NodeRole::Stepped { .. }) {
                return Err(format!("rollout {i}: ancestor {p} not stepped"));
            }
            chain.insert(p);
            at = tree.nodes[p].parent;
        }
        if chain.len() != stepped.len() || stepped.iter().any(|s| !chain.contains(s)) {
            return Err(format!("rollout {i}: stepped nodes do not form one path"));
        }
        for &s in &stepped {
            if let Some(sib) = tree.sibling(s) {
                if matches!(tree.nodes[sib].role, NodeRole::Stepped { .. }) {
                    return Err(format!("rollout {i}: stepped siblings {s} and {sib}"));
                }
            }
        }
    }
    Ok("1000 rollouts, each a single stepped root-to-leaf path".into())
}

fn planted_discovery() -> Outcome {
    let start = Instant::now();
    let cfg = McfsConfig {
        ell: 3,
        rollouts: 2_000,
        commit_mix: 0.0,
        ..McfsConfig::default()
    };
    let results: Vec<Result<bool, String>> = (0..100u64)
        .map(|seed| {
            let planted = planted_short_proof_formula(10, seed);
            let r = SubproblemState::root(Arc::new(planted.formula), PropagationOptions::default());
            let ep = run_episode(&r, &UniformPrior, None, &SubsolverHandle::default(), &cfg, seed)
                .map_err(|e| e.to_string())?;
            let first = ep.trace.first().map(|c| c.action);
            Ok(first.is_some_and(|a| planted.core.contains(&a)) && ep.tree_size == 3)
        })
        .collect();
    let hits = results
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|&b| b)
        .count();
    within(Duration::from_secs(600), start)?;
    check(
        hits >= PLANTED_MIN_SEEDS,
        format!("{hits}/100 seeds commit a core variable at the root with a 3-node tree"),
    )
}

fn efficiency() -> Outcome {
    let start = Instant::now();
    let mut set = InstanceSet::default();
    for i in 0..20u32 {
        let s = make_training_set(12 + i % 5, 1, 1000 + u64::from(i)).map_err(|e| e.to_string())?;
        set.instances.extend(s.instances);
    }
    let cfg = RunConfig {
        ell: 4,
        budget: 5_000,
        cadence: 2,
        seed: 0,
        ..RunConfig::default()
    };
    let report = knuth_efficiency_experiment(&set, &cfg, &UniformPrior).map_err(|e| e.to_string())?;
    let rate = report.knuth_win_rate(EFFICIENCY_RATIO);
    within(Duration::from_secs(1800), start)?;
    check(
        rate >= EFFICIENCY_PASS_FRACTION,
        format!(
            "Knuth reaches normalized 0.5 within half the full-tree budget on {:.0}% of 20 runs",
            rate * 100.0
        ),
    )
}

fn training_improves() -> Outcome {
    let start = Instant::now();
    let set = make_training_set(10, 50, 1).map_err(|e| e.to_string())?;
    for inst in &set.instances {
        if brute_force_sat(&inst.formula).map_err(|e| e.to_string())? != Satisfiability::Unsatisfiable {
            return Err(format!("{} is not UNSAT", inst.name));
        }
    }
    let cfg = RunConfig {
        ell: 3,
        rollouts: 300,
        ..RunConfig::default()
    };
    let out = train_iteration(&set, &cfg, Arc::new(UniformPrior), None).map_err(|e| e.to_string())?;
    let base = bench(
        &[BenchPolicy::spec("uniform", PolicySpec::Uniform { seed: 0 })],
        &set,
        &cfg,
    )
    .records;
    let after = &out.metrics.after;
    let sizes =
        |r: &[knuth_synth::harness::BenchRecord]| r.iter().map(|x| x.tree_size.unwrap_or(u64::MAX)).collect::<Vec<_>>();
    let (a, b) = (sizes(after), sizes(&base));
    let mean = |v: &[u64]| v.iter().sum::<u64>() as f64 / v.len() as f64;
    let strict = a.iter().zip(&b).filter(|(x, y)| x < y).count();
    within(Duration::from_secs(1200), start)?;
    check(
        mean(&a) <= mean(&b) && strict as f64 >= TRAIN_STRICT_FRACTION * a.len() as f64,
        format!(
            "mean tree size {:.2} vs baseline {:.2}; strictly smaller on {strict}/{}",
            mean(&a),
            mean(&b),
            a.len()
        ),
    )
}

fn generator() -> Outcome {
    let count = |v: u32| (4.258 * f64::from(v) + 58.26 * f64::from(v).powf(-2.0 / 3.0)).round() as usize;
    let big = gen_r3sat(300, 1).map_err(|e| e.to_string())?;
    let small = gen_r3sat(20, 1).map_err(|e| e.to_string())?;
    if big.num_clauses() != 1279 || small.num_clauses() != 93 {
        return Err(format!("{} and {} clauses", big.num_clauses(), small.num_clauses()));
    }
    for v in (3..=60).chain([100, 300, 1000]) {
        let f = gen_r3sat(v, u64::from(v)).map_err(|e| e.to_string())?;
        if f.num_clauses() != count(v) {
            return Err(format!("v={v}: {} clauses", f.num_clauses()));
        }
        for c in f.clauses() {
            let vars: HashSet<u32> = c.literals().iter().map(|l| l.var()).collect();
            if c.len() != 3 || vars.len() != 3 {
                return Err(format!("v={v}: clause without 3 distinct variables"));
            }
        }
    }
    check(
        write_dimacs(&gen_r3sat(20, 9).unwrap()) == write_dimacs(&gen_r3sat(20, 9).unwrap()),
        "1279 and 93 clauses, 3 distinct variables per clause, byte-identical output per seed".into(),
    )
}

struct Oracle;

impl ValueModel for Oracle {
    fn log2_size(&self, state: &SubproblemState) -> Result<f64, ModelError> {
        let size = dpll_solve(state, &mut JwPolicy, None).expect("oracle solve").tree_size;
        Ok((size as f64).log2())
    }
}

fn pi_gating() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let states: Vec<SubproblemState> = unsat_instances(&mut rng, 200, 12)
        .iter()
        .map(|(n, c)| root(*n, c, true))
        .filter(|s| s.is_open() && dpll_solve(s, &mut JwPolicy, None).unwrap().tree_size >= 4)
        .collect();
    if states.len() < 120 {
        return Err(format!("only {} states with at least 4 nodes", states.len()));
    }
    let mut cache = SubsolverCache::new(SubsolverHandle::default());
    let constant = ConstantValue(0.0);
    let mut pi = RolloutPolicy::new(0.5);
    for s in &states[..20] {
        rollout_policy_pi(&mut pi, s, Some(&constant), &mut cache, &mut rng).map_err(|e| e.to_string())?;
    }
    if pi.subsolver_evaluations != 20 || pi.epsilon <= pi.threshold {
        return Err(format!(
            "after 20 calls: {} subsolver, eps {}",
            pi.subsolver_evaluations, pi.epsilon
        ));
    }
    for s in &states[20..120] {
        rollout_policy_pi(&mut pi, s, Some(&constant), &mut cache, &mut rng).map_err(|e| e.to_string())?;
    }
    if pi.value_evaluations != 0 {
        return Err(format!("constant model used {} times", pi.value_evaluations));
    }
    let eps_constant = pi.epsilon;

    let mut pi = RolloutPolicy::new(0.5);
    for s in &states[..120] {
        rollout_policy_pi(&mut pi, s, Some(&Oracle), &mut cache, &mut rng).map_err(|e| e.to_string())?;
    }
    let frac = pi.value_evaluations as f64 / 120.0;
    check(
        pi.epsilon < 1e-12 && frac > VALUE_FRACTION,
        format!(
            "constant model: eps {eps_constant:.2}, 100% subsolver; oracle: eps {:.1e}, value fraction {:.1}%",
            pi.epsilon,
            frac * 100.0
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("DPLL correctness", dpll_correctness),
        ("Knuth unbiasedness, exact", knuth_exact),
        ("Knuth unbiasedness, sampled", knuth_sampled),
        ("backup identity", backup_identity),
        ("rollout shape", rollout_shape),
        ("planted-structure discovery", planted_discovery),
        ("Knuth vs full-tree efficiency", efficiency),
        ("training improves the incumbent", training_improves),
        ("generator formula", generator),
        ("rollout-policy gating", pi_gating),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {:>2}. {name}: {detail} ({secs:.1}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {:>2}. {name}: {detail} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
