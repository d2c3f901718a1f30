use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use knuth_synth::cnf::{Formula, SubproblemState};
use knuth_synth::config::{ModelChoice, RunConfig, PRESETS};
use knuth_synth::dimacs::{parse_dimacs, write_dimacs_with_comments};
use knuth_synth::dpll::{dpll_solve, hybrid_solve, PolicySpec, ProofTreeStats};
use knuth_synth::generator::gen_r3sat;
use knuth_synth::harness::{
    bench, default_policies, fit_value_model, knuth_efficiency_experiment, make_training_set, mean_tree_size,
    train_iteration, write_bench_csv, write_curves_csv, write_summary_csv, BenchPolicy, InstanceSet,
};
use knuth_synth::knuth::{estimate_tree_size, DepthBound};
use knuth_synth::mcfs::{run_episode, write_trace};
use knuth_synth::model::{write_records, PriorModel, ValueModel};
use knuth_synth::subsolver::SubsolverHandle;

#[derive(Parser)]
#[command(
    name = "ksynth",
    version,
    about = "Search for small DPLL refutations and distill them into branching policies"
)]
struct Cli {
    /// TOML run configuration; unset fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset, used when no config file is given.
    #[arg(long, global = true, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    preset: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Depth bound below which the subsolver takes over.
    #[arg(long, global = true)]
    ell: Option<usize>,
    #[arg(long, global = true)]
    rollouts: Option<usize>,
    /// Disable pure-literal elimination.
    #[arg(long, global = true)]
    no_pure: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write random 3-SAT instances as DIMACS files.
    Gen {
        #[arg(long)]
        vars: u32,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Keep only instances verified unsatisfiable.
        #[arg(long)]
        unsat: bool,
    },
    /// Solve one instance and print its proof-tree statistics.
    Solve {
        cnf: PathBuf,
        #[arg(long, default_value = "jw")]
        policy: PolicySpec,
        /// Hand subproblems at the depth bound to the configured subsolver.
        #[arg(long)]
        hybrid: bool,
    },
    /// Estimate a policy's tree size from random probes.
    Estimate {
        cnf: PathBuf,
        #[arg(long, default_value = "jw")]
        policy: PolicySpec,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long)]
        hybrid: bool,
    },
    /// Run one search episode and report the committed tree.
    Search {
        cnf: PathBuf,
        /// Write the commitment trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run the configured number of training iterations.
    Train {
        #[arg(long)]
        instances: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fit a linear value model on this many labelled states per
        /// instance and use it for every iteration.
        #[arg(long)]
        value_samples: Option<usize>,
    },
    /// Compare baseline policies (and the configured model) on a set.
    Bench {
        #[arg(long)]
        instances: Option<PathBuf>,
        /// Per-cell CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Convergence of the sampled and full-tree rollout variants.
    KnuthEfficiency {
        #[arg(long)]
        instances: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            (None, Some(name)) => RunConfig::preset(name)?,
            (None, None) => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(ell) = self.ell {
            cfg.ell = ell;
        }
        if let Some(rollouts) = self.rollouts {
            cfg.rollouts = rollouts;
        }
        if self.no_pure {
            cfg.pure_literals = false;
        }
        if let SubsolverHandle::External(ext) = cfg.subsolver {
            cfg.subsolver = SubsolverHandle::External(ext.with_env_override());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_cnf(path: &Path) -> Result<Formula> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_dimacs(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_root(path: &Path, cfg: &RunConfig) -> Result<SubproblemState> {
    Ok(SubproblemState::root(Arc::new(read_cnf(path)?), cfg.propagation()))
}

fn instance_set(dir: Option<&PathBuf>, cfg: &RunConfig) -> Result<InstanceSet> {
    let set = match dir.or(cfg.instances.as_ref()) {
        Some(dir) => InstanceSet::from_dimacs_dir(dir)?,
        None => make_training_set(cfg.train_vars, cfg.train_count, cfg.seed)?,
    };
    if set.rejected > 0 {
        eprintln!("skipped {} satisfiable of {} instances", set.rejected, set.attempts);
    }
    if set.is_empty() {
        bail!("no unsatisfiable instances");
    }
    Ok(set)
}

fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn print_stats(stats: &ProofTreeStats) {
    println!("outcome          {:?}", stats.outcome);
    println!("tree_size        {}", stats.tree_size);
    println!("decisions        {}", stats.decisions);
    println!("leaves           {}", stats.leaf_count);
    println!("max_depth        {}", stats.max_depth);
    println!("subsolver_calls  {}", stats.subsolver_calls);
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.run_config()?;
    match &cli.command {
        Command::Gen {
            vars,
            count,
            out,
            unsat,
        } => {
            fs::create_dir_all(out)?;
            let formulas: Vec<(String, u64, Formula)> = if *unsat {
                make_training_set(*vars, *count, cfg.seed)?
                    .instances
                    .into_iter()
                    .map(|i| (i.name, i.seed.unwrap_or_default(), (*i.formula).clone()))
                    .collect()
            } else {
                (0..*count as u64)
                    .map(|i| {
                        let seed = cfg.seed.wrapping_add(i);
                        Ok((format!("r3sat-v{vars}-{i:04}"), seed, gen_r3sat(*vars, seed)?))
                    })
                    .collect::<Result<_>>()?
            };
            for (name, seed, formula) in &formulas {
                let text = write_dimacs_with_comments(formula, &[&format!("r3sat seed {seed}")]);
                fs::write(out.join(format!("{name}.cnf")), text)?;
            }
            println!("wrote {} instances to {}", formulas.len(), out.display());
        }
        Command::Solve { cnf, policy, hybrid } => {
            let root = load_root(cnf, &cfg)?;
            let mut p = policy.build();
            let stats = if *hybrid {
                hybrid_solve(&root, p.as_mut(), &cfg.subsolver, cfg.ell)?
            } else {
                dpll_solve(&root, p.as_mut(), None)?
            };
            print_stats(&stats);
        }
        Command::Estimate {
            cnf,
            policy,
            samples,
            hybrid,
        } => {
            let root = load_root(cnf, &cfg)?;
            let bound = hybrid.then_some(DepthBound {
                ell: cfg.ell,
                subsolver: &cfg.subsolver,
            });
            let est = estimate_tree_size(&root, policy.build().as_mut(), bound, *samples, cfg.seed)?;
            println!("estimate   {:.3}", est.mean);
            println!("std_error  {:.3}", est.std_error());
            println!("samples    {}", est.sample_count);
        }
        Command::Search { cnf, trace } => {
            let root = load_root(cnf, &cfg)?;
            let model = cfg.model.load()?;
            let ep = run_episode(
                &root,
                model.prior.as_ref(),
                model.value.as_deref(),
                &cfg.subsolver,
                &cfg.mcfs(),
                cfg.seed,
            )?;
            println!("tree_size     {}", ep.tree_size);
            println!("commitments   {}", ep.trace.len());
            println!("rollouts      {}", ep.stats.rollouts);
            println!("expanded      {}", ep.stats.expanded);
            println!("search_nodes  {}", ep.store_size);
            if let Some(path) = trace {
                write_trace(BufWriter::new(File::create(path)?), &ep.trace)?;
            }
        }
        Command::Train {
            instances,
            out,
            value_samples,
        } => {
            let set = instance_set(instances.as_ref(), &cfg)?;
            let dir = out.as_ref().or(cfg.output_dir.as_ref());
            if let Some(dir) = dir {
                fs::create_dir_all(dir)?;
            }
            let loaded = cfg.model.load()?;
            let mut incumbent: Arc<dyn PriorModel> = loaded.prior;
            let mut value: Option<Arc<dyn ValueModel>> = loaded.value;
            let linear = match value_samples {
                Some(n) => {
                    let model = fit_value_model(&set, &cfg, *n, 1e-3)?;
                    println!("value model weights {:?}", model.weights);
                    let model: Arc<dyn ValueModel> = Arc::new(model);
                    value = Some(model.clone());
                    Some(model)
                }
                None => None,
            };
            for it in 0..cfg.iterations {
                let outcome = train_iteration(&set, &cfg, incumbent, value)?;
                let m = &outcome.metrics;
                println!(
                    "iteration {it}: {} records, {} failed episodes, mean tree size {:.2} -> {:.2}",
                    outcome.records.len(),
                    m.failures,
                    mean_tree_size(&m.before).unwrap_or(f64::NAN),
                    mean_tree_size(&m.after).unwrap_or(f64::NAN),
                );
                if let Some(dir) = dir {
                    let path = dir.join(format!("records-{it:03}.jsonl"));
                    write_records(BufWriter::new(File::create(&path)?), &outcome.records)?;
                    let path = dir.join(format!("model-{it:03}.jsonl"));
                    write_records(BufWriter::new(File::create(&path)?), &outcome.model.to_records())?;
                }
                let model = Arc::new(outcome.model);
                incumbent = model.clone();
                value = Some(linear.clone().unwrap_or(model));
            }
        }
        Command::Bench {
            instances,
            out,
            summary,
        } => {
            let set = instance_set(instances.as_ref(), &cfg)?;
            let mut policies = default_policies();
            if cfg.model != ModelChoice::Uniform {
                policies.push(BenchPolicy::model("model", cfg.model.load()?.prior));
            }
            let report = bench(&policies, &set, &cfg);
            write_bench_csv(output(out.as_ref())?, &report.records)?;
            match summary {
                Some(path) => write_summary_csv(output(Some(path))?, &report.summary)?,
                None if out.is_some() => write_summary_csv(io::stdout().lock(), &report.summary)?,
                None => {}
            }
        }
        Command::KnuthEfficiency { instances, out } => {
            let set = instance_set(instances.as_ref(), &cfg)?;
            let prior = cfg.model.load()?.prior;
            let report = knuth_efficiency_experiment(&set, &cfg, prior.as_ref())?;
            write_curves_csv(output(out.as_ref())?, &report)?;
            eprintln!("knuth win rate {:.2}", report.knuth_win_rate(0.5));
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
