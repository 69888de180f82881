use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sbmcond::backbone::{branch_stats, gamma_bins, grow_many, TreeLaw, TreeSummary};
use sbmcond::config::ExperimentConfig;
use sbmcond::rng::child_seed;
use sbmcond::superprocess::sample_runs;
use sbmcond::verify::{Experiment, Identity, Report};
use sbmcond::{Region, ScalarField, Summary};
use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "sbmcond", version, about = "Exit measures of super-Brownian motion: solvers, simulations and verification suites")]
struct Cli {
    /// Experiment configuration (TOML). Without it the built-in acceptance
    /// configuration is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true, env = "SBMCOND_OUT", default_value = "sbmcond-out")]
    out: PathBuf,
    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism). Results do not
    /// depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the scenario's boundary problems; writes u, g, v on the grid.
    SolvePde,
    /// Scan the branch-rate candidates against the PDE anchor.
    CalibrateBeta,
    /// Run the particle system and write its exit measures.
    SimulateSbm {
        #[arg(long, default_value_t = 20)]
        runs: usize,
    },
    /// Grow backbone trees and write their summaries.
    GrowBackbone {
        #[arg(long, value_enum, default_value_t = LawChoice::Death)]
        law: LawChoice,
        /// Trees to keep in full (the summary uses `reps.trees`).
        #[arg(long, default_value_t = 5)]
        keep: usize,
    },
    /// Run a verification suite.
    Verify {
        #[arg(value_enum)]
        suite: Suite,
    },
    /// Same as `verify all`.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LawChoice {
    /// Death at rate 2v with two children.
    Death,
    /// Branching diffusion.
    Branching,
    /// Tagged backbone of the configured arc family.
    Tagged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Suite {
    Combinatorics,
    Pde,
    Anchor,
    Martingale,
    #[value(alias = "3.2")]
    Transform,
    #[value(alias = "3.5")]
    Branching,
    #[value(alias = "4.4")]
    Tagged,
    TreeLaw,
    Immigration,
    Palm,
    BranchGrowth,
    All,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    config_hash: &'a str,
    seed: u64,
    command: &'a str,
    #[serde(flatten)]
    body: T,
}

struct Out {
    dir: PathBuf,
    hash: String,
    seed: u64,
}

impl Out {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn json<T: Serialize>(&self, name: &str, command: &str, body: T) -> Result<()> {
        let env = Envelope {
            config_hash: &self.hash,
            seed: self.seed,
            command,
            body,
        };
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, &env)?;
            writeln!(w)?;
            Ok(())
        })
    }

    fn report(&self, report: &Report) -> Result<()> {
        self.write(&format!("{}.json", report.name), |w| {
            serde_json::to_writer_pretty(&mut *w, report)?;
            writeln!(w)?;
            Ok(())
        })
    }

    /// CSV whose first line records the provenance.
    fn csv(&self, name: &str, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let (hash, seed) = (self.hash.clone(), self.seed);
        self.write(name, move |w| {
            writeln!(w, "# config_hash={hash} seed={seed}")?;
            body(w)
        })
    }

    fn field(&self, name: &str, f: &ScalarField) -> Result<()> {
        self.csv(name, |w| Ok(f.write_csv(w)?))
    }

    fn write(&self, name: &str, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let path = self.path(name);
        let mut w = std::io::BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        body(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::acceptance(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Runs a command; `Ok(false)` means a hard check failed.
fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!("--workers must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cfg = load(cli.config.as_deref(), cli.seed)?;
    let exp = Experiment::new(cfg)?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let out = Out {
        dir: cli.out.clone(),
        hash: exp.hash.clone(),
        seed: exp.config.seed,
    };
    out.write("config.toml", |w| {
        writeln!(w, "# config_hash={} seed={}", out.hash, out.seed)?;
        w.write_all(exp.config.to_toml().as_bytes())?;
        Ok(())
    })?;

    match cli.command {
        Command::SolvePde => solve_pde(&exp, &out).map(|()| true),
        Command::CalibrateBeta => {
            let (report, cal) = exp.calibrate()?;
            let mut tuned = exp.config.clone();
            tuned.particles.beta = cal.beta;
            out.write("calibrated.toml", |w| {
                writeln!(w, "# config_hash={} seed={} selected beta={}", out.hash, out.seed, cal.beta)?;
                w.write_all(tuned.to_toml().as_bytes())?;
                Ok(())
            })?;
            finish(&out, &[report])
        }
        Command::SimulateSbm { runs } => simulate_sbm(&exp, &out, runs).map(|()| true),
        Command::GrowBackbone { law, keep } => grow_backbone(&exp, &out, law, keep).map(|()| true),
        Command::Verify { suite } => verify(&exp, &out, suite),
        Command::All => verify(&exp, &out, Suite::All),
    }
}

fn verify(exp: &Experiment, out: &Out, suite: Suite) -> Result<bool> {
    let reports = match suite {
        Suite::Combinatorics => vec![exp.combinatorics()],
        Suite::Pde => vec![exp.pde_suite()?],
        Suite::Anchor => vec![exp.anchor()?],
        Suite::Martingale => vec![exp.martingale()?],
        Suite::Transform => vec![exp.identity(Identity::Transform)?],
        Suite::Branching => vec![exp.identity(Identity::Branching)?],
        Suite::Tagged => vec![exp.identity(Identity::Tagged)?],
        Suite::TreeLaw => vec![exp.tree_law()?],
        Suite::Immigration => vec![exp.immigration()?],
        Suite::Palm => vec![exp.palm()?],
        Suite::BranchGrowth => vec![exp.branch_growth()?],
        Suite::All => exp.all()?,
    };
    finish(out, &reports)
}

fn finish(out: &Out, reports: &[Report]) -> Result<bool> {
    for r in reports {
        out.report(r)?;
        print!("{}", r.table());
    }
    if reports.len() > 1 {
        let rows: Vec<_> = reports
            .iter()
            .map(|r| serde_json::json!({ "name": r.name, "status": r.status(), "soft": r.soft }))
            .collect();
        out.json("summary.json", "verify all", serde_json::json!({ "reports": rows }))?;
    }
    Ok(reports.iter().all(|r| !r.hard_failure()))
}

fn solve_pde(exp: &Experiment, out: &Out) -> Result<()> {
    let fields = exp.config.scenario.transform(&exp.solver)?;
    let stats = exp.solver.last_stats();
    out.field("u.csv", &fields.u)?;
    out.field("g.csv", &fields.g)?;
    out.field("v.csv", &fields.v)?;
    let x = exp.config.point;
    let mut levels = Vec::new();
    for k in 1..=exp.chain.depth() {
        let w = exp.solver.solve_dirichlet_trace(Region::Sub(k), &fields.g)?;
        levels.push(serde_json::json!({ "level": k, "g_at_point": w.at(x) }));
    }
    out.json(
        "solve.json",
        "solve-pde",
        serde_json::json!({
            "scenario": exp.config.scenario.name(),
            "point": x,
            "u": fields.u.at(x),
            "g": fields.g.at(x),
            "v": fields.v.at(x),
            "last_newton": stats,
            "nested": levels,
        }),
    )?;
    println!("u = {:.8}  g = {:.8}  v = {:.8} at the start point", fields.u.at(x), fields.g.at(x), fields.v.at(x));
    Ok(())
}

fn simulate_sbm(exp: &Experiment, out: &Out, runs: usize) -> Result<()> {
    let depth = exp.chain.depth();
    let seed = child_seed(exp.config.seed, &[0x5b5b]);
    let rows = sample_runs(&exp.chain, exp.config.point, &exp.config.particles, None, Region::Sub(depth), runs, seed, |run| run.measures.clone())?;
    out.csv("measures.csv", |w| {
        writeln!(w, "run,k,x,y,mass")?;
        for (i, row) in rows.iter().enumerate() {
            for m in row.iter().flatten() {
                for a in &m.atoms {
                    writeln!(w, "{i},{},{},{},{}", m.level, a.point.x, a.point.y, a.mass)?;
                }
            }
        }
        Ok(())
    })?;
    let masses: Vec<_> = (1..=depth)
        .map(|k| {
            let s = Summary::from_slice(&rows.iter().flatten().map(|m| m[k - 1].total_mass()).collect::<Vec<_>>());
            serde_json::json!({ "level": k, "mean_mass": s.mean, "se": s.se() })
        })
        .collect();
    let discarded = rows.iter().filter(|r| r.is_none()).count();
    out.json("sbm.json", "simulate-sbm", serde_json::json!({ "runs": runs, "discarded": discarded, "total_mass": masses }))?;
    println!("{runs} runs, {discarded} discarded; measures in {}", out.path("measures.csv").display());
    Ok(())
}

fn grow_backbone(exp: &Experiment, out: &Out, choice: LawChoice, keep: usize) -> Result<()> {
    let transform;
    let tagged;
    let law = match choice {
        LawChoice::Death | LawChoice::Branching => {
            transform = exp.config.scenario.transform(&exp.solver)?;
            if choice == LawChoice::Death {
                TreeLaw::q(&transform)
            } else {
                TreeLaw::q_hat(&transform, 2.0)
            }
        }
        LawChoice::Tagged => {
            tagged = exp.config.tagged_fields(&exp.solver)?;
            TreeLaw::tagged(&tagged)
        }
    };
    let level = exp.config.level;
    let region = Region::Sub(level);
    let seed = child_seed(exp.config.seed, &[0x6b6b]);
    let x = exp.config.point;
    let kept = grow_many(&exp.chain, &law, x, region, &exp.config.backbone, keep, seed, Clone::clone)?;
    out.json("trees.json", "grow-backbone", serde_json::json!({ "law": format!("{choice:?}").to_lowercase(), "trees": kept }))?;
    let opts = sbmcond::GrowOptions {
        record: false,
        ..exp.config.backbone.clone()
    };
    let summaries = grow_many(&exp.chain, &law, x, region, &opts, exp.config.reps.trees, seed, TreeSummary::of)?;
    let stats = branch_stats(&summaries, level);
    let bins = gamma_bins(&summaries, level, 10);
    out.csv("gamma_histogram.csv", |w| {
        writeln!(w, "gamma,count")?;
        for (i, c) in bins.iter().enumerate() {
            writeln!(w, "{},{c}", i + 1)?;
        }
        Ok(())
    })?;
    out.json("backbone.json", "grow-backbone", serde_json::json!({ "level": level, "trees": summaries.len(), "stats": stats }))?;
    println!(
        "{} trees to level {level}: mean branches {:.4} ± {:.4}, truncated {}",
        summaries.len(),
        stats.cumulative[level - 1].mean,
        stats.cumulative[level - 1].se,
        stats.truncated
    );
    Ok(())
}
