use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use handsplit::eval::{full_report, mix_grid, retrieve, run_ablation, AblationRun, Space};
use handsplit::nets::{load_checkpoint, network_gradcheck, NetworkSet};
use handsplit::synth::{generate_dataset, load_dataset, pgm, Dataset};
use handsplit::train::{train, RunLayout, TrainConfig};
use handsplit_tape::{check_primitives, GradCheckConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

/// Pose/appearance disentanglement of synthetic hand images.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Render every pose twice with different appearances.
        #[arg(long)]
        paired: bool,
    },
    /// Train one configuration.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint directory to continue from; overrides the config's `resume`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Mixed pairs drawn for swap fidelity.
        #[arg(long, default_value_t = 500)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every run of an ablation manifest for every seed and tabulate held-out error.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset; without it the last tenth of --data is held out.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        configs: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Run directories; defaults to <out>.runs next to the table.
        #[arg(long)]
        work: Option<PathBuf>,
    },
    /// Render a grid of pose x appearance mixes.
    Mix {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated PGM images providing the pose.
        #[arg(long, value_delimiter = ',', required = true)]
        pose: Vec<PathBuf>,
        /// Comma-separated PGM images providing the appearance.
        #[arg(long, value_delimiter = ',', required = true)]
        app: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nearest neighbors of one record in a feature space.
    Retrieve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        space: SpaceArg,
        #[arg(long)]
        query: usize,
        #[arg(long, default_value_t = 20)]
        k: usize,
    },
    /// Finite-difference check of every tape primitive and of a micro network.
    Gradcheck {
        /// Compute tape gradients in 64-bit precision.
        #[arg(long)]
        f64: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    Pose,
    Appearance,
}

impl From<SpaceArg> for Space {
    fn from(s: SpaceArg) -> Self {
        match s {
            SpaceArg::Pose => Space::Pose,
            SpaceArg::Appearance => Space::Appearance,
        }
    }
}

/// Ablation manifest: run names with config files relative to the manifest.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    runs: Vec<ManifestRun>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRun {
    name: String,
    config: PathBuf,
}

/// Per-primitive bound in 32-bit mode and the network bound in 64-bit mode.
const TOL_F32: f64 = 1e-3;
const TOL_F64: f64 = 1e-6;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.chain().any(|c| matches!(c.downcast_ref(), Some(handsplit::Error::Config(_))));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn data(dir: &Path) -> Result<Dataset> {
    load_dataset(dir).with_context(|| format!("--data {}", dir.display()))
}

fn checkpoint_nets(dir: &Path) -> Result<NetworkSet<f32>> {
    Ok(load_checkpoint(dir).with_context(|| format!("--ckpt {}", dir.display()))?.nets)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { out, count, seed, paired } => {
            let ds = generate_dataset(count, seed, paired, &out)?;
            println!("wrote {} records to {}", ds.len(), out.display());
        }
        Cmd::Train { data: dir, config, out, resume } => {
            let mut cfg = TrainConfig::load(&config)?;
            if resume.is_some() {
                cfg.resume = resume;
            }
            let ds = data(&dir)?;
            let t = train(&cfg, &ds, &out)?;
            println!(
                "{} steps, {} epochs; final checkpoint {}",
                t.step,
                t.epoch,
                RunLayout::new(&out).final_checkpoint().display()
            );
        }
        Cmd::Eval { ckpt, data: dir, out, pairs, seed } => {
            let nets = checkpoint_nets(&ckpt)?;
            let ds = data(&dir)?;
            let report = full_report(&nets, &ds, pairs, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let text = serde_json::to_string_pretty(&report)?;
            fs::write(&out, text + "\n").with_context(|| format!("--out {}", out.display()))?;
            println!(
                "mean error {:.3} px, swap fidelity {:.3}; report {}",
                report.mean_px,
                report.swap_fidelity.fraction,
                out.display()
            );
        }
        Cmd::Ablate { data: dir, test, configs, seeds, out, work } => {
            let runs = read_manifest(&configs)?;
            let all = data(&dir)?;
            let (train_set, test_set) = match test {
                Some(t) => (all, data(&t)?),
                None => {
                    let cut = all.len() - all.len() / 10;
                    let idx: Vec<usize> = (0..all.len()).collect();
                    (all.subset(&idx[..cut]), all.subset(&idx[cut..]))
                }
            };
            if test_set.is_empty() {
                bail!("--data {}: no records left to hold out", dir.display());
            }
            let work = work.unwrap_or_else(|| out.with_extension("runs"));
            let table = run_ablation(&runs, &train_set, &test_set, &seeds, &work, &mut |l| eprintln!("{l}"))?;
            let text = table.to_text();
            fs::write(&out, &text).with_context(|| format!("--out {}", out.display()))?;
            let json = out.with_extension("json");
            fs::write(&json, serde_json::to_string_pretty(&table)? + "\n")
                .with_context(|| format!("writing {}", json.display()))?;
            print!("{text}");
        }
        Cmd::Mix { ckpt, pose, app, out } => {
            let nets = checkpoint_nets(&ckpt)?;
            let read = |flag: &str, paths: &[PathBuf]| -> Result<Vec<Vec<f32>>> {
                paths
                    .iter()
                    .map(|p| Ok(pgm::read(p).with_context(|| format!("--{flag} {}", p.display()))?.2))
                    .collect()
            };
            let grid = mix_grid(&nets, &read("pose", &pose)?, &read("app", &app)?)?;
            pgm::write(&out, grid.width, grid.height, &grid.pixels).with_context(|| format!("--out {}", out.display()))?;
            println!("{}x{} grid written to {}", grid.width, grid.height, out.display());
        }
        Cmd::Retrieve { ckpt, data: dir, space, query, k } => {
            let nets = checkpoint_nets(&ckpt)?;
            let ds = data(&dir)?;
            if query >= ds.len() {
                bail!("--query {query} is out of range for {} records", ds.len());
            }
            let idx: Vec<usize> = (0..ds.len()).collect();
            let feats = handsplit::eval::dataset_features(&nets, &ds, &idx)?;
            let gallery = feats.space(space.into());
            let hits = retrieve(gallery, &gallery[query], k).context("--k")?;
            println!("rank\tindex\tdistance\tjoint_px");
            let q = &ds.record(query).joints;
            for (rank, h) in hits.iter().enumerate() {
                let j = &ds.record(h.index).joints;
                let px = q.iter().zip(j).map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1])).sum::<f64>() / q.len() as f64;
                println!("{rank}\t{}\t{:.6}\t{px:.3}", h.index, h.distance);
            }
        }
        Cmd::Gradcheck { f64 } => gradcheck(f64)?,
    }
    Ok(())
}

fn read_manifest(path: &Path) -> Result<Vec<AblationRun>> {
    let text = fs::read_to_string(path).with_context(|| format!("--configs {}", path.display()))?;
    let m: Manifest = serde_json::from_str(&text).with_context(|| format!("--configs {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    m.runs
        .into_iter()
        .map(|r| Ok(AblationRun { config: TrainConfig::load(&base.join(&r.config))?, name: r.name }))
        .collect()
}

fn gradcheck(wide: bool) -> Result<()> {
    let cfg = GradCheckConfig::default();
    let reports = if wide { check_primitives::<f64>(cfg)? } else { check_primitives::<f32>(cfg)? };
    let mut worst = 0.0f64;
    for (name, r) in &reports {
        println!("{name:<18} {:.3e} ({} coords)", r.max_rel_error, r.coords);
        worst = worst.max(r.max_rel_error);
    }
    let net_cfg = GradCheckConfig { eps: 1e-5, max_coords: 24, seed: 0 };
    let net = network_gradcheck::<f64>(net_cfg)?;
    println!("{:<18} {:.3e} ({} coords, 64-bit)", "micro network", net.max_rel_error, net.coords);
    println!("max primitive relative error {worst:.3e}");
    if worst >= TOL_F32 || net.max_rel_error >= TOL_F64 {
        bail!("gradient check failed (bounds {TOL_F32:e} per primitive, {TOL_F64:e} network)");
    }
    Ok(())
}
