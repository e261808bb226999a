//! `lazylayer`: attention-spectrum analysis, collapse certificates and
//! layer-inheritance training runs.
//!
//! Exit codes: 0 success, 1 a checked assertion failed, 2 bad input.

use std::fmt::Display;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lazylayer::data::report::{emit_report, Report, ReportFormat};
use lazylayer::data::{read_dump, sample_offsets, write_dump, AttentionSource, Corpus, DumpFile, Split};
use lazylayer::model::{read_checkpoint, ModelCheckpoint, ModelError};
use lazylayer::recipes::{run_inheritune, train_in_dir, DataSpec, GrowSource, Recipe, RecipeError, RecipeRun, TrainPlan};
use lazylayer::spectra::{capture_dump, classify_lazy, tau_sweep, SpectraConfig, SpectraReport};
use lazylayer::theory::{certify_and_check, one_hot_head, random_head, verify_gradient_bounds, CertifiedMatrix, GradientCheck};
use lazylayer::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SWEEP_TAUS: [f64; 4] = [0.8, 0.85, 0.9, 0.95];

#[derive(Parser)]
#[command(name = "lazylayer", version, about = "Attention rank analysis and layer-inheritance training")]
struct Cli {
    /// Seed override; takes precedence over a plan file's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Where reports and run directories go.
    #[arg(long, global = true, env = "LAZYLAYER_OUT", default_value = "lazylayer-out")]
    out_dir: PathBuf,
    /// Worker threads for the data-parallel kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer approximate rank and column mass of an attention dump.
    Analyze(AnalyzeArgs),
    /// `analyze` over several τ (default 0.8, 0.85, 0.9, 0.95).
    SweepTau(AnalyzeArgs),
    /// Runs a plan file into `<out-dir>/<plan name>`; rerun to resume.
    Train(TrainArgs),
    /// Inherit, train, grow until the reference's validation loss is matched.
    Inheritune(InherituneArgs),
    /// Checks the rank-1 collapse bound (and, in random mode, the gradient bound).
    TheoremCheck(TheoremArgs),
    /// Writes an attention dump of a checkpoint on corpus windows.
    Capture(CaptureArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    dump: PathBuf,
    /// Spectral energy threshold; repeat for a sweep.
    #[arg(long = "tau")]
    tau: Vec<f64>,
    /// Column mass threshold.
    #[arg(long, default_value_t = 0.9)]
    eta: f64,
    /// Layer group `a..b` for the AvgRank summary (default: all layers).
    #[arg(long, value_parser = parse_group)]
    group: Option<Range<usize>>,
}

#[derive(Args)]
struct TrainArgs {
    plan: PathBuf,
    /// Reference checkpoint; overrides the plan's `reference`.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Training text file; overrides the plan's `data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// End the session at the first eval point at or after this step (progress is kept).
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GrowArg {
    Reference,
    Random,
}

#[derive(Args)]
struct InherituneArgs {
    #[arg(long)]
    reference: PathBuf,
    /// Plan file; recipe is forced to inheritune. Defaults apply without one.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    start_layers: Option<usize>,
    #[arg(long, value_enum)]
    grow_source: Option<GrowArg>,
    #[arg(long)]
    steps_per_round: Option<u64>,
}

#[derive(Args)]
struct TheoremArgs {
    #[arg(required_unless_present = "random")]
    dump: Option<PathBuf>,
    /// Check this many random attention heads instead of a dump.
    #[arg(long, conflicts_with = "dump")]
    random: Option<usize>,
    /// Largest sequence length drawn in random mode.
    #[arg(long, default_value_t = 32)]
    max_t: usize,
    /// Print only failing rows.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct CaptureArgs {
    #[arg(long)]
    model: PathBuf,
    /// Text file; the default synthetic corpus otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    t: usize,
    /// Output path (default `<out-dir>/<model name>.atnd`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_group(s: &str) -> Result<Range<usize>, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected a..b, got {s:?}"))?;
    let a: usize = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    if a >= b {
        return Err(format!("empty group {a}..{b}"));
    }
    Ok(a..b)
}

enum Failure {
    /// Exit 2.
    Input(String),
    /// Exit 1.
    Check(String),
}

fn input(e: impl Display) -> Failure {
    Failure::Input(e.to_string())
}

/// Prefixes `path` unless the message already names it.
fn at(path: &Path, e: impl Display) -> Failure {
    let msg = e.to_string();
    let p = path.display().to_string();
    if msg.contains(&p) {
        Failure::Input(msg)
    } else {
        Failure::Input(format!("{p}: {msg}"))
    }
}

fn recipe_failure(e: RecipeError) -> Failure {
    match e {
        RecipeError::Model(ModelError::Diverged { .. }) => Failure::Check(e.to_string()),
        e => input(e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        par::init_threads(n.max(1));
    }
    let res = match &cli.command {
        Command::Analyze(a) => analyze(&cli, a, &[SpectraConfig::default().tau]),
        Command::SweepTau(a) => analyze(&cli, a, &SWEEP_TAUS),
        Command::Train(a) => train(&cli, a),
        Command::Inheritune(a) => inheritune(&cli, a),
        Command::TheoremCheck(a) => theorem_check(&cli, a),
        Command::Capture(a) => capture(&cli, a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn out_dir(cli: &Cli) -> Result<&Path, Failure> {
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| at(&cli.out_dir, e))?;
    Ok(&cli.out_dir)
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("out").to_string()
}

fn write_reports<R: Report + ?Sized>(report: &R, base: &Path) -> Result<Vec<PathBuf>, Failure> {
    let json = base.with_file_name(format!("{}.json", base.file_name().and_then(|s| s.to_str()).unwrap_or("report")));
    let csv = json.with_extension("csv");
    let mut out = emit_report(report, ReportFormat::Json, &json).map_err(|e| at(&json, e))?;
    out.extend(emit_report(report, ReportFormat::Csv, &csv).map_err(|e| at(&csv, e))?);
    Ok(out)
}

fn analyze(cli: &Cli, args: &AnalyzeArgs, default_taus: &[f64]) -> Result<(), Failure> {
    let taus = if args.tau.is_empty() { default_taus.to_vec() } else { args.tau.clone() };
    let dump = DumpFile::open(&args.dump).map_err(|e| at(&args.dump, e))?;
    let reports = tau_sweep(&dump, &taus, args.eta).map_err(|e| at(&args.dump, e))?;
    let out = out_dir(cli)?;
    let name = stem(&args.dump);
    for r in &reports {
        let group = args.group.clone().unwrap_or(0..r.layers);
        let class = classify_lazy(r, group.clone()).map_err(input)?;
        print_spectra(&args.dump, r);
        println!(
            "AvgRank over layers {}..{}: {:.3} ({}; {} of {} layers lazy)",
            group.start,
            group.end,
            class.avg_rank,
            if class.group_lazy { "lazy group" } else { "potent group" },
            class.layers.iter().filter(|&&b| b).count(),
            group.len()
        );
        let written = write_reports(r, &out.join(format!("{name}_tau{}", r.config.tau)))?;
        for p in written {
            println!("wrote {}", p.display());
        }
        println!();
    }
    Ok(())
}

const RAMP: &[u8] = b" .:-=+*#%@";

/// One character per head: blank at rank 1 up to `@` at rank T.
fn heat_char(rank: f64, t: usize) -> char {
    let x = if t > 1 { ((rank - 1.0) / (t as f64 - 1.0)).clamp(0.0, 1.0) } else { 0.0 };
    RAMP[(x * (RAMP.len() - 1) as f64).round() as usize] as char
}

fn print_spectra(path: &Path, r: &SpectraReport) {
    println!(
        "{}: N={} T={} layers={} heads={} tau={} eta={}",
        path.display(),
        r.n,
        r.t,
        r.layers,
        r.heads,
        r.config.tau,
        r.config.eta
    );
    println!("{:>5}  {:>9}  {:>9}  {:<6}  heads", "layer", "max_rank", "avg_mass", "lazy");
    for l in 0..r.layers {
        let heat: String = (0..r.heads).map(|h| heat_char(r.rank[h][l], r.t)).collect();
        println!(
            "{:>5}  {:>9.3}  {:>9.3}  {:<6}  |{heat}|",
            l,
            r.max_rank[l],
            r.avg_mass[l],
            if r.lazy[l] { "lazy" } else { "-" }
        );
    }
    println!("AvgRank (all layers): {:.3}", r.avg_rank);
}

fn load_reference(path: &Path) -> Result<ModelCheckpoint, Failure> {
    read_checkpoint(path).map_err(|e| at(path, e))
}

fn apply_overrides(cli: &Cli, plan: &mut TrainPlan, data: Option<&PathBuf>) {
    if let Some(s) = cli.seed {
        plan.seed = s;
    }
    if let Some(d) = data {
        plan.data = DataSpec::File { path: d.clone() };
    }
}

fn print_run(run: &RecipeRun) {
    println!("{:>5}  {:>6}  {:>7}  {:>10}  {:>10}  digest", "round", "layers", "steps", "train_loss", "val_loss");
    for r in &run.rounds {
        println!(
            "{:>5}  {:>6}  {:>7}  {:>10.4}  {:>10.4}  {}",
            r.round,
            r.layers,
            r.steps,
            r.train_loss,
            r.val_loss,
            &r.digest[..12.min(r.digest.len())]
        );
    }
    if let Some(v) = run.reference_val_loss {
        println!("reference val_loss {v:.4}");
    }
    let t = serde_json::to_value(run.terminated_by).expect("unit enum");
    println!("terminated by {}", t.as_str().unwrap_or("?"));
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<(), Failure> {
    let mut plan = TrainPlan::load(&args.plan).map_err(|e| at(&args.plan, e))?;
    apply_overrides(cli, &mut plan, args.data.as_ref());
    plan.validate().map_err(|e| at(&args.plan, e))?;
    let reference = match args.reference.as_ref().or(plan.reference.as_ref()) {
        Some(p) => Some(load_reference(p)?),
        None => None,
    };
    let corpus = plan.load_corpus().map_err(input)?;
    let dir = out_dir(cli)?.join(stem(&args.plan));
    match train_in_dir(&plan, &corpus, reference.as_ref(), &dir, args.stop_after).map_err(recipe_failure)? {
        Some(run) => {
            print_run(&run);
            println!("run directory {}", dir.display());
        }
        None => println!("stopped early; rerun the same command to resume from {}", dir.display()),
    }
    Ok(())
}

fn inheritune(cli: &Cli, args: &InherituneArgs) -> Result<(), Failure> {
    let mut plan = match &args.plan {
        Some(p) => TrainPlan::load(p).map_err(|e| at(p, e))?,
        None => TrainPlan::default(),
    };
    plan.recipe = Recipe::Inheritune;
    plan.reference = Some(args.reference.clone());
    apply_overrides(cli, &mut plan, args.data.as_ref());
    if let Some(l) = args.start_layers {
        plan.start_layers = l;
    }
    if let Some(g) = args.grow_source {
        plan.grow_source = match g {
            GrowArg::Reference => GrowSource::Reference,
            GrowArg::Random => GrowSource::Random,
        };
    }
    if let Some(s) = args.steps_per_round {
        plan.steps_per_round = s;
    }
    plan.validate().map_err(input)?;
    let reference = load_reference(&args.reference)?;
    if plan.start_layers > reference.n_layers() {
        return Err(input(format!(
            "start layers {} outside the reference's range 1..={}",
            plan.start_layers,
            reference.n_layers()
        )));
    }
    let corpus = plan.load_corpus().map_err(input)?;
    let name = args.plan.as_deref().map_or("inheritune".to_string(), stem);
    let dir = out_dir(cli)?.join(name);
    let run = run_inheritune(&reference, &corpus, &plan, Some(&dir)).map_err(recipe_failure)?;
    print_run(&run);
    println!("run directory {}", dir.display());
    Ok(())
}

fn theorem_check(cli: &Cli, args: &TheoremArgs) -> Result<(), Failure> {
    let (certs, grads) = match (&args.dump, args.random) {
        (Some(path), None) => {
            let dump = read_dump(path).map_err(|e| at(path, e))?;
            let m = dump.manifest().clone();
            let certs = par::try_map_indexed(m.matrix_count(), |i| {
                let (s, l, h) = m.coords(i);
                certify_and_check(dump.matrix(s, l, h), m.t, i, Some((s, l, h)))
                    .map_err(|e| format!("matrix (seq {s}, layer {l}, head {h}): {e}"))
            })
            .map_err(|e| at(path, e))?;
            (certs, None)
        }
        (None, Some(n)) => {
            let (c, g) = random_checks(cli.seed.unwrap_or(0), n, args.max_t.max(2))?;
            (c, Some(g))
        }
        _ => return Err(input("give a dump path or --random N")),
    };

    println!(
        "{:>6}  {:>4}  {:>5}  {:>4}  {:>4}  {:>4}  {:>11}  {:>11}  {:>11}  {:>5}",
        "index", "seq", "layer", "head", "T", "j*", "epsilon", "sigma2", "bound", "holds"
    );
    let opt = |x: Option<usize>| x.map_or("-".to_string(), |v| v.to_string());
    let mut failures = 0;
    for (i, c) in certs.iter().enumerate() {
        let grad_ok = grads.as_ref().is_none_or(|g| g[i].holds);
        let ok = c.holds && grad_ok;
        failures += usize::from(!ok);
        if args.quiet && ok {
            continue;
        }
        let k = &c.certificate;
        println!(
            "{:>6}  {:>4}  {:>5}  {:>4}  {:>4}  {:>4}  {:>11.4e}  {:>11.4e}  {:>11.4e}  {:>5}",
            c.index,
            opt(c.seq),
            opt(c.layer),
            opt(c.head),
            k.t,
            k.j_star,
            k.epsilon,
            k.sigma2,
            k.bound,
            if ok { "true" } else if c.holds { "grad!" } else { "false" }
        );
    }

    let out = out_dir(cli)?;
    write_reports(certs.as_slice(), &out.join("theorem_check"))?;
    if let Some(g) = &grads {
        let p = out.join("theorem_check_gradients.json");
        std::fs::write(&p, serde_json::to_string_pretty(g).expect("serializable")).map_err(|e| at(&p, e))?;
    }
    println!("{} matrices, {failures} failing", certs.len());
    if failures > 0 {
        return Err(Failure::Check(format!("{failures} of {} checks failed", certs.len())));
    }
    Ok(())
}

/// Random heads at varied sharpness; every tenth is an exact one-hot sink.
fn random_checks(seed: u64, n: usize, max_t: usize) -> Result<(Vec<CertifiedMatrix>, Vec<GradientCheck>), Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut certs = Vec::with_capacity(n);
    let mut grads = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.random_range(2..=max_t);
        let d = rng.random_range(2..=8);
        let inst = if i % 10 == 0 {
            one_hot_head(&mut rng, t, d)
        } else {
            let scale = 10f64.powf(rng.random_range(-1.0..1.5));
            random_head(&mut rng, t, d, scale)
        };
        let g = inst.gradients().map_err(input)?;
        certs.push(certify_and_check(g.attention.data(), t, i, None).map_err(input)?);
        grads.push(verify_gradient_bounds(&inst).map_err(input)?);
    }
    Ok((certs, grads))
}

fn capture(cli: &Cli, args: &CaptureArgs) -> Result<(), Failure> {
    let model = load_reference(&args.model)?;
    let (corpus, dataset_id) = match &args.data {
        Some(p) => (Corpus::from_file(p, 0.1).map_err(|e| at(p, e))?, p.display().to_string()),
        None => {
            let DataSpec::Synthetic { seed, bytes } = DataSpec::default() else {
                unreachable!("default data is synthetic")
            };
            (Corpus::synthetic(seed, bytes), format!("synthetic:{seed}:{bytes}"))
        }
    };
    let offsets = sample_offsets(&corpus, Split::Val, args.n, args.t, cli.seed.unwrap_or(0), 0).map_err(input)?;
    let val = corpus.split(Split::Val);
    let seqs: Vec<Vec<u32>> = offsets.iter().map(|&o| val[o..o + args.t].iter().map(|&b| u32::from(b)).collect()).collect();
    let dump = capture_dump(&model, &seqs, &stem(&args.model), &dataset_id).map_err(input)?;
    let path = match &args.out {
        Some(p) => p.clone(),
        None => out_dir(cli)?.join(format!("{}.atnd", stem(&args.model))),
    };
    write_dump(&path, &dump).map_err(|e| at(&path, e))?;
    println!("wrote {} ({} matrices of {}x{})", path.display(), dump.manifest().matrix_count(), args.t, args.t);
    Ok(())
}
