use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmfpa::data::{
    generate_synthetic, load_dataset_with, read_labels, save_dataset, write_bytes, write_labels,
    write_matrix, MatrixFormat, MultiViewDataset, Normalization, SyntheticSpec,
};
use dmfpa::deep::LayerDims;
use dmfpa::metrics::{score, Scores};
use dmfpa::pipeline::{
    fit, lambda_grid, layer_schemes, FitResult, HyperParams, DEFAULT_KMEANS_RESTARTS,
    DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use dmfpa::semi_nmf::DEFAULT_PRETRAIN_ITERS;
use dmfpa::Error;

const EXIT_INVALID: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "dmfpa",
    version,
    about = "Multi-view clustering by deep matrix factorization with partition alignment"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a dataset repeatedly and report clustering scores.
    Run(RunArgs),
    /// Sweep the lambda grid against every layer scheme.
    Grid(GridArgs),
    /// Write a synthetic dataset to disk.
    Synth(SynthArgs),
    /// Score predicted labels against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset manifest (TOML).
    #[arg(
        long,
        conflicts_with = "synthetic",
        required_unless_present = "synthetic"
    )]
    manifest: Option<PathBuf>,

    /// Generate the data in memory, e.g. `n=300,k=3,dims=40/60/80,noise=0.1,seed=7`.
    #[arg(long)]
    synthetic: Option<String>,

    /// Normalization: l2-sample or minmax-feature. Manifests default to their own setting.
    #[arg(long)]
    norm: Option<Normalization>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    max_iter: usize,

    /// Relative objective change that stops the loop.
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,

    /// Number of repeats; repeat r uses seed + r.
    #[arg(long, default_value_t = 50)]
    repeats: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// k-means restarts on the consensus partition.
    #[arg(long, default_value_t = DEFAULT_KMEANS_RESTARTS)]
    restarts: usize,

    #[arg(long, default_value_t = DEFAULT_PRETRAIN_ITERS)]
    pretrain_iters: usize,

    /// Plain semi-NMF step on the partition layer before the alignment-aware one.
    #[arg(long)]
    warmup: bool,

    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,

    #[arg(long, default_value_t = 1.0)]
    lambda: f64,

    /// Layer sizes, last one equal to k (default `4k,k`).
    #[arg(long)]
    dims: Option<String>,

    #[command(flatten)]
    fit: FitArgs,

    /// Also write the consensus partition of the best repeat (k x n, binary).
    #[arg(long)]
    emit_embedding: bool,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Restrict the sweep to these lambdas (comma list).
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,

    /// Restrict the sweep to one layer scheme.
    #[arg(long)]
    dims: Option<String>,

    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator settings; defaults to the 300-sample, 3-view benchmark.
    #[arg(long)]
    spec: Option<String>,

    /// Seed for the default benchmark spec.
    #[arg(long, default_value_t = 7)]
    seed: u64,

    /// bin or txt.
    #[arg(long, default_value = "bin")]
    format: MatrixFormat,

    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,

    #[arg(long)]
    truth: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: cannot configure {threads} threads: {e}");
            return ExitCode::from(EXIT_INVALID);
        }
    }
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Grid(args) => cmd_grid(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_INVALID
            })
        }
    }
}

fn load(data: &DataArgs) -> dmfpa::Result<MultiViewDataset> {
    match (&data.manifest, &data.synthetic) {
        (Some(path), _) => load_dataset_with(path, data.norm),
        (None, Some(spec)) => {
            let spec: SyntheticSpec = spec.parse()?;
            Ok(generate_synthetic(&spec)?.normalized(data.norm.unwrap_or_default()))
        }
        (None, None) => Err(Error::Invalid(
            "either --manifest or --synthetic is required".into(),
        )),
    }
}

fn parse_dims(dims: Option<&str>, k: usize) -> dmfpa::Result<LayerDims> {
    match dims {
        Some(s) => LayerDims::parse(s, k),
        None => LayerDims::new(vec![4 * k, k], k),
    }
}

fn hyper_params(fit: &FitArgs, lambda: f64, dims: LayerDims) -> dmfpa::Result<HyperParams> {
    if fit.repeats == 0 {
        return Err(Error::Invalid("--repeats must be >= 1".into()));
    }
    let mut hp = HyperParams::new(lambda, dims);
    hp.max_iter = fit.max_iter;
    hp.tol = fit.tol;
    hp.seed = fit.seed;
    hp.kmeans_restarts = fit.restarts;
    hp.pretrain_iters = fit.pretrain_iters;
    hp.warmup_partition = fit.warmup;
    hp.validate()?;
    Ok(hp)
}

struct Repeat {
    seed: u64,
    fit: FitResult,
    scores: Option<Scores>,
}

impl Repeat {
    fn final_objective(&self) -> f64 {
        self.fit.history.last().map_or(f64::NAN, |r| r.objective)
    }
}

fn run_repeats(
    dataset: &MultiViewDataset,
    hp: &HyperParams,
    repeats: usize,
) -> dmfpa::Result<Vec<Repeat>> {
    (0..repeats as u64)
        .map(|r| {
            let mut hp = hp.clone();
            hp.seed = hp.seed.wrapping_add(r);
            let fit = fit(dataset, &hp)?;
            let scores = match &dataset.truth {
                Some(t) => Some(fit.scores(t)?),
                None => None,
            };
            Ok(Repeat {
                seed: hp.seed,
                fit,
                scores,
            })
        })
        .collect()
}

/// Best by ACC (ties by NMI) with ground truth, otherwise lowest objective.
fn best_index(repeats: &[Repeat]) -> usize {
    let mut best = 0;
    for (i, r) in repeats.iter().enumerate().skip(1) {
        let b = &repeats[best];
        let better = match (&r.scores, &b.scores) {
            (Some(s), Some(t)) => s.acc > t.acc || (s.acc == t.acc && s.nmi > t.nmi),
            _ => r.final_objective() < b.final_objective(),
        };
        if better {
            best = i;
        }
    }
    best
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn norm_label(dataset: &MultiViewDataset) -> String {
    dataset
        .normalization
        .map_or("none".into(), |n| n.to_string())
}

const RESULTS_HEADER: &str =
    "row\tseed\tlambda\tdims\tnorm\titerations\tconverged\tobjective\tacc\tnmi\tpurity\n";

fn results_table(dataset: &MultiViewDataset, hp: &HyperParams, repeats: &[Repeat]) -> String {
    let norm = norm_label(dataset);
    let mut out = String::from(RESULTS_HEADER);
    let cell = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.6}"));
    for (i, r) in repeats.iter().enumerate() {
        let s = r.scores.as_ref();
        let _ = writeln!(
            out,
            "{i}\t{}\t{}\t{}\t{norm}\t{}\t{}\t{:.10e}\t{}\t{}\t{}",
            r.seed,
            hp.lambda,
            hp.dims,
            r.fit.iterations_run,
            r.fit.converged,
            r.final_objective(),
            cell(s.map(|s| s.acc)),
            cell(s.map(|s| s.nmi)),
            cell(s.map(|s| s.purity)),
        );
    }
    let best = &repeats[best_index(repeats)];
    let s = best.scores.as_ref();
    let _ = writeln!(
        out,
        "best\t{}\t{}\t{}\t{norm}\t{}\t{}\t{:.10e}\t{}\t{}\t{}",
        best.seed,
        hp.lambda,
        hp.dims,
        best.fit.iterations_run,
        best.fit.converged,
        best.final_objective(),
        cell(s.map(|s| s.acc)),
        cell(s.map(|s| s.nmi)),
        cell(s.map(|s| s.purity)),
    );
    let iters: Vec<f64> = repeats
        .iter()
        .map(|r| r.fit.iterations_run as f64)
        .collect();
    let objs: Vec<f64> = repeats.iter().map(Repeat::final_objective).collect();
    let column = |f: fn(&Scores) -> f64| -> Option<Vec<f64>> {
        repeats.iter().map(|r| r.scores.as_ref().map(f)).collect()
    };
    let acc = column(|s| s.acc);
    let nmi = column(|s| s.nmi);
    let pur = column(|s| s.purity);
    for (label, pick) in [("mean", 0usize), ("std", 1)] {
        let stat = |v: &[f64]| {
            if pick == 0 {
                mean_std(v).0
            } else {
                mean_std(v).1
            }
        };
        let _ = writeln!(
            out,
            "{label}\t{}\t{}\t{}\t{norm}\t{:.2}\tNA\t{:.10e}\t{}\t{}\t{}",
            hp.seed,
            hp.lambda,
            hp.dims,
            stat(&iters),
            stat(&objs),
            cell(acc.as_deref().map(stat)),
            cell(nmi.as_deref().map(stat)),
            cell(pur.as_deref().map(stat)),
        );
    }
    out
}

fn create_dir(dir: &Path) -> dmfpa::Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn cmd_run(args: RunArgs) -> dmfpa::Result<()> {
    let dataset = load(&args.data)?;
    let dims = parse_dims(args.dims.as_deref(), dataset.k)?;
    let hp = hyper_params(&args.fit, args.lambda, dims)?;
    let repeats = run_repeats(&dataset, &hp, args.fit.repeats)?;
    let best = &repeats[best_index(&repeats)];

    let out = &args.fit.out;
    create_dir(out)?;
    let table = results_table(&dataset, &hp, &repeats);
    write_bytes(&out.join("results.tsv"), table.as_bytes())?;
    let trace: String = best
        .fit
        .objective_trace()
        .iter()
        .map(|v| format!("{v:.12e}\n"))
        .collect();
    write_bytes(&out.join("objective_trace.txt"), trace.as_bytes())?;
    write_labels(&out.join("labels.txt"), &best.fit.labels)?;
    if args.emit_embedding {
        write_matrix(
            &out.join("embedding.bin"),
            &best.fit.h,
            MatrixFormat::Binary,
        )?;
    }

    println!(
        "{}: n={} views={} k={} lambda={} dims={} repeats={}",
        dataset.name,
        dataset.samples(),
        dataset.views.len(),
        dataset.k,
        hp.lambda,
        hp.dims,
        repeats.len()
    );
    print!("{}", summary(&table));
    Ok(())
}

/// The best, mean and std rows of a results table, for the terminal.
fn summary(table: &str) -> String {
    let mut out = String::from("          acc       nmi       purity\n");
    for line in table
        .lines()
        .filter(|l| ["best", "mean", "std"].iter().any(|p| l.starts_with(p)))
    {
        let f: Vec<&str> = line.split('\t').collect();
        let _ = writeln!(out, "{:<6}  {:>8}  {:>8}  {:>8}", f[0], f[8], f[9], f[10]);
    }
    out
}

fn cmd_grid(args: GridArgs) -> dmfpa::Result<()> {
    let dataset = load(&args.data)?;
    let k = dataset.k;
    let lambdas = args.lambda.clone().unwrap_or_else(lambda_grid);
    let schemes = match &args.dims {
        Some(s) => vec![LayerDims::parse(s, k)?],
        None => layer_schemes(k),
    };
    let out = &args.fit.out;
    create_dir(out)?;
    let norm = norm_label(&dataset);

    let mut table = String::from("lambda\tdims\tnorm\tstatus\trepeats\tseed\tacc_best\tacc_mean\tnmi_best\tnmi_mean\tpurity_best\tpurity_mean\tobjective_best\n");
    let mut best_cell: Option<(f64, String)> = None;
    let mut failures = 0usize;
    for dims in &schemes {
        for &lambda in &lambdas {
            let cell = hyper_params(&args.fit, lambda, dims.clone())
                .and_then(|hp| run_repeats(&dataset, &hp, args.fit.repeats).map(|r| (hp, r)));
            match cell {
                Ok((_, repeats)) => {
                    let best = &repeats[best_index(&repeats)];
                    let stats = |f: fn(&Scores) -> f64| -> (String, String) {
                        let v: Option<Vec<f64>> =
                            repeats.iter().map(|r| r.scores.as_ref().map(f)).collect();
                        match (best.scores.as_ref(), v) {
                            (Some(b), Some(v)) => {
                                (format!("{:.6}", f(b)), format!("{:.6}", mean_std(&v).0))
                            }
                            _ => ("NA".into(), "NA".into()),
                        }
                    };
                    let (ab, am) = stats(|s| s.acc);
                    let (nb, nm) = stats(|s| s.nmi);
                    let (pb, pm) = stats(|s| s.purity);
                    let _ = writeln!(
                        table,
                        "{lambda}\t{dims}\t{norm}\tok\t{}\t{}\t{ab}\t{am}\t{nb}\t{nm}\t{pb}\t{pm}\t{:.10e}",
                        repeats.len(),
                        args.fit.seed,
                        best.final_objective()
                    );
                    if let Some(s) = &best.scores {
                        if best_cell.as_ref().is_none_or(|(acc, _)| s.acc > *acc) {
                            best_cell = Some((
                                s.acc,
                                format!(
                                    "lambda={lambda} dims={dims} acc={:.4} nmi={:.4}",
                                    s.acc, s.nmi
                                ),
                            ));
                        }
                    }
                }
                Err(e) => {
                    failures += 1;
                    let status = if e.is_numerical() {
                        "numerical"
                    } else {
                        "invalid"
                    };
                    let _ = writeln!(
                        table,
                        "{lambda}\t{dims}\t{norm}\t{status}\t0\t{}\tNA\tNA\tNA\tNA\tNA\tNA\tNA",
                        args.fit.seed
                    );
                    eprintln!("cell lambda={lambda} dims={dims} failed: {e}");
                }
            }
        }
    }
    write_bytes(&out.join("grid.tsv"), table.as_bytes())?;
    let cells = lambdas.len() * schemes.len();
    println!("{cells} cells, {failures} failed");
    match best_cell {
        Some((_, line)) => println!("best {line}"),
        None => println!("no scored cell"),
    }
    if failures == cells {
        return Err(Error::Invalid("every grid cell failed".into()));
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> dmfpa::Result<()> {
    let spec = match &args.spec {
        Some(s) => s.parse()?,
        None => SyntheticSpec::benchmark(args.seed),
    };
    let dataset = generate_synthetic(&spec)?;
    let manifest = save_dataset(&args.out, &dataset, args.format)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> dmfpa::Result<()> {
    let pred = read_labels(&args.pred)?;
    let truth = read_labels(&args.truth)?;
    let s = score(&pred, &truth)?;
    println!(
        "acc\t{:.6}\nnmi\t{:.6}\npurity\t{:.6}",
        s.acc, s.nmi, s.purity
    );
    Ok(())
}
