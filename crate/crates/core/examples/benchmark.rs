//! Runs the synthetic benchmark once and prints scores and the objective trace summary.

use std::time::Instant;

use dmfpa::data::{generate_synthetic, Normalization, SyntheticSpec};
use dmfpa::deep::LayerDims;
use dmfpa::pipeline::{fit, HyperParams};

fn main() -> dmfpa::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let lambda: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let dims = args.get(3).map(String::as_str).unwrap_or("12,3");
    let warmup = args.get(4).is_some_and(|s| s == "warm");

    let ds =
        generate_synthetic(&SyntheticSpec::benchmark(seed))?.normalized(Normalization::L2Sample);
    let mut hp = HyperParams::new(lambda, LayerDims::parse(dims, 3)?);
    hp.seed = seed;
    hp.warmup_partition = warmup;
    let start = Instant::now();
    let result = fit(&ds, &hp)?;
    let trace = result.objective_trace();
    let rising = trace.windows(2).filter(|w| w[1] > w[0]).count();
    println!(
        "elapsed {:.2?}, iterations {}, converged {}",
        start.elapsed(),
        result.iterations_run,
        result.converged
    );
    println!("scores {:?}", result.scores(ds.truth.as_ref().unwrap())?);
    println!(
        "increasing pairs {rising} of {}",
        trace.len().saturating_sub(1)
    );
    for (i, r) in result
        .history
        .iter()
        .enumerate()
        .filter(|(i, _)| *i < 12 || i % 10 == 0 || *i + 1 == trace.len())
    {
        println!(
            "{i:4} obj {:.10e} losses {:?} beta {:?}",
            r.objective, r.losses, r.beta
        );
    }
    Ok(())
}
