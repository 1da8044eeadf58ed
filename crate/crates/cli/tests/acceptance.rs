//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::HashMap;
use std::fs;
use std::process::{Command, ExitCode};
use std::time::Instant;

use dmfpa::alignment::{beta_from_scores, update_alpha, update_rotation};
use dmfpa::data::{generate_synthetic, MultiViewDataset, Normalization, SyntheticSpec};
use dmfpa::deep::{LayerDims, ViewFactorization};
use dmfpa::matrix::{procrustes_max, Mat};
use dmfpa::metrics::{accuracy, kmeans, nmi, purity};
use dmfpa::pipeline::{fit, FitResult, HyperParams};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn FnOnce() -> Outcome + 'a>);

fn benchmark() -> MultiViewDataset {
    generate_synthetic(&SyntheticSpec::benchmark(7))
        .unwrap()
        .normalized(Normalization::L2Sample)
}

fn params(dims: &str, seed: u64) -> HyperParams {
    let mut hp = HyperParams::new(1.0, LayerDims::parse(dims, 3).unwrap());
    hp.seed = seed;
    hp
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

/// The 150-iteration benchmark fit shared by criteria 1 and 3.
fn long_fit() -> (FitResult, f64) {
    let ds = benchmark();
    let mut hp = params("12,3", 7);
    hp.tol = f64::MIN_POSITIVE;
    let start = Instant::now();
    let result = single_threaded(|| fit(&ds, &hp)).expect("benchmark fit");
    (result, start.elapsed().as_secs_f64())
}

fn feasibility(result: &FitResult, secs: f64) -> Outcome {
    if result.iterations_run != 150 {
        return Err(format!("ran {} iterations", result.iterations_run));
    }
    for (i, r) in result.history.iter().enumerate() {
        let res = &r.residuals;
        let worst_w = res.rotations.iter().cloned().fold(0.0, f64::max);
        let ok = res.consensus <= 1e-8
            && worst_w <= 1e-8
            && res.alpha_sum <= 1e-12
            && res.beta_norm <= 1e-10
            && r.min_hidden >= 0.0;
        if !ok {
            return Err(format!("iteration {i}: {res:?}, min H {}", r.min_hidden));
        }
    }
    if secs > 60.0 {
        return Err(format!("took {secs:.1}s"));
    }
    Ok(format!("150 iterations feasible, {secs:.2}s"))
}

fn convergence(result: &FitResult) -> Outcome {
    let trace = result.objective_trace();
    let n = trace.len();
    let last = (trace[n - 1] - trace[n - 2]).abs() / trace[n - 2].abs();
    let increasing = trace.windows(2).filter(|p| p[1] > p[0]).count();
    let share = increasing as f64 / (n - 1) as f64;
    let detail = format!(
        "final relative change {last:.2e}, {increasing}/{} increasing",
        n - 1
    );
    if last < 1e-4 && share <= 0.05 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn clustering_quality() -> Outcome {
    let ds = benchmark();
    let truth = ds.truth.clone().unwrap();
    let best = (0..10)
        .map(|seed| {
            fit(&ds, &params("12,3", seed))
                .unwrap()
                .scores(&truth)
                .unwrap()
        })
        .max_by(|a, b| a.acc.total_cmp(&b.acc).then(a.nmi.total_cmp(&b.nmi)))
        .unwrap();
    let baseline_labels = kmeans(&ds.concatenated().t(), 3, 50, 0).unwrap().labels;
    let baseline = accuracy(&baseline_labels, &truth).unwrap();
    let detail = format!(
        "ACC {:.4}, NMI {:.4}, concatenated k-means ACC {baseline:.4}",
        best.acc, best.nmi
    );
    if best.acc >= 0.95 && best.nmi >= 0.85 && baseline >= 0.9 && best.acc >= baseline - 0.02 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(0.1..1.0))
}

fn orthonormal_cols(n: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let qr = gaussian(n, k, rng).qr();
    let r = qr.r();
    let mut q = qr.q().columns(0, k).into_owned();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn mat(m: DMatrix<f64>) -> Mat {
    Mat::from_dmatrix(m).unwrap()
}

fn two_layer(d: usize, l: usize, k: usize, n: usize, rng: &mut ChaCha8Rng) -> ViewFactorization {
    ViewFactorization::new(
        mat(gaussian(d, n, rng)),
        vec![mat(gaussian(d, l, rng)), mat(gaussian(l, k, rng))],
        vec![mat(uniform(l, n, rng)), mat(uniform(k, n, rng))],
    )
    .unwrap()
}

fn block_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    for case in 0..20 {
        let k = 2 + case % 4;
        let n = k + 3 + case;
        // consensus against random feasible points
        let u = gaussian(n, k, &mut rng);
        let h = procrustes_max(&mat(u.clone())).unwrap().h;
        let best = (h.as_dmatrix() * &u).trace();
        for _ in 0..10_000 {
            if (orthonormal_cols(n, k, &mut rng).transpose() * &u).trace() > best + 1e-9 {
                return Err(format!("consensus beaten, case {case}"));
            }
        }
        // rotation against random orthogonal matrices
        let hc = mat(orthonormal_cols(n, k, &mut rng).transpose());
        let part = mat(uniform(k, n, &mut rng));
        let w = update_rotation(&part, &hc, 0.5, &Mat::identity(k))
            .unwrap()
            .value;
        let value =
            |w: &DMatrix<f64>| (hc.as_dmatrix() * part.as_dmatrix().transpose() * w).trace();
        let best = value(w.as_dmatrix());
        for _ in 0..10_000 {
            if value(&orthonormal_cols(k, k, &mut rng)) > best + 1e-9 {
                return Err(format!("rotation beaten, case {case}"));
            }
        }
    }
    // alpha against a simplex grid
    for _ in 0..10 {
        let losses = [rng.random_range(0.01..100.0), rng.random_range(0.01..100.0)];
        let steps = 10_000;
        let grid = (0..=steps)
            .map(|i| i as f64 / steps as f64)
            .min_by(|a, b| {
                let f = |t: &f64| t * t * losses[0] + (1.0 - t) * (1.0 - t) * losses[1];
                f(a).total_cmp(&f(b))
            })
            .unwrap();
        let got = update_alpha(&losses).unwrap();
        if (got[0] - grid).abs() > 1e-3 {
            return Err(format!("alpha {got:?} vs grid {grid} for {losses:?}"));
        }
    }
    // beta against the quarter circle
    for _ in 0..10 {
        let f = [rng.random_range(-1.0..5.0), rng.random_range(0.1..5.0)];
        let steps = 20_000;
        let grid = (0..=steps)
            .map(|i| std::f64::consts::FRAC_PI_2 * i as f64 / steps as f64)
            .max_by(|a, b| {
                (f[0] * a.cos() + f[1] * a.sin()).total_cmp(&(f[0] * b.cos() + f[1] * b.sin()))
            })
            .unwrap();
        let got = beta_from_scores(&f).value;
        if (got[0] - grid.cos()).abs() > 1e-3 || (got[1] - grid.sin()).abs() > 1e-3 {
            return Err(format!("beta {got:?} for scores {f:?}"));
        }
    }
    // basis against the normal equations
    for case in 0..20 {
        let x = gaussian(15, 30, &mut rng);
        let h = uniform(4, 30, &mut rng);
        let vf = ViewFactorization::new(
            mat(x.clone()),
            vec![mat(gaussian(15, 4, &mut rng))],
            vec![mat(h.clone())],
        )
        .unwrap();
        let got = vf.update_basis(0).unwrap();
        let want = (&h * h.transpose())
            .lu()
            .solve(&(&h * x.transpose()))
            .unwrap()
            .transpose();
        if (got.as_dmatrix() - &want).norm() > 1e-8 * want.norm() {
            return Err(format!("basis off the normal equations, case {case}"));
        }
    }
    Ok("consensus, rotation, alpha, beta and basis match their oracles".into())
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, k - 1);
            out.push(q);
        }
    }
    out
}

fn reference_nmi(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let (mut p, mut t): (HashMap<usize, f64>, HashMap<usize, f64>) = Default::default();
    for (&a, &b) in pred.iter().zip(truth) {
        *joint.entry((a, b)).or_default() += 1.0;
        *p.entry(a).or_default() += 1.0;
        *t.entry(b).or_default() += 1.0;
    }
    let h = |m: &HashMap<usize, f64>| -> f64 { m.values().map(|c| -(c / n) * (c / n).ln()).sum() };
    let (hp, ht) = (h(&p), h(&t));
    if hp == 0.0 || ht == 0.0 {
        return if hp == ht { 1.0 } else { 0.0 };
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(a, b), &c)| (c / n) * (c * n / (p[&a] * t[&b])).ln())
        .sum();
    (mi / (hp * ht).sqrt()).clamp(0.0, 1.0)
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    for case in 0..200 {
        let k = rng.random_range(1..=5);
        let n = rng.random_range(1..40);
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let brute = permutations(k)
            .iter()
            .map(|p| {
                pred.iter()
                    .zip(&truth)
                    .filter(|&(&a, &b)| p[a] == b)
                    .count()
            })
            .max()
            .unwrap() as f64
            / n as f64;
        if accuracy(&pred, &truth).unwrap() != brute {
            return Err(format!("ACC differs from brute force, case {case}"));
        }
        if (nmi(&pred, &truth).unwrap() - reference_nmi(&pred, &truth)).abs() > 1e-12 {
            return Err(format!(
                "NMI differs from the direct definition, case {case}"
            ));
        }
        let mut majority: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
        for (&a, &b) in pred.iter().zip(&truth) {
            *majority.entry(a).or_default().entry(b).or_default() += 1;
        }
        let pur = majority
            .values()
            .map(|m| *m.values().max().unwrap())
            .sum::<usize>() as f64
            / n as f64;
        if purity(&pred, &truth).unwrap() != pur {
            return Err(format!("purity differs, case {case}"));
        }
    }
    if accuracy(&[0, 0, 1, 0], &[0, 0, 1, 1]).unwrap() != 0.75 {
        return Err("ACC of the four-sample example".into());
    }
    Ok("ACC, NMI and purity match their references".into())
}

fn monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(402);
    for case in 0..20 {
        let mut vf = two_layer(15, 7, 3, 35, &mut rng);
        let mut prev = vf.layer_loss(0);
        for step in 0..50 {
            let h = vf.update_hidden(0).unwrap();
            vf.set_hidden(0, h).unwrap();
            let cur = vf.layer_loss(0);
            if cur > prev + 1e-8 {
                return Err(format!(
                    "hidden rule, case {case} step {step}: {prev} -> {cur}"
                ));
            }
            prev = cur;
        }
    }
    for case in 0..20 {
        let mut vf = two_layer(15, 7, 3, 35, &mut rng);
        let h = mat(orthonormal_cols(35, 3, &mut rng).transpose());
        let w = mat(orthonormal_cols(3, 3, &mut rng));
        let (alpha, beta) = (rng.random_range(0.05..1.0), rng.random_range(0.05..1.0));
        let lambda = [0.0, 1.0, 8.0][case % 3];
        let mut prev = vf.partition_objective(&h, &w, alpha, beta, lambda);
        for step in 0..50 {
            let hm = vf.update_partition(&h, &w, alpha, beta, lambda).unwrap();
            vf.set_hidden(1, hm).unwrap();
            let cur = vf.partition_objective(&h, &w, alpha, beta, lambda);
            if cur > prev + 1e-8 {
                return Err(format!(
                    "partition rule, case {case} step {step}: {prev} -> {cur}"
                ));
            }
            prev = cur;
        }
    }
    Ok("both multiplicative rules monotone over 20 x 50 steps".into())
}

fn depth_ablation() -> Outcome {
    let ds = generate_synthetic(&SyntheticSpec::benchmark(7).with_nuisance(4, 0.7))
        .unwrap()
        .normalized(Normalization::L2Sample);
    let truth = ds.truth.clone().unwrap();
    let mean_acc = |dims: &str| -> f64 {
        (0..10)
            .map(|seed| {
                fit(&ds, &params(dims, seed))
                    .unwrap()
                    .scores(&truth)
                    .unwrap()
                    .acc
            })
            .sum::<f64>()
            / 10.0
    };
    let (deep, shallow) = (mean_acc("24,12,3"), mean_acc("3"));
    let detail = format!("mean ACC [24,12,3] {deep:.4} vs [3] {shallow:.4}");
    if deep >= shallow {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cli_reproducibility() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let status = Command::new(env!("CARGO_BIN_EXE_dmfpa"))
            .args([
                "--threads",
                "1",
                "run",
                "--synthetic",
                "n=300,k=3,dims=40/60/80,noise=0.1,seed=7",
            ])
            .args(["--dims", "12,3", "--repeats", "2", "--seed", "3", "--out"])
            .arg(dir.path())
            .output()
            .unwrap();
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
    }
    for file in ["results.tsv", "objective_trace.txt", "labels.txt"] {
        let [a, b] = &dirs;
        if fs::read(a.path().join(file)).unwrap() != fs::read(b.path().join(file)).unwrap() {
            return Err(format!("{file} differs between runs"));
        }
    }
    Ok("results.tsv, objective_trace.txt and labels.txt byte-identical".into())
}

fn main() -> ExitCode {
    let (long, secs) = long_fit();
    let criteria: Vec<Criterion> = vec![
        (
            "1 feasibility and runtime",
            Box::new(|| feasibility(&long, secs)),
        ),
        ("2 clustering quality", Box::new(clustering_quality)),
        ("3 convergence", Box::new(|| convergence(&long))),
        ("4 block oracles", Box::new(block_oracles)),
        ("5 metric oracles", Box::new(metric_oracles)),
        ("6 update monotonicity", Box::new(monotonicity)),
        ("7 depth ablation", Box::new(depth_ablation)),
        ("8 CLI reproducibility", Box::new(cli_reproducibility)),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
