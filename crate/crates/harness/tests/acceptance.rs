//! Acceptance run: one PASS/FAIL line per criterion. Exits nonzero on any
//! failure not listed in `KNOWN_FAILURES`, or if a listed one starts passing.
//!
//! Reports land in `<target tmpdir>/acceptance`. Set `WMPG_ACCEPTANCE_ONLY=1,4`
//! to run a subset while iterating.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wmpg::agent::AgentKind;
use wmpg::env::{chain_mdp_exact_q, ChainMdpSpec};
use wmpg::estimator::{
    batch_gradient, coefficients, exact_policy_gradient, ht_gradient, single_sample_gradient, surrogate_objective,
    EstimatorVariant, NetworkScore, ScoreFunction, ScoreMatrix, StateGradientInput,
};
use wmpg::nn::{mlp_layers, Activation, LayerSpec, Network};
use wmpg::swor::{
    gumbel_top_k, inclusion_probabilities_exact, sample_without_replacement, CategoricalDistribution, SworSample,
};
use wmpg::world_model::{td_lambda, td_lambda_weights, td_n, ImaginedTrajectory};
use wmpg_harness::ablation::{ablation_grid, Axis};
use wmpg_harness::bench::{estimator_benchmark, BenchEstimator, BenchReport};
use wmpg_harness::runner::{run_experiment, ExperimentOutcome};
use wmpg_harness::spec::ExperimentSpec;
use wmpg_harness::stats::median_episodes_to_threshold;

type Verdict = (bool, String);

struct Context {
    out: PathBuf,
    jobs: usize,
    bench: Option<BenchReport>,
    k_cells: Option<(ExperimentOutcome, ExperimentOutcome)>,
}

/// Criteria that fail as implemented and are documented in the README. They
/// still print FAIL; listing them only keeps the workspace test run green.
/// 9: the seed-median curves dip 11-24 points near the 200 cap late in training.
const KNOWN_FAILURES: &[usize] = &[9];

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("WMPG_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&out).expect("acceptance output directory");
    let mut ctx = Context {
        out,
        jobs: std::thread::available_parallelism().map_or(1, |n| n.get()),
        bench: None,
        k_cells: None,
    };

    type Check = fn(&mut Context) -> Verdict;
    let criteria: [(&str, Check); 10] = [
        ("HT estimator unbiased on random instances", unbiased),
        ("zero variance at k = |A|", zero_variance),
        ("collapse identities at k = 1 and k = |A|", collapse),
        ("TD(lambda) weight identities", td_identities),
        ("gradients match finite differences", finite_differences),
        ("exact gradient matches the chain oracle", chain_oracle),
        ("cart-pole sample efficiency, WMPG vs AC", sample_efficiency),
        ("k ablation report", k_ablation),
        ("horizon x lambda grid monotone", horizon_lambda_grid),
        ("variance report", variance_report),
    ];

    let mut unexpected = Vec::new();
    let mut known = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let started = Instant::now();
        let (passed, detail) = catch_unwind(AssertUnwindSafe(|| check(&mut ctx)))
            .unwrap_or_else(|p| (false, format!("panicked: {p:?}")));
        let secs = started.elapsed().as_secs_f64();
        println!(
            "criterion {n:>2}: {} {name}: {detail} [{secs:.1}s]",
            if passed { "PASS" } else { "FAIL" }
        );
        match (passed, KNOWN_FAILURES.contains(&n)) {
            (false, true) => known.push(n),
            (false, false) => unexpected.push(format!("criterion {n} failed")),
            (true, true) => unexpected.push(format!("criterion {n} passed but is listed as a known failure")),
            (true, false) => {}
        }
    }
    println!("reports in {}", ctx.out.display());
    if !known.is_empty() {
        println!("known failures: {known:?}");
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        for u in &unexpected {
            println!("{u}");
        }
        ExitCode::FAILURE
    }
}

fn random_instance(n: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = e.iter().sum();
    let q = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
    (e.iter().map(|x| x / total).collect(), q)
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn bench(ctx: &mut Context) -> &BenchReport {
    if ctx.bench.is_none() {
        let report = estimator_benchmark(20, 1_000_000, 0).expect("benchmark");
        report.write_csv(&ctx.out.join("bench.csv")).expect("bench.csv");
        ctx.bench = Some(report);
    }
    ctx.bench.as_ref().unwrap()
}

fn unbiased(ctx: &mut Context) -> Verdict {
    let report = bench(ctx);
    let rows: Vec<_> = report.rows_for(BenchEstimator::HtPlain).collect();
    let worst = rows.iter().map(|r| r.value_z.abs()).fold(0.0, f64::max);
    let outside = rows.iter().filter(|r| r.value_z.abs() > 3.0).count();
    // per-component z-scores are a diagnostic: with this many components a
    // few land past 3 by chance alone
    let components = rows.iter().filter(|r| r.max_abs_gradient_z > 3.0).count();
    (
        outside == 0,
        format!(
            "{} (instance, k) pairs, largest |z| {worst:.3}, {outside} outside +-3; {components} pairs with a gradient component past 3",
            rows.len()
        ),
    )
}

fn zero_variance(_: &mut Context) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in [2, 3, 4, 6] {
        let (p, q_table) = random_instance(n, &mut rng);
        let dist = CategoricalDistribution::new(p.clone()).unwrap();
        let omega = inclusion_probabilities_exact(&dist, n).unwrap();
        let score = ScoreMatrix::softmax_logits(&p);
        let mut first: Option<Vec<u64>> = None;
        for _ in 0..1000 {
            let actions = gumbel_top_k(&dist, n, &mut rng).unwrap();
            let q: Vec<f64> = actions.iter().map(|&a| q_table[a]).collect();
            let sample = SworSample {
                inclusion_probabilities: actions.iter().map(|&a| omega[a]).collect(),
                actions,
            };
            let g = ht_gradient(&StateGradientInput::new(&p, &sample, &q), &score).unwrap();
            match &first {
                None => first = Some(bits(&g)),
                Some(f) if *f != bits(&g) => return (false, format!("|A| = {n}: outputs differ across draws")),
                Some(_) => {}
            }
        }
    }
    (true, "1000 draws bit-identical for |A| in {2, 3, 4, 6}".into())
}

fn policy_net(inputs: usize, n: usize, rng: &mut ChaCha8Rng) -> Network {
    let base = Network::new(mlp_layers(inputs, &[8], n, Activation::Tanh, Activation::Softmax), rng).unwrap();
    let params = base.parameters().iter().map(|w| w + rng.gen_range(-0.5..0.5)).collect();
    Network::from_parameters(base.layers().to_vec(), params).unwrap()
}

fn collapse(_: &mut Context) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..100 {
        let n = rng.gen_range(2..=6);
        let net = policy_net(3, n, &mut rng);
        let state: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let trace = net.trace(&state).unwrap();
        let p = trace.output().to_vec();
        let score = NetworkScore::new(&net, &trace);
        let q_table: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let dist = CategoricalDistribution::new(p.clone()).unwrap();

        let one = sample_without_replacement(&dist, 1, &mut rng).unwrap();
        let q1 = [q_table[one.actions[0]]];
        let ht = ht_gradient(&StateGradientInput::new(&p, &one, &q1), &score).unwrap();
        let single = SworSample::single(one.actions[0], p[one.actions[0]]);
        let mc = single_sample_gradient(&StateGradientInput::new(&p, &single, &q1), &score).unwrap();
        if bits(&ht) != bits(&mc) {
            return (false, format!("instance {i}: k = 1 differs from the single-sample estimate"));
        }

        let all = sample_without_replacement(&dist, n, &mut rng).unwrap();
        let qa: Vec<f64> = all.actions.iter().map(|&a| q_table[a]).collect();
        let ht = ht_gradient(&StateGradientInput::new(&p, &all, &qa), &score).unwrap();
        let full = SworSample::exhaustive(n);
        let exact = exact_policy_gradient(&StateGradientInput::new(&p, &full, &q_table), &score).unwrap();
        if bits(&ht) != bits(&exact) {
            return (false, format!("instance {i}: k = |A| differs from the exact expectation"));
        }
    }
    (true, "bit-identical on 100 random policy networks".into())
}

fn td_identities(_: &mut Context) -> Verdict {
    let mut worst: f64 = 0.0;
    for h in 1..=100 {
        for i in 0..=100 {
            let sum: f64 = td_lambda_weights(i as f64 / 100.0, h).iter().sum();
            worst = worst.max((sum - 1.0).abs());
        }
    }
    if worst > 1e-12 {
        return (false, format!("weight sums off by {worst:e}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let value = |z: &[f64]| z[0].sin() * 3.0;
    for h in 1..=100 {
        let trajectory = ImaginedTrajectory {
            states: (0..=h).map(|_| vec![rng.gen_range(-2.0..2.0)]).collect(),
            actions: vec![0; h],
            rewards: (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let gamma = 0.97;
        let td1 = td_n(&trajectory, 1, &value, gamma).unwrap();
        let tdh = td_n(&trajectory, h, &value, gamma).unwrap();
        if td_lambda(&trajectory, 0.0, h, &value, gamma).unwrap().to_bits() != td1.to_bits() {
            return (false, format!("h = {h}: lambda = 0 is not TD(1)"));
        }
        if td_lambda(&trajectory, 1.0, h, &value, gamma).unwrap().to_bits() != tdh.to_bits() {
            return (false, format!("h = {h}: lambda = 1 is not TD(h)"));
        }
    }
    (true, format!("largest weight-sum error {worst:e}; endpoints exact for h = 1..=100"))
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

fn numeric_gradient(params: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let eps = 1e-6;
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let x = p[i];
            p[i] = x + eps;
            let up = f(&p);
            p[i] = x - eps;
            let down = f(&p);
            p[i] = x;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

fn random_network(rng: &mut ChaCha8Rng, output: Activation) -> Network {
    let inputs = rng.gen_range(1..=6);
    let hidden: Vec<usize> = (0..rng.gen_range(0..=2)).map(|_| rng.gen_range(1..=8)).collect();
    let act = [Activation::Relu, Activation::Tanh, Activation::Identity][rng.gen_range(0..3)];
    let outputs = rng.gen_range(2..=5);
    let base = Network::new(mlp_layers(inputs, &hidden, outputs, act, output), rng).unwrap();
    // zero biases can leave ReLU inputs exactly on the kink
    let params = base.parameters().iter().map(|w| w + rng.gen_range(-0.1..0.1)).collect();
    Network::from_parameters(base.layers().to_vec(), params).unwrap()
}

fn finite_differences(_: &mut Context) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_loss: f64 = 0.0;
    for i in 0..100 {
        let output = [Activation::Identity, Activation::Tanh, Activation::Softmax][i % 3];
        let net = random_network(&mut rng, output);
        let x: Vec<f64> = (0..net.input_width()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..net.output_width()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let layers = net.layers().to_vec();
        let loss = |params: &[f64]| {
            let y = Network::from_parameters(layers.clone(), params.to_vec()).unwrap().predict(&x).unwrap();
            0.5 * y.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        let trace = net.trace(&x).unwrap();
        let dy: Vec<f64> = trace.output().iter().zip(&target).map(|(a, b)| a - b).collect();
        let mut grad = vec![0.0; net.parameter_count()];
        net.accumulate_gradient(&trace, &dy, 1.0, &mut grad).unwrap();
        worst_loss = worst_loss.max(relative_error(&grad, &numeric_gradient(net.parameters(), loss)));
    }

    // the policy loss: normalized coefficients held fixed, per-state scores
    // by backpropagation, averaged over a batch
    let mut worst_policy: f64 = 0.0;
    for _ in 0..100 {
        let net = random_network(&mut rng, Activation::Softmax);
        let n = net.output_width();
        let batch: Vec<Vec<f64>> = (0..rng.gen_range(1..=6))
            .map(|_| (0..net.input_width()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut per_state = Vec::new();
        let mut coefs = Vec::new();
        for s in &batch {
            let trace = net.trace(s).unwrap();
            let p = trace.output().to_vec();
            let dist = CategoricalDistribution::new(p.clone()).unwrap();
            let k = rng.gen_range(1..=n);
            let sample = sample_without_replacement(&dist, k, &mut rng).unwrap();
            let q: Vec<f64> = (0..k).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let baseline = rng.gen_range(-1.0..1.0);
            let c = coefficients(EstimatorVariant::HtNormalized, &StateGradientInput::new(&p, &sample, &q), Some(baseline))
                .unwrap();
            per_state.push(NetworkScore::new(&net, &trace).weighted_score(&c).unwrap());
            coefs.push(c);
        }
        let grad = batch_gradient(&per_state).unwrap();
        let layers = net.layers().to_vec();
        let objective = |params: &[f64]| {
            let net = Network::from_parameters(layers.clone(), params.to_vec()).unwrap();
            batch
                .iter()
                .zip(&coefs)
                .map(|(s, c)| surrogate_objective(c, &net.predict(s).unwrap()))
                .sum::<f64>()
                / batch.len() as f64
        };
        worst_policy = worst_policy.max(relative_error(&grad, &numeric_gradient(net.parameters(), objective)));
    }
    (
        worst_loss < 1e-4 && worst_policy < 1e-4,
        format!("largest relative error {worst_loss:.2e} over 100 network losses, {worst_policy:.2e} over 100 policy losses"),
    )
}

fn chain_oracle(_: &mut Context) -> Verdict {
    let spec = ChainMdpSpec::standard(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let gamma = if trial % 2 == 0 { 0.9 } else { 0.99 };
        let layers = vec![LayerSpec::new(5, 2, Activation::Softmax)];
        let params: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let net = Network::from_parameters(layers, params).unwrap();
        let policy: Vec<Vec<f64>> = (0..5).map(|s| net.predict(&spec.one_hot(s)).unwrap()).collect();
        let q = chain_mdp_exact_q(&spec, &policy, gamma).unwrap();
        for s in (0..5).filter(|&s| !spec.terminal[s]) {
            let x = spec.one_hot(s);
            let trace = net.trace(&x).unwrap();
            let p = trace.output().to_vec();
            let full = SworSample::exhaustive(2);
            let g = exact_policy_gradient(&StateGradientInput::new(&p, &full, &q[s]), &NetworkScore::new(&net, &trace))
                .unwrap();
            // weights are row-major [action][state], then the two biases
            let v: f64 = p.iter().zip(&q[s]).map(|(a, b)| a * b).sum();
            let mut analytic = vec![0.0; 12];
            for a in 0..2 {
                let d = p[a] * (q[s][a] - v);
                analytic[a * 5 + s] = d;
                analytic[10 + a] = d;
            }
            worst = g.iter().zip(&analytic).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        }
    }
    (worst <= 1e-8, format!("largest deviation {worst:.2e} over 20 policies x 4 states"))
}

fn solved_count(outcome: &ExperimentOutcome) -> usize {
    outcome.episodes_to_solve().iter().filter(|e| e.is_some()).count()
}

fn median_to_solve(outcome: &ExperimentOutcome) -> f64 {
    median_episodes_to_threshold(&outcome.episodes_to_solve(), outcome.spec.episodes)
}

fn cartpole_spec(ctx: &Context, kind: AgentKind, seeds: u64) -> ExperimentSpec {
    let mut spec = ExperimentSpec::preset(kind);
    spec.seeds = (0..seeds).collect();
    spec.out_dir = ctx.out.join(&spec.name);
    spec
}

/// The k in {1, 2} ablation, run once and shared; its k = 2 cell is the WMPG preset.
fn k_grid(ctx: &mut Context) -> &(ExperimentOutcome, ExperimentOutcome) {
    if ctx.k_cells.is_none() {
        let base = ExperimentSpec {
            out_dir: ctx.out.join("k-ablation"),
            ..cartpole_spec(ctx, AgentKind::Wmpg, 10)
        };
        let grid = ablation_grid(&base, Axis::K, &[1.0, 2.0], ctx.jobs).expect("k ablation");
        let mut cells = grid.cells.into_iter();
        ctx.k_cells = Some((cells.next().unwrap(), cells.next().unwrap()));
    }
    ctx.k_cells.as_ref().unwrap()
}

fn sample_efficiency(ctx: &mut Context) -> Verdict {
    let ac = run_experiment(&cartpole_spec(ctx, AgentKind::Ac, 10), ctx.jobs).expect("AC run");
    let preset = cartpole_spec(ctx, AgentKind::Wmpg, 10);
    let wmpg = &k_grid(ctx).1;
    assert_eq!(wmpg.spec.agent, preset.agent, "the k = 2 cell must be the WMPG preset");
    assert_eq!((&wmpg.spec.seeds, wmpg.spec.episodes), (&preset.seeds, preset.episodes));
    let (w_solved, a_solved) = (solved_count(wmpg), solved_count(&ac));
    let (w_median, a_median) = (median_to_solve(wmpg), median_to_solve(&ac));
    let failed = wmpg.failed_seeds().len() + ac.failed_seeds().len();
    (
        failed == 0 && w_solved >= 6 && w_median < a_median,
        format!(
            "WMPG solved {w_solved}/10, median episodes {w_median}; AC solved {a_solved}/10, median episodes {a_median}"
        ),
    )
}

fn k_ablation(ctx: &mut Context) -> Verdict {
    let dir = ctx.out.join("k-ablation");
    let (k1, k2) = k_grid(ctx);
    let (s1, s2) = (solved_count(k1), solved_count(k2));
    let failed = k1.failed_seeds().len() + k2.failed_seeds().len();
    let report = dir.join("ablation_k.csv").exists() && dir.join("ablation_k.svg").exists();
    (
        failed == 0 && report && s1 >= 5 && s2 >= 5,
        format!("k = 1 solved {s1}/10, k = 2 solved {s2}/10; report written: {report}"),
    )
}

/// The seed-median trailing-20 curve sampled every 25 episodes never falls
/// more than 10 below its running maximum and ends above where it started.
fn monotone_improving(outcome: &ExperimentOutcome) -> (bool, Vec<f64>) {
    let curve: Vec<f64> = outcome
        .aggregate
        .iter()
        .filter(|r| r.episode % 25 == 0)
        .map(|r| r.trailing20_median)
        .collect();
    let mut best = f64::NEG_INFINITY;
    let mut ok = curve.len() >= 2;
    for &v in &curve {
        best = best.max(v);
        ok &= v >= best - 10.0;
    }
    ok &= curve.last() > curve.first();
    (ok, curve)
}

fn horizon_lambda_grid(ctx: &mut Context) -> Verdict {
    let mut base = cartpole_spec(ctx, AgentKind::Wmpg, 8);
    base.name = "cartpole-wmpg-grid".into();
    let mut lines = Vec::new();
    let mut passed = 0;
    for h in [5usize, 15, 45] {
        let mut row = base.clone();
        row.agent.estimator.horizon = h;
        row.name = format!("{}-h={h}", base.name);
        row.out_dir = ctx.out.join("h-lambda").join(format!("h={h}"));
        let grid = ablation_grid(&row, Axis::Lambda, &[0.25, 0.5, 0.75], ctx.jobs).expect("grid row");
        for (lambda, cell) in grid.values.iter().zip(&grid.cells) {
            let (ok, curve) = monotone_improving(cell);
            passed += usize::from(ok && cell.failed_seeds().is_empty());
            let shown: Vec<String> = curve.iter().map(|v| format!("{v:.0}")).collect();
            lines.push(format!("h={h} lambda={lambda}: {} [{}]", if ok { "ok" } else { "not monotone" }, shown.join(" ")));
        }
    }
    let _ = std::fs::write(ctx.out.join("h-lambda").join("summary.txt"), lines.join("\n") + "\n");
    for l in &lines {
        println!("    {l}");
    }
    println!("    out of scope: the LunarLander and Pong results and the LunarLander h/lambda grids need Box2D and ALE environments, which this workspace does not include");
    (passed == 9, format!("{passed}/9 cells monotone improving on the seed median"))
}

fn variance_report(ctx: &mut Context) -> Verdict {
    let out = ctx.out.join("variance.csv");
    let report = bench(ctx);
    let mut w = csv::Writer::from_path(&out).expect("variance.csv");
    w.write_record(["instance", "num_actions", "k", "ht_plain_variance", "mc_variance", "ratio"]).unwrap();
    let mut endpoint_ok = true;
    let mut endpoints = 0;
    let mc: Vec<_> = report.rows_for(BenchEstimator::McWithReplacement).collect();
    for (ht, mc) in report.rows_for(BenchEstimator::HtPlain).zip(mc) {
        assert_eq!((ht.instance, ht.k), (mc.instance, mc.k));
        w.write_record([
            ht.instance.to_string(),
            ht.num_actions.to_string(),
            ht.k.to_string(),
            format!("{:e}", ht.empirical_variance),
            format!("{:e}", mc.empirical_variance),
            format!("{}", ht.variance_ratio_to_mc),
        ])
        .unwrap();
        if ht.k == ht.num_actions {
            endpoints += 1;
            endpoint_ok &= ht.empirical_variance == 0.0;
        }
    }
    w.flush().unwrap();
    (
        endpoint_ok && endpoints == 20,
        format!("{endpoints} k = |A| rows with zero variance: {endpoint_ok}; written to {}", out.display()),
    )
}
