//! End-to-end acceptance checks. Prints one PASS/FAIL/SKIP line per
//! criterion and exits non-zero if any criterion fails.
//!
//! The MNIST criteria need the four IDX files in `data/mnist` at the
//! workspace root (or in `$FSTITCH_DATA`); they are skipped otherwise.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fstitch::idx::{has_mnist, load_mnist, Mnist};
use fstitch::remote::{cost_estimate, serve, CostModel, RemoteOracle, ServeOptions};
use fstitch_core::attack::{attacked_extraction, AttackSpec, OverwriteConfig};
use fstitch_core::rng::seeded;
use fstitch_core::stitch::{build_key, mark_pipeline, KeyParams, MarkOutcome, StitchError};
use fstitch_core::svd::{frobenius_distance, svd};
use fstitch_core::train::train;
use fstitch_core::verify::{binomial_tail, extract, loyalty_report, null_simulation, theta, Rational};
use fstitch_core::{
    model_digest, Activation, AdvKind, DenseLayer, EmbedConfig, KeyBaseSet, KeyEntry, LocalOracle, Model, Norm,
    Tensor, TrainConfig, WatermarkKey,
};
use num_bigint::BigUint;
use rand::Rng;

const HIDDEN: [usize; 2] = [512, 512];
const BASE_SEED: u64 = 1;

const C1_MAX_SECS: f64 = 1.0;
const C2_MAX_SECS: f64 = 5.0;
const C3_MIN_ACCURACY: f64 = 0.95;
const C4_SEEDS: u64 = 10;
const C4_MIN_FIRST_TRY: usize = 8;
const C4_MAX_MEAN_DROP: f64 = 0.015;
/// Epoch budget for |K|=100 markings. The default of 100 is too tight for
/// this model; see the README. These keys come from training images: at
/// ε=0.25 fewer than 50 test images survive the perturbation.
const K100_EPOCH_BUDGET: usize = 300;
const C5_RUNS: u64 = 5;
const C5_PRUNE_RATE: f64 = 0.25;
const C5_MAX_MEAN_MK: f64 = 10.0;
const C6_N_ADV: usize = 1000;
const C6_MIN_SUCCESSES: usize = 4;
const C7_SUSPECTS: u64 = 5;
/// At ε=0.5 the 512-512 MLP keeps only a few dozen training images correctly
/// classified, which caps a balanced key at about 50 entries.
const C7_STRONG_KEY_LEN: usize = 50;
const C8_TRIALS: usize = 10_000;
const C8_MAX_COIN_RATE: f64 = 0.05;
const C8_MEAN_TOLERANCE: f64 = 0.5;
const C9_INSTANCES: u64 = 100;
const C9_GRAD_TOL: f64 = 1e-4;
const C9_SVD_TOL: f64 = 1e-8;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Option<Outcome> {
    Some(Outcome {
        passed,
        detail: detail.into(),
    })
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn data_dir() -> PathBuf {
    std::env::var_os("FSTITCH_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn train_mlp(data: &Mnist, seed: u64) -> Model {
    let init = Model::mlp(784, &HIDDEN, 10, seed).unwrap();
    let cfg = TrainConfig {
        rng_seed: fstitch_core::rng::derive_seed(seed, 1),
        ..TrainConfig::default()
    };
    train(&init, &data.train, &cfg).unwrap().model
}

fn mark(
    base: &Model,
    data: &Mnist,
    key_len: usize,
    base_set: KeyBaseSet,
    seed: u64,
    budget: usize,
) -> Result<MarkOutcome, StitchError> {
    let params = KeyParams {
        key_len,
        seed,
        base_set,
        ..KeyParams::default()
    };
    let pool = match base_set {
        KeyBaseSet::Train => &data.train,
        _ => &data.test,
    };
    let cfg = EmbedConfig {
        epoch_budget: budget,
        rng_seed: fstitch_core::rng::derive_seed(seed, 1),
        ..EmbedConfig::default()
    };
    mark_pipeline(base, pool, &params, &cfg)
}

fn c1_thresholds() -> Option<Outcome> {
    let t = Instant::now();
    let (t100, t20) = (theta(100), theta(20));
    let elapsed = secs(t.elapsed());
    outcome(
        t100 == 42 && t20 == 6 && elapsed < C1_MAX_SECS,
        format!("theta(100)={t100} theta(20)={t20} in {elapsed:.3}s"),
    )
}

fn c2_binomial_boundary() -> Option<Outcome> {
    let t = Instant::now();
    let alpha = Rational::new(1, 20);
    let mut violations = Vec::new();
    let mut row = vec![BigUint::from(1u32)];
    for n in 1..=200u64 {
        let mut next = vec![BigUint::from(1u32)];
        next.extend(row.windows(2).map(|w| &w[0] + &w[1]));
        next.push(BigUint::from(1u32));
        row = next;
        if n < 5 {
            continue;
        }
        let th = theta(n);
        let brute = |t: u64| -> BigUint { row[..=t as usize].iter().sum() };
        let ok_below = th == 0 || binomial_tail(n, th - 1).unwrap().lt(alpha);
        let ok_above = !binomial_tail(n, th).unwrap().lt(alpha);
        let exact = binomial_tail(n, th).unwrap().numerator == brute(th);
        let brute_below = th == 0 || brute(th - 1) * 20u32 < BigUint::from(1u32) << n as usize;
        let brute_above = brute(th) * 20u32 >= BigUint::from(1u32) << n as usize;
        if !(ok_below && ok_above && exact && brute_below && brute_above) {
            violations.push(n);
        }
    }
    let spot5 = binomial_tail(20, 5).unwrap();
    let spot6 = binomial_tail(20, 6).unwrap();
    let spots = spot5.numerator == BigUint::from(21700u32)
        && spot6.numerator == BigUint::from(60460u32)
        && spot5.exponent == 20
        && spot6.exponent == 20;
    let elapsed = secs(t.elapsed());
    outcome(
        violations.is_empty() && spots && elapsed < C2_MAX_SECS,
        format!(
            "n in [5,200]: {} violations; P[Z<=5]={}/2^20 P[Z<=6]={}/2^20; {elapsed:.3}s",
            violations.len(),
            spot5.numerator,
            spot6.numerator
        ),
    )
}

fn c3_training(acc: f64, elapsed: f64) -> Option<Outcome> {
    outcome(
        acc >= C3_MIN_ACCURACY,
        format!("60000 images, 10 epochs, test accuracy {acc:.4} (min {C3_MIN_ACCURACY}) in {elapsed:.0}s"),
    )
}

fn c4_marking_fidelity(base: &Model, data: &Mnist) -> Option<Outcome> {
    let mut first_try = 0;
    let mut drops = Vec::new();
    let mut perfect = 0;
    let mut failures = Vec::new();
    for seed in 0..C4_SEEDS {
        let out = match mark(base, data, 20, KeyBaseSet::Test, seed, 100) {
            Ok(out) => out,
            Err(e) => {
                failures.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        if out.attempts.len() == 1 {
            first_try += 1;
        }
        let heldout = data.test.remove_key_bases(&out.key);
        drops.push(loyalty_report(base, &out.model, &heldout).unwrap().delta);
        let res = extract(&mut LocalOracle::new(&out.model), &out.key).unwrap();
        if res.mismatches == 0 {
            perfect += 1;
        }
    }
    let mean_drop = drops.iter().sum::<f64>() / drops.len().max(1) as f64;
    let drops: Vec<String> = drops.iter().map(|d| format!("{d:.4}")).collect();
    outcome(
        failures.is_empty() && first_try >= C4_MIN_FIRST_TRY && mean_drop <= C4_MAX_MEAN_DROP && perfect == C4_SEEDS,
        format!(
            "{first_try}/{C4_SEEDS} embedded first try; mean accuracy drop {mean_drop:.4} (max {C4_MAX_MEAN_DROP}, \
             per seed [{}]); m_K=0 in {perfect}/{C4_SEEDS}{}",
            drops.join(", "),
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join("; ")) }
        ),
    )
}

fn c5_pruning(marked: &[MarkOutcome], data: &Mnist) -> Option<Outcome> {
    let spec = AttackSpec::Prune { rate: C5_PRUNE_RATE };
    let cfg = OverwriteConfig::default();
    let mut successes = 0;
    let mut plausible = 0;
    let mut mks = Vec::new();
    let mut accs = Vec::new();
    for (i, m) in marked.iter().enumerate() {
        let test = data.test.remove_key_bases(&m.key);
        let (res, acc) = attacked_extraction(&m.model, &m.key, &test, &spec, &cfg, i as u64).unwrap();
        successes += res.success as usize;
        plausible += (acc >= fstitch_core::attack::PLAUSIBILITY_FLOOR) as usize;
        mks.push(res.mismatches as f64);
        accs.push(acc);
    }
    let n = marked.len();
    let mean_mk = mks.iter().sum::<f64>() / n as f64;
    let mean_acc = accs.iter().sum::<f64>() / n as f64;
    outcome(
        successes == n && plausible == n && mean_mk <= C5_MAX_MEAN_MK,
        format!(
            "rate {:.3} over {n} marked models; plausible {plausible}/{n}; mean m_K {mean_mk:.2} (max {C5_MAX_MEAN_MK}); \
             mean accuracy {mean_acc:.4}",
            successes as f64 / n as f64
        ),
    )
}

fn c6_overwriting(marked: &[MarkOutcome], data: &Mnist) -> Option<Outcome> {
    let spec = AttackSpec::Overwrite {
        n_adv: C6_N_ADV,
        epsilon: 0.25,
        norm: Norm::Linf,
    };
    let cfg = OverwriteConfig::default();
    let mut mks = Vec::new();
    for (i, m) in marked.iter().enumerate() {
        let heldout = data.test.remove_key_bases(&m.key);
        let (res, _) = attacked_extraction(&m.model, &m.key, &heldout, &spec, &cfg, 100 + i as u64).unwrap();
        mks.push(res.mismatches);
    }
    let below = mks.iter().filter(|&&mk| (mk as u64) < theta(100)).count();
    outcome(
        below >= C6_MIN_SUCCESSES,
        format!("m_K per run {mks:?}; below θ=42 in {below}/{} (min {C6_MIN_SUCCESSES})", mks.len()),
    )
}

fn c7_false_positives(base: &Model, data: &Mnist) -> Option<Outcome> {
    let key_at = |key_len: usize, epsilon: f64| {
        let params = KeyParams {
            key_len,
            epsilon,
            seed: 7,
            base_set: KeyBaseSet::Train,
            ..KeyParams::default()
        };
        build_key(base, &data.train, &params)
    };
    let (strong, weak) = match (key_at(C7_STRONG_KEY_LEN, 0.5), key_at(100, 0.025)) {
        (Ok(s), Ok(w)) => (s, w),
        (Err(e), _) | (_, Err(e)) => return outcome(false, format!("key generation failed: {e}")),
    };
    let mut strong_hits = Vec::new();
    let mut weak_hits = 0;
    for s in 0..C7_SUSPECTS {
        let suspect = train_mlp(data, 1000 + s);
        let res = extract(&mut LocalOracle::new(&suspect), &strong).unwrap();
        strong_hits.push((res.mismatches, res.success));
        weak_hits += extract(&mut LocalOracle::new(&suspect), &weak).unwrap().success as usize;
    }
    let false_positives = strong_hits.iter().filter(|(_, ok)| *ok).count();
    let mks: Vec<usize> = strong_hits.iter().map(|(mk, _)| *mk).collect();
    outcome(
        false_positives == 0,
        format!(
            "ε=0.5, |K|={C7_STRONG_KEY_LEN}: {false_positives}/{C7_SUSPECTS} false positives (m_K {mks:?}, θ={}); \
             ε=0.025, |K|=100 (report only): {weak_hits}/{C7_SUSPECTS}",
            theta(C7_STRONG_KEY_LEN as u64)
        ),
    )
}

fn c8_null_calibration() -> Option<Outcome> {
    let coin = null_simulation(100, 2, C8_TRIALS, &mut seeded(8));
    let ten = null_simulation(100, 10, C8_TRIALS, &mut seeded(9));
    outcome(
        coin.success_rate <= C8_MAX_COIN_RATE && (ten.mean_matches - 10.0).abs() <= C8_MEAN_TOLERANCE,
        format!(
            "coin-flip success rate {:.4} (max {C8_MAX_COIN_RATE}); 10-class mean matches {:.3} (10 ± {C8_MEAN_TOLERANCE})",
            coin.success_rate, ten.mean_matches
        ),
    )
}

fn random_net(dims: &[usize], rng: &mut impl Rng) -> Model {
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let act = if i + 2 == dims.len() {
                Activation::Softmax
            } else {
                Activation::Relu
            };
            DenseLayer::new(
                Tensor::new(vec![w[0], w[1]], (0..w[0] * w[1]).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
                Tensor::new(vec![w[1]], (0..w[1]).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap(),
                act,
            )
            .unwrap()
        })
        .collect();
    Model::new(layers).unwrap()
}

fn near_kink(model: &Model, x: &[f64]) -> bool {
    let mut act = x.to_vec();
    for layer in model.layers() {
        let (fin, fout) = (layer.fan_in(), layer.fan_out());
        let w = layer.weights().data();
        let mut z = layer.biases().data().to_vec();
        for i in 0..fin {
            for j in 0..fout {
                z[j] += act[i] * w[i * fout + j];
            }
        }
        if layer.activation() == Activation::Relu {
            if z.iter().any(|v| v.abs() < 1e-3) {
                return true;
            }
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        act = z;
    }
    false
}

fn c9_numerical_core() -> Option<Outcome> {
    const H: f64 = 1e-5;
    let mut rng = seeded(9);
    let mut worst_grad = 0.0f64;
    let mut grad_cases = 0;
    while grad_cases < C9_INSTANCES {
        let d = rng.random_range(1..=20);
        let mut dims = vec![d];
        for _ in 0..rng.random_range(0..=2) {
            dims.push(rng.random_range(2..=12));
        }
        dims.push(rng.random_range(2..=6));
        let model = random_net(&dims, &mut rng);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let y = rng.random_range(0..model.n_classes());
        if near_kink(&model, &x) {
            continue;
        }
        grad_cases += 1;
        let loss = |v: &[f64]| {
            let out = model.forward(&Tensor::new(vec![1, d], v.to_vec()).unwrap()).unwrap();
            -out.data()[y].ln()
        };
        let (_, grad) = model.loss_and_input_grad(&x, y).unwrap();
        for i in 0..d {
            let (mut up, mut down) = (x.clone(), x.clone());
            up[i] += H;
            down[i] -= H;
            let numeric = (loss(&up) - loss(&down)) / (2.0 * H);
            let a = grad.data()[i];
            worst_grad = worst_grad.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7));
        }
    }
    let mut worst_svd = 0.0f64;
    for _ in 0..C9_INSTANCES {
        let (m, n) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let a: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = svd(&a, m, n).unwrap();
        let r = rng.random_range(0..=m.min(n));
        let err = frobenius_distance(&a, &d.reconstruct(r));
        let tail = d.s[r..].iter().map(|s| s * s).sum::<f64>().sqrt();
        let total = d.s.iter().map(|s| s * s).sum::<f64>().sqrt();
        let reference: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst_svd = worst_svd
            .max((err - tail).abs() / total.max(f64::MIN_POSITIVE))
            .max((total - reference).abs() / reference.max(f64::MIN_POSITIVE));
    }
    outcome(
        worst_grad <= C9_GRAD_TOL && worst_svd <= C9_SVD_TOL,
        format!(
            "gradient max relative error {worst_grad:.2e} (max {C9_GRAD_TOL:e}); \
             Eckart-Young max relative error {worst_svd:.2e} (max {C9_SVD_TOL:e}); {C9_INSTANCES} instances each"
        ),
    )
}

fn synthetic_key(model: &Model, len: usize) -> WatermarkKey {
    let mut rng = seeded(10);
    let entries = (0..len)
        .map(|i| KeyEntry {
            input: Tensor::vector(&(0..784).map(|_| rng.random_range(0.0..=1.0)).collect::<Vec<_>>()),
            label: rng.random_range(0..10),
            kind: if i % 2 == 0 { AdvKind::TrueAdv } else { AdvKind::FalseAdv },
            base_source_id: i as u64,
        })
        .collect();
    WatermarkKey::new(entries, 0.25, Norm::Linf, model_digest(model), 10, KeyBaseSet::Test).unwrap()
}

fn c10_loopback(model: &Model, key: &WatermarkKey) -> Option<Outcome> {
    let local = extract(&mut LocalOracle::new(model), key).unwrap();
    let handle = serve(model.clone(), "127.0.0.1:0", &ServeOptions::default()).unwrap();
    let mut oracle = RemoteOracle::new(&handle.endpoint(), Duration::from_secs(30), 64);
    let remote = extract(&mut oracle, key).unwrap();
    handle.shutdown();
    let cost = cost_estimate(100, &CostModel::default());
    outcome(
        remote == local && remote.queries_used == key.len() as u64 && cost == 0.01,
        format!(
            "remote {} m_K={} p={}, local identical: {}; queries {} for |K|={}; cost_estimate(100)={cost}",
            if remote.success { "MATCH" } else { "NO MATCH" },
            remote.mismatches,
            remote.p_value,
            remote == local,
            remote.queries_used,
            key.len()
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Option<Outcome>)> = Vec::new();
    let mut report = |id: u32, name: &'static str, o: Option<Outcome>| {
        match &o {
            Some(o) => println!("{} C{id} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail),
            None => println!("SKIP C{id} {name}: MNIST not found in {}", data_dir().display()),
        }
        results.push((id, name, o));
    };

    report(1, "threshold exactness", c1_thresholds());
    report(2, "binomial boundary", c2_binomial_boundary());

    let dir = data_dir();
    let data = has_mnist(&dir).then(|| load_mnist(&dir).unwrap());
    let mut loopback: Option<(Model, WatermarkKey)> = None;
    match &data {
        Some(data) => {
            let t = Instant::now();
            let base = train_mlp(data, BASE_SEED);
            let acc = base.evaluate(&data.test).unwrap();
            report(3, "training", c3_training(acc, secs(t.elapsed())));
            report(4, "marking fidelity", c4_marking_fidelity(&base, data));
            let marked: Result<Vec<MarkOutcome>, String> = (0..C5_RUNS)
                .map(|s| mark(&base, data, 100, KeyBaseSet::Train, 50 + s, K100_EPOCH_BUDGET).map_err(|e| format!("key seed {}: {e}", 50 + s)))
                .collect();
            match marked {
                Ok(marked) => {
                    let epochs: Vec<usize> = marked.iter().map(|m| m.epochs).collect();
                    eprintln!("|K|=100 markings embedded in {epochs:?} epochs");
                    report(5, "pruning robustness", c5_pruning(&marked, data));
                    report(6, "overwriting robustness", c6_overwriting(&marked, data));
                    let first = marked.into_iter().next().unwrap();
                    loopback = Some((first.model, first.key));
                }
                Err(e) => {
                    report(5, "pruning robustness", outcome(false, format!("marking failed: {e}")));
                    report(6, "overwriting robustness", outcome(false, format!("marking failed: {e}")));
                }
            }
            report(7, "false positives", c7_false_positives(&base, data));
        }
        None => {
            for (id, name) in [
                (3, "training"),
                (4, "marking fidelity"),
                (5, "pruning robustness"),
                (6, "overwriting robustness"),
                (7, "false positives"),
            ] {
                report(id, name, None);
            }
        }
    }
    report(8, "null calibration", c8_null_calibration());
    report(9, "numerical core", c9_numerical_core());
    let (model, key) = loopback.unwrap_or_else(|| {
        let model = Model::mlp(784, &[32], 10, 3).unwrap();
        let key = synthetic_key(&model, 100);
        (model, key)
    });
    report(10, "loopback protocol", c10_loopback(&model, &key));

    let failed: Vec<String> = results
        .iter()
        .filter(|(_, _, o)| o.as_ref().is_some_and(|o| !o.passed))
        .map(|(id, name, _)| format!("C{id} {name}"))
        .collect();
    let skipped = results.iter().filter(|(_, _, o)| o.is_none()).count();
    println!(
        "acceptance: {} passed, {} failed, {skipped} skipped",
        results.len() - failed.len() - skipped,
        failed.len()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
