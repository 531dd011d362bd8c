use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args};
use fstitch::formats::{load_key, load_model, save_key, save_model};
use fstitch::idx::{has_mnist, load_mnist, Mnist};
use fstitch::manifest::RunManifest;
use fstitch::remote::{self, CostModel, RemoteOracle, ServeOptions};
use fstitch::report;
use fstitch_core::attack::{robustness_table, AttackSpec, BenchConfig, OverwriteConfig};
use fstitch_core::rng::{derive_seed, seeded};
use fstitch_core::stitch::{mark_pipeline, KeyParams};
use fstitch_core::verify::{self, null_simulation, theta};
use fstitch_core::{
    model_digest, EmbedConfig, KeyBaseSet, LocalOracle, Model, Norm, Optimizer, TrainConfig, WatermarkKey,
};

use crate::{Cli, Command, UsageError, EXIT_NO_MATCH, EXIT_OK, EXIT_RUNTIME};

const DATA_ENV: &str = "FSTITCH_DATA";

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding the four MNIST IDX files.
    #[arg(long, env = DATA_ENV, default_value = "data/mnist")]
    pub data_dir: PathBuf,
    /// `mlp` followed by hidden layer widths, e.g. `mlp-512-512`.
    #[arg(long, default_value = "mlp-512-512")]
    pub arch: String,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    /// `rmsprop` or `sgd`.
    #[arg(long, default_value = "rmsprop")]
    pub optimizer: String,
    /// Train on the first N training images only.
    #[arg(long)]
    pub subset: Option<usize>,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MarkArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, env = DATA_ENV, default_value = "data/mnist")]
    pub data_dir: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub key_len: usize,
    #[arg(long, default_value_t = 0.25)]
    pub epsilon: f64,
    /// `linf`, `l2` or `l1`.
    #[arg(long, default_value = "linf")]
    pub norm: String,
    /// Pool the key's base images come from: `test` or `train`.
    #[arg(long, default_value = "test")]
    pub base_set: String,
    #[arg(long, default_value_t = 100)]
    pub epoch_budget: usize,
    /// Defaults to a tenth of the training rate.
    #[arg(long)]
    pub finetune_lr: Option<f64>,
    #[arg(long, default_value_t = 5)]
    pub max_retries: usize,
    #[arg(long, default_value = "rmsprop")]
    pub optimizer: String,
    #[arg(long)]
    pub out_model: PathBuf,
    #[arg(long)]
    pub out_key: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("target").required(true).args(["model", "endpoint"])))]
pub struct ExtractArgs {
    #[arg(long)]
    pub key: PathBuf,
    /// Local model file to query.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Root URL of a running classification service.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long, default_value_t = 10.0)]
    pub timeout_secs: f64,
    #[arg(long, default_value_t = remote::DEFAULT_MAX_BATCH)]
    pub max_batch: usize,
    #[arg(long, default_value_t = 0.10)]
    pub price_per_1000: f64,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub key: PathBuf,
    #[arg(long, env = DATA_ENV, default_value = "data/mnist")]
    pub data_dir: PathBuf,
    /// Attack specs such as `prune:0.25`, `svd:0.5`, `overwrite:1000`
    /// (repeatable or comma separated).
    #[arg(long = "attack", required = true, value_delimiter = ',')]
    pub attacks: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    /// Also write the report as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value_t = fstitch_core::attack::PLAUSIBILITY_FLOOR)]
    pub floor: f64,
    #[arg(long, default_value_t = 10)]
    pub overwrite_epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub overwrite_lr: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, env = remote::BIND_ENV, default_value = remote::DEFAULT_BIND)]
    pub bind: String,
    #[arg(long, default_value_t = remote::DEFAULT_MAX_BATCH)]
    pub max_batch: usize,
}

#[derive(Debug, Args)]
pub struct NullsimArgs {
    #[arg(long, default_value_t = 100)]
    pub key_size: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest_file: PathBuf,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_arch(spec: &str) -> Result<Vec<usize>> {
    let mut parts = spec.split('-');
    if parts.next() != Some("mlp") {
        return Err(usage(format!("unknown architecture `{spec}`; expected e.g. mlp-512-512")));
    }
    parts
        .map(|w| match w.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(usage(format!("bad layer width `{w}` in `{spec}`"))),
        })
        .collect()
}

fn parse_optimizer(s: &str) -> Result<Optimizer> {
    match s {
        "rmsprop" => Ok(Optimizer::rmsprop()),
        "sgd" => Ok(Optimizer::Sgd),
        _ => Err(usage(format!("unknown optimizer `{s}` (rmsprop, sgd)"))),
    }
}

fn parse_norm(s: &str) -> Result<Norm> {
    Norm::parse(s).ok_or_else(|| usage(format!("unknown norm `{s}` (linf, l2, l1)")))
}

fn mnist(dir: &Path) -> Result<Mnist> {
    if !has_mnist(dir) {
        return Err(usage(format!(
            "MNIST files not found in {}; pass --data-dir or set {DATA_ENV}",
            dir.display()
        )));
    }
    Ok(load_mnist(dir)?)
}

fn read_model(path: &Path) -> Result<Model> {
    if !path.is_file() {
        return Err(usage(format!("model file {} does not exist", path.display())));
    }
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn read_key(path: &Path) -> Result<WatermarkKey> {
    if !path.is_file() {
        return Err(usage(format!("key file {} does not exist", path.display())));
    }
    load_key(path).with_context(|| format!("loading key {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Drops `--manifest`/`--config` and their values: the config has already
/// been spliced in, and a replay picks its own manifest path.
fn replay_args(effective: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(effective.len());
    let mut skip = false;
    for a in effective {
        if skip {
            skip = false;
        } else if a == "--manifest" || a == "--config" {
            skip = true;
        } else if !a.starts_with("--manifest=") && !a.starts_with("--config=") {
            out.push(a.clone());
        }
    }
    out
}

struct Run {
    manifest: RunManifest,
    path: PathBuf,
}

impl Run {
    fn new(cli: &Cli, effective: &[String], default_path: PathBuf) -> Self {
        let mut manifest = RunManifest::new(cli.command.name(), replay_args(effective));
        manifest.seed("seed", cli.global.seed);
        let path = cli.global.manifest.clone().unwrap_or(default_path);
        Self { manifest, path }
    }

    fn save(&self) -> Result<()> {
        self.manifest.save(&self.path)?;
        log::info!("manifest written to {}", self.path.display());
        Ok(())
    }
}

fn default_manifest(command: &str) -> PathBuf {
    let ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    PathBuf::from("runs").join(format!("{command}-{ms}.manifest.json"))
}

pub fn dispatch(cli: Cli, effective: Vec<String>) -> Result<u8> {
    match &cli.command {
        Command::Train(a) => train(&cli, a, &effective),
        Command::Mark(a) => mark(&cli, a, &effective),
        Command::Extract(a) => extract(&cli, a, &effective),
        Command::Attack(a) => attack(&cli, a, &effective),
        Command::Serve(a) => serve(&cli, a, &effective),
        Command::Nullsim(a) => nullsim(&cli, a, &effective),
        Command::Replay(a) => replay(a),
    }
}

fn train(cli: &Cli, a: &TrainArgs, effective: &[String]) -> Result<u8> {
    let hidden = parse_arch(&a.arch)?;
    let optimizer = parse_optimizer(&a.optimizer)?;
    let seed = cli.global.seed;
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        rng_seed: derive_seed(seed, 1),
        optimizer,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let data = mnist(&a.data_dir)?;
    let train_set = match a.subset {
        Some(n) => data.train.take(n),
        None => data.train.clone(),
    };

    let mut run = Run::new(cli, effective, with_suffix(&a.out, ".manifest.json"));
    run.manifest
        .param("arch", &a.arch)
        .param("epochs", a.epochs)
        .param("learning_rate", a.lr)
        .param("batch_size", a.batch_size)
        .param("optimizer", optimizer.name())
        .param("train_samples", train_set.len())
        .seed("init", seed)
        .seed("shuffle", cfg.rng_seed)
        .input("data_dir", &a.data_dir)
        .output("model", &a.out);
    run.save()?;

    let init = Model::mlp(train_set.dim(), &hidden, 10, seed)?;
    let trained = fstitch_core::train::train(&init, &train_set, &cfg)?;
    for (i, loss) in trained.epoch_losses.iter().enumerate() {
        println!("epoch {:>3}  loss {loss:.6}", i + 1);
    }
    let acc = trained.model.evaluate(&data.test)?;
    save_model(&a.out, &trained.model)?;
    let digest = model_digest(&trained.model);
    println!("test accuracy {acc:.4}");
    println!("wrote {} (digest {})", a.out.display(), digest.short());

    run.manifest
        .digest("model", digest.to_hex())
        .param("test_accuracy", acc);
    run.save()?;
    Ok(EXIT_OK)
}

fn mark(cli: &Cli, a: &MarkArgs, effective: &[String]) -> Result<u8> {
    let norm = parse_norm(&a.norm)?;
    let optimizer = parse_optimizer(&a.optimizer)?;
    let base_set = match KeyBaseSet::parse(&a.base_set) {
        Some(b @ (KeyBaseSet::Test | KeyBaseSet::Train)) => b,
        _ => return Err(usage(format!("--base-set must be `test` or `train`, got `{}`", a.base_set))),
    };
    if a.key_len < 2 || !a.key_len.is_multiple_of(2) {
        return Err(usage(format!("--key-len must be even and at least 2, got {}", a.key_len)));
    }
    if a.epsilon.is_nan() || a.epsilon <= 0.0 {
        return Err(usage("--epsilon must be positive"));
    }
    let seed = cli.global.seed;
    let defaults = EmbedConfig::default();
    let cfg = EmbedConfig {
        epoch_budget: a.epoch_budget,
        finetune_lr: a.finetune_lr.unwrap_or(defaults.finetune_lr),
        rng_seed: derive_seed(seed, 1),
        max_key_retries: a.max_retries,
        optimizer,
        ..defaults
    };
    let params = KeyParams {
        key_len: a.key_len,
        epsilon: a.epsilon,
        norm,
        seed,
        base_set,
    };
    let model = read_model(&a.model)?;
    let data = mnist(&a.data_dir)?;
    let pool = match base_set {
        KeyBaseSet::Train => &data.train,
        _ => &data.test,
    };

    let mut run = Run::new(cli, effective, with_suffix(&a.out_model, ".manifest.json"));
    run.manifest
        .param("key_len", a.key_len)
        .param("epsilon", a.epsilon)
        .param("norm", norm.as_str())
        .param("base_set", base_set.as_str())
        .param("epoch_budget", cfg.epoch_budget)
        .param("finetune_lr", cfg.finetune_lr)
        .param("max_retries", cfg.max_key_retries)
        .param("optimizer", optimizer.name())
        .seed("key", seed)
        .seed("embed", cfg.rng_seed)
        .input("model", &a.model)
        .input("data_dir", &a.data_dir)
        .output("model", &a.out_model)
        .output("key", &a.out_key)
        .digest("input_model", model_digest(&model).to_hex());
    run.save()?;

    let out = mark_pipeline(&model, pool, &params, &cfg)?;
    save_model(&a.out_model, &out.model)?;
    save_key(&a.out_key, &out.key)?;
    let test = data.test.remove_key_bases(&out.key);
    let loyalty = verify::loyalty_report(&model, &out.model, &test)?;
    let digest = model_digest(&out.model);
    println!(
        "embedded |K|={} in {} epochs (attempt {} of at most {})",
        out.key.len(),
        out.epochs,
        out.attempts.len(),
        cfg.max_key_retries.max(1)
    );
    println!(
        "test accuracy {:.4} -> {:.4}, loyalty delta {:.4} on {} images",
        loyalty.acc_before,
        loyalty.acc_after,
        loyalty.delta,
        test.len()
    );
    println!("wrote {} (digest {}) and {}", a.out_model.display(), digest.short(), a.out_key.display());

    run.manifest
        .digest("marked_model", digest.to_hex())
        .param("embed_epochs", out.epochs)
        .param("attempts", out.attempts.len())
        .param("key_seed_used", out.key.rng_seed)
        .param("loyalty_delta", loyalty.delta);
    run.save()?;
    Ok(EXIT_OK)
}

fn extract(cli: &Cli, a: &ExtractArgs, effective: &[String]) -> Result<u8> {
    if a.timeout_secs.is_nan() || a.timeout_secs <= 0.0 || a.max_batch == 0 || a.price_per_1000 < 0.0 {
        return Err(usage("--timeout-secs and --max-batch must be positive, --price-per-1000 non-negative"));
    }
    let key = read_key(&a.key)?;
    let mut run = Run::new(cli, effective, default_manifest("extract"));
    run.manifest
        .param("max_batch", a.max_batch)
        .param("timeout_secs", a.timeout_secs)
        .input("key", &a.key)
        .digest("key_model", key.model_digest.to_hex());

    let result = match (&a.model, &a.endpoint) {
        (Some(path), _) => {
            let model = read_model(path)?;
            run.manifest
                .input("model", path)
                .digest("queried_model", model_digest(&model).to_hex());
            run.save()?;
            verify::extract(&mut LocalOracle::new(&model), &key)?
        }
        (None, Some(endpoint)) => {
            run.manifest.param("endpoint", endpoint);
            run.save()?;
            let timeout = Duration::from_secs_f64(a.timeout_secs);
            let mut oracle = RemoteOracle::new(endpoint, timeout, a.max_batch);
            verify::extract(&mut oracle, &key)?
        }
        (None, None) => unreachable!("clap requires one target"),
    };
    let cost = remote::cost_estimate(
        result.queries_used,
        &CostModel {
            price_per_1000: a.price_per_1000,
        },
    );
    let verdict = if result.success { "MATCH" } else { "NO MATCH" };
    println!(
        "{verdict} m_K={} θ={} |K|={} p={}",
        result.mismatches, result.theta, result.key_size, result.p_value
    );
    println!("queries {} (estimated cost ${cost:.4})", result.queries_used);

    run.manifest
        .param("mismatches", result.mismatches)
        .param("theta", result.theta)
        .param("success", result.success)
        .param("queries_used", result.queries_used);
    run.save()?;
    Ok(if result.success { EXIT_OK } else { EXIT_NO_MATCH })
}

fn attack(cli: &Cli, a: &AttackArgs, effective: &[String]) -> Result<u8> {
    let specs: Vec<AttackSpec> = a
        .attacks
        .iter()
        .map(|s| AttackSpec::parse(s).ok_or_else(|| usage(format!("bad attack spec `{s}`"))))
        .collect::<Result<_>>()?;
    if a.runs == 0 {
        return Err(usage("--runs must be at least 1"));
    }
    let model = read_model(&a.model)?;
    let key = read_key(&a.key)?;
    let data = mnist(&a.data_dir)?;
    let test = data.test.remove_key_bases(&key);
    let cfg = BenchConfig {
        runs: a.runs,
        seed: cli.global.seed,
        floor: a.floor,
        overwrite: OverwriteConfig {
            learning_rate: a.overwrite_lr,
            epochs: a.overwrite_epochs,
            ..OverwriteConfig::default()
        },
    };

    let mut run = Run::new(cli, effective, default_manifest("attack"));
    run.manifest
        .param("attacks", a.attacks.join(","))
        .param("runs", a.runs)
        .param("floor", a.floor)
        .param("overwrite_epochs", a.overwrite_epochs)
        .param("overwrite_lr", a.overwrite_lr)
        .seed("bench", cfg.seed)
        .input("model", &a.model)
        .input("key", &a.key)
        .input("data_dir", &a.data_dir)
        .digest("model", model_digest(&model).to_hex());
    if let Some(csv) = &a.csv {
        run.manifest.output("csv", csv);
    }
    run.save()?;

    let rows = robustness_table(&model, &key, &test, &specs, &cfg);
    let mut reports = Vec::with_capacity(rows.len());
    let mut failed = 0;
    for (spec, row) in a.attacks.iter().zip(rows) {
        match row {
            Ok(r) => reports.push(r),
            Err(e) => {
                failed += 1;
                eprintln!("attack {spec} failed: {e}");
            }
        }
    }
    print!("{}", report::attack_table(&reports, key.len()));
    if let Some(path) = &a.csv {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        report::write_attack_csv(file, &reports)?;
    }
    Ok(if failed > 0 { EXIT_RUNTIME } else { EXIT_OK })
}

fn serve(cli: &Cli, a: &ServeArgs, effective: &[String]) -> Result<u8> {
    if a.max_batch == 0 {
        return Err(usage("--max-batch must be at least 1"));
    }
    let model = read_model(&a.model)?;
    let digest = model_digest(&model);
    let mut run = Run::new(cli, effective, default_manifest("serve"));
    run.manifest
        .param("bind", &a.bind)
        .param("max_batch", a.max_batch)
        .input("model", &a.model)
        .digest("model", digest.to_hex());
    run.save()?;
    let handle = remote::serve(
        model,
        &a.bind,
        &ServeOptions {
            max_batch: a.max_batch,
            ctrl_c: true,
        },
    )?;
    println!("serving model {} on {} (Ctrl-C to stop)", digest.short(), handle.endpoint());
    io::stdout().flush()?;
    handle.wait();
    println!("stopped");
    Ok(EXIT_OK)
}

fn nullsim(cli: &Cli, a: &NullsimArgs, effective: &[String]) -> Result<u8> {
    if a.classes < 2 || a.trials == 0 || a.key_size == 0 {
        return Err(usage("need --classes >= 2, --trials >= 1 and --key-size >= 1"));
    }
    let mut run = Run::new(cli, effective, default_manifest("nullsim"));
    run.manifest
        .param("key_size", a.key_size)
        .param("classes", a.classes)
        .param("trials", a.trials)
        .seed("sim", cli.global.seed);
    run.save()?;

    let th = theta(a.key_size as u64);
    if th == 0 {
        println!("key too small to ever verify (θ=0)");
    }
    let sim = null_simulation(a.key_size, a.classes, a.trials, &mut seeded(cli.global.seed));
    println!("|K|={} classes={} trials={} θ={}", a.key_size, a.classes, a.trials, sim.theta);
    println!(
        "mean matches {:.3} (expected {:.3})",
        sim.mean_matches,
        a.key_size as f64 / a.classes as f64
    );
    println!("false verification rate {:.4}", sim.success_rate);

    run.manifest
        .param("success_rate", sim.success_rate)
        .param("mean_matches", sim.mean_matches);
    run.save()?;
    Ok(EXIT_OK)
}

fn replay(a: &ReplayArgs) -> Result<u8> {
    let manifest = RunManifest::load(&a.manifest_file).map_err(|e| usage(e.to_string()))?;
    if manifest.command == "replay" {
        bail!("refusing to replay a replay manifest");
    }
    let mut argv = vec![std::ffi::OsString::from("fstitch")];
    argv.extend(manifest.args.iter().map(Into::into));
    eprintln!("replaying: fstitch {}", manifest.args.join(" "));
    crate::run(argv)
}
