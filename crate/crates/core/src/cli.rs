//! Command-line front end.
//!
//! Exit codes: 0 ok, 2 config or data error, 3 numeric abort, 4 verification
//! failure. Every command echoes a replayable flag line before it runs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use thiserror::Error;

use crate::ccloss::{self, AttentionMatrix, CcLossParams, DistanceMatrix};
use crate::data::{parse_cifar100, parse_idx, synth_blobs_split, DataError, LabeledDataset};
use crate::nn::{checkpoint, BackboneKind, InputShape, ModelConfig, ModelParams, NnError};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{finite_diff_check, Tensor, TensorError};
use crate::train::{
    cosine_lr, evaluate, export_embeddings, model_config_for, one_sample_ttest, train, write_embeddings, DatasetId,
    EvalOptions, LossMode, RunSummary, TrainConfig, TrainError, TrainOutcome,
};

/// Largest tolerated `|D_gram - D_naive|` in `f32`.
pub const AGREEMENT_TOL: f64 = 1e-5;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Train(e.into())
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        CliError::Train(e.into())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Train(e.into())
    }
}

fn is_numeric(e: &TensorError) -> bool {
    matches!(e, TensorError::NonFinite { .. } | TensorError::NonFiniteObjective)
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Train(TrainError::NonFinite { .. }) => EXIT_NUMERIC,
            CliError::Train(TrainError::Tensor(t)) if is_numeric(t) => EXIT_NUMERIC,
            CliError::Train(TrainError::Nn(NnError::Tensor(t))) if is_numeric(t) => EXIT_NUMERIC,
            CliError::Verification(_) => EXIT_VERIFY,
            _ => EXIT_CONFIG,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ccloss", version, about = "Channel correlation loss: training, evaluation, ablations and kernel checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write its checkpoint and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Accuracy across a grid of loss weights.
    AblateLambda(AblateLambdaArgs),
    /// Accuracy across a grid of batch sizes.
    AblateBatch(AblateBatchArgs),
    /// Time the direct and Gram distance kernels after checking that they agree.
    BenchDist(BenchArgs),
    /// Write 2-D gated hidden features of the test split as CSV.
    ExportEmbed(ExportArgs),
    /// Run the built-in numeric checks.
    Selftest(SelftestArgs),
}

/// Flags shared by every command that trains or evaluates a model.
#[derive(Clone, Debug, Args)]
pub struct RunFlags {
    #[arg(long, default_value = "synth")]
    pub dataset: DatasetId,
    #[arg(long = "loss", default_value = "cc")]
    pub loss: LossMode,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-6, allow_hyphen_values = true)]
    pub epsilon: f64,
    /// Defaults to 10 (mnist, synth) or 30 (cifar100).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Repeats with seeds `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub hidden_dim: usize,
    /// Directory holding the IDX or CIFAR-100 binary files.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Keep only the first N training items.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Keep only the first N test items.
    #[arg(long)]
    pub test_limit: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub lr_init: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub lr_final: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    /// Random horizontal flips; defaults to on for cifar100 only.
    #[arg(long)]
    pub hflip: Option<bool>,
    /// Zero padding for random crops, 0 disables.
    #[arg(long, default_value_t = 0)]
    pub crop_pad: usize,
    #[arg(long, default_value_t = 4)]
    pub synth_classes: usize,
    #[arg(long, default_value_t = 16)]
    pub synth_dim: usize,
    #[arg(long, default_value_t = 8.0)]
    pub synth_separation: f64,
    #[arg(long, default_value_t = 250)]
    pub synth_train: usize,
    #[arg(long, default_value_t = 100)]
    pub synth_test: usize,
    /// Seed of the synthetic dataset, independent of the run seed.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Worker threads for repeated runs; results equal serial execution.
    #[arg(long, default_value_t = 1)]
    pub parallel_runs: usize,
    /// Print the resolved flag line and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Reference mean for a one-sample t-test over the final accuracies.
    #[arg(long, allow_hyphen_values = true)]
    pub ttest_mu0: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunFlags,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateLambdaArgs {
    #[command(flatten)]
    pub run: RunFlags,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,1.5,2", allow_hyphen_values = true)]
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct AblateBatchArgs {
    #[command(flatten)]
    pub run: RunFlags,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128")]
    pub batch_sizes: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "2,16,64")]
    pub n_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
    pub d_list: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Perturb the Gram result so the agreement check fails.
    #[arg(long)]
    pub fault_inject: bool,
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub run: RunFlags,
    /// Export from this checkpoint instead of training first.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perturb the Gram result so the agreement check fails.
    #[arg(long)]
    pub fault_inject: bool,
    #[arg(long)]
    pub print_config: bool,
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunFlags {
    pub fn train_config(&self) -> TrainConfig {
        let mut c = TrainConfig::desk_default(self.dataset);
        if let Some(e) = self.epochs {
            c.epochs = e;
        }
        c.batch_size = self.batch_size;
        c.lr_init = self.lr_init;
        c.lr_final = self.lr_final;
        c.momentum = self.momentum;
        c.weight_decay = self.weight_decay;
        c.lambda = self.lambda;
        c.epsilon = self.epsilon;
        c.seed = self.seed;
        c.loss_mode = self.loss;
        c.hidden_dim = self.hidden_dim;
        if let Some(h) = self.hflip {
            c.hflip = h;
        }
        c.crop_pad = self.crop_pad;
        c
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| match self.dataset {
            DatasetId::Cifar100 => PathBuf::from("data/cifar-100-binary"),
            _ => PathBuf::from("data/mnist"),
        })
    }

    /// Resolved flags in replayable form.
    pub fn flag_line(&self) -> String {
        let c = self.train_config();
        let mut s = format!(
            "--dataset {} --loss {} --lambda {} --epsilon {} --epochs {} --batch-size {} --seed {} --runs {} --out {} \
             --hidden-dim {} --lr-init {} --lr-final {} --momentum {} --weight-decay {} --hflip {} --crop-pad {} \
             --parallel-runs {}",
            c.dataset,
            c.loss_mode,
            c.lambda,
            c.epsilon,
            c.epochs,
            c.batch_size,
            c.seed,
            self.runs,
            self.out.display(),
            c.hidden_dim,
            c.lr_init,
            c.lr_final,
            c.momentum,
            c.weight_decay,
            c.hflip,
            c.crop_pad,
            self.parallel_runs,
        );
        match self.dataset {
            DatasetId::Synth => {
                let _ = write!(
                    s,
                    " --synth-classes {} --synth-dim {} --synth-separation {} --synth-train {} --synth-test {} --data-seed {}",
                    self.synth_classes, self.synth_dim, self.synth_separation, self.synth_train, self.synth_test, self.data_seed
                );
            }
            _ => {
                let _ = write!(s, " --data-dir {}", self.data_dir().display());
            }
        }
        if let Some(n) = self.train_limit {
            let _ = write!(s, " --train-limit {n}");
        }
        if let Some(n) = self.test_limit {
            let _ = write!(s, " --test-limit {n}");
        }
        s
    }

    pub fn load_data(&self) -> Result<(LabeledDataset, LabeledDataset), CliError> {
        let (train, test) = match self.dataset {
            DatasetId::Synth => synth_blobs_split(
                self.synth_classes,
                self.synth_train,
                self.synth_test,
                self.synth_dim,
                self.synth_separation,
                self.data_seed,
            )?,
            DatasetId::Mnist => {
                let dir = self.data_dir();
                require_files(&dir, &MNIST_FILES)?;
                (
                    parse_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?,
                    parse_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?,
                )
            }
            DatasetId::Cifar100 => {
                let dir = self.data_dir();
                require_files(&dir, &["train.bin", "test.bin"])?;
                (parse_cifar100(&dir.join("train.bin"))?, parse_cifar100(&dir.join("test.bin"))?)
            }
        };
        let train = match self.train_limit {
            Some(n) => train.head(n),
            None => train,
        };
        let test = match self.test_limit {
            Some(n) => test.head(n),
            None => test,
        };
        if train.is_empty() || test.is_empty() {
            return Err(CliError::Config("empty train or test split".into()));
        }
        Ok((train, test))
    }

    fn check(&self) -> Result<(), CliError> {
        if self.runs == 0 {
            return Err(CliError::Config("runs must be positive".into()));
        }
        if self.parallel_runs == 0 {
            return Err(CliError::Config("parallel runs must be positive".into()));
        }
        self.train_config().validate()?;
        Ok(())
    }
}

const MNIST_FILES: [&str; 4] =
    ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];

fn require_files(dir: &Path, names: &[&str]) -> Result<(), CliError> {
    match names.iter().map(|n| dir.join(n)).find(|p| !p.is_file()) {
        Some(p) => Err(CliError::Config(format!("missing dataset file {} (set --data-dir)", p.display()))),
        None => Ok(()),
    }
}

/// Runs `jobs` on up to `workers` threads; results come back in job order.
fn run_jobs<J: Sync, R: Send>(jobs: &[J], workers: usize, f: impl Fn(&J) -> R + Sync) -> Vec<R> {
    if workers <= 1 || jobs.len() <= 1 {
        return jobs.iter().map(f).collect();
    }
    let slots: Vec<Mutex<Option<R>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    std::thread::scope(|s| {
        for _ in 0..workers.min(jobs.len()) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("job counter");
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("result slot").expect("job ran")).collect()
}

fn run_seeds(
    base: &TrainConfig,
    runs: usize,
    workers: usize,
    train_ds: &LabeledDataset,
    test_ds: &LabeledDataset,
) -> Result<Vec<TrainOutcome>, CliError> {
    let configs: Vec<TrainConfig> = (0..runs as u64)
        .map(|r| TrainConfig { seed: base.seed + r, ..base.clone() })
        .collect();
    run_jobs(&configs, workers, |c| train(c, train_ds, test_ds)).into_iter().map(|r| r.map_err(CliError::from)).collect()
}

/// Mean and margin; a single run has margin 0.
fn summarize(xs: &[f64]) -> (f64, f64) {
    match RunSummary::from_runs(xs) {
        Ok(s) => (s.mean, s.margin),
        Err(_) => (xs.first().copied().unwrap_or(f64::NAN), 0.0),
    }
}

fn final_acc(o: &TrainOutcome) -> f64 {
    o.log.last().map_or(f64::NAN, |r| r.test.accuracy)
}

fn best_acc(o: &TrainOutcome) -> f64 {
    o.log.best().map_or(f64::NAN, |r| r.test.accuracy)
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn echo(line: &str) {
    println!("# ccloss {line}");
}

pub fn run_train(args: &TrainArgs) -> Result<(), CliError> {
    let f = &args.run;
    let mut line = format!("train {}", f.flag_line());
    if let Some(mu) = args.ttest_mu0 {
        let _ = write!(line, " --ttest-mu0 {mu}");
    }
    if f.print_config {
        println!("ccloss {line}");
        return Ok(());
    }
    echo(&line);
    f.check()?;
    let (train_ds, test_ds) = f.load_data()?;
    let config = f.train_config();
    let outcomes = run_seeds(&config, f.runs, f.parallel_runs, &train_ds, &test_ds)?;

    std::fs::create_dir_all(&f.out)?;
    for (r, o) in outcomes.iter().enumerate() {
        let dir = if f.runs == 1 { f.out.clone() } else { f.out.join(format!("run{r}")) };
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("metrics.csv"), o.log.to_csv())?;
        std::fs::write(dir.join("metrics.jsonl"), o.log.to_jsonl())?;
        checkpoint::save(&o.last, &dir.join("last.ccl"))?;
        checkpoint::save(&o.best, &dir.join("best.ccl"))?;
        std::fs::write(dir.join("config.txt"), format!("ccloss {line}\n"))?;
        let last = o.log.last().expect("at least one epoch");
        let t = last.train;
        println!(
            "run {r} seed {}: train_acc {} test_acc {} best_test_acc {} (epoch {}, optimistic) loss total {:.6} ce {:.6} intra {:.6} inter {:.6} ratio {:.6}",
            config.seed + r as u64,
            pct(last.train_acc),
            pct(last.test.accuracy),
            pct(best_acc(o)),
            o.best_epoch,
            t.total,
            t.ce,
            t.intra,
            t.inter,
            t.ratio
        );
    }
    if outcomes.len() >= 2 {
        let finals: Vec<f64> = outcomes.iter().map(final_acc).collect();
        let (m, g) = summarize(&finals);
        println!("final test accuracy over {} runs: {} ± {}", finals.len(), pct(m), pct(g));
        if let Some(mu) = args.ttest_mu0 {
            let tt = one_sample_ttest(&finals, mu)?;
            println!("one-sample t-test vs {mu}: t = {:.4}, p = {:.4e}, dof = {}", tt.t, tt.p, tt.dof);
        }
    }
    Ok(())
}

pub fn run_eval(args: &EvalArgs) -> Result<(), CliError> {
    let f = &args.run;
    let line = format!("eval {} --checkpoint {}", f.flag_line(), args.checkpoint.display());
    if f.print_config {
        println!("ccloss {line}");
        return Ok(());
    }
    echo(&line);
    f.check()?;
    let (train_ds, test_ds) = f.load_data()?;
    let mut mcfg = model_config_for(&f.train_config(), &train_ds);
    mcfg.classes = mcfg.classes.max(test_ds.class_count());
    let model = checkpoint::load::<f32>(&mcfg, &args.checkpoint)?;
    let ev = evaluate(&model, &test_ds, f.loss, EvalOptions::default())?;
    println!(
        "test_acc {} mean_intra {:.6} mean_inter {:.6} ratio {:.6}",
        pct(ev.accuracy),
        ev.mean_intra,
        ev.mean_inter,
        ev.ratio
    );
    Ok(())
}

struct AblationRow {
    key: String,
    finals: Vec<f64>,
    bests: Vec<f64>,
}

fn emit_table(title: &str, key: &str, rows: &[AblationRow], out: &Path, file: &str) -> Result<(), CliError> {
    let runs = rows.first().map_or(0, |r| r.finals.len());
    println!("{title}");
    println!("{key:>10}  {:>18}  {:>18}", "final acc (%)", "best acc (%)");
    let mut csv = format!("{key},runs,final_mean,final_margin,best_mean,best_margin");
    for r in 0..runs {
        let _ = write!(csv, ",final_run{r}");
    }
    csv.push('\n');
    for row in rows {
        let (fm, fg) = summarize(&row.finals);
        let (bm, bg) = summarize(&row.bests);
        println!("{:>10}  {:>18}  {:>18}", row.key, format!("{} ± {}", pct(fm), pct(fg)), format!("{} ± {}", pct(bm), pct(bg)));
        let _ = write!(csv, "{},{},{fm},{fg},{bm},{bg}", row.key, row.finals.len());
        for a in &row.finals {
            let _ = write!(csv, ",{a}");
        }
        csv.push('\n');
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(file), csv)?;
    Ok(())
}

pub fn run_ablate_lambda(args: &AblateLambdaArgs) -> Result<(), CliError> {
    let f = &args.run;
    let line = format!("ablate-lambda {} --lambdas {}", f.flag_line(), join(&args.lambdas));
    if f.print_config {
        println!("ccloss {line}");
        return Ok(());
    }
    echo(&line);
    if args.lambdas.len() < 2 {
        return Err(CliError::Config("need at least 2 lambda values".into()));
    }
    if let Some(l) = args.lambdas.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
        return Err(CliError::Config(format!("lambda must be >= 0, got {l}")));
    }
    f.check()?;
    let (train_ds, test_ds) = f.load_data()?;
    let mut rows = Vec::new();
    for &lambda in &args.lambdas {
        let config = TrainConfig { lambda, loss_mode: LossMode::Cc, ..f.train_config() };
        let outcomes = run_seeds(&config, f.runs, f.parallel_runs, &train_ds, &test_ds)?;
        rows.push(AblationRow {
            key: lambda.to_string(),
            finals: outcomes.iter().map(final_acc).collect(),
            bests: outcomes.iter().map(best_acc).collect(),
        });
    }
    emit_table(&format!("lambda ablation ({}, {} runs)", f.dataset, f.runs), "lambda", &rows, &f.out, "ablate_lambda.csv")
}

pub fn run_ablate_batch(args: &AblateBatchArgs) -> Result<(), CliError> {
    let f = &args.run;
    let line = format!("ablate-batch {} --batch-sizes {}", f.flag_line(), join(&args.batch_sizes));
    if f.print_config {
        println!("ccloss {line}");
        return Ok(());
    }
    echo(&line);
    let mut seen = BTreeSet::new();
    let mut sizes = Vec::new();
    for &b in &args.batch_sizes {
        if seen.insert(b) {
            sizes.push(b);
        } else {
            eprintln!("warning: duplicate batch size {b} ignored");
        }
    }
    if let Some(b) = sizes.iter().find(|&&b| b < 2) {
        return Err(CliError::Config(format!("batch sizes must be >= 2, got {b}")));
    }
    f.check()?;
    let (train_ds, test_ds) = f.load_data()?;
    if let Some(b) = sizes.iter().find(|&&b| b > train_ds.len()) {
        return Err(CliError::Config(format!("batch size {b} exceeds the {} training items", train_ds.len())));
    }
    let mut rows = Vec::new();
    for &batch_size in &sizes {
        let config = TrainConfig { batch_size, ..f.train_config() };
        let outcomes = run_seeds(&config, f.runs, f.parallel_runs, &train_ds, &test_ds)?;
        rows.push(AblationRow {
            key: batch_size.to_string(),
            finals: outcomes.iter().map(final_acc).collect(),
            bests: outcomes.iter().map(best_acc).collect(),
        });
    }
    emit_table(
        &format!("batch size ablation ({}, {}, {} runs)", f.dataset, f.loss, f.runs),
        "batch",
        &rows,
        &f.out,
        "ablate_batch.csv",
    )
}

/// Random attention-like matrix with entries in (0, 1).
pub fn random_attention(n: usize, d: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let data = (0..n * d).map(|_| rng.random_range(1e-3f32..1.0 - 1e-3)).collect();
    Tensor::new(vec![n, d], data).expect("shape matches data")
}

fn max_disagreement(a: &DistanceMatrix<f32>, b: &DistanceMatrix<f32>) -> f64 {
    a.values().max_abs_diff(b.values())
}

fn gram_checked(c: &Tensor<f32>, fault: bool) -> Result<DistanceMatrix<f32>, CliError> {
    let d = ccloss::pairwise_sq_dist_gram(c)?;
    if !fault || d.len() < 2 {
        return Ok(d);
    }
    let mut v = d.values().clone();
    v.data_mut()[1] += 1e-3;
    Ok(DistanceMatrix::from_tensor(v)?)
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn run_bench_dist(args: &BenchArgs) -> Result<(), CliError> {
    let line = format!(
        "bench-dist --n-list {} --d-list {} --reps {} --seed {} --out {}{}",
        join(&args.n_list),
        join(&args.d_list),
        args.reps,
        args.seed,
        args.out.display(),
        if args.fault_inject { " --fault-inject" } else { "" }
    );
    if args.print_config {
        println!("ccloss {line}");
        return Ok(());
    }
    echo(&line);
    if args.reps < 3 {
        return Err(CliError::Config(format!("reps must be >= 3, got {}", args.reps)));
    }
    if args.n_list.is_empty() || args.d_list.is_empty() || args.n_list.contains(&0) || args.d_list.contains(&0) {
        return Err(CliError::Config("N and D lists must be non-empty and positive".into()));
    }
    let mut cases = Vec::new();
    for (i, &n) in args.n_list.iter().enumerate() {
        for (j, &d) in args.d_list.iter().enumerate() {
            let mut rng = stream_rng(args.seed, Stream::EvalSample, 1 + (i * args.d_list.len() + j) as u64);
            cases.push((n, d, random_attention(n, d, &mut rng)));
        }
    }
    // correctness gate before any timing
    let mut worst = Vec::new();
    for (n, d, c) in &cases {
        let diff = max_disagreement(&ccloss::pairwise_sq_dist_naive(c)?, &gram_checked(c, args.fault_inject)?);
        if !(diff <= AGREEMENT_TOL) {
            return Err(CliError::Verification(format!(
                "naive and gram distances differ by {diff:e} at N={n}, D={d} (tolerance {AGREEMENT_TOL:e}); no timings reported"
            )));
        }
        worst.push(diff);
    }
    println!("{:>6} {:>6} {:>14} {:>14} {:>8} {:>10}", "N", "D", "naive (us)", "gram (us)", "speedup", "max diff");
    let mut csv = String::from("n,d,naive_median_us,gram_median_us,speedup,max_abs_diff\n");
    for ((n, d, c), diff) in cases.iter().zip(worst) {
        let mut tn = Vec::with_capacity(args.reps);
        let mut tg = Vec::with_capacity(args.reps);
        for _ in 0..args.reps {
            let t0 = Instant::now();
            std::hint::black_box(ccloss::pairwise_sq_dist_naive(std::hint::black_box(c))?);
            tn.push(t0.elapsed().as_secs_f64() * 1e6);
            let t0 = Instant::now();
            std::hint::black_box(ccloss::pairwise_sq_dist_gram(std::hint::black_box(c))?);
            tg.push(t0.elapsed().as_secs_f64() * 1e6);
        }
        let (mn, mg) = (median(&mut tn), median(&mut tg));
        let speedup = mn / mg;
        println!("{n:>6} {d:>6} {mn:>14.2} {mg:>14.2} {speedup:>8.2} {diff:>10.2e}");
        let _ = writeln!(csv, "{n},{d},{mn},{mg},{speedup},{diff}");
    }
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("bench_dist.csv"), csv)?;
    Ok(())
}

pub fn run_export_embed(args: &ExportArgs) -> Result<(), CliError> {
    let f = &args.run;
    let mut line = format!("export-embed {}", f.flag_line());
    if let Some(c) = &args.checkpoint {
        let _ = write!(line, " --checkpoint {}", c.display());
    }
    if f.print_config {
        println!("ccloss {line}");
        return Ok(());
    }
    echo(&line);
    if f.hidden_dim != 2 {
        return Err(CliError::Config(format!("embedding export needs --hidden-dim 2, got {}", f.hidden_dim)));
    }
    f.check()?;
    let (train_ds, test_ds) = f.load_data()?;
    let config = f.train_config();
    let model = match &args.checkpoint {
        Some(path) => {
            let mut mcfg = model_config_for(&config, &train_ds);
            mcfg.classes = mcfg.classes.max(test_ds.class_count());
            checkpoint::load::<f32>(&mcfg, path)?
        }
        None => train(&config, &train_ds, &test_ds)?.last,
    };
    let rows = export_embeddings(&model, &test_ds)?;
    std::fs::create_dir_all(&f.out)?;
    let path = f.out.join("embeddings.csv");
    write_embeddings(&rows, &path)?;
    let pts: Vec<(usize, [f64; 2])> = rows.iter().map(|r| (r.label, [r.x, r.y])).collect();
    println!("wrote {} rows to {}; mean intra-class radius {:.6}", rows.len(), path.display(), mean_class_radius(&pts));
    Ok(())
}

/// Mean Euclidean distance of each point to its class centroid.
pub fn mean_class_radius(points: &[(usize, [f64; 2])]) -> f64 {
    let classes = points.iter().map(|p| p.0).max().map_or(0, |m| m + 1);
    let mut sums = vec![[0.0f64; 2]; classes];
    let mut counts = vec![0usize; classes];
    for (y, p) in points {
        sums[*y][0] += p[0];
        sums[*y][1] += p[1];
        counts[*y] += 1;
    }
    let total: f64 = points
        .iter()
        .map(|(y, p)| {
            let k = counts[*y] as f64;
            ((p[0] - sums[*y][0] / k).powi(2) + (p[1] - sums[*y][1] / k).powi(2)).sqrt()
        })
        .sum();
    total / points.len().max(1) as f64
}

/// Outcome of one built-in check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Numeric self-checks: Gram agreement, schedule endpoints, a hand-sized
/// loss fixture and a full-model gradient check.
pub fn self_checks(seed: u64, fault_inject: bool) -> Result<Vec<Check>, CliError> {
    let mut checks = Vec::new();

    let mut rng = stream_rng(seed, Stream::EvalSample, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=32);
        let d = rng.random_range(1..=64);
        let c = random_attention(n, d, &mut rng);
        worst = worst.max(max_disagreement(&ccloss::pairwise_sq_dist_naive(&c)?, &gram_checked(&c, fault_inject)?));
    }
    checks.push(Check { name: "gram-agreement", passed: worst <= AGREEMENT_TOL, detail: format!("max |diff| {worst:e}") });

    let (a, b, m) = (cosine_lr(0, 1000, 0.1, 1e-5)?, cosine_lr(1000, 1000, 0.1, 1e-5)?, cosine_lr(500, 1000, 0.1, 1e-5)?);
    checks.push(Check {
        name: "cosine-endpoints",
        passed: a == 0.1 && b == 1e-5 && (m - 0.050005).abs() < 1e-12,
        detail: format!("lr(0) {a}, lr(T/2) {m}, lr(T) {b}"),
    });

    // squared distances 2, 3, 5 between rows 0-1, 0-2, 1-2 with labels [0, 0, 1]
    let d = DistanceMatrix::from_tensor(Tensor::from_rows(&[vec![0.0, 2.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 5.0, 0.0]])?)?;
    let (intra, inter) = ccloss::intra_inter(&d, &[0, 0, 1])?;
    checks.push(Check {
        name: "intra-inter-fixture",
        passed: (intra - 2.0).abs() <= 1e-9 && (inter - 8.0).abs() <= 1e-9,
        detail: format!("intra {intra}, inter {inter}"),
    });

    let cfg = ModelConfig {
        backbone: BackboneKind::Mlp,
        input: InputShape { channels: 1, height: 1, width: 6 },
        hidden_dim: 8,
        classes: 3,
        mlp_widths: vec![8],
    };
    let model = ModelParams::<f64>::init(&cfg, &mut stream_rng(seed, Stream::Init, 0))?;
    let labels = [0usize, 0, 1, 2];
    let params: Vec<Tensor<f64>> = model.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    // redraw the inputs until the sample point sits clear of every relu kink
    let mut report = None;
    for _ in 0..16 {
        let x = Tensor::new(vec![4, 1, 1, 6], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let r = finite_diff_check(
            |g, vs| {
                let vars = model.vars_from(vs).map_err(|e| TensorError::InvalidArgument(e.to_string()))?;
                let xv = g.constant(x.clone());
                let out = model.forward_cam(g, &vars, xv).map_err(|e| TensorError::InvalidArgument(e.to_string()))?;
                Ok(ccloss::cc_loss_graph(g, out.logits, out.attention, &labels, CcLossParams::default())?.total)
            },
            &params,
            1e-5,
        )?;
        let done = !r.skipped;
        report = Some(r);
        if done {
            break;
        }
    }
    let report = report.expect("at least one attempt");
    checks.push(Check {
        name: "cc-loss-gradient",
        passed: report.passes(1e-4),
        detail: format!(
            "max rel error {:e} over {} entries, kink margin {:e}{}",
            report.max_rel_error,
            report.entries_checked,
            report.kink_margin,
            if report.skipped { " (skipped: near a kink)" } else { "" }
        ),
    });

    let att = AttentionMatrix::new(Tensor::filled(&[3, 2], 0.5f64), vec![0, 1, 2], 3)?;
    let logits = Tensor::<f64>::zeros(&[3, 3]);
    let lb = ccloss::cc_loss(&logits, &att, CcLossParams::default())?;
    let ce = 3f64.ln();
    checks.push(Check {
        name: "uniform-logits",
        passed: (lb.ce - ce).abs() <= 1e-12 && lb.intra == 0.0 && lb.inter == 0.0,
        detail: format!("ce {} (ln 3 = {ce})", lb.ce),
    });
    Ok(checks)
}

pub fn run_selftest(args: &SelftestArgs) -> Result<(), CliError> {
    let line = format!("selftest --seed {}{}", args.seed, if args.fault_inject { " --fault-inject" } else { "" });
    if args.print_config {
        println!("ccloss {line}");
        return Ok(());
    }
    echo(&line);
    let checks = self_checks(args.seed, args.fault_inject)?;
    for c in &checks {
        println!("{} {:<22} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::AblateLambda(a) => run_ablate_lambda(a),
        Command::AblateBatch(a) => run_ablate_batch(a),
        Command::BenchDist(a) => run_bench_dist(a),
        Command::ExportEmbed(a) => run_export_embed(a),
        Command::Selftest(a) => run_selftest(a),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), EXIT_CONFIG);
        assert_eq!(CliError::Verification("x".into()).exit_code(), EXIT_VERIFY);
        let nan = CliError::Train(TrainError::NonFinite { epoch: 1, batch: 0, term: "ce".into() });
        assert_eq!(nan.exit_code(), EXIT_NUMERIC);
        let nested = CliError::Train(TrainError::Nn(NnError::Tensor(TensorError::NonFinite { op: "matmul" })));
        assert_eq!(nested.exit_code(), EXIT_NUMERIC);
    }

    #[test]
    fn flag_line_replays() {
        let cli = Cli::try_parse_from(["ccloss", "train", "--epochs", "3", "--lambda", "0.5", "--seed", "9"]).unwrap();
        let Command::Train(a) = &cli.command else { panic!() };
        let line = a.run.flag_line();
        let again = Cli::try_parse_from(std::iter::once("ccloss").chain(std::iter::once("train")).chain(line.split(' '))).unwrap();
        let Command::Train(b) = &again.command else { panic!() };
        assert_eq!(b.run.flag_line(), line);
        assert_eq!(b.run.train_config(), a.run.train_config());
    }

    #[test]
    fn parallel_jobs_keep_order() {
        let jobs: Vec<u64> = (0..7).collect();
        assert_eq!(run_jobs(&jobs, 3, |j| j * j), run_jobs(&jobs, 1, |j| j * j));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn class_radius() {
        let pts = [(0, [0.0, 0.0]), (0, [2.0, 0.0]), (1, [5.0, 5.0])];
        assert!((mean_class_radius(&pts) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn self_checks_pass_and_fault_is_caught() {
        assert!(self_checks(0, false).unwrap().iter().all(|c| c.passed));
        let faulty = self_checks(0, true).unwrap();
        assert!(!faulty.iter().find(|c| c.name == "gram-agreement").unwrap().passed);
    }
}
