mod bench;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bcq_core::planner::{quantize_model, FrequencyTable, Group, PrecisionPlan};
use bcq_core::toynmt::{
    multiphase_retrain, phase_plans, sensitivity_sweep, train_dense, SyntheticTask, Task, ToyModel, ToyModelConfig,
    TrainOptions, TrainSchedule,
};
use bcq_core::{model_size, Checkpoint, Tensor};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bcq", version, about = "Binary-code quantization of transformer checkpoints")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "BCQ_SEED", default_value_t = 0)]
    seed: u64,

    /// Worker threads for row-parallel quantization.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a dense checkpoint according to a precision plan.
    Quantize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        /// Token frequencies, `id<TAB>count` per line.
        #[arg(long)]
        freq: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time dense and packed matrix-vector products on random data.
    Bench {
        #[arg(long, default_value_t = 512)]
        rows: usize,
        #[arg(long, default_value_t = 512)]
        cols: usize,
        #[arg(long, default_value_t = 2)]
        q: usize,
        #[arg(long, default_value_t = 8)]
        mu: usize,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
    },
    /// Per-group sensitivity of a trained toy model, as CSV.
    Sweep {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "copy")]
        task: Task,
        #[arg(long, default_value_t = 64)]
        eval_size: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        bits: Vec<u8>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a toy model, then retrain it quantized in phases.
    TrainToy(TrainToyArgs),
    /// Write a randomly initialised toy checkpoint.
    InitToy {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Print checkpoint metadata and per-tensor bit statistics.
    Inspect { path: PathBuf },
    /// Size accounting of a plan without any weights.
    Size { #[arg(long)] plan: PathBuf },
}

#[derive(Args, Clone, Copy)]
struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 256)]
    d_ffn: usize,
    #[arg(long, default_value_t = 2)]
    enc_layers: usize,
    #[arg(long, default_value_t = 2)]
    dec_layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 16)]
    max_len: usize,
}

impl ModelArgs {
    fn config(&self) -> ToyModelConfig {
        ToyModelConfig {
            d_model: self.d_model,
            d_ffn: self.d_ffn,
            n_layers_enc: self.enc_layers,
            n_layers_dec: self.dec_layers,
            n_heads: self.heads,
            vocab: self.vocab,
            max_len: self.max_len,
        }
    }
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 3)]
    phases: usize,
    #[arg(long, default_value = "copy")]
    task: Task,
    /// Start from this dense checkpoint instead of training one.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Precision plan of the last phase; uniform `--bits` when absent.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    bits: u8,
    #[arg(long, default_value_t = 1500)]
    dense_steps: usize,
    #[arg(long, default_value_t = 2.5e-3)]
    dense_c_lr: f64,
    #[arg(long, default_value_t = 100)]
    dense_peak: usize,
    #[arg(long, default_value_t = 6000)]
    retrain_steps: usize,
    #[arg(long, default_value_t = 300)]
    pnr: usize,
    /// Plateau learning rate of retraining.
    #[arg(long, default_value_t = 2e-3)]
    retrain_lr: f64,
    /// Updates before the learning rate starts to decay; never when absent.
    #[arg(long)]
    retrain_peak: Option<usize>,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 64)]
    eval_size: usize,
    #[command(flatten)]
    model: ModelArgs,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .context("starting worker threads")?;
    match cli.command {
        Command::Quantize { input, plan, freq, out } => quantize(&input, &plan, freq.as_deref(), &out),
        Command::Bench { rows, cols, q, mu, iters, warmup } => {
            bench_cmd(&bench::BenchConfig { rows, cols, q, mu, iters, warmup, seed: cli.seed })
        }
        Command::Sweep { input, task, eval_size, bits, out } => sweep(&input, task, eval_size, &bits, out.as_deref(), cli.seed),
        Command::TrainToy(args) => train_toy(&args, cli.seed),
        Command::InitToy { out, model } => {
            let m = ToyModel::new(model.config(), cli.seed)?;
            let n = m.to_checkpoint(&[]).write(&out)?;
            println!("wrote {} ({n} bytes)", out.display());
            Ok(())
        }
        Command::Inspect { path } => inspect(&path),
        Command::Size { plan } => {
            let plan = read_plan(&plan)?;
            print_size(&plan);
            Ok(())
        }
    }
}

fn read_plan(path: &Path) -> Result<PrecisionPlan> {
    let text = fs::read_to_string(path).with_context(|| format!("reading plan {}", path.display()))?;
    PrecisionPlan::from_json(&text).with_context(|| format!("plan {}", path.display()))
}

fn print_size(plan: &PrecisionPlan) {
    match model_size(plan) {
        Ok(s) => {
            println!(
                "average bits: embedding {:.4}, encoder {:.4}, decoder {:.4}",
                s.embedding_bits, s.encoder_bits, s.decoder_bits
            );
            println!(
                "average bits: quantized weights {:.4}, whole model {:.4}",
                s.avg_bits, s.whole_model_avg_bits
            );
            println!("size: dense {} bytes, quantized {} bytes, ratio {:.4}", s.dense_bytes, s.quantized_bytes, s.ratio);
        }
        Err(e) => println!("size: unavailable ({e})"),
    }
}

fn quantize(input: &Path, plan_path: &Path, freq: Option<&Path>, out: &Path) -> Result<()> {
    let plan = read_plan(plan_path)?;
    let ck = Checkpoint::read(input).with_context(|| format!("reading {}", input.display()))?;
    let freq = match freq {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(FrequencyTable::from_tsv(&text, plan.model.vocab)?)
        }
        None => None,
    };
    let tensors = quantize_model(&ck.tensors, &plan, freq.as_ref())?;
    let mut result = Checkpoint::new(tensors);
    result.attributes = ck.attributes.clone();
    let written = result.write(out)?;
    let before = fs::metadata(input)?.len();
    print_size(&plan);
    println!("file: {} bytes -> {} bytes ({})", before, written, out.display());
    Ok(())
}

fn bench_cmd(c: &bench::BenchConfig) -> Result<()> {
    let o = bench::run(c)?;
    println!(
        "weights: dense {} bytes, quantized {} bytes, {:.1}x smaller",
        o.dense_weight_bytes,
        o.quantized_weight_bytes,
        o.dense_weight_bytes as f64 / o.quantized_weight_bytes as f64
    );
    println!("{:<12} {:>6} {:>6} {:>2} {:>3} {:>6} {:>12} {:>10} {:>8}", "kernel", "rows", "cols", "q", "mu", "iters", "median_us", "bytes", "speedup");
    for r in &o.reports {
        println!(
            "{:<12} {:>6} {:>6} {:>2} {:>3} {:>6} {:>12.2} {:>10} {:>7.2}x",
            r.kernel,
            r.rows,
            r.cols,
            r.q,
            r.mu,
            r.iters,
            r.median_ns / 1e3,
            r.bytes_touched,
            r.speedup
        );
    }
    Ok(())
}

fn load_toy(path: &Path) -> Result<ToyModel> {
    let ck = Checkpoint::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ToyModel::from_checkpoint(&ck)?)
}

fn task_for(task: Task, config: &ToyModelConfig) -> SyntheticTask {
    let mut t = SyntheticTask::new(task, config.vocab);
    t.max_len = t.max_len.min(config.max_len - 1);
    t.min_len = t.min_len.min(t.max_len);
    t
}

fn sweep(input: &Path, task: Task, eval_size: usize, bits: &[u8], out: Option<&Path>, seed: u64) -> Result<()> {
    let model = load_toy(input)?;
    let eval = task_for(task, model.config()).eval_set(seed, eval_size);
    let table = sensitivity_sweep(&model, &Group::ALL, bits, &eval)?;
    let csv = table.to_csv()?;
    match out {
        Some(p) => fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    eprintln!("baseline eval cross-entropy {:.4}", table.baseline);
    for g in Group::ALL {
        if let Some(d) = table.average_degradation(g) {
            eprintln!("{g:<10} average degradation {d:+.4}");
        }
    }
    Ok(())
}

fn train_toy(a: &TrainToyArgs, seed: u64) -> Result<()> {
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut model = match &a.init {
        Some(p) => load_toy(p)?,
        None => ToyModel::new(a.model.config(), seed)?,
    };
    let task = task_for(a.task, model.config());
    let eval = task.eval_set(seed, a.eval_size);
    let opts = TrainOptions { batch_size: a.batch, seed };

    if a.init.is_none() {
        let sched = TrainSchedule {
            pnr: 1,
            total_steps: a.dense_steps,
            c_lr: a.dense_c_lr,
            steps_peak: a.dense_peak,
            ..Default::default()
        };
        let history = train_dense(&mut model, &task, &sched, &opts)?;
        fs::write(a.out_dir.join("dense_history.csv"), history.to_csv()?)?;
        model.to_checkpoint(&[]).write(a.out_dir.join("dense.bcq"))?;
    }
    let dense_loss = model.eval_loss(&eval)?;
    println!("dense eval cross-entropy {dense_loss:.4}");

    let target = match &a.plan {
        Some(p) => read_plan(p)?,
        None => PrecisionPlan::uniform(model.dims(), a.bits),
    };
    if target.embedding_clusters().is_some() {
        bail!("train-toy quantizes the embedding uniformly; use a plan without embedding clusters");
    }
    let plans = phase_plans(&target, a.phases)?;
    let peak = a.retrain_peak.unwrap_or(a.retrain_steps).max(1);
    let sched = TrainSchedule::with_plateau(a.retrain_lr, peak, a.retrain_steps, a.pnr, model.config().d_model);
    let mut baseline = model.clone();
    baseline.project(&target, None)?;
    println!("quantized without retraining: eval cross-entropy {:.4}", baseline.eval_loss(&eval)?);

    let outcomes = multiphase_retrain(&model, &plans, &sched, &task, &TrainOptions { seed: seed + 1, ..opts }, None)?;
    for (i, o) in outcomes.iter().enumerate() {
        let n = i + 1;
        let path = a.out_dir.join(format!("phase{n}.bcq"));
        let bytes = o.checkpoint().write(&path)?;
        fs::write(a.out_dir.join(format!("phase{n}_history.csv")), o.history.to_csv()?)?;
        let groups: Vec<String> = plans[i].quantized_groups().iter().map(|g| g.to_string()).collect();
        println!(
            "phase {n} [{}]: eval cross-entropy {:.4}, {} projections, {} ({bytes} bytes)",
            groups.join(","),
            o.quantized_model().eval_loss(&eval)?,
            o.projections.len(),
            path.display()
        );
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let ck = Checkpoint::read(path).with_context(|| format!("reading {}", path.display()))?;
    let size = fs::metadata(path)?.len();
    println!("{}: {} tensors, {size} bytes", path.display(), ck.tensors.len());
    for (k, v) in &ck.attributes {
        println!("attribute {k} = {v}");
    }
    let mut dense_params = 0usize;
    let mut quantized_params = 0usize;
    let mut quantized_bits = 0.0;
    for t in &ck.tensors {
        let (rows, cols) = t.shape();
        match t {
            Tensor::Dense(_) => {
                dense_params += rows * cols;
                println!("{:<32} dense     {rows}x{cols}  {} bytes", t.name(), t.payload_len());
            }
            Tensor::Quantized(q) => {
                quantized_params += rows * cols;
                quantized_bits += q.average_bits() * (rows * cols) as f64;
                let mut start = 0;
                let clusters: Vec<String> = q
                    .clusters
                    .iter()
                    .map(|c| {
                        let s = format!("rows {start}..{}@{}b", start + c.rows, c.bits);
                        start += c.rows;
                        s
                    })
                    .collect();
                println!(
                    "{:<32} quantized {rows}x{cols}  {} bytes  avg {:.4} bits  clusters [{}]{}",
                    t.name(),
                    t.payload_len(),
                    q.average_bits(),
                    clusters.join(", "),
                    if q.row_order.is_some() { "  frequency-ordered rows" } else { "" }
                );
            }
        }
    }
    if quantized_params > 0 {
        println!(
            "quantized weights average {:.4} bits; whole checkpoint average {:.4} bits",
            quantized_bits / quantized_params as f64,
            (quantized_bits + 32.0 * dense_params as f64) / (quantized_params + dense_params) as f64
        );
    }
    Ok(())
}
