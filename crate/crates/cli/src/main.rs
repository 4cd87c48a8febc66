use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pqkv_cli::analyze::{cmd_sensitivity, cmd_stats};
use pqkv_cli::bench::cmd_bench;
use pqkv_cli::breakdown::cmd_breakdown;
use pqkv_cli::config::FileConfig;
use pqkv_cli::synth::cmd_synth;
use pqkv_cli::train::cmd_train;
use pqkv_cli::verify::cmd_verify;
use pqkv_cli::{CliError, Result};
use tracing::error;
use tracing_subscriber::EnvFilter;

#[derive(Parser, Debug)]
#[command(name = "pqkv", version, about = "Product-quantized KV cache toolkit")]
struct Cli {
    /// TOML file with optional [synth], [train], [verify], [bench],
    /// [breakdown], [sensitivity] and [stats] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every command's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// More logging (-v info, -vv debug); RUST_LOG wins when set.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic key/value tensors.
    Synth(SynthArgs),
    /// Train key/value codebooks.
    Train(TrainArgs),
    /// Replay decoding against the brute-force oracle.
    Verify(VerifyArgs),
    /// Time fp16 and PQ decode loops across context lengths.
    Bench(BenchArgs),
    /// Per-phase decode timings, async vs synchronous flushing.
    Breakdown(BreakdownArgs),
    /// Outlier sensitivity of PQ and integer quantization.
    Sensitivity(SensitivityArgs),
    /// Per-channel statistics and outlier channels.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    n_tokens: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    sigma: Option<f32>,
    #[arg(long, value_delimiter = ',')]
    outlier_channels: Option<Vec<usize>>,
    #[arg(long)]
    outlier_scale: Option<f32>,
    #[arg(long)]
    outlier_shift: Option<f32>,
    #[arg(long)]
    spike_rate: Option<f64>,
    #[arg(long)]
    spike_magnitude: Option<f32>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    keys: Option<PathBuf>,
    #[arg(long)]
    values: Option<PathBuf>,
    /// m64b8 or m32b12.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    nbits: Option<u32>,
    #[arg(long)]
    kmeans_iters: Option<usize>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    keys: Option<PathBuf>,
    #[arg(long)]
    values: Option<PathBuf>,
    #[arg(long)]
    key_codebook: Option<PathBuf>,
    #[arg(long)]
    value_codebook: Option<PathBuf>,
    /// Cache dump to replay from.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Recent-buffer sizes to replay, comma separated.
    #[arg(long, value_delimiter = ',')]
    recent: Option<Vec<usize>>,
    #[arg(long)]
    flush: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    contexts: Option<Vec<usize>>,
    #[arg(long)]
    gen_tokens: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    recent: Option<usize>,
    #[arg(long)]
    flush: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Threads for block-parallel scoring.
    #[arg(long)]
    threads: Option<usize>,
    /// Quantize flushed batches inline instead of on the worker.
    #[arg(long)]
    sync: bool,
}

#[derive(Args, Debug)]
struct BreakdownArgs {
    #[arg(long)]
    context: Option<usize>,
    #[arg(long)]
    gen_tokens: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    recent: Option<usize>,
    #[arg(long)]
    flush: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
}

#[derive(Args, Debug)]
struct SensitivityArgs {
    /// Key tensor; synthetic heavy keys when omitted.
    #[arg(long)]
    keys: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    int_nbits: Option<u32>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    input: Option<PathBuf>,
    #[arg(long)]
    outlier_k: Option<f64>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_some<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut fc = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    if let Some(seed) = cli.seed {
        fc.set_seed(seed);
    }
    let out = cli.out.as_path();
    match cli.cmd {
        Command::Synth(a) => {
            let s = &mut fc.synth;
            set(&mut s.n_tokens, a.n_tokens);
            set(&mut s.d, a.d);
            set(&mut s.sigma, a.sigma);
            set(&mut s.outlier_channels, a.outlier_channels);
            set(&mut s.outlier_scale, a.outlier_scale);
            set(&mut s.outlier_shift, a.outlier_shift);
            set(&mut s.spike_rate, a.spike_rate);
            set(&mut s.spike_magnitude, a.spike_magnitude);
            let (k, v) = cmd_synth(s, out)?;
            println!("wrote {} and {}", k.display(), v.display());
        }
        Command::Train(a) => {
            let t = &mut fc.train;
            set_some(&mut t.keys, a.keys);
            set_some(&mut t.values, a.values);
            set(&mut t.preset, a.preset);
            set_some(&mut t.m, a.m);
            set_some(&mut t.nbits, a.nbits);
            set(&mut t.kmeans_iters, a.kmeans_iters);
            let s = cmd_train(t, out)?;
            println!("M={} nbits={} bits_per_value={}", s.m, s.nbits, s.bits_per_value);
            for (label, rep) in [("keys", &s.keys), ("values", &s.values)] {
                let dist: Vec<String> = rep.subspace_distortion.iter().map(|x| format!("{x:.4e}")).collect();
                println!("{label} distortion per subspace: [{}]", dist.join(", "));
            }
        }
        Command::Verify(a) => {
            let v = &mut fc.verify;
            set_some(&mut v.keys, a.keys);
            set_some(&mut v.values, a.values);
            set_some(&mut v.key_codebook, a.key_codebook);
            set_some(&mut v.value_codebook, a.value_codebook);
            set_some(&mut v.cache, a.cache);
            set(&mut v.preset, a.preset);
            set(&mut v.recent, a.recent);
            set(&mut v.flush, a.flush);
            set(&mut v.tolerance, a.tolerance);
            set(&mut v.max_steps, a.max_steps);
            let r = cmd_verify(v, out)?;
            for run in &r.runs {
                println!(
                    "R={} steps={} max_rel_err={:.3e} {}",
                    run.recent,
                    run.steps,
                    run.max_rel_err,
                    if run.pass { "pass" } else { "FAIL" }
                );
            }
        }
        Command::Bench(a) => {
            let b = &mut fc.bench;
            set(&mut b.contexts, a.contexts);
            set(&mut b.gen_tokens, a.gen_tokens);
            set(&mut b.heads, a.heads);
            set(&mut b.preset, a.preset);
            set(&mut b.recent, a.recent);
            set(&mut b.flush, a.flush);
            set(&mut b.repetitions, a.repetitions);
            set(&mut b.warmup, a.warmup);
            set(&mut b.threads, a.threads);
            if a.sync {
                b.async_flush = false;
            }
            for r in cmd_bench(b, out)? {
                println!(
                    "{:>6} fp {:8.3} ms  pq {:8.3} ms  speedup {:.3}  bytes pq/fp {:.4}",
                    r.context_len,
                    r.tpot_ms_fp,
                    r.tpot_ms_pq,
                    r.speedup,
                    r.bytes_ratio()
                );
            }
        }
        Command::Breakdown(a) => {
            let b = &mut fc.breakdown;
            set(&mut b.context, a.context);
            set(&mut b.gen_tokens, a.gen_tokens);
            set(&mut b.heads, a.heads);
            set(&mut b.recent, a.recent);
            set(&mut b.flush, a.flush);
            set(&mut b.repetitions, a.repetitions);
            for r in cmd_breakdown(b, out)? {
                println!(
                    "{:<5} step {:.3} ms (cpu {:.3})  score {:.3}  value_agg {:.3}  lut {:.3}  dense {:.3}  flush_wait {:.4}",
                    r.mode, r.step_wall, r.step_cpu, r.score, r.value_agg, r.lut_build, r.dense, r.flush_wait
                );
            }
        }
        Command::Sensitivity(a) => {
            let s = &mut fc.sensitivity;
            set_some(&mut s.keys, a.keys);
            set(&mut s.preset, a.preset);
            set(&mut s.fraction, a.fraction);
            set_some(&mut s.int_nbits, a.int_nbits);
            let r = cmd_sensitivity(s, out)?;
            println!(
                "{}: {:.4}  {}: {:.4}",
                r.pq.scheme, r.pq.sensitivity, r.int.scheme, r.int.sensitivity
            );
        }
        Command::Stats(a) => {
            let s = &mut fc.stats;
            set_some(&mut s.input, a.input);
            set(&mut s.outlier_k, a.outlier_k);
            let st = cmd_stats(s, out)?;
            println!("outlier channels: {:?}", st.outlier_channels);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::VerifyFailed { .. }) => {
            error!("{e}");
            ExitCode::from(1)
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(2)
        }
    }
}
