use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use qpone::legacy::generate_query;
use qpone::metrics::{composite_reward, corpus_scores};
use qpone::pipeline::{self, Config, ErrorKind, Layout, PipelineError};
use qpone::policy::Policy;
use qpone::rng;
use qpone::schema::{parse_output, serialize_output, QPOutput};
use qpone::serving::{read_miss_log, serve, serving_example, SnapshotStore};

#[derive(Parser)]
#[command(name = "qpone", version, about = "Unified generative query processing: data, training, evaluation, serving")]
struct Cli {
    /// TOML (or .json) config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the default config as TOML.
    InitConfig {
        #[arg(long, default_value = "qpone.toml")]
        path: PathBuf,
    },
    /// Generate the unified, logged-query and golden corpora.
    GenData,
    /// Pseudo-label logged queries with the legacy pipeline.
    PseudoLabel,
    Train {
        #[arg(value_enum)]
        stage: Stage,
    },
    /// Screen pool examples for GRPO with the stage-2 policy.
    Filter,
    /// Score every stage on the golden set, or score a file of
    /// `{"pred": .., "gold": ..}` lines.
    Eval {
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Where to write the JSON report (stdout when omitted).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Build a snapshot from the stage-3 policy.
    Precompute {
        /// Earlier misses to include.
        #[arg(long)]
        miss_log: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        version: u64,
    },
    /// Serve lookups over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[arg(long)]
        snapshot: Option<PathBuf>,
        #[arg(long, value_enum)]
        fallback: Option<Toggle>,
        #[arg(long)]
        miss_log: Option<PathBuf>,
    },
    /// Throughput of metric computation and policy rollouts.
    Bench {
        #[arg(long, default_value_t = 2000)]
        n: usize,
    },
    /// Whole pipeline from one seed; writes manifest.json.
    Repro,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Stage1,
    Stage2,
    Stage3,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

/// Error tagged with the process exit code.
#[derive(Debug)]
struct Exit {
    code: u8,
    msg: String,
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Exit {}

const CONFIG: u8 = 2;
const DATA: u8 = 3;
const SERVING: u8 = 5;

fn exit(code: u8, msg: impl fmt::Display) -> anyhow::Error {
    Exit { code, msg: msg.to_string() }.into()
}

fn stage_err(e: PipelineError) -> anyhow::Error {
    let code = match e.kind {
        ErrorKind::Config => CONFIG,
        ErrorKind::Data => DATA,
        ErrorKind::Training => 4,
        ErrorKind::Serving => SERVING,
    };
    exit(code, e)
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(|e| exit(CONFIG, e))?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.check().map_err(|e| exit(CONFIG, e))?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<Exit>().map_or(DATA, |x| x.code);
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Cmd::InitConfig { path } = &cli.cmd {
        std::fs::write(path, Config::default().to_toml()).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
        return Ok(());
    }
    let cfg = load_config(cli)?;
    let lay = Layout::new(&cli.out);
    match &cli.cmd {
        Cmd::InitConfig { .. } => unreachable!(),
        Cmd::GenData => {
            let c = pipeline::gen_data(&cfg, &lay).map_err(stage_err)?;
            println!("unified {} qlog {} golden {}", c.unified.len(), c.qlog.len(), c.golden.len());
        }
        Cmd::PseudoLabel => {
            let (_, r) = pipeline::pseudo_label(&cfg, &lay).map_err(stage_err)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Cmd::Train { stage } => {
            let logs = match stage {
                Stage::Stage1 => pipeline::train_stage1(&cfg, &lay),
                Stage::Stage2 => pipeline::train_stage2(&cfg, &lay),
                Stage::Stage3 => pipeline::train_stage3(&cfg, &lay),
            }
            .map_err(stage_err)?;
            if let Some(l) = logs.last() {
                println!("{}", serde_json::to_string(l)?);
            }
        }
        Cmd::Filter => {
            let (_, r) = pipeline::filter(&cfg, &lay).map_err(stage_err)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Cmd::Eval { pairs, report } => {
            let json = match pairs {
                Some(p) => eval_pairs(&cfg, p)?,
                None => {
                    let s = pipeline::evaluate(&cfg, &lay).map_err(stage_err)?;
                    for (name, sys) in &s.systems {
                        eprintln!("== {name} (parse rate {:.1}%)\n{}", 100.0 * sys.parse_rate, sys.scores.table());
                    }
                    serde_json::to_string_pretty(&s)?
                }
            };
            match report {
                Some(path) => std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?,
                None => println!("{json}"),
            }
        }
        Cmd::Precompute { miss_log, version } => {
            let extra = match miss_log {
                Some(p) => read_miss_log(p, cfg.serving.lowercase).map_err(|e| exit(DATA, format!("{}: {e}", p.display())))?,
                None => vec![],
            };
            let r = pipeline::precompute_snapshot(&cfg, &lay, &extra, *version).map_err(stage_err)?;
            println!(
                "snapshot v{} with {} entries, {:.2}% fallback -> {}",
                r.version,
                r.entries,
                100.0 * r.fallback_fraction,
                lay.snapshot().display()
            );
        }
        Cmd::Serve { bind, snapshot, fallback, miss_log } => {
            let use_fallback = match fallback {
                Some(Toggle::On) => true,
                Some(Toggle::Off) => false,
                None => cfg.serving.fallback,
            };
            serve_cmd(&cfg, bind, snapshot.as_deref(), use_fallback, miss_log.as_deref())?;
        }
        Cmd::Bench { n } => bench(&cfg, &lay, *n)?,
        Cmd::Repro => {
            let m = pipeline::repro(&cfg, &lay, |stage, secs| log::info!("{stage}: {secs:.1}s")).map_err(stage_err)?;
            for (name, sys) in &m.summary.systems {
                eprintln!("== {name} (parse rate {:.1}%)\n{}", 100.0 * sys.parse_rate, sys.scores.table());
            }
            let h = &m.summary.heldout;
            eprintln!(
                "held-out slice: {} examples, reward stage2 {:.4} stage3 {:.4} (gain {:+.4})",
                h.filter.retained, h.stage2_reward, h.stage3_reward, h.gain
            );
            println!("manifest {} hash {}", lay.manifest().display(), m.hash);
        }
    }
    Ok(())
}

fn eval_pairs(cfg: &Config, path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| exit(DATA, format!("{}: {e}", path.display())))?;
    let schema = pipeline::schema_of(cfg);
    let mut preds: Vec<Option<QPOutput>> = Vec::new();
    let mut golds: Vec<QPOutput> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |m: String| exit(DATA, format!("{}:{}: {m}", path.display(), i + 1));
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let gold: QPOutput = serde_json::from_value(v.get("gold").cloned().ok_or_else(|| bad("missing `gold`".into()))?)
            .map_err(|e| bad(e.to_string()))?;
        let query = gold.segmented_query();
        let pred = match v.get("pred") {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::String(s)) => parse_output(s, &query, &schema).ok(),
            Some(other) => parse_output(&other.to_string(), &query, &schema).ok(),
        };
        preds.push(pred);
        golds.push(gold);
    }
    let pairs: Vec<(Option<&QPOutput>, &QPOutput)> = preds.iter().map(Option::as_ref).zip(&golds).collect();
    let scores = corpus_scores(&pairs).map_err(|e| exit(DATA, e))?;
    eprintln!("{}", scores.table());
    Ok(serde_json::to_string_pretty(&scores)?)
}

fn serve_cmd(cfg: &Config, bind: &str, snapshot: Option<&Path>, fallback: bool, miss_log: Option<&Path>) -> Result<()> {
    let schema = pipeline::schema_of(cfg);
    let legacy = if fallback { Some(pipeline::legacy_pipeline(cfg).map_err(|e| exit(CONFIG, e))?) } else { None };
    let store = SnapshotStore::new(legacy, cfg.serving.lowercase, miss_log).map_err(|e| exit(SERVING, e))?;
    if let Some(p) = snapshot {
        store.refresh(p, &schema).map_err(|e| exit(SERVING, format!("{}: {e}", p.display())))?;
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| exit(SERVING, e))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(bind).await.map_err(|e| exit(SERVING, format!("bind {bind}: {e}")))?;
        log::info!("listening on {}", listener.local_addr().map_err(|e| exit(SERVING, e))?);
        serve(listener, Arc::new(store), schema).await.map_err(|e| exit(SERVING, e))
    })
}

fn bench(cfg: &Config, lay: &Layout, n: usize) -> Result<()> {
    let schema = pipeline::schema_of(cfg);
    let mut r = rng::stream(cfg.seed, "bench", &[]);
    let pairs: Vec<(String, QPOutput)> = (0..n.max(1)).map(|_| generate_query(&mut r, &cfg.profile, None)).collect();
    let golds: Vec<qpone::schema::AnnotatedExample> = pairs
        .iter()
        .enumerate()
        .map(|(i, (q, g))| {
            let mut ex = serving_example(q, &cfg.instruction, &cfg.rules);
            ex.id = i as u64;
            ex.gold = g.clone();
            ex
        })
        .collect();
    let texts: Vec<String> = pairs.iter().map(|(_, g)| serialize_output(g).expect("generated output is valid")).collect();
    let t = Instant::now();
    let mut acc = 0.0;
    for (text, ex) in texts.iter().zip(&golds) {
        acc += composite_reward(text, ex, &cfg.train.weights, &schema, &cfg.train.band).total;
    }
    let secs = t.elapsed().as_secs_f64();
    println!("composite reward: {:.0} examples/s (mean {:.3})", texts.len() as f64 / secs, acc / texts.len() as f64);

    let policy = match Policy::load(&lay.checkpoint("stage3")) {
        Ok(p) => p,
        Err(_) => {
            let vocab = pipeline::build_vocab(cfg, &schema, &golds.iter().collect::<Vec<_>>());
            Policy::new(cfg.policy.clone(), vocab, &mut rng::stream(cfg.seed, "policy-init", &[])).map_err(|e| anyhow!(e))?
        }
    };
    let env = pipeline::task_env(cfg);
    let k = n.clamp(1, 64);
    let t = Instant::now();
    let mut tokens = 0usize;
    for ex in golds.iter().take(k) {
        let prompt = env.prompt_ids(ex, &policy.vocab).map_err(|e| exit(DATA, e))?;
        tokens += policy.sample(&prompt, 1.0, env.max_gen_len, &mut r).map_err(|e| anyhow!(e))?.gen_ids.len();
    }
    let secs = t.elapsed().as_secs_f64();
    println!("rollouts: {:.1} rollouts/s, {:.0} tokens/s", k as f64 / secs, tokens as f64 / secs);
    Ok(())
}
