use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use brwlab::branching::TnmSampler;
use brwlab::blocks::write_jsonl;
use brwlab::harness::{self, ExperimentConfig, FitModel, HarnessError, Result};
use brwlab::resistance::{measure_level, ResistanceRow};
use brwlab::trace::{embed, TraceGraph};
use brwlab::{rng, Site};

#[derive(Parser)]
#[command(name = "brwlab", version, about = "Branching random walk trace experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    replicates: Option<usize>,
    /// Output file; standard output by default.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    dim: Option<usize>,
    /// Comma-separated list of levels.
    #[arg(long, global = true, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    /// Comma-separated list of coarse scales.
    #[arg(long = "delta-n", global = true, value_delimiter = ',')]
    delta_n: Option<Vec<usize>>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample T(n, m) for the first configured n and write its vertex table.
    SampleTree,
    /// Sample and embed T(n, m) and write the trace edge list.
    Embed,
    /// Per-sample R(n) rows, from an edge-list file or from fresh samples.
    Resistance {
        /// Trace edge-list file; its level n is taken from --n or the top level.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Mean R(n) and Nash-Williams bound for every n.
    ScanR,
    /// Bridge-conditioned resistance gamma(n, x).
    ScanGamma {
        /// Endpoint, comma-separated; repeat for several points.
        #[arg(long = "x", allow_hyphen_values = true)]
        x: Vec<String>,
    },
    /// Intersection moments of the two-tree experiment for every delta_n.
    ScanIntersections,
    /// Fit R(n) = a n^beta or R(n) = a n (log n)^-xi to a scan-r CSV.
    Fit {
        #[arg(long)]
        input: PathBuf,
        /// power | log-correction
        #[arg(long, default_value = "power")]
        model: String,
    },
    /// Run the check suite; the exit code is 1 if any check fails.
    Check,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(r) = common.replicates {
        config.replicates = r;
    }
    if let Some(d) = common.dim {
        config.set_dim(d);
    }
    if let Some(n) = &common.n {
        config.n = n.clone();
    }
    if let Some(d) = &common.delta_n {
        config.delta_n = d.clone();
    }
    if let Some(t) = common.threads {
        config.threads = t;
    }
    if let Some(out) = &common.out {
        config.output.csv = Some(out.clone());
    }
    Ok(config)
}

fn output(config: &ExperimentConfig) -> Result<Box<dyn Write>> {
    Ok(match &config.output.csv {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn first_n(config: &ExperimentConfig) -> Result<usize> {
    config.n.first().copied().ok_or_else(|| HarnessError::Config("no n configured".into()))
}

fn parse_point(s: &str) -> Result<Vec<i32>> {
    s.split(',')
        .map(|c| c.trim().parse::<i32>().map_err(|e| HarnessError::Config(format!("bad point '{s}': {e}"))))
        .collect()
}

fn sampled_tree(config: &ExperimentConfig) -> Result<(brwlab::CondTree, rand_chacha::ChaCha8Rng)> {
    let model = config.validate()?;
    let n = first_n(config)?;
    let mut stream = rng::stream(config.seed, rng::tag(&format!("sample/n={n}")), 0);
    let tree = TnmSampler::for_law(&model.progeny, n, config.m_for(n))?.sample(&mut stream)?;
    Ok((tree, stream))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = load_config(&cli.common)?;
    match cli.command {
        Command::SampleTree => {
            let (tree, _) = sampled_tree(&config)?;
            let mut out = output(&config)?;
            harness::write_metadata(&mut out, "sample-tree", &config)?;
            writeln!(out, "# n={} m={}", tree.n(), tree.m())?;
            writeln!(out, "vertex,parent,height,edge_key")?;
            let t = tree.tree();
            for v in 0..t.len() as u32 {
                let parent = t.parent(v).map_or(String::new(), |p| p.to_string());
                writeln!(out, "{v},{parent},{},{}", t.height(v), t.edge_key(v))?;
            }
            out.flush()?;
        }
        Command::Embed => {
            let model = config.validate()?;
            let (tree, mut stream) = sampled_tree(&config)?;
            let emb = embed(&tree, &model.step, Site::ORIGIN, &mut stream);
            let mut out = output(&config)?;
            emb.trace.write_edge_list(&mut out)?;
            out.flush()?;
        }
        Command::Resistance { trace } => {
            let mut out = output(&config)?;
            harness::write_metadata(&mut out, "resistance", &config)?;
            writeln!(out, "{}", ResistanceRow::CSV_HEADER)?;
            match trace {
                Some(path) => {
                    let trace = TraceGraph::read_edge_list(BufReader::new(File::open(path)?))?;
                    let n = match &cli.common.n {
                        Some(n) => *n.first().ok_or_else(|| HarnessError::Config("empty --n".into()))?,
                        None => trace.max_level(),
                    };
                    writeln!(out, "{}", measure_level(&trace, n, &config.solver.options())?)?;
                }
                None => {
                    for &n in &config.n {
                        for (r, row) in harness::sample_resistance_rows(&config, n)?.into_iter().enumerate() {
                            match row {
                                Ok(row) => writeln!(out, "{row}")?,
                                Err(e) => eprintln!("resistance n={n}: replicate {r} failed: {e}"),
                            }
                        }
                    }
                }
            }
            out.flush()?;
        }
        Command::ScanR => {
            let scan = harness::scan_resistance(&config)?;
            let mut out = output(&config)?;
            harness::write_scan_csv(&mut out, &config, &scan.rows)?;
            out.flush()?;
            if let Some(path) = &config.output.records {
                write_jsonl(BufWriter::new(File::create(path)?), &scan.block_records)?;
            }
        }
        Command::ScanGamma { x } => {
            let xs = if x.is_empty() {
                config.gamma_x.clone()
            } else {
                x.iter().map(|s| parse_point(s)).collect::<Result<Vec<_>>>()?
            };
            let rows = harness::scan_gamma(&config, &xs)?;
            let mut out = output(&config)?;
            harness::write_gamma_csv(&mut out, &config, &rows)?;
            out.flush()?;
        }
        Command::ScanIntersections => {
            let scan = harness::scan_intersections(&config)?;
            let mut out = output(&config)?;
            harness::write_intersection_csv(&mut out, &config, &scan.rows)?;
            out.flush()?;
            if let Some(path) = &config.output.records {
                write_jsonl(BufWriter::new(File::create(path)?), &scan.records)?;
            }
            let trends = harness::moment_trends(&scan.rows);
            eprintln!("trends in log(delta_n): {}", serde_json::to_string(&trends).expect("serializable"));
        }
        Command::Fit { input, model } => {
            let model: FitModel = model.parse()?;
            let rows = harness::read_scan_csv(BufReader::new(File::open(input)?))?;
            let report = harness::fit_exponent(&rows, model)?;
            let mut out = output(&config)?;
            writeln!(out, "{}", serde_json::to_string(&report).expect("serializable"))?;
            out.flush()?;
        }
        Command::Check => {
            let results = harness::check_suite(&config);
            let mut out = output(&config)?;
            write_jsonl(&mut out, &results)?;
            out.flush()?;
            let failed = results.iter().filter(|r| !r.passed).count();
            eprintln!("check: {} passed, {failed} failed", results.len() - failed);
            if failed > 0 {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("brwlab: {e}");
            ExitCode::from(2)
        }
    }
}
