//! The `sct` command line: one seeded run per invocation, artifacts plus a manifest.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 numerical abort.
//! Configuration is fully validated before the output directory is touched, and
//! every artifact is rendered in memory first, so a failed run writes nothing.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::Array2;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint::{decode, encode, NamedShadow};
use crate::config::{hex, ExperimentConfig};
use crate::error::Error;
use crate::metrics::{
    best_row, cfg_sweep, eta_sweep, mmd_rbf, oracle_samples, sliced_wasserstein, write_metrics_csv,
    write_plot_triplets, write_sweep_csv, MetricReport,
};
use crate::mdp::{bellman_residual, OracleDenoiser};
use crate::net::{ConsistencyNet, Denoiser};
use crate::oracle::MixtureOracle;
use crate::sampler::{default_edges, sample_prior, sample_with_plan, write_samples_csv};
use crate::schedule::{Spacing, DEFAULT_SPACING};
use crate::target::{estimator_report, write_variance_csv, TargetMode};
use crate::trainer::{schedule_rows, train, write_schedule_csv, CsvSink};

/// Default output root when neither `--out` nor `out_dir` is given.
pub const OUT_ROOT_ENV: &str = "SCTLAB_OUT_ROOT";
pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.bin";

#[derive(Debug, Parser)]
#[command(name = "sct", version, about = "Consistency training on Gaussian-mixture toys")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dotted-path override, applied in order after the config file.
    #[arg(long = "set", global = true, value_name = "K=V")]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `out_dir` and the environment root.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Checkpoint to load; defaults to the one in the output directory.
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train a model; writes the checkpoint and step/eval CSVs.
    Train,
    /// Draw samples from a trained model.
    Sample,
    /// Distances between model samples, the oracle floor and data.
    Eval,
    /// Monte-Carlo error of the epsilon estimators.
    VarianceReport,
    /// Bellman residuals of the oracle and, when available, the model.
    BellmanCheck,
    /// Tabulate the r(t, iter) schedule.
    ScheduleDump,
    /// Phased sampling quality across edge-skipping factors.
    EtaSweep,
    /// One-step quality across guidance strengths.
    CfgSweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Sample => "sample",
            Command::Eval => "eval",
            Command::VarianceReport => "variance-report",
            Command::BellmanCheck => "bellman-check",
            Command::ScheduleDump => "schedule-dump",
            Command::EtaSweep => "eta-sweep",
            Command::CfgSweep => "cfg-sweep",
        }
    }
}

/// A failed run: the error plus where it happened.
#[derive(Debug)]
pub struct Failure {
    pub module: &'static str,
    pub op: &'static str,
    pub error: Error,
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match &self.error {
            e if e.is_numerical() => 3,
            Error::Io(_) => 1,
            _ => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}::{}: {}", self.module, self.op, self.error)
    }
}

trait At<T> {
    fn at(self, module: &'static str, op: &'static str) -> Result<T, Failure>;
}

impl<T, E: Into<Error>> At<T> for Result<T, E> {
    fn at(self, module: &'static str, op: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            module,
            op,
            error: e.into(),
        })
    }
}

/// What a successful run left behind.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub artifacts: Vec<String>,
    pub notes: BTreeMap<String, Value>,
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(s) => {
            for (k, v) in &s.notes {
                println!("{k}: {v}");
            }
            println!("wrote {} artifacts to {}", s.artifacts.len(), s.out_dir.display());
            0
        }
        Err(f) => {
            eprintln!("sct: error in {f}");
            f.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<RunSummary, Failure> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides).at("config", "load")?;
    let out_dir = resolve_out_dir(cli.out.as_deref(), &cfg);
    let oracle = cfg.oracle.build().at("oracle", "build")?;
    let ckpt_path = cli.checkpoint.clone().unwrap_or_else(|| out_dir.join(CHECKPOINT));
    let mut run = Run {
        cfg: &cfg,
        oracle: &oracle,
        files: Vec::new(),
        notes: BTreeMap::new(),
        checkpoint_id: None,
    };
    match cli.command {
        Command::Train => run.train()?,
        Command::Sample => run.sample(&ckpt_path)?,
        Command::Eval => run.eval(&ckpt_path)?,
        Command::VarianceReport => run.variance_report()?,
        Command::BellmanCheck => {
            let path = (cli.checkpoint.is_some() || ckpt_path.exists()).then_some(ckpt_path.as_path());
            run.bellman_check(path)?
        }
        Command::ScheduleDump => run.schedule_dump()?,
        Command::EtaSweep => run.eta_sweep(&ckpt_path)?,
        Command::CfgSweep => run.cfg_sweep(&ckpt_path)?,
    }
    run.persist(cli.command, &out_dir)
}

fn resolve_out_dir(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.out_dir {
        return p.clone();
    }
    let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(&cfg.hash()[..12])
}

struct Loaded {
    net: ConsistencyNet,
    shadows: Vec<NamedShadow>,
}

impl Loaded {
    fn shadow(&self, name: &str) -> Result<&[f64], Failure> {
        self.shadows
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.shadow.params.as_slice())
            .ok_or_else(|| Error::Config(format!("checkpoint has no `{name}` weights")))
            .at("checkpoint", "load")
    }
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    oracle: &'a MixtureOracle,
    files: Vec<(String, Vec<u8>)>,
    notes: BTreeMap<String, Value>,
    checkpoint_id: Option<String>,
}

impl Run<'_> {
    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    fn load(&mut self, path: &Path) -> Result<Loaded, Failure> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read checkpoint {}: {e}; train first or pass --checkpoint", path.display())))
            .at("checkpoint", "load")?;
        let (net, shadows) = decode(&bytes).at("checkpoint", "decode")?;
        if net.spec().dim != self.oracle.dim() {
            return Err(Error::Dimension {
                expected: self.oracle.dim(),
                got: net.spec().dim,
            })
            .at("checkpoint", "load");
        }
        self.checkpoint_id = Some(hex(&Sha256::digest(&bytes)));
        Ok(Loaded { net, shadows })
    }

    fn labels(&self, net: &ConsistencyNet, n: usize) -> Option<Vec<usize>> {
        let k = net.spec().n_classes;
        (k > 0).then(|| (0..n).map(|i| i % k).collect())
    }

    fn train(&mut self) -> Result<(), Failure> {
        let cfg = self.cfg;
        let spec = cfg.net_spec(self.oracle);
        let net = ConsistencyNet::new(spec, cfg.schedule, cfg.seed).at("net", "init")?;
        let mut sink = CsvSink::new(Vec::new(), Vec::new()).at("trainer", "report")?;
        let out = train(net, self.oracle, &cfg.schedule, &cfg.train, cfg.run.iters, cfg.run.batch_size, cfg.seed, &mut sink)
            .at("trainer", "train")?;
        let (steps, evals) = sink.into_inner();
        let mut shadows = vec![
            NamedShadow {
                name: "ema".into(),
                shadow: out.ema.clone(),
            },
            NamedShadow {
                name: "theta_star".into(),
                shadow: out.theta_star.clone(),
            },
        ];
        if let Some(t) = &out.target_ema {
            shadows.push(NamedShadow {
                name: "target_ema".into(),
                shadow: t.clone(),
            });
        }
        let ckpt = encode(&out.net, &shadows);
        self.checkpoint_id = Some(hex(&Sha256::digest(&ckpt)));
        self.add(CHECKPOINT, ckpt);
        self.add("train_steps.csv", steps);
        self.add("train_evals.csv", evals);
        let series = [
            ("sw_1step", out.evals.iter().map(|e| (e.iter as f64, e.sw_1step)).collect()),
            ("sw_2step", out.evals.iter().map(|e| (e.iter as f64, e.sw_2step)).collect()),
        ];
        let mut plot = Vec::new();
        write_plot_triplets(&mut plot, &series).at("metrics", "plot")?;
        self.add("train_plot.csv", plot);
        self.notes.insert("iters_run".into(), json!(out.iters_run));
        if let Some(last) = out.evals.last() {
            self.notes.insert("final_sw_1step".into(), json!(last.sw_1step));
        }
        Ok(())
    }

    /// Samples from the EMA weights under the configured plan.
    fn draw(&self, ld: &Loaded) -> Result<(Array2<f64>, Option<Vec<usize>>), Failure> {
        let cfg = self.cfg;
        let schedule = ld.net.schedule();
        let n = cfg.metrics.samples;
        let net = ld.net.view(ld.shadow("ema")?).at("net", "view")?;
        let star_params = match cfg.sample.guidance {
            Some(_) => Some(ld.shadow("theta_star")?),
            None => None,
        };
        let star = star_params.map(|p| ld.net.view(p)).transpose().at("net", "view")?;
        let labels = self.labels(&ld.net, n);
        let prior = sample_prior(schedule, n, ld.net.spec().dim, cfg.seed);
        let x = sample_with_plan(
            &net,
            star.as_ref().map(|s| s as &dyn Denoiser),
            schedule,
            &cfg.sample,
            prior.view(),
            labels.as_deref(),
            cfg.seed,
        )
        .at("sampler", "sample")?;
        Ok((x, labels))
    }

    fn sample(&mut self, path: &Path) -> Result<(), Failure> {
        let ld = self.load(path)?;
        let (x, labels) = self.draw(&ld)?;
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, x.view(), labels.as_deref()).at("sampler", "write")?;
        self.add("samples.csv", buf);
        Ok(())
    }

    fn eval(&mut self, path: &Path) -> Result<(), Failure> {
        let ld = self.load(path)?;
        let (x, _) = self.draw(&ld)?;
        let m = &self.cfg.metrics;
        let seed = self.cfg.seed;
        let schedule = ld.net.schedule();
        let data = self.oracle.sample_data(m.samples, None, seed).at("oracle", "sample_data")?.x;
        let prior = sample_prior(schedule, m.samples, self.oracle.dim(), seed);
        let floor = oracle_samples(self.oracle, schedule, prior.view(), m.floor_steps).at("metrics", "oracle_floor")?;
        let mut reports = Vec::new();
        for (name, set) in [("sw_model", &x), ("sw_floor", &floor)] {
            let v = sliced_wasserstein(set.view(), data.view(), m.projections, seed).at("metrics", "sliced_wasserstein")?;
            reports.push(MetricReport {
                metric: name,
                value: v,
                n_a: set.nrows(),
                n_b: data.nrows(),
                parameter: m.projections as f64,
                seed,
            });
        }
        if m.mmd {
            for (name, set) in [("mmd_model", &x), ("mmd_floor", &floor)] {
                let e = mmd_rbf(set.view(), data.view(), None, seed).at("metrics", "mmd_rbf")?;
                reports.push(MetricReport {
                    metric: name,
                    value: e.value,
                    n_a: set.nrows(),
                    n_b: data.nrows(),
                    parameter: e.bandwidth,
                    seed,
                });
            }
        }
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &reports).at("metrics", "write")?;
        self.add("metrics.csv", buf);
        for r in &reports {
            self.notes.insert(r.metric.into(), json!(r.value));
        }
        Ok(())
    }

    fn variance_report(&mut self) -> Result<(), Failure> {
        let cfg = self.cfg;
        let m = &cfg.metrics;
        let s = &cfg.schedule;
        let ts = s.grid(Spacing::LogSnr, s.t_max, s.t_min, m.variance_points.saturating_sub(1));
        let ts = &ts[..m.variance_points];
        let modes = [TargetMode::OneShot, TargetMode::VarianceReduced, TargetMode::TeacherOracle];
        let rows = estimator_report(s, self.oracle, &modes, &m.variance_n, ts, m.variance_trials, cfg.seed)
            .at("target_estimator", "estimator_report")?;
        let mut buf = Vec::new();
        write_variance_csv(&mut buf, &rows).at("target_estimator", "write")?;
        self.add("variance.csv", buf);
        Ok(())
    }

    fn bellman_check(&mut self, path: Option<&Path>) -> Result<(), Failure> {
        let cfg = self.cfg;
        let m = &cfg.metrics;
        let model = path.map(|p| self.load(p)).transpose()?;
        let oracle_den = OracleDenoiser::new(self.oracle, cfg.schedule);
        let mut buf = String::from("source,t,r,residual\n");
        for &(t, r) in &m.bellman_pairs {
            let v = bellman_residual(&oracle_den, &cfg.schedule, self.oracle, t, r, m.bellman_points, cfg.seed)
                .at("mdp_td", "bellman_residual")?;
            buf.push_str(&format!("oracle,{t:?},{r:?},{v:?}\n"));
            if let Some(ld) = &model {
                let net = ld.net.view(ld.shadow("ema")?).at("net", "view")?;
                let v = bellman_residual(&net, ld.net.schedule(), self.oracle, t, r, m.bellman_points, cfg.seed)
                    .at("mdp_td", "bellman_residual")?;
                buf.push_str(&format!("model,{t:?},{r:?},{v:?}\n"));
            }
        }
        self.add("bellman.csv", buf.into_bytes());
        Ok(())
    }

    fn schedule_dump(&mut self) -> Result<(), Failure> {
        let cfg = self.cfg;
        let s = &cfg.schedule;
        let m = &cfg.metrics;
        let ts = if m.dump_times.is_empty() {
            s.grid(DEFAULT_SPACING, s.t_max, s.t_min, 15)
        } else {
            m.dump_times.clone()
        };
        let iters = if m.dump_iters.is_empty() {
            let n = cfg.run.iters;
            let mut v = vec![0, n / 4, n / 2, 3 * n / 4, n];
            v.dedup();
            v
        } else {
            m.dump_iters.clone()
        };
        let mut buf = Vec::new();
        write_schedule_csv(&mut buf, &schedule_rows(&cfg.train, s, &ts, &iters)).at("trainer", "schedule_dump")?;
        self.add("schedule.csv", buf);
        Ok(())
    }

    fn eta_sweep(&mut self, path: &Path) -> Result<(), Failure> {
        let ld = self.load(path)?;
        let cfg = self.cfg;
        let m = &cfg.metrics;
        let schedule = *ld.net.schedule();
        let edges = match &cfg.train.edges {
            Some(e) => e.clone(),
            None => default_edges(&schedule, m.sweep_edges, Spacing::Uniform).at("sampler", "default_edges")?,
        };
        let net = ld.net.view(ld.shadow("ema")?).at("net", "view")?;
        let prior = sample_prior(&schedule, m.samples, self.oracle.dim(), cfg.seed);
        let data = self.oracle.sample_data(m.samples, None, cfg.seed).at("oracle", "sample_data")?.x;
        let rows = eta_sweep(&net, &schedule, &edges, &m.etas, prior.view(), data.view(), m.projections, cfg.seed)
            .at("eval_metrics", "eta_sweep")?;
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &rows).at("eval_metrics", "write")?;
        self.add("eta_sweep.csv", buf);
        if let Some(b) = best_row(&rows) {
            self.notes.insert("best_eta".into(), json!(b.value));
        }
        Ok(())
    }

    fn cfg_sweep(&mut self, path: &Path) -> Result<(), Failure> {
        let ld = self.load(path)?;
        let cfg = self.cfg;
        let m = &cfg.metrics;
        let schedule = *ld.net.schedule();
        let net = ld.net.view(ld.shadow("ema")?).at("net", "view")?;
        let star = ld.net.view(ld.shadow("theta_star")?).at("net", "view")?;
        let labels = self.labels(&ld.net, m.samples);
        let prior = sample_prior(&schedule, m.samples, self.oracle.dim(), cfg.seed);
        let data = self.oracle.sample_data(m.samples, None, cfg.seed).at("oracle", "sample_data")?.x;
        let rows = cfg_sweep(
            &net,
            &star,
            &schedule,
            &m.omegas,
            prior.view(),
            labels.as_deref(),
            data.view(),
            m.projections,
            cfg.seed,
        )
        .at("eval_metrics", "cfg_sweep")?;
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &rows).at("eval_metrics", "write")?;
        self.add("cfg_sweep.csv", buf);
        if let Some(b) = best_row(&rows) {
            self.notes.insert("best_omega".into(), json!(b.value));
        }
        Ok(())
    }

    /// Writes the artifacts and merges this run into the directory manifest.
    fn persist(self, command: Command, out_dir: &Path) -> Result<RunSummary, Failure> {
        std::fs::create_dir_all(out_dir).at("cli", "create_out_dir")?;
        let mut artifacts = BTreeMap::new();
        for (name, bytes) in &self.files {
            std::fs::write(out_dir.join(name), bytes).at("cli", "write_artifact")?;
            artifacts.insert(name.clone(), hex(&Sha256::digest(bytes)));
        }
        let manifest_path = out_dir.join(MANIFEST);
        let mut manifest = std::fs::read(&manifest_path)
            .ok()
            .and_then(|b| serde_json::from_slice::<Value>(&b).ok())
            .filter(Value::is_object)
            .unwrap_or_else(|| json!({}));
        let entry = json!({
            "config_sha256": self.cfg.hash(),
            "seed": self.cfg.seed,
            "code_version": env!("CARGO_PKG_VERSION"),
            "config": serde_json::to_value(self.cfg).expect("config serializes"),
            "checkpoint_sha256": self.checkpoint_id,
            "artifacts": artifacts,
            "notes": self.notes,
        });
        manifest["code_version"] = json!(env!("CARGO_PKG_VERSION"));
        if !manifest["runs"].is_object() {
            manifest["runs"] = json!({});
        }
        manifest["runs"][command.name()] = entry;
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        std::fs::write(&manifest_path, text).at("cli", "write_manifest")?;
        let mut names: Vec<String> = self.files.into_iter().map(|(n, _)| n).collect();
        names.push(MANIFEST.into());
        Ok(RunSummary {
            out_dir: out_dir.to_path_buf(),
            artifacts: names,
            notes: self.notes,
        })
    }
}
