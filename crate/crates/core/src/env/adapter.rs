//! Environment backed by a real system driven through shell commands.
//!
//! ```toml
//! catalog_file = "mysql.toml"
//!
//! [adapter]
//! apply = "sudo ./apply.sh {config_path}"
//! benchmark = "./bench.sh"
//! collect = "./collect.sh > {metrics_path}"
//! perf_regex = 'throughput: ([0-9.]+)'
//! metrics_path = "/tmp/metrics.txt"
//! timeout_secs = 600
//! latency = false        # true: the regex captures a latency, perf = 1/latency
//!
//! [workload]
//! read = 0.6
//! update = 0.1
//! insert = 0.1
//! scan = 0.2
//!
//! [[metric]]
//! name = "cpu_util"
//! min = 0.0
//! max = 1.0
//! ```
//!
//! The three commands run in order, one evaluation at a time. The applied
//! configuration is written as flat `name = value` lines to `{config_path}`.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::Deserialize;

use super::{
    check_config, EnvError, Environment, Evaluation, MetricDef, MetricSchema, MetricsSnapshot,
    RuleTable, WorkloadMix,
};
use crate::catalog::{Catalog, KnobConfig};

/// Serializes benchmark runs across adapters in this process.
static BENCH_LOCK: Mutex<()> = Mutex::new(());

fn default_timeout() -> u64 {
    600
}

#[derive(Debug, Clone, Deserialize)]
pub struct AdapterCommands {
    pub apply: String,
    pub benchmark: String,
    pub collect: String,
    pub perf_regex: String,
    pub metrics_path: PathBuf,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub latency: bool,
    #[serde(default)]
    pub work_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct AdapterConfig {
    pub catalog: Catalog,
    pub commands: AdapterCommands,
    pub workload: WorkloadMix,
    pub metrics: Vec<MetricDef>,
    pub conditions: RuleTable,
}

#[derive(Deserialize)]
struct AdapterFile {
    catalog_file: Option<String>,
    catalog: Option<Catalog>,
    adapter: AdapterCommands,
    workload: WorkloadMix,
    #[serde(default)]
    metric: Vec<MetricDef>,
    conditions: Option<RuleTable>,
}

impl AdapterConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, EnvError> {
        let file: AdapterFile =
            toml::from_str(text).map_err(|e| EnvError::Setup(format!("adapter config: {e}")))?;
        let catalog = match (file.catalog, file.catalog_file) {
            (Some(c), _) => Catalog::new(&c.dbms, c.knobs().to_vec())?,
            (None, Some(rel)) => Catalog::load(&base_dir.join(rel))?,
            (None, None) => return Err(EnvError::Setup("adapter config needs a catalog".into())),
        };
        let mut commands = file.adapter;
        if commands.work_dir.is_none() {
            commands.work_dir = Some(base_dir.to_path_buf());
        }
        Ok(AdapterConfig {
            catalog,
            commands,
            workload: file.workload,
            metrics: file.metric,
            conditions: file.conditions.unwrap_or_default(),
        })
    }
}

pub struct ExternalAdapter {
    cfg: AdapterConfig,
    schema: MetricSchema,
    perf_re: Regex,
    config_file: tempfile::NamedTempFile,
}

struct CommandOutput {
    stdout: String,
}

impl ExternalAdapter {
    pub fn new(cfg: AdapterConfig) -> Result<Self, EnvError> {
        cfg.workload.validate()?;
        let schema = MetricSchema::new(cfg.metrics.clone())?;
        cfg.conditions.check(&schema)?;
        let perf_re = Regex::new(&cfg.commands.perf_regex)
            .map_err(|e| EnvError::Setup(format!("perf_regex: {e}")))?;
        if perf_re.captures_len() < 2 {
            return Err(EnvError::Setup("perf_regex needs one capture group".into()));
        }
        let config_file = tempfile::Builder::new()
            .prefix("knobtune-config-")
            .suffix(".cnf")
            .tempfile()?;
        Ok(ExternalAdapter {
            cfg,
            schema,
            perf_re,
            config_file,
        })
    }

    fn render(&self, template: &str) -> String {
        template
            .replace("{config_path}", &self.config_file.path().display().to_string())
            .replace("{metrics_path}", &self.cfg.commands.metrics_path.display().to_string())
    }

    fn run(&self, template: &str, deadline: Instant) -> Result<CommandOutput, EnvError> {
        let command = self.render(template);
        let mut cmd = Command::new("sh");
        cmd.arg("-c")
            .arg(&command)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        if let Some(dir) = &self.cfg.commands.work_dir {
            cmd.current_dir(dir);
        }
        let mut child = cmd.spawn()?;
        let mut out_pipe = child.stdout.take().expect("piped");
        let mut err_pipe = child.stderr.take().expect("piped");
        let out_reader = thread::spawn(move || {
            let mut s = String::new();
            let _ = out_pipe.read_to_string(&mut s);
            s
        });
        let err_reader = thread::spawn(move || {
            let mut s = String::new();
            let _ = err_pipe.read_to_string(&mut s);
            s
        });
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if Instant::now() >= deadline {
                let _ = child.kill();
                let _ = child.wait();
                return Err(EnvError::Timeout(self.cfg.commands.timeout_secs));
            }
            thread::sleep(Duration::from_millis(5));
        };
        let stdout = out_reader.join().unwrap_or_default();
        let stderr = err_reader.join().unwrap_or_default();
        if !status.success() {
            return Err(EnvError::Command {
                command,
                status: status.to_string(),
                stderr,
            });
        }
        Ok(CommandOutput { stdout })
    }

    fn parse_perf(&self, output: &str) -> Result<f64, EnvError> {
        let value: f64 = self
            .perf_re
            .captures(output)
            .and_then(|c| c.get(1))
            .and_then(|m| m.as_str().trim().parse().ok())
            .ok_or(EnvError::PerfNotFound)?;
        let perf = if self.cfg.commands.latency {
            1.0 / value
        } else {
            value
        };
        if !(perf > 0.0) || !perf.is_finite() {
            return Err(EnvError::NonPositivePerf(perf));
        }
        Ok(perf)
    }

    fn read_metrics(&self) -> Result<MetricsSnapshot, EnvError> {
        let path = self.render(&self.cfg.commands.metrics_path.display().to_string());
        let path = match &self.cfg.commands.work_dir {
            Some(dir) => dir.join(path),
            None => PathBuf::from(path),
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| EnvError::Metrics(format!("{}: {e}", path.display())))?;
        let raw = MetricsSnapshot::parse_flat(&text)?;
        let mut snap = MetricsSnapshot::default();
        for def in &self.schema.metrics {
            let v = raw
                .get(&def.name)
                .ok_or_else(|| EnvError::Metrics(format!("metric `{}` missing", def.name)))?;
            snap.names.push(def.name.clone());
            snap.values.push(v);
        }
        Ok(snap)
    }
}

impl Environment for ExternalAdapter {
    fn catalog(&self) -> &Catalog {
        &self.cfg.catalog
    }

    fn schema(&self) -> &MetricSchema {
        &self.schema
    }

    fn workload(&self) -> &WorkloadMix {
        &self.cfg.workload
    }

    fn rules(&self) -> &RuleTable {
        &self.cfg.conditions
    }

    fn evaluate(&mut self, config: &KnobConfig, _seed: u64) -> Result<Evaluation, EnvError> {
        check_config(&self.cfg.catalog, config)?;
        let _guard = BENCH_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        std::fs::write(self.config_file.path(), config.to_flat())?;
        let start = Instant::now();
        let deadline = start + Duration::from_secs(self.cfg.commands.timeout_secs);
        let c = &self.cfg.commands;
        let (apply, bench, collect) = (c.apply.clone(), c.benchmark.clone(), c.collect.clone());
        self.run(&apply, deadline)?;
        let bench_start = Instant::now();
        let output = self.run(&bench, deadline)?;
        let duration_secs = bench_start.elapsed().as_secs_f64();
        let perf = self.parse_perf(&output.stdout)?;
        self.run(&collect, deadline)?;
        let metrics = self.read_metrics()?;
        Ok(Evaluation {
            metrics,
            perf,
            duration_secs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(dir: &Path, bench: &str, timeout: u64) -> AdapterConfig {
        let text = format!(
            r#"
[catalog]
dbms = "mysql"
[[catalog.knob]]
name = "innodb_buffer_pool_size"
kind = "integer"
min = 1
max = 100
default = 10

[adapter]
apply = "cp {{config_path}} applied.cnf"
benchmark = "{bench}"
collect = "printf 'cpu_util=0.5\nbuffer_hit_ratio=0.97\n' > {{metrics_path}}"
perf_regex = 'perf=([0-9.]+)'
metrics_path = "metrics.txt"
timeout_secs = {timeout}

[workload]
read = 0.6
update = 0.1
insert = 0.1
scan = 0.2

[[metric]]
name = "cpu_util"
min = 0.0
max = 1.0
[[metric]]
name = "buffer_hit_ratio"
min = 0.0
max = 1.0

[conditions]
[[conditions.rule]]
metric = "buffer_hit_ratio"
op = "<"
threshold = 0.9
tag = "low_buffer_ratio"
"#
        );
        AdapterConfig::parse(&text, dir).unwrap()
    }

    #[test]
    fn stub_harness_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut env = ExternalAdapter::new(config(dir.path(), "echo perf=100", 10)).unwrap();
        let cfg = env.default_config();
        let eval = env.evaluate(&cfg, 0).unwrap();
        assert_eq!(eval.perf, 100.0);
        assert_eq!(eval.metrics.get("buffer_hit_ratio"), Some(0.97));
        let applied = std::fs::read_to_string(dir.path().join("applied.cnf")).unwrap();
        assert!(applied.contains("innodb_buffer_pool_size = 10"));
    }

    #[test]
    fn missing_perf_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut env = ExternalAdapter::new(config(dir.path(), "echo nothing", 10)).unwrap();
        let cfg = env.default_config();
        let err = env.evaluate(&cfg, 0).unwrap_err();
        assert!(err.to_string().contains("perf not found"), "{err}");
    }

    #[test]
    fn timeout_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut env = ExternalAdapter::new(config(dir.path(), "sleep 5", 1)).unwrap();
        let cfg = env.default_config();
        let err = env.evaluate(&cfg, 0).unwrap_err();
        assert!(err.to_string().contains("timeout"), "{err}");
    }

    #[test]
    fn failing_command_captures_stderr() {
        let dir = tempfile::tempdir().unwrap();
        let mut env =
            ExternalAdapter::new(config(dir.path(), "echo boom >&2; exit 3", 10)).unwrap();
        let cfg = env.default_config();
        match env.evaluate(&cfg, 0).unwrap_err() {
            EnvError::Command { stderr, .. } => assert!(stderr.contains("boom")),
            other => panic!("unexpected {other}"),
        }
    }
}
