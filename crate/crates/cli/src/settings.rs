//! Config resolution: preset, then the TOML file, then `--set` overrides, then
//! dedicated flags.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use panelrl::config::RunConfig;
use toml::{Table, Value};

/// Environment variable that overrides the output root from the config file.
pub const OUTPUT_ENV: &str = "PANELRL_OUTPUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-length schedules.
    Full,
    /// Short schedules for a single machine.
    Desk,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Root seed; every random stream is derived from it.
    #[arg(long)]
    pub seed: u64,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    pub preset: Preset,
    /// Worker threads for sweep and oracle instances.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output root; overrides the environment variable and the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override one config scalar, e.g. `--set ppo.learning_rate=3e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// A configuration problem reported to the user as a usage error.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_scalar(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn apply_set(table: &mut Table, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{assignment}'")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(usage(format!("--set {key}: '{p}' is not a section"))),
        };
    }
    cur.insert(last.to_string(), parse_scalar(raw.trim()));
    Ok(())
}

fn read_table(path: &Path) -> anyhow::Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<Table>()
        .map_err(|e| usage(format!("config {}: {e}", path.display())))
}

/// Builds and validates the run configuration for one invocation.
pub fn resolve(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    let base = match args.preset {
        Preset::Full => RunConfig::default(),
        Preset::Desk => RunConfig::desk(),
    };
    let mut table = Table::try_from(&base)?;
    if let Some(path) = &args.config {
        merge(&mut table, read_table(path)?);
    }
    for s in &args.set {
        apply_set(&mut table, s)?;
    }
    let mut cfg: RunConfig = serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        usage(format!("invalid config at {path}: {}", e.into_inner()))
    })?;
    cfg.seed = args.seed;
    if let Some(j) = args.jobs {
        cfg.jobs = j;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    } else if let Some(env) = std::env::var_os(OUTPUT_ENV) {
        cfg.output_dir = PathBuf::from(env);
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(set: &[&str]) -> ConfigArgs {
        ConfigArgs {
            seed: 5,
            config: None,
            preset: Preset::Desk,
            jobs: None,
            out: Some(PathBuf::from("x")),
            set: set.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn overrides_apply_over_preset() {
        let cfg = resolve(&args(&["ppo.learning_rate=3e-4", "sweep.metric=am", "data.n=500"])).unwrap();
        assert_eq!(cfg.ppo.learning_rate, 3e-4);
        assert_eq!(cfg.data.n, 500);
        assert_eq!(cfg.trainer.outer_loops, RunConfig::desk().trainer.outer_loops);
        assert_eq!(cfg.seed, 5);
    }

    #[test]
    fn bad_field_reports_its_path() {
        let err = resolve(&args(&["ppo.clip_eps=0.3"])).unwrap_err().to_string();
        assert!(err.contains("ppo"), "{err}");
        let err = resolve(&args(&["ppo.learning_rate=\"fast\""])).unwrap_err().to_string();
        assert!(err.contains("ppo.learning_rate"), "{err}");
    }

    #[test]
    fn file_merges_section_by_section() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[env]\nlambda = 4.0\n").unwrap();
        let mut a = args(&[]);
        a.config = Some(p);
        let cfg = resolve(&a).unwrap();
        assert_eq!(cfg.env.lambda, 4.0);
        assert_eq!(cfg.env.rho, RunConfig::default().env.rho);
    }
}
