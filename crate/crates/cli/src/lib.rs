//! The `spinenav` command line: dataset generation, training, evaluation and
//! value-map export, all driven by one TOML config.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use spinenav::agent::{train, train_action_classifier_baseline, train_stop_classifier, ClassifierReport};
use spinenav::env::GridEnvironment;
use spinenav::eval::{evaluate, state_value_map, ClassifierPolicy, DqnPolicy, EvalReport, Policy};
use spinenav::nn::{Classifier, ClassifierKind, QNetwork, Variant};
use spinenav::synth::{generate_dataset, DatasetManifest, Split};

pub use config::{Overrides, RunConfig};

pub const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "spinenav", version, about = "Train and evaluate grid-navigation DQN agents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML config; defaults are used for anything it leaves out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Evaluation worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub variant: Option<VariantArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    V,
    M,
    Ms,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::V => Variant::V,
            VariantArg::M => Variant::M,
            VariantArg::Ms => Variant::Ms,
        }
    }
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Render the synthetic subjects and write their manifest.
    GenEnv,
    /// Train a DQN variant on the training split.
    Train,
    /// Train the goal/non-goal classifier used by MS-DQN.
    TrainStop,
    /// Train the frame-to-action classifier baseline.
    TrainBaseline,
    /// Run every start of every test subject and write the report.
    Eval {
        /// Evaluate the classifier baseline instead of a DQN variant.
        #[arg(long)]
        baseline: bool,
    },
    /// Export state-value maps of a trained variant for the test subjects.
    ValueMap,
}

impl Cli {
    pub fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        base.resolve(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            jobs: self.jobs,
            variant: self.variant.map(Variant::from),
        })
    }
}

/// Runs one command and returns the lines it reports on stdout.
pub fn run(cli: &Cli) -> Result<Vec<String>> {
    let config = cli.resolve()?;
    match &cli.command {
        Command::GenEnv => gen_env(&config),
        Command::Train => train_variant(&config),
        Command::TrainStop => train_classifier(&config, ClassifierKind::Stop),
        Command::TrainBaseline => train_classifier(&config, ClassifierKind::Action),
        Command::Eval { baseline } => eval(&config, *baseline),
        Command::ValueMap => value_maps(&config).map(|dir| vec![format!("value maps written to {}", dir.display())]),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_snapshot(config: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join(SNAPSHOT_FILE);
    fs::write(&path, config.to_toml()?).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_env(config: &RunConfig) -> Result<Vec<String>> {
    let dir = config.data_dir();
    let manifest = generate_dataset(&config.grid, &config.dataset, &dir)?;
    write_snapshot(config, &dir)?;
    let reloaded = DatasetManifest::load(&dir)?;
    ensure!(reloaded == manifest, "manifest in {} did not read back", dir.display());
    Ok(vec![format!(
        "wrote {} environments to {}",
        manifest.subjects.len(),
        dir.display()
    )])
}

fn load_split(config: &RunConfig, split: Split) -> Result<Vec<GridEnvironment>> {
    let dir = config.data_dir();
    let manifest = DatasetManifest::load(&dir).with_context(|| format!("no dataset in {}; run gen-env", dir.display()))?;
    if manifest.spec != config.grid {
        bail!("dataset in {} was generated for a different [grid]", dir.display());
    }
    let envs = manifest.load_split(&dir, split)?;
    if envs.is_empty() {
        bail!("dataset in {} has no {} subjects", dir.display(), split.name());
    }
    Ok(envs)
}

pub fn train_variant(config: &RunConfig) -> Result<Vec<String>> {
    let envs = load_split(config, Split::Train)?;
    let dir = config.variant_dir();
    create_dir(&dir)?;
    let label = config.agent.variant.label();
    let outcome = train(&envs, &config.agent, |row| {
        if (row.episode + 1) % 100 == 0 {
            eprintln!(
                "{label} episode {} reward {:.3} epsilon {:.3}",
                row.episode + 1,
                row.total_reward,
                row.epsilon
            );
        }
    })?;
    let path = config.q_checkpoint();
    outcome.network.save(&path)?;
    QNetwork::load_expecting(&path, outcome.network.config())?;
    outcome.write_curve(&dir.join("curve.csv"))?;
    write_snapshot(config, &dir)?;
    Ok(vec![format!(
        "{label} trained for {} steps ({} episodes, {} updates); checkpoint {}",
        outcome.env_steps,
        outcome.episodes.len(),
        outcome.updates,
        path.display()
    )])
}

pub fn train_classifier(config: &RunConfig, kind: ClassifierKind) -> Result<Vec<String>> {
    let train_envs = load_split(config, Split::Train)?;
    let heldout = load_split(config, Split::Val)?;
    let (net, report, dir, path) = match kind {
        ClassifierKind::Stop => {
            let (net, report) = train_stop_classifier(&train_envs, &heldout, &config.stop)?;
            (net, report, config.stop_dir(), config.stop_checkpoint())
        }
        ClassifierKind::Action => {
            let (net, report) = train_action_classifier_baseline(&train_envs, &heldout, &config.baseline)?;
            (net, report, config.baseline_dir(), config.baseline_checkpoint())
        }
    };
    create_dir(&dir)?;
    net.save(&path)?;
    Classifier::load_expecting(&path, net.config())?;
    write_json(&report, &dir.join("report.json"))?;
    write_snapshot(config, &dir)?;
    Ok(vec![classifier_line(kind, &report, &path)])
}

fn classifier_line(kind: ClassifierKind, report: &ClassifierReport, path: &Path) -> String {
    let name = match kind {
        ClassifierKind::Stop => "stop classifier",
        ClassifierKind::Action => "action classifier",
    };
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    format!(
        "{name} heldout_accuracy={} balanced_accuracy={}; checkpoint {}",
        fmt(report.heldout_accuracy),
        fmt(report.heldout_balanced_accuracy),
        path.display()
    )
}

fn require(path: &Path, what: &str, command: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} checkpoint {} not found; run {command} first", path.display());
    }
    Ok(())
}

/// Loads the configured variant's policy, checking every file it needs first.
pub fn dqn_policy(config: &RunConfig) -> Result<DqnPolicy> {
    let spec = config.grid;
    let variant = config.agent.variant;
    require(&config.q_checkpoint(), variant.label(), "train")?;
    if variant.uses_stop_classifier() {
        require(&config.stop_checkpoint(), "stop classifier", "train-stop")?;
    }
    let net = QNetwork::load_expecting(&config.q_checkpoint(), &config.agent.network(spec.obs_height, spec.obs_width))?;
    let stop = if variant.uses_stop_classifier() {
        let expected = config.stop.network(ClassifierKind::Stop, spec.obs_height, spec.obs_width);
        Some((Classifier::load_expecting(&config.stop_checkpoint(), &expected)?, config.stop.threshold))
    } else {
        None
    };
    Ok(DqnPolicy::new(net, stop)?)
}

fn baseline_policy(config: &RunConfig) -> Result<ClassifierPolicy> {
    let spec = config.grid;
    require(&config.baseline_checkpoint(), "action classifier", "train-baseline")?;
    let expected = config.baseline.network(ClassifierKind::Action, spec.obs_height, spec.obs_width);
    Ok(ClassifierPolicy::new(Classifier::load_expecting(&config.baseline_checkpoint(), &expected)?)?)
}

fn write_value_maps(net: &QNetwork<f32>, envs: &[GridEnvironment], dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for env in envs {
        state_value_map(net, env)?.write_csv(&dir.join(format!("{}.csv", env.subject_id())))?;
    }
    Ok(())
}

pub fn eval(config: &RunConfig, baseline: bool) -> Result<Vec<String>> {
    let dqn = (!baseline).then(|| dqn_policy(config)).transpose()?;
    let classifier = baseline.then(|| baseline_policy(config)).transpose()?;
    let policy: &dyn Policy = match (&dqn, &classifier) {
        (Some(p), _) => p,
        (None, Some(p)) => p,
        (None, None) => unreachable!(),
    };
    let envs = load_split(config, Split::Test)?;
    let report = evaluate(policy, &envs, &config.eval)?;
    let dir = config.eval_dir(baseline);
    create_dir(&dir)?;
    report.write_json(&dir.join("report.json"))?;
    report.write_csv(&dir.join("runs.csv"))?;
    if let Some(p) = &dqn {
        write_value_maps(p.network(), &envs, &dir.join("value_maps"))?;
    }
    write_snapshot(config, &dir)?;
    let back: EvalReport = serde_json::from_str(&fs::read_to_string(dir.join("report.json"))?)?;
    ensure!(back == report, "report in {} did not read back", dir.display());
    let mut lines = vec![report.summary_line()];
    lines.extend(report.per_env.iter().map(|e| {
        format!(
            "  {} correctness={:.4} reachability={:.4}",
            e.env_id, e.policy_correctness, e.reachability
        )
    }));
    Ok(lines)
}

pub fn value_maps(config: &RunConfig) -> Result<PathBuf> {
    let spec = config.grid;
    require(&config.q_checkpoint(), config.agent.variant.label(), "train")?;
    let net = QNetwork::load_expecting(&config.q_checkpoint(), &config.agent.network(spec.obs_height, spec.obs_width))?;
    let envs = load_split(config, Split::Test)?;
    let dir = config.out.join("value_maps").join(config.agent.variant.label().to_lowercase());
    write_value_maps(&net, &envs, &dir)?;
    write_snapshot(config, &dir)?;
    Ok(dir)
}
