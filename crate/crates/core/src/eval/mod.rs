//! Greedy evaluation runs, policy correctness and reachability, and state
//! value maps.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{argmax, baseline_label, push_state, stop_fires, Memory};
use crate::env::{Action, EnvState, GridEnvironment};
use crate::error::{Error, Result};
use crate::io::write_file;
use crate::nn::{Classifier, ClassifierKind, QBatch, QNetwork, Tensor, Variant};
use crate::replay::FrameRef;

pub const DEFAULT_T_MAX: usize = 20;

/// What a policy sees at one step of a run. `env` and `state` are ground
/// truth and only meant for scripted reference policies.
pub struct Percept<'a> {
    pub env: &'a GridEnvironment,
    pub state: EnvState,
    /// Current frame first; `None` before the run started.
    pub frames: &'a [Option<FrameRef>],
    pub history: &'a [Option<Action>],
}

impl Percept<'_> {
    pub fn pixels(&self, frame: FrameRef) -> &[f32] {
        let spec = self.env.spec();
        self.env.frame(spec.state_at(frame.bin as usize), frame.frame as usize)
    }

    pub fn current(&self) -> &[f32] {
        self.pixels(self.frames[0].expect("current frame present"))
    }
}

pub trait Policy: Sync {
    fn label(&self) -> String;

    fn frame_memory(&self) -> usize {
        0
    }

    fn action_memory(&self) -> usize {
        0
    }

    fn decide(&self, percept: &Percept<'_>) -> Result<Action>;
}

/// Q-network policy. The MS variant consults the stop classifier on the
/// current frame before looking at Q values.
pub struct DqnPolicy {
    net: QNetwork<f32>,
    stop: Option<(Classifier<f32>, f64)>,
    zeros: Vec<f32>,
}

impl DqnPolicy {
    pub fn new(net: QNetwork<f32>, stop: Option<(Classifier<f32>, f64)>) -> Result<Self> {
        let c = net.config();
        match (&stop, c.variant) {
            (None, Variant::Ms) => return Err(Error::input("the MS variant needs a stop classifier")),
            (Some(_), v) if v != Variant::Ms => {
                return Err(Error::input(format!("{v} has stop in its Q head and takes no stop classifier")))
            }
            _ => {}
        }
        if let Some((classifier, threshold)) = &stop {
            let s = classifier.config();
            if s.kind != ClassifierKind::Stop || (s.obs_height, s.obs_width) != (c.obs_height, c.obs_width) {
                return Err(Error::input("stop classifier does not match the Q network input"));
            }
            if !(0.0..=1.0).contains(threshold) {
                return Err(Error::input("stop threshold must lie in [0, 1]"));
            }
        }
        let zeros = vec![0.0; c.obs_height * c.obs_width];
        Ok(Self { net, stop, zeros })
    }

    pub fn network(&self) -> &QNetwork<f32> {
        &self.net
    }
}

impl Policy for DqnPolicy {
    fn label(&self) -> String {
        self.net.config().variant.label().to_string()
    }

    fn frame_memory(&self) -> usize {
        self.net.config().frame_memory
    }

    fn action_memory(&self) -> usize {
        self.net.config().action_memory
    }

    fn decide(&self, percept: &Percept<'_>) -> Result<Action> {
        if let Some((classifier, threshold)) = &self.stop {
            if stop_fires(classifier, percept.current(), *threshold)? {
                return Ok(Action::Stop);
            }
        }
        let mut batch = QBatch::with_capacity(self.net.config(), 1);
        push_state(&mut batch, std::slice::from_ref(percept.env), percept.frames, percept.history, &self.zeros);
        let q = self.net.q_batch(&batch)?;
        Ok(self.net.config().variant.q_actions()[argmax(&q)])
    }
}

/// Frame-to-action classifier baseline.
pub struct ClassifierPolicy {
    net: Classifier<f32>,
}

impl ClassifierPolicy {
    pub fn new(net: Classifier<f32>) -> Result<Self> {
        if net.config().kind != ClassifierKind::Action {
            return Err(Error::input("baseline policy needs an action classifier"));
        }
        Ok(Self { net })
    }
}

impl Policy for ClassifierPolicy {
    fn label(&self) -> String {
        "Classification CNN".into()
    }

    fn decide(&self, percept: &Percept<'_>) -> Result<Action> {
        let c = self.net.config();
        let frame = Tensor::new(vec![c.obs_height, c.obs_width], percept.current().to_vec())?;
        let class = self.net.predict(&frame)?;
        Ok(Action::ALL[class])
    }
}

/// Reference policy with access to the true state: stop on goal, otherwise
/// the distance-lowering move.
pub struct OraclePolicy;

impl Policy for OraclePolicy {
    fn label(&self) -> String {
        "Oracle".into()
    }

    fn decide(&self, percept: &Percept<'_>) -> Result<Action> {
        baseline_label(percept.env, percept.state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunTermination {
    StoppedOnGoal,
    StoppedOffGoal,
    StepCap,
}

impl RunTermination {
    pub fn name(self) -> &'static str {
        match self {
            RunTermination::StoppedOnGoal => "stopped_on_goal",
            RunTermination::StoppedOffGoal => "stopped_off_goal",
            RunTermination::StepCap => "step_cap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub env_id: String,
    pub start: EnvState,
    /// States after each move, excluding the start.
    pub visited: Vec<EnvState>,
    pub actions: Vec<Action>,
    pub termination: RunTermination,
    /// Actions that lowered the goal distance, or stopped on a goal bin.
    pub n_c: usize,
    pub n_t: usize,
    pub g: bool,
}

impl RunRecord {
    /// Builds a record and checks its invariants.
    pub fn new(
        env_id: impl Into<String>,
        start: EnvState,
        visited: Vec<EnvState>,
        actions: Vec<Action>,
        termination: RunTermination,
        n_c: usize,
    ) -> Result<Self> {
        let n_t = actions.len();
        if n_t == 0 || n_c > n_t {
            return Err(Error::input(format!("run with {n_c} correct of {n_t} actions")));
        }
        Ok(Self {
            env_id: env_id.into(),
            start,
            visited,
            actions,
            termination,
            n_c,
            n_t,
            g: termination == RunTermination::StoppedOnGoal,
        })
    }

    pub fn correctness(&self) -> f64 {
        self.n_c as f64 / self.n_t as f64
    }
}

/// One greedy run from `start`, at most `t_max` actions including stop.
pub fn navigate(
    policy: &dyn Policy,
    env: &GridEnvironment,
    start: EnvState,
    t_max: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RunRecord> {
    if !env.spec().contains(start) {
        return Err(Error::input(format!("start {start} outside the grid")));
    }
    if t_max == 0 {
        return Err(Error::input("t_max must be positive"));
    }
    let spec = env.spec();
    let mut memory = Memory::new(policy.frame_memory(), policy.action_memory());
    let mut state = start;
    let mut visited = Vec::new();
    let mut actions = Vec::new();
    let mut n_c = 0;
    let mut termination = RunTermination::StepCap;
    for _ in 0..t_max {
        let obs = env.observe(state, rng)?;
        memory.push_frame(FrameRef {
            env: 0,
            bin: spec.bin_index(state) as u32,
            frame: obs.frame_index as u32,
        });
        let frames = memory.frame_stack();
        let history = memory.history();
        let action = policy.decide(&Percept {
            env,
            state,
            frames: &frames,
            history: &history,
        })?;
        actions.push(action);
        if env.is_correct_action(state, action)? {
            n_c += 1;
        }
        if action == Action::Stop {
            termination = if env.is_goal(state) {
                RunTermination::StoppedOnGoal
            } else {
                RunTermination::StoppedOffGoal
            };
            break;
        }
        state = env.translate(state, action);
        visited.push(state);
        memory.push_action(action);
    }
    RunRecord::new(env.subject_id(), start, visited, actions, termination, n_c)
}

/// `(policy correctness, reachability)` over a set of runs.
pub fn aggregate(runs: &[RunRecord]) -> (f64, f64) {
    if runs.is_empty() {
        return (0.0, 0.0);
    }
    let n = runs.len() as f64;
    let correctness = runs.iter().map(RunRecord::correctness).sum::<f64>() / n;
    let reachability = runs.iter().filter(|r| r.g).count() as f64 / n;
    (correctness, reachability)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSummary {
    pub env_id: String,
    pub runs: usize,
    pub policy_correctness: f64,
    pub reachability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub t_max: usize,
    pub seed: u64,
    pub policy_correctness: f64,
    pub reachability: f64,
    /// Breakdown by environment.
    pub per_env: Vec<EnvSummary>,
    pub runs: Vec<RunRecord>,
}

impl EvalReport {
    pub fn from_runs(label: impl Into<String>, t_max: usize, seed: u64, runs: Vec<RunRecord>) -> Self {
        let (policy_correctness, reachability) = aggregate(&runs);
        let mut per_env: Vec<EnvSummary> = Vec::new();
        let mut i = 0;
        while i < runs.len() {
            let id = &runs[i].env_id;
            let j = i + runs[i..].iter().take_while(|r| &r.env_id == id).count();
            let (c, r) = aggregate(&runs[i..j]);
            per_env.push(EnvSummary {
                env_id: id.clone(),
                runs: j - i,
                policy_correctness: c,
                reachability: r,
            });
            i = j;
        }
        Self {
            label: label.into(),
            t_max,
            seed,
            policy_correctness,
            reachability,
            per_env,
            runs,
        }
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{} correctness={:.4} reachability={:.4}",
            self.label, self.policy_correctness, self.reachability
        )
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json()?.as_bytes())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "env_id", "start_row", "start_col", "end_row", "end_col", "termination", "n_c", "n_t", "g", "actions",
        ])?;
        for r in &self.runs {
            let end = r.visited.last().copied().unwrap_or(r.start);
            let actions: Vec<&str> = r.actions.iter().map(|a| a.name()).collect();
            w.write_record([
                r.env_id.clone(),
                r.start.row.to_string(),
                r.start.col.to_string(),
                end.row.to_string(),
                end.col.to_string(),
                r.termination.name().to_string(),
                r.n_c.to_string(),
                r.n_t.to_string(),
                (r.g as u8).to_string(),
                actions.join(" "),
            ])?;
        }
        w.into_inner().map_err(|e| Error::input(format!("csv buffer: {e}")))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_csv()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub t_max: usize,
    pub seed: u64,
    /// Worker threads.
    pub jobs: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            t_max: DEFAULT_T_MAX,
            seed: 0,
            jobs: 1,
        }
    }
}

/// Independent random stream for run `(env, bin)`.
fn run_rng(seed: u64, env: usize, bin: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((env as u64) << 32) | bin as u64);
    rng
}

/// Runs from every bin of every environment. Results do not depend on the
/// number of jobs.
pub fn evaluate(policy: &dyn Policy, envs: &[GridEnvironment], options: &EvalOptions) -> Result<EvalReport> {
    if envs.is_empty() {
        return Err(Error::input("evaluation needs at least one environment"));
    }
    let tasks: Vec<(usize, usize)> = envs
        .iter()
        .enumerate()
        .flat_map(|(e, env)| (0..env.spec().num_bins()).map(move |b| (e, b)))
        .collect();
    let run = |&(e, b): &(usize, usize)| {
        let env = &envs[e];
        navigate(policy, env, env.spec().state_at(b), options.t_max, &mut run_rng(options.seed, e, b))
    };
    let jobs = options.jobs.clamp(1, tasks.len());
    let runs: Vec<RunRecord> = if jobs == 1 {
        tasks.iter().map(run).collect::<Result<_>>()?
    } else {
        let chunk = tasks.len().div_ceil(jobs);
        std::thread::scope(|scope| {
            let handles: Vec<_> = tasks
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(run).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(tasks.len());
            for h in handles {
                out.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(out)
        })?
    };
    Ok(EvalReport::from_runs(policy.label(), options.t_max, options.seed, runs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueMap {
    pub env_id: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major `V(s) - min V`.
    pub values: Vec<f64>,
    pub goal: Vec<bool>,
}

impl ValueMap {
    pub fn get(&self, state: EnvState) -> f64 {
        self.values[state.row * self.cols + state.col]
    }

    pub fn argmax(&self) -> EnvState {
        let i = (0..self.values.len()).fold(0, |b, i| if self.values[i] > self.values[b] { i } else { b });
        EnvState::new(i / self.cols, i % self.cols)
    }

    /// Long-format CSV: `row,col,value,goal`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["row", "col", "value", "goal"])?;
        for r in 0..self.rows {
            for c in 0..self.cols {
                let i = r * self.cols + c;
                w.write_record([
                    r.to_string(),
                    c.to_string(),
                    format!("{}", self.values[i]),
                    (self.goal[i] as u8).to_string(),
                ])?;
            }
        }
        w.into_inner().map_err(|e| Error::input(format!("csv buffer: {e}")))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_csv()?)
    }
}

/// `V(s)` from each bin's first frame with empty memory, shifted so the
/// minimum is zero.
pub fn state_value_map(net: &QNetwork<f32>, env: &GridEnvironment) -> Result<ValueMap> {
    let c = net.config();
    let spec = env.spec();
    if (c.obs_height, c.obs_width) != (spec.obs_height, spec.obs_width) {
        return Err(Error::input("network input size does not match the environment frames"));
    }
    let zeros = vec![0.0; spec.frame_len()];
    let mut batch = QBatch::with_capacity(c, spec.num_bins());
    let history = vec![None; c.action_memory];
    let pool = std::slice::from_ref(env);
    for bin in 0..spec.num_bins() {
        let mut frames = vec![None; c.frames()];
        frames[0] = Some(FrameRef {
            env: 0,
            bin: bin as u32,
            frame: 0,
        });
        push_state(&mut batch, pool, &frames, &history, &zeros);
    }
    let raw = net.value_batch(&batch)?;
    let min = raw.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    Ok(ValueMap {
        env_id: env.subject_id().to_string(),
        rows: spec.rows,
        cols: spec.cols,
        values: raw.iter().map(|&v| v as f64 - min).collect(),
        goal: env.goal_mask().to_vec(),
    })
}
