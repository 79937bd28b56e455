//! JSONL stages tying the modules together.
//!
//! Every stage reads one record per line, processes lines in parallel and
//! writes results in input order. Per-line problems are counted and logged
//! with their line number; only unreadable input aborts a stage.

mod config;

use std::cell::Cell;
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{AlignmentConfig, CounterfactualConfig, IoConfig, ParallelismConfig, PipelineConfig};

use crate::action::Action;
use crate::alignment::{
    build_preference_pairs, hierarchical_reward, is_incorrect, orpo_loss, reward_from_output, PreferencePair,
    RewardBreakdown, ScoredAction,
};
use crate::counterfactual::{apply_action_mismatch, apply_entity_swap, RuleSet};
use crate::dom::{parse_html, DomTree};
use crate::instance::{InstanceKind, TrainingInstance};
use crate::metrics::{compute_report, step_success_with, MetricsReport, StepRecord};
use crate::miner::{build_discrimination_instance, mine_hard_negatives, MiningError};
use crate::parallel::for_each_ordered;
use crate::preprocess::{clean_tree, clean_tree_with_map, format_observation, to_html, CleanConfig};
use crate::synthesis::{build_backends, run_synthesis, PageInput, SynthesisRecord, SynthesisStats};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("{0} holds no records")]
    EmptyInput(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot write output: {0}")]
    Write(#[from] io::Error),
}

/// One step of a recorded trajectory, as captured from the browser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawStep {
    pub task_id: String,
    pub step_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    pub html: String,
    pub instruction: String,
    #[serde(default)]
    pub history: Vec<Action>,
    /// Target ids are pre-order positions in the parsed raw page.
    pub action: Action,
}

/// An instance together with the cleaned page it was built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineRecord {
    pub task_id: String,
    pub step_index: usize,
    /// Canonical cleaned HTML; [`load_page`] rebuilds the same tree.
    pub page_html: String,
    pub instance: TrainingInstance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairInput {
    pub prompt_id: String,
    pub gold: ScoredAction,
    pub samples: Vec<ScoredAction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub task_id: String,
    pub step_index: usize,
    pub reward: RewardBreakdown,
    pub success: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Clean,
    Mine,
    Perturb,
    Synthesize,
    Pair,
    Score,
    Validate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairingStats {
    pub prompts: u64,
    pub pairs: u64,
    pub all_correct: u64,
    pub mean_orpo_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringStats {
    pub mean_reward: f64,
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: Stage,
    /// Non-blank input lines.
    pub lines: u64,
    pub records_out: u64,
    /// Lines that produced nothing new, for a benign reason.
    pub skipped: u64,
    pub hard_errors: u64,
    /// Newly created instances per kind (pass-through records are not counted).
    pub instances: BTreeMap<InstanceKind, u64>,
    pub retention_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesis: Option<SynthesisStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairing: Option<PairingStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scoring: Option<ScoringStats>,
}

impl StageStats {
    fn new(stage: Stage) -> Self {
        StageStats {
            stage,
            lines: 0,
            records_out: 0,
            skipped: 0,
            hard_errors: 0,
            instances: BTreeMap::new(),
            retention_rate: None,
            synthesis: None,
            pairing: None,
            scoring: None,
        }
    }

    /// 0 on success, 1 when any record hit a hard error.
    pub fn exit_code(&self) -> i32 {
        i32::from(self.hard_errors > 0)
    }

    fn ratio(num: u64, den: u64) -> Option<f64> {
        (den > 0).then(|| num as f64 / den as f64)
    }
}

/// Parses and cleans a page. Applying this to [`to_html`] of a cleaned tree
/// yields that tree again.
pub fn load_page(html: &str, clean: &CleanConfig) -> Result<DomTree, String> {
    let tree = parse_html(html).map_err(|e| e.to_string())?;
    clean_tree(&tree, clean).map_err(|e| e.to_string())
}

/// Signature shared by the JSONL-to-JSONL stages.
pub type StageFn =
    fn(&Path, &mut dyn Write, &PipelineConfig, &rayon::ThreadPool) -> Result<StageStats, PipelineError>;

type Line = (usize, Result<String, String>);

/// Numbered non-blank lines. Fails up front if the file cannot be opened or
/// holds no records.
fn read_lines(path: &Path) -> Result<impl Iterator<Item = Line>, PipelineError> {
    let file = File::open(path).map_err(|source| PipelineError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = BufReader::new(file)
        .split(b'\n')
        .enumerate()
        .filter_map(|(i, line)| {
            let line = match line {
                Ok(bytes) => String::from_utf8(bytes).map_err(|_| "line is not valid UTF-8".to_string()),
                Err(e) => Err(e.to_string()),
            };
            match line {
                Ok(l) if l.trim().is_empty() => None,
                Ok(l) => Some((i + 1, Ok(l.trim_end_matches('\r').to_string()))),
                Err(e) => Some((i + 1, Err(e))),
            }
        })
        .peekable();
    if lines.peek().is_none() {
        return Err(PipelineError::EmptyInput(path.to_path_buf()));
    }
    Ok(lines)
}

struct Outcome<T> {
    lines: Vec<String>,
    created: Vec<InstanceKind>,
    skip: Option<String>,
    error: Option<String>,
    extra: Option<T>,
}

impl<T> Default for Outcome<T> {
    fn default() -> Self {
        Outcome {
            lines: Vec::new(),
            created: Vec::new(),
            skip: None,
            error: None,
            extra: None,
        }
    }
}

impl<T> Outcome<T> {
    fn error(message: impl Into<String>) -> Self {
        Outcome {
            error: Some(message.into()),
            ..Default::default()
        }
    }

    fn skip(message: impl Into<String>) -> Self {
        Outcome {
            skip: Some(message.into()),
            ..Default::default()
        }
    }

    fn emit<S: Serialize>(&mut self, value: &S) {
        match serde_json::to_string(value) {
            Ok(line) => self.lines.push(line),
            Err(e) => self.error = Some(format!("cannot serialise output: {e}")),
        }
    }
}

fn parse_line<D: serde::de::DeserializeOwned>(line: &str) -> Result<D, String> {
    serde_json::from_str(line).map_err(|e| format!("schema violation: {e}"))
}

/// Shared driver: parallel per-line `work`, ordered writes, counting.
/// `absorb` sees each outcome's extra payload and may reject it.
fn drive<T, W, A>(
    stage: Stage,
    input: &Path,
    pool: &rayon::ThreadPool,
    out: &mut dyn Write,
    work: W,
    mut absorb: A,
) -> Result<StageStats, PipelineError>
where
    T: Send,
    W: Fn(&str) -> Outcome<T> + Sync,
    A: FnMut(T) -> Result<(), String>,
{
    let lines = read_lines(input)?;
    let mut stats = StageStats::new(stage);
    let source = input.display().to_string();
    for_each_ordered(
        lines,
        pool,
        |_, (number, line): Line| {
            let outcome = match line {
                Ok(line) => work(&line),
                Err(e) => Outcome::error(e),
            };
            (number, outcome)
        },
        |(number, outcome)| -> Result<(), PipelineError> {
            stats.lines += 1;
            let mut error = outcome.error;
            if error.is_none() {
                if let Some(extra) = outcome.extra {
                    error = absorb(extra).err();
                }
            }
            if let Some(err) = error {
                tracing::error!("{source}:{number}: {err}");
                stats.hard_errors += 1;
                return Ok(());
            }
            if let Some(reason) = outcome.skip {
                tracing::debug!("{source}:{number}: skipped: {reason}");
                stats.skipped += 1;
            }
            for kind in outcome.created {
                *stats.instances.entry(kind).or_default() += 1;
            }
            for line in outcome.lines {
                writeln!(out, "{line}")?;
                stats.records_out += 1;
            }
            Ok(())
        },
    )?;
    out.flush()?;
    Ok(stats)
}

fn instance_id(task_id: &str, step_index: usize, suffix: &str) -> String {
    format!("{task_id}:{step_index}:{suffix}")
}

fn clean_line(line: &str, clean: &CleanConfig) -> Outcome<()> {
    let raw: RawStep = match parse_line(line) {
        Ok(raw) => raw,
        Err(e) => return Outcome::skip(e),
    };
    let tree = match parse_html(&raw.html) {
        Ok(tree) => tree,
        Err(e) => return Outcome::skip(e.to_string()),
    };
    let tree = match raw.url {
        Some(url) => tree.with_url(url),
        None => tree,
    };
    let (cleaned, map) = match clean_tree_with_map(&tree, clean) {
        Ok(result) => result,
        Err(e) => return Outcome::skip(e.to_string()),
    };
    let label = match raw.action.element_id() {
        None => raw.action.clone(),
        Some(id) => match map.get(id.index()).copied().flatten() {
            Some(new_id) => raw.action.retarget(new_id),
            None => return Outcome::skip(format!("target element {id} does not survive cleaning")),
        },
    };
    let instance = TrainingInstance {
        instance_id: instance_id(&raw.task_id, raw.step_index, "base"),
        observation: format_observation(&cleaned, &raw.instruction, &raw.history, clean),
        instruction: raw.instruction,
        history: raw.history,
        label,
        kind: InstanceKind::Base,
        metadata: Default::default(),
    };
    if let Err(e) = instance.validate() {
        return Outcome::skip(e.to_string());
    }
    let mut outcome = Outcome {
        created: vec![InstanceKind::Base],
        ..Default::default()
    };
    outcome.emit(&PipelineRecord {
        task_id: raw.task_id,
        step_index: raw.step_index,
        page_html: to_html(&cleaned),
        instance,
    });
    outcome
}

/// Raw trajectory steps to cleaned base instances. Bad lines are skipped.
pub fn run_clean(
    input: &Path,
    out: &mut dyn Write,
    config: &PipelineConfig,
    pool: &rayon::ThreadPool,
) -> Result<StageStats, PipelineError> {
    let mut stats = drive(Stage::Clean, input, pool, out, |line| clean_line(line, &config.clean), |()| Ok(()))?;
    stats.retention_rate = StageStats::ratio(stats.records_out, stats.lines);
    Ok(stats)
}

fn read_record(line: &str) -> Result<PipelineRecord, String> {
    let record: PipelineRecord = parse_line(line)?;
    record.instance.validate().map_err(|e| format!("invalid instance: {e}"))?;
    Ok(record)
}

fn mine_line(line: &str, config: &PipelineConfig) -> Outcome<bool> {
    let record = match read_record(line) {
        Ok(r) => r,
        Err(e) => return Outcome::error(e),
    };
    let mut outcome = Outcome::default();
    outcome.emit(&record);
    let is_base = record.instance.kind == InstanceKind::Base;
    outcome.extra = Some(is_base);
    if !is_base {
        return outcome;
    }
    let Some(target) = record.instance.label.element_id() else {
        outcome.skip = Some("label has no target element".into());
        return outcome;
    };
    let tree = match load_page(&record.page_html, &config.clean) {
        Ok(tree) => tree,
        Err(e) => return Outcome::error(format!("page does not load: {e}")),
    };
    let set = match mine_hard_negatives(&tree, target, &config.clean, &config.mining) {
        Ok(set) => set,
        Err(e @ (MiningError::TargetNotInteractive(_) | MiningError::NoCandidates)) => {
            outcome.skip = Some(e.to_string());
            return outcome;
        }
        Err(e) => return Outcome::error(e.to_string()),
    };
    let instance = build_discrimination_instance(
        instance_id(&record.task_id, record.step_index, "hn"),
        &tree,
        &record.instance.instruction,
        &record.instance.history,
        &set,
        &record.instance.label,
        &config.clean,
    )
    .map_err(|e| e.to_string())
    .and_then(|i| i.validate().map(|()| i).map_err(|e| e.to_string()));
    match instance {
        Ok(instance) => {
            outcome.created.push(InstanceKind::Discrimination);
            outcome.emit(&PipelineRecord { instance, ..record });
        }
        Err(e) => return Outcome::error(e),
    }
    outcome
}

/// Passes every record through and adds a hard-negative instance after each
/// grounded base instance.
pub fn run_mine(
    input: &Path,
    out: &mut dyn Write,
    config: &PipelineConfig,
    pool: &rayon::ThreadPool,
) -> Result<StageStats, PipelineError> {
    let mut base = 0u64;
    let mut stats = drive(
        Stage::Mine,
        input,
        pool,
        out,
        |line| mine_line(line, config),
        |is_base| {
            base += u64::from(is_base);
            Ok(())
        },
    )?;
    let mined = stats.instances.get(&InstanceKind::Discrimination).copied().unwrap_or(0);
    stats.retention_rate = StageStats::ratio(mined, base);
    Ok(stats)
}

fn perturb_line(line: &str, rules: &RuleSet, clean: &CleanConfig) -> Outcome<bool> {
    let record = match read_record(line) {
        Ok(r) => r,
        Err(e) => return Outcome::error(e),
    };
    let mut outcome = Outcome::default();
    outcome.emit(&record);
    let is_base = record.instance.kind == InstanceKind::Base;
    outcome.extra = Some(is_base);
    if !is_base {
        return outcome;
    }
    let tree = match load_page(&record.page_html, clean) {
        Ok(tree) => tree,
        Err(e) => return Outcome::error(format!("page does not load: {e}")),
    };
    let candidates = [
        apply_entity_swap(&record.instance, &rules.entity_swaps, &tree, clean),
        apply_action_mismatch(&record.instance, &tree, &rules.verb_map, clean),
    ];
    for rejection in candidates.into_iter().flatten() {
        let suffix = format!("rej:{}", rejection.rule_kind.as_str());
        let instance = rejection.into_training_instance(instance_id(&record.task_id, record.step_index, &suffix));
        if let Err(e) = instance.validate() {
            return Outcome::error(e.to_string());
        }
        outcome.created.push(InstanceKind::Rejection);
        outcome.emit(&PipelineRecord {
            instance,
            ..record.clone()
        });
    }
    if outcome.created.is_empty() {
        outcome.skip = Some("no rule applies".into());
    }
    outcome
}

/// Passes every record through and adds counterfactual rejections derived
/// from base instances.
pub fn run_perturb(
    input: &Path,
    out: &mut dyn Write,
    config: &PipelineConfig,
    pool: &rayon::ThreadPool,
) -> Result<StageStats, PipelineError> {
    let rules = config.rule_set()?;
    let mut base = 0u64;
    let mut stats = drive(
        Stage::Perturb,
        input,
        pool,
        out,
        |line| perturb_line(line, &rules, &config.clean),
        |is_base| {
            base += u64::from(is_base);
            Ok(())
        },
    )?;
    let created = stats.instances.get(&InstanceKind::Rejection).copied().unwrap_or(0);
    stats.retention_rate = StageStats::ratio(created, base);
    Ok(stats)
}

/// Pages for synthesis: either `{page_id, html}` lines or pipeline records,
/// of which only base instances are used.
#[derive(Deserialize)]
#[serde(untagged)]
enum SynthesisInput {
    Page(PageInput),
    Record(Box<PipelineRecord>),
}

/// Generates, verifies and filters synthetic instructions; writes retained
/// [`SynthesisRecord`]s.
pub fn run_synthesize(
    input: &Path,
    out: &mut dyn Write,
    config: &PipelineConfig,
    pool: &rayon::ThreadPool,
) -> Result<StageStats, PipelineError> {
    let lines = read_lines(input)?;
    let source = input.display().to_string();
    let (generator, verifier) = build_backends(&config.synthesis.generator, &config.synthesis.verifier);
    let line_count = Cell::new(0u64);
    let hard_errors = Cell::new(0u64);
    let not_pages = Cell::new(0u64);
    let pages = lines.filter_map(|(number, line)| {
        line_count.set(line_count.get() + 1);
        let parsed = line.and_then(|l| parse_line::<SynthesisInput>(&l));
        match parsed {
            Ok(SynthesisInput::Page(page)) => Some(page),
            Ok(SynthesisInput::Record(record)) if record.instance.kind == InstanceKind::Base => Some(PageInput {
                page_id: format!("{}:{}", record.task_id, record.step_index),
                html: record.page_html,
            }),
            Ok(SynthesisInput::Record(_)) => {
                not_pages.set(not_pages.get() + 1);
                None
            }
            Err(e) => {
                tracing::error!("{source}:{number}: {e}");
                hard_errors.set(hard_errors.get() + 1);
                None
            }
        }
    });
    let mut written = 0u64;
    let synthesis = run_synthesis(
        pages,
        generator.as_ref(),
        verifier.as_ref(),
        &config.synthesis,
        &config.clean,
        pool,
        |record: SynthesisRecord| -> Result<(), PipelineError> {
            let line = serde_json::to_string(&record).map_err(io::Error::other)?;
            writeln!(out, "{line}")?;
            written += 1;
            Ok(())
        },
    )?;
    out.flush()?;
    let mut stats = StageStats::new(Stage::Synthesize);
    stats.lines = line_count.get();
    stats.records_out = written;
    stats.skipped = not_pages.get() + synthesis.pages_skipped;
    stats.hard_errors = hard_errors.get();
    if synthesis.retained > 0 {
        stats.instances.insert(InstanceKind::Synthetic, synthesis.retained);
    }
    stats.retention_rate = Some(synthesis.pass_rate);
    stats.synthesis = Some(synthesis);
    Ok(stats)
}

/// Builds preference pairs from sampled outputs and reports their loss.
pub fn run_pair(
    input: &Path,
    out: &mut dyn Write,
    config: &PipelineConfig,
    pool: &rayon::ThreadPool,
) -> Result<StageStats, PipelineError> {
    let expected = config.alignment.samples_per_prompt;
    let lambda = config.alignment.orpo_lambda;
    let mut pairing = PairingStats::default();
    let mut loss_sum = 0.0;
    let mut stats = drive(
        Stage::Pair,
        input,
        pool,
        out,
        |line| {
            let request: PairInput = match parse_line(line) {
                Ok(r) => r,
                Err(e) => return Outcome::error(e),
            };
            if request.samples.len() != expected {
                tracing::warn!(
                    prompt = %request.prompt_id,
                    "expected {expected} samples, got {}",
                    request.samples.len()
                );
            }
            let mut outcome = Outcome::default();
            match build_preference_pairs(&request.prompt_id, &request.gold, &request.samples) {
                None => {
                    outcome.skip = Some("every sample is correct".into());
                    outcome.extra = Some(None);
                }
                Some(pair) => match orpo_loss(&pair, lambda) {
                    Ok(loss) => {
                        outcome.emit(&pair);
                        outcome.extra = Some(Some(loss.loss));
                    }
                    Err(e) => return Outcome::error(format!("prompt {}: {e}", request.prompt_id)),
                },
            }
            outcome
        },
        |loss: Option<f64>| {
            pairing.prompts += 1;
            match loss {
                Some(l) => {
                    pairing.pairs += 1;
                    loss_sum += l;
                }
                None => pairing.all_correct += 1,
            }
            Ok(())
        },
    )?;
    pairing.mean_orpo_loss = (pairing.pairs > 0).then(|| loss_sum / pairing.pairs as f64);
    stats.retention_rate = StageStats::ratio(pairing.pairs, pairing.prompts);
    stats.pairing = Some(pairing);
    Ok(stats)
}

/// Rewards every prediction and computes the benchmark metrics.
pub fn run_score(
    input: &Path,
    out: &mut dyn Write,
    config: &PipelineConfig,
    pool: &rayon::ThreadPool,
) -> Result<StageStats, PipelineError> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    let mut reward_sum = 0.0;
    let mut stats = drive(
        Stage::Score,
        input,
        pool,
        out,
        |line| {
            let mut record: StepRecord = match parse_line(line) {
                Ok(r) => r,
                Err(e) => return Outcome::error(e),
            };
            let reward = match &record.raw_output {
                Some(raw) => reward_from_output(raw, &record.gold, &config.reward),
                None => hierarchical_reward(Some(&record.predicted), &record.gold, &config.reward),
            };
            let mut outcome = Outcome::default();
            outcome.emit(&RewardRecord {
                task_id: record.task_id.clone(),
                step_index: record.step_index,
                reward,
                success: step_success_with(&record.predicted, &record.gold, config.metrics.success_f1_threshold),
            });
            record.raw_output = None;
            outcome.extra = Some((record, reward.total));
            outcome
        },
        |(record, total)| {
            if !seen.insert((record.task_id.clone(), record.step_index)) {
                return Err(format!("step {} of task {:?} appears twice", record.step_index, record.task_id));
            }
            reward_sum += total;
            records.push(record);
            Ok(())
        },
    )?;
    let metrics = compute_report(&records, &config.metrics).ok();
    stats.scoring = Some(ScoringStats {
        mean_reward: if records.is_empty() { 0.0 } else { reward_sum / records.len() as f64 },
        metrics,
    });
    Ok(stats)
}

/// Record schemas known to `validate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schema {
    RawStep,
    Record,
    Page,
    Synthesis,
    PairInput,
    Pair,
    Step,
}

impl Schema {
    pub const ALL: [Schema; 7] = [
        Schema::Record,
        Schema::Synthesis,
        Schema::Pair,
        Schema::PairInput,
        Schema::Step,
        Schema::RawStep,
        Schema::Page,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Schema::RawStep => "raw-step",
            Schema::Record => "record",
            Schema::Page => "page",
            Schema::Synthesis => "synthesis",
            Schema::PairInput => "pair-input",
            Schema::Pair => "pair",
            Schema::Step => "step",
        }
    }

    /// Parses `line` as this schema and checks the record's invariants.
    pub fn check(self, line: &str, clean: &CleanConfig) -> Result<(), String> {
        match self {
            Schema::RawStep => parse_line::<RawStep>(line).map(drop),
            Schema::Page => parse_line::<PageInput>(line).map(drop),
            Schema::Record => {
                let record = read_record(line)?;
                let tree = load_page(&record.page_html, clean)?;
                match record.instance.label.element_id() {
                    Some(id) if !tree.contains(id) => Err(format!("label element {id} is not on the page")),
                    _ => Ok(()),
                }
            }
            Schema::Synthesis => {
                let record: SynthesisRecord = parse_line(line)?;
                if !record.verdict.is_retained() {
                    return Err(format!("record with verdict {} should not be emitted", record.verdict.as_str()));
                }
                if !record.html.contains(&format!("id=\"{}\"", record.target_id)) {
                    return Err(format!("target {} is not in the page", record.target_id));
                }
                Ok(())
            }
            Schema::PairInput => parse_line::<PairInput>(line).map(drop),
            Schema::Pair => {
                let pair: PreferencePair = parse_line(line)?;
                if !is_incorrect(&pair.loser.action, &pair.winner.action) {
                    return Err("loser matches the winner's action".into());
                }
                Ok(())
            }
            Schema::Step => parse_line::<StepRecord>(line).map(drop),
        }
    }

    fn detect(line: &str, clean: &CleanConfig) -> Result<Schema, String> {
        let mut first_error = None;
        for schema in Schema::ALL {
            match schema.check(line, clean) {
                Ok(()) => return Ok(schema),
                Err(e) => {
                    // A record that parses but breaks an invariant is reported as such.
                    if !e.starts_with("schema violation") {
                        return Err(format!("{}: {e}", schema.name()));
                    }
                    first_error.get_or_insert(e);
                }
            }
        }
        Err(first_error.unwrap_or_else(|| "unrecognised record".into()))
    }
}

/// Checks every line against `schema`, or against whichever known schema it
/// parses as.
pub fn run_validate(
    input: &Path,
    schema: Option<Schema>,
    config: &PipelineConfig,
    pool: &rayon::ThreadPool,
) -> Result<StageStats, PipelineError> {
    let mut sink = io::sink();
    drive(
        Stage::Validate,
        input,
        pool,
        &mut sink,
        |line| {
            let result = match schema {
                Some(s) => s.check(line, &config.clean),
                None => Schema::detect(line, &config.clean).map(drop),
            };
            match result {
                Ok(()) => Outcome::default(),
                Err(e) => Outcome::<()>::error(e),
            }
        },
        |()| Ok(()),
    )
}

const COMPONENTS: [(InstanceKind, &str, &str); 4] = [
    (InstanceKind::Base, "Base", "In-domain trajectories"),
    (InstanceKind::Discrimination, "Hard Neg.", "Topological mining"),
    (InstanceKind::Rejection, "Rejection", "Counterfactual perturbation"),
    (InstanceKind::Synthetic, "Synthetic", "Dual-agent consensus"),
];

/// Dataset composition table summed over stats files, followed by any
/// evaluation results they contain.
pub fn render_report(stats: &[StageStats]) -> String {
    let mut counts: BTreeMap<InstanceKind, u64> = BTreeMap::new();
    for s in stats {
        for (kind, n) in &s.instances {
            *counts.entry(*kind).or_default() += n;
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "| {:<10} | {:<28} | {:>8} |", "Component", "Method", "Samples");
    let _ = writeln!(out, "|{}|{}|{}|", "-".repeat(12), "-".repeat(30), "-".repeat(10));
    let mut total = 0;
    for (kind, name, method) in COMPONENTS {
        let n = counts.get(&kind).copied().unwrap_or(0);
        total += n;
        let _ = writeln!(out, "| {name:<10} | {method:<28} | {n:>8} |");
    }
    let _ = writeln!(out, "| {:<10} | {:<28} | {total:>8} |", "Total", "");
    let _ = writeln!(
        out,
        "\nReference scale of the full corpus: 300k in-domain, 290k synthetic, 590k total."
    );
    for s in stats {
        if let Some(metrics) = s.scoring.as_ref().and_then(|sc| sc.metrics.as_ref()) {
            let _ = write!(out, "\n{}", metrics.render_table());
        }
    }
    out
}

/// Reads stats JSON files and renders [`render_report`].
pub fn run_report(paths: &[PathBuf]) -> Result<String, PipelineError> {
    if paths.is_empty() {
        return Err(PipelineError::Config("report needs at least one stats file".into()));
    }
    let mut all = Vec::with_capacity(paths.len());
    for path in paths {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Read {
            path: path.clone(),
            source,
        })?;
        let stats: StageStats = serde_json::from_str(&text).map_err(|e| PipelineError::Read {
            path: path.clone(),
            source: io::Error::new(io::ErrorKind::InvalidData, e),
        })?;
        all.push(stats);
    }
    Ok(render_report(&all))
}
