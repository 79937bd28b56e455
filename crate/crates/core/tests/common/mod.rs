//! Shared fixtures and independent reference implementations for the
//! integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use astro_float::{BigFloat, Consts, RoundingMode};
use forge_core::action::Action;
use forge_core::alignment::{ScoredAction, SequenceScore};
use forge_core::dom::{parse_html, DomTree, NodeId, NodeSpec};
use forge_core::metrics::StepRecord;
use forge_core::pipeline::{PairInput, PipelineRecord};
use forge_core::preprocess::{clean_tree, CleanConfig};
use rand::Rng;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn fixture(name: &str) -> String {
    std::fs::read_to_string(fixture_path(name)).expect("fixture exists")
}

pub fn cleaned(html: &str) -> DomTree {
    clean_tree(&parse_html(html).unwrap(), &CleanConfig::default()).unwrap()
}

// ---------------------------------------------------------------------------
// Tree edit distance by exhaustive search over edit mappings.
//
// Any edit script induces a mapping between the node sets that is one-to-one
// and keeps ancestry and left-to-right order; conversely every such mapping
// is realised by a script costing |A| + |B| - 2|M| + (relabelled pairs).
// Minimising over all mappings therefore gives the edit distance.
// ---------------------------------------------------------------------------

/// Pre-order node list with labels and subtree extents.
pub struct Small {
    labels: Vec<String>,
    /// One past the last descendant, in pre-order.
    end: Vec<usize>,
}

impl Small {
    pub fn from_tree(tree: &DomTree) -> Small {
        let labels = tree.nodes().map(|n| n.tag.clone()).collect();
        let end = tree.nodes().map(|n| n.id.0 + tree.subtree_size(n.id).unwrap()).collect();
        Small { labels, end }
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    fn is_ancestor(&self, a: usize, d: usize) -> bool {
        a < d && d < self.end[a]
    }
}

pub fn ted_oracle(a: &Small, b: &Small) -> usize {
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut used = vec![false; b.len()];
    let mut best = a.len() + b.len();
    search(a, b, 0, &mut pairs, &mut used, &mut best);
    best
}

fn compatible(a: &Small, b: &Small, (i1, j1): (usize, usize), (i2, j2): (usize, usize)) -> bool {
    // i1 < i2 always holds: nodes of `a` are assigned in pre-order.
    j1 < j2 && a.is_ancestor(i1, i2) == b.is_ancestor(j1, j2)
}

fn cost(a: &Small, b: &Small, pairs: &[(usize, usize)]) -> usize {
    let relabels = pairs.iter().filter(|&&(i, j)| a.labels[i] != b.labels[j]).count();
    a.len() + b.len() - 2 * pairs.len() + relabels
}

fn search(
    a: &Small,
    b: &Small,
    i: usize,
    pairs: &mut Vec<(usize, usize)>,
    used: &mut [bool],
    best: &mut usize,
) {
    if i == a.len() {
        *best = (*best).min(cost(a, b, pairs));
        return;
    }
    search(a, b, i + 1, pairs, used, best);
    for j in 0..b.len() {
        if used[j] || !pairs.iter().all(|&p| compatible(a, b, p, (i, j))) {
            continue;
        }
        used[j] = true;
        pairs.push((i, j));
        search(a, b, i + 1, pairs, used, best);
        pairs.pop();
        used[j] = false;
    }
}

/// Random ordered tree with `size` nodes and labels drawn from `labels`.
pub fn random_tree(rng: &mut impl Rng, size: usize, labels: &[&str]) -> NodeSpec {
    assert!(size >= 1);
    // Attach node k to a uniformly chosen earlier node; children stay in
    // insertion order.
    let mut parent = vec![usize::MAX; size];
    for (k, p) in parent.iter_mut().enumerate().skip(1) {
        *p = rng.random_range(0..k);
    }
    let tags: Vec<&str> = (0..size).map(|_| labels[rng.random_range(0..labels.len())]).collect();
    fn build(k: usize, parent: &[usize], tags: &[&str]) -> NodeSpec {
        let children = (0..parent.len()).filter(|&c| parent[c] == k).map(|c| build(c, parent, tags));
        NodeSpec::new(tags[k]).children(children.collect::<Vec<_>>())
    }
    build(0, &parent, &tags)
}

// ---------------------------------------------------------------------------
// Arbitrary-precision evaluation of the training objectives, written directly
// from their closed forms.
// ---------------------------------------------------------------------------

pub struct Hp {
    p: usize,
    rm: RoundingMode,
    cc: Consts,
}

impl Hp {
    pub fn new() -> Hp {
        Hp {
            p: 320,
            rm: RoundingMode::ToEven,
            cc: Consts::new().expect("constants cache"),
        }
    }

    fn n(&self, x: f64) -> BigFloat {
        BigFloat::from_f64(x, self.p)
    }

    pub fn to_f64(x: &BigFloat) -> f64 {
        x.to_string().parse().expect("decimal rendering")
    }

    fn ln(&mut self, x: &BigFloat) -> BigFloat {
        x.ln(self.p, self.rm, &mut self.cc)
    }

    fn exp(&mut self, x: &BigFloat) -> BigFloat {
        x.exp(self.p, self.rm, &mut self.cc)
    }

    fn sum(&self, xs: &[f64]) -> BigFloat {
        xs.iter().fold(self.n(0.0), |acc, &x| acc.add(&self.n(x), self.p, self.rm))
    }

    /// Mean over sequences of `-log P`, with `P = exp(sum of token log-probs)`.
    pub fn sft_nll(&mut self, batch: &[Vec<f64>]) -> f64 {
        let mut total = self.n(0.0);
        for seq in batch {
            let prob = self.exp(&self.sum(seq));
            let nll = self.ln(&prob).neg();
            total = total.add(&nll, self.p, self.rm);
        }
        Self::to_f64(&total.div(&self.n(batch.len() as f64), self.p, self.rm))
    }

    /// `(loss, nll, or_term)` for winner/loser log-probabilities.
    pub fn orpo(&mut self, lw: f64, ll: f64, lambda: f64) -> (f64, f64, f64) {
        let one = self.n(1.0);
        let pw = self.exp(&self.n(lw));
        let pl = self.exp(&self.n(ll));
        let odds_w = pw.div(&one.sub(&pw, self.p, self.rm), self.p, self.rm);
        let odds_l = pl.div(&one.sub(&pl, self.p, self.rm), self.p, self.rm);
        let log_ratio = self.ln(&odds_w.div(&odds_l, self.p, self.rm));
        // sigma(z) = 1 / (1 + e^-z)
        let e = self.exp(&log_ratio.neg());
        let sigma = one.div(&one.add(&e, self.p, self.rm), self.p, self.rm);
        let or_term = self.ln(&sigma).neg();
        let nll = self.ln(&pw).neg();
        let loss = nll.add(&self.n(lambda).mul(&or_term, self.p, self.rm), self.p, self.rm);
        (Self::to_f64(&loss), Self::to_f64(&nll), Self::to_f64(&or_term))
    }

    /// `(r - mean) / population std`.
    pub fn grpo(&mut self, rewards: &[f64]) -> Vec<f64> {
        let n = self.n(rewards.len() as f64);
        let mean = self.sum(rewards).div(&n, self.p, self.rm);
        let mut var = self.n(0.0);
        for &r in rewards {
            let d = self.n(r).sub(&mean, self.p, self.rm);
            var = var.add(&d.mul(&d, self.p, self.rm), self.p, self.rm);
        }
        let std = var.div(&n, self.p, self.rm).sqrt(self.p, self.rm);
        rewards
            .iter()
            .map(|&r| Self::to_f64(&self.n(r).sub(&mean, self.p, self.rm).div(&std, self.p, self.rm)))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Model-output stand-ins for the pairing and scoring stages.
// ---------------------------------------------------------------------------

fn observation_ids(record: &PipelineRecord) -> Vec<NodeId> {
    let html = &record.instance.observation.html_text;
    html.match_indices("id=\"")
        .filter_map(|(i, m)| {
            let rest = &html[i + m.len()..];
            rest[..rest.find('"')?].parse().ok().map(NodeId)
        })
        .collect()
}

fn random_action(rng: &mut impl Rng, ids: &[NodeId]) -> Action {
    if ids.is_empty() || rng.random_bool(0.15) {
        return Action::None;
    }
    let element_id = ids[rng.random_range(0..ids.len())];
    match rng.random_range(0..3) {
        0 => Action::Click { element_id },
        1 => Action::Type { element_id, argument: "red shoes".into() },
        _ => Action::Select { element_id, argument: "Economy".into() },
    }
}

fn score(rng: &mut impl Rng) -> SequenceScore {
    let len = rng.random_range(1..6);
    SequenceScore {
        tokens: (0..len).map(|i| format!("t{i}")).collect(),
        token_logprobs: (0..len).map(|_| -rng.random_range(0.01..2.0)).collect(),
    }
}

/// Five sampled answers per instance: each either the gold action or a random
/// action over the page's candidate ids.
pub fn sample_pair_inputs(records: &[PipelineRecord], rng: &mut impl Rng) -> Vec<PairInput> {
    records
        .iter()
        .map(|record| {
            let ids = observation_ids(record);
            let gold = record.instance.label.clone();
            let samples = (0..5)
                .map(|_| {
                    let action = if rng.random_bool(0.5) { gold.clone() } else { random_action(rng, &ids) };
                    ScoredAction { action, score: score(rng) }
                })
                .collect();
            PairInput {
                prompt_id: record.instance.instance_id.clone(),
                gold: ScoredAction { action: gold, score: score(rng) },
                samples,
            }
        })
        .collect()
}

/// One prediction per base instance, right about two thirds of the time.
pub fn sample_predictions(records: &[PipelineRecord], rng: &mut impl Rng) -> Vec<StepRecord> {
    records
        .iter()
        .filter(|r| r.instance.kind == forge_core::InstanceKind::Base)
        .map(|record| {
            let gold = record.instance.label.clone();
            let predicted = if rng.random_bool(0.66) {
                gold.clone()
            } else {
                random_action(rng, &observation_ids(record))
            };
            StepRecord {
                task_id: record.task_id.clone(),
                step_index: record.step_index,
                raw_output: Some(predicted.to_output_text()),
                predicted,
                gold,
            }
        })
        .collect()
}

pub fn write_jsonl<T: serde::Serialize>(path: &std::path::Path, items: &[T]) {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).unwrap());
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Vec<T> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Runs every stage over the trajectory fixture in `dir` and returns each
/// produced file's name and bytes.
pub fn run_pipeline(dir: &std::path::Path, seed: u64, workers: usize) -> Vec<(String, Vec<u8>)> {
    use forge_core::pipeline::{self, PipelineConfig, StageStats};
    use rand::SeedableRng;

    let mut config = PipelineConfig::default();
    config.synthesis.seed = seed;
    let pool = forge_core::parallel::build_pool(workers).unwrap();
    let path = |name: &str| dir.join(name);
    let mut all_stats: Vec<StageStats> = Vec::new();
    let mut stage = |run: pipeline::StageFn, input: PathBuf, name: &str| {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path(&format!("{name}.jsonl"))).unwrap());
        let stats = run(&input, &mut out, &config, &pool).unwrap();
        assert_eq!(stats.hard_errors, 0, "{name}");
        std::fs::write(path(&format!("{name}.stats.json")), serde_json::to_string_pretty(&stats).unwrap()).unwrap();
        all_stats.push(stats);
    };
    stage(pipeline::run_clean, fixture_path("trajectories.jsonl"), "clean");
    stage(pipeline::run_mine, path("clean.jsonl"), "mine");
    stage(pipeline::run_perturb, path("mine.jsonl"), "dataset");
    stage(pipeline::run_synthesize, path("clean.jsonl"), "synthetic");

    let records: Vec<PipelineRecord> = read_jsonl(&path("dataset.jsonl"));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    write_jsonl(&path("samples.jsonl"), &sample_pair_inputs(&records, &mut rng));
    write_jsonl(&path("predictions.jsonl"), &sample_predictions(&records, &mut rng));
    stage(pipeline::run_pair, path("samples.jsonl"), "pairs");
    stage(pipeline::run_score, path("predictions.jsonl"), "rewards");
    std::fs::write(path("report.txt"), pipeline::render_report(&all_stats)).unwrap();

    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}
