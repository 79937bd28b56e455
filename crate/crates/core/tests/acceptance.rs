//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{cleaned, fixture, Hp, Small};
use forge_core::action::Action;
use forge_core::alignment::{
    compose_reward, grpo_advantages, orpo_loss, reward_from_output, sft_nll, GroupSample, PreferencePair,
    RewardConfig, RewardInputs, ScoredAction, SequenceScore,
};
use forge_core::counterfactual::{apply_action_mismatch, is_satisfiable, RuleSet};
use forge_core::dom::{DomTree, NodeId, NodeSpec};
use forge_core::instance::{InstanceKind, TrainingInstance};
use forge_core::metrics::{compute_report, MetricsConfig, StepRecord};
use forge_core::miner::{mine_hard_negatives, MiningConfig};
use forge_core::pipeline::{self, load_page, PipelineConfig, PipelineRecord};
use forge_core::preprocess::{extract_interactive, format_observation, observation_html, CleanConfig};
use forge_core::similarity::{hybrid_score, tree_edit_distance, SimilarityWeights};
use forge_core::synthesis::{
    consensus_filter, generate_candidate, verifier_messages, verify_candidate, ChatEndpoint, ChatMessage,
    EndpointError, MockBehavior, MockLedger, MockVerifier, SynthesisRecord, TaskType, Verdict,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(label: &str, elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, || format!("{label} took {elapsed:?}, limit {limit:?}"))
}

fn reward_cases() -> Outcome {
    let start = Instant::now();
    let cfg = RewardConfig::default();
    let gold = Action::Type { element_id: NodeId(42), argument: "Apple".into() };
    let a = reward_from_output("Element: 42\nOperation: Type \"Apple\"", &gold, &cfg).total;
    let b = compose_reward(
        RewardInputs { format_valid: true, element_correct: true, kind_correct: true, argument_f1: 0.5 },
        &cfg,
    )
    .total;
    let c = reward_from_output("Element: 99\nOperation: Type \"Apple\"", &gold, &cfg).total;
    within("reward cases", start.elapsed(), Duration::from_secs(1))?;
    for (name, got, want) in [("A", a, 3.1), ("B", b, 1.6), ("C", c, 0.1)] {
        check((got - want).abs() <= 1e-12, || format!("case {name}: {got} != {want}"))?;
    }
    Ok(format!("A={a} B={b} C={c}"))
}

fn delta_ranks_first(tree: &DomTree) -> Result<(), String> {
    let buttons: Vec<NodeId> = tree.nodes().filter(|n| n.tag == "button" && n.text.as_deref() == Some("Select")).map(|n| n.id).collect();
    check(buttons.len() == 2, || format!("expected two Select buttons, got {}", buttons.len()))?;
    let airline = |id: NodeId| {
        let card = tree.node(id).unwrap().parent.unwrap();
        tree.subtree(card).unwrap().iter().find(|n| n.attr("class") == Some("airline")).and_then(|n| n.text.clone())
    };
    let (united, delta) = (buttons[0], buttons[1]);
    check(airline(united).as_deref() == Some("United") && airline(delta).as_deref() == Some("Delta"), || "card order".into())?;
    let set = mine_hard_negatives(tree, united, &CleanConfig::default(), &MiningConfig::default()).map_err(|e| e.to_string())?;
    check(set.negatives.first().map(|s| s.candidate_id) == Some(delta), || {
        format!("top negative {:?}, expected Delta button {delta}", set.negatives.first())
    })?;
    check(set.negatives.iter().skip(1).all(|s| s.s_total < set.negatives[0].s_total), || "Delta is not strictly first".into())
}

fn flight_mining() -> Outcome {
    let bare = cleaned(&fixture("flight_cards.html"));
    delta_ranks_first(&bare)?;
    let path = bare.node_path(bare.nodes().filter(|n| n.tag == "button").nth(1).unwrap().id).unwrap();
    check(path.to_string() == "html[0]/body[0]/div[1]/button[0]", || format!("Delta path {path}"))?;
    let corpus = std::fs::read_to_string(common::fixture_path("trajectories.jsonl")).unwrap();
    let raw: serde_json::Value = serde_json::from_str(corpus.lines().next().unwrap()).unwrap();
    let page = cleaned(raw["html"].as_str().unwrap());
    delta_ranks_first(&page)?;
    Ok(format!("Delta first on the bare page and on a page with {} distractors", extract_interactive(&page, &CleanConfig::default()).len() - 2))
}

fn ted_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels = ["a", "b", "c"];
    let trees: Vec<DomTree> = (0..40).map(|i| DomTree::from_spec(common::random_tree(&mut rng, 1 + i % 6, &labels))).collect();
    let smalls: Vec<Small> = trees.iter().map(Small::from_tree).collect();
    let mut pairs = 0;
    for (ta, sa) in trees.iter().zip(&smalls) {
        for (tb, sb) in trees.iter().zip(&smalls) {
            let fast = tree_edit_distance(ta, NodeId(0), tb, NodeId(0)).unwrap();
            let slow = common::ted_oracle(sa, sb);
            check(fast == slow, || format!("mismatch: fast {fast}, oracle {slow}"))?;
            pairs += 1;
        }
    }
    within("TED sweep", start.elapsed(), Duration::from_secs(60))?;
    check(pairs >= 500, || format!("only {pairs} pairs"))?;
    Ok(format!("{pairs} pairs, 0 mismatches, {:.1?}", start.elapsed()))
}

fn random_page(rng: &mut ChaCha8Rng) -> DomTree {
    let tags = ["div", "span", "button", "a", "li", "input"];
    let classes = ["btn", "card", "primary", "nav", "item", "large"];
    let words = ["Select", "Buy", "Go", "United", "Delta", "Home", "Save"];
    fn decorate(spec: NodeSpec, rng: &mut ChaCha8Rng, classes: &[&str], words: &[&str]) -> NodeSpec {
        let mut spec = spec;
        if rng.random_bool(0.5) {
            let n = rng.random_range(1..3);
            let class: Vec<&str> = (0..n).map(|_| classes[rng.random_range(0..classes.len())]).collect();
            spec = spec.attr("class", class.join(" "));
        }
        if rng.random_bool(0.4) {
            spec = spec.text(words[rng.random_range(0..words.len())]);
        }
        if rng.random_bool(0.1) {
            spec = spec.attr("aria-label", words[rng.random_range(0..words.len())]);
        }
        let children = std::mem::take(&mut spec.children);
        spec.children(children.into_iter().map(|c| decorate(c, rng, classes, words)).collect::<Vec<_>>())
    }
    let size = rng.random_range(2..25);
    let shape = common::random_tree(rng, size, &tags);
    DomTree::from_spec(decorate(shape, rng, &classes, &words))
}

fn similarity_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let weights = SimilarityWeights::default();
    for _ in 0..1000 {
        let tree = random_page(&mut rng);
        let n = tree.node_count();
        let a = NodeId(rng.random_range(0..n));
        let b = NodeId((a.0 + rng.random_range(1..n)) % n);
        let s = hybrid_score(&tree, a, b, &weights).map_err(|e| e.to_string())?;
        for (name, v) in [("s_topo", s.s_topo), ("s_attr", s.s_attr), ("s_total", s.s_total)] {
            check((0.0..=1.0).contains(&v), || format!("{name} = {v} out of range"))?;
        }
        let formula = 0.6 * s.s_topo + 0.4 * s.s_attr;
        check((s.s_total - formula).abs() <= 1e-12, || format!("s_total {} vs {formula}", s.s_total))?;
    }
    Ok("1000 pairs within [0,1], s_total = 0.6 s_topo + 0.4 s_attr".into())
}

fn nested_page(depth: usize) -> DomTree {
    let mut spec = NodeSpec::new("button").attr("class", "go").child(NodeSpec::new("span").text("Go"));
    for _ in 1..depth {
        spec = NodeSpec::new("div").child(spec);
    }
    DomTree::from_spec(spec)
}

/// Runs one candidate through generation, verification and filtering, with
/// the verifier answering `answer`.
fn consensus_case(tree: &DomTree, target: NodeId, answer: Option<NodeId>) -> Result<Verdict, String> {
    let clean = CleanConfig::default();
    let endpoint = ChatEndpoint::default();
    let generator = |_: &[ChatMessage]| -> Result<String, EndpointError> { Ok("Click the Go button.".into()) };
    let reply = match answer {
        Some(id) => format!("Thought: found it.\nTarget ID: {id}"),
        None => "Thought: nothing fits.\nTarget ID: None".into(),
    };
    let verifier = move |_: &[ChatMessage]| -> Result<String, EndpointError> { Ok(reply.clone()) };
    let (instruction, target) =
        generate_candidate(tree, target, TaskType::NavigationIntent, &generator, &endpoint, &clean, 512).map_err(|e| e.to_string())?;
    let html = observation_html(tree, &clean);
    let predicted = verify_candidate(&html, &instruction, &verifier, &endpoint).map_err(|e| e.to_string())?;
    let record = SynthesisRecord {
        page_id: "p".into(),
        html,
        instruction,
        target_id: target,
        task_type: TaskType::NavigationIntent,
        verifier_id: predicted,
        verdict: Verdict::Rejected,
    };
    Ok(consensus_filter(record, tree, 0.9).verdict)
}

fn consensus_semantics() -> Outcome {
    // Button at depth 19 with an inner span: span path shares 19 of 20 steps.
    let deep = nested_page(19);
    let (button, span) = (NodeId(18), NodeId(19));
    check(deep.node_path(span).unwrap().len() == 20, || "depth-19 fixture".into())?;
    let exact = consensus_case(&deep, button, Some(button))?;
    let overlap_095 = consensus_case(&deep, button, Some(span))?;
    // Depth 9: 9 of 10 steps shared, exactly 0.9.
    let shallow = nested_page(9);
    let overlap_090 = consensus_case(&shallow, NodeId(8), Some(NodeId(9)))?;
    let declined = consensus_case(&deep, button, None)?;
    check(exact == Verdict::ExactMatch && exact.is_retained(), || format!("equal ids gave {exact:?}"))?;
    check(overlap_095 == Verdict::PathOverlap && overlap_095.is_retained(), || format!("0.95 gave {overlap_095:?}"))?;
    check(overlap_090 == Verdict::Rejected, || format!("0.9 gave {overlap_090:?}"))?;
    check(declined == Verdict::VerifierNone && !declined.is_retained(), || format!("None gave {declined:?}"))?;

    // Blindness: the verifier request is a function of page and instruction
    // only. Two different generator targets with the same instruction produce
    // byte-identical verifier payloads, and those payloads mention neither
    // target outside the page itself.
    let page = cleaned(&fixture("flight_cards.html"));
    let clean = CleanConfig::default();
    let html = observation_html(&page, &clean);
    let buttons: Vec<NodeId> = extract_interactive(&page, &clean);
    let recorded = std::sync::Mutex::new(Vec::new());
    let recorder = |messages: &[ChatMessage]| -> Result<String, EndpointError> {
        recorded.lock().unwrap().push(messages.to_vec());
        Ok("Target ID: None".into())
    };
    let generator = |_: &[ChatMessage]| -> Result<String, EndpointError> { Ok("Select the United flight.".into()) };
    let endpoint = ChatEndpoint::default();
    for &target in &buttons {
        let (instruction, _) =
            generate_candidate(&page, target, TaskType::ReasoningQuestion, &generator, &endpoint, &clean, 512).map_err(|e| e.to_string())?;
        verify_candidate(&html, &instruction, &recorder, &endpoint).map_err(|e| e.to_string())?;
    }
    let recorded = recorded.into_inner().unwrap();
    check(recorded.len() == 2 && recorded[0] == recorded[1], || "verifier payload depends on the target".into())?;
    check(recorded[0] == verifier_messages(&html, "Select the United flight.").to_vec(), || "unexpected verifier payload".into())?;
    let outside_page: String = recorded[0].iter().map(|m| m.content.replace(&html, "")).collect();
    for &target in &buttons {
        let markup = forge_core::preprocess::element_html(&page, target, &clean);
        check(!outside_page.contains(&markup) && !outside_page.contains(&target.to_string()), || {
            format!("verifier payload leaks target {target}")
        })?;
    }
    // The echo mock reaches agreement only through its side ledger.
    let ledger = MockLedger::default();
    let blind = MockVerifier::new(MockBehavior::Echo, ledger);
    check(
        verify_candidate(&html, "Select the United flight.", &blind, &endpoint).map_err(|e| e.to_string())?.is_none(),
        || "echo verifier answered without a ledger entry".into(),
    )?;
    Ok("exact→retained, 0.95→retained, 0.9→rejected, None→rejected, payload target-independent".into())
}

fn rejection_soundness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = PipelineConfig::default();
    let pool = forge_core::parallel::build_pool(2).unwrap();
    let clean_out = dir.path().join("clean.jsonl");
    let out = dir.path().join("perturb.jsonl");
    let mut w = std::fs::File::create(&clean_out).unwrap();
    pipeline::run_clean(&common::fixture_path("trajectories.jsonl"), &mut w, &config, &pool).map_err(|e| e.to_string())?;
    let mut w = std::fs::File::create(&out).unwrap();
    pipeline::run_perturb(&clean_out, &mut w, &config, &pool).map_err(|e| e.to_string())?;
    let records: Vec<PipelineRecord> = common::read_jsonl(&out);
    let rejections: Vec<&PipelineRecord> = records.iter().filter(|r| r.instance.kind == InstanceKind::Rejection).collect();
    check(!rejections.is_empty(), || "no rejection instances produced".into())?;
    for r in &rejections {
        let tree = load_page(&r.page_html, &config.clean)?;
        let probe = r.instance.metadata.probe.as_deref().unwrap_or_default();
        check(r.instance.label == Action::None, || format!("{} is not labelled None", r.instance.instance_id))?;
        check(!is_satisfiable(&tree, probe, &config.clean), || format!("{} is satisfiable via {probe:?}", r.instance.instance_id))?;
    }

    // The out-of-stock page: asking for the cart cannot be satisfied because
    // the only purchase button is disabled.
    let page = cleaned(&fixture("out_of_stock.html"));
    let clean = CleanConfig::default();
    let base = TrainingInstance {
        instance_id: "stock:0:base".into(),
        observation: format_observation(&page, "Add this item to my wishlist", &[], &clean),
        instruction: "Add this item to my wishlist".into(),
        history: vec![],
        label: Action::None,
        kind: InstanceKind::Base,
        metadata: Default::default(),
    };
    let rules = RuleSet::default();
    let rejection = apply_action_mismatch(&base, &page, &rules.verb_map, &clean).ok_or("no rejection for the out-of-stock page")?;
    check(rejection.perturbed_instruction == "Add this item to my cart", || rejection.perturbed_instruction.clone())?;
    check(rejection.label == Action::None, || format!("label {:?}", rejection.label))?;
    let console = rejections.iter().find(|r| r.task_id == "shop-console").ok_or("no rejection on the console page")?;
    check(console.instance.instruction == "Add this item to my cart", || console.instance.instruction.clone())?;
    Ok(format!("{} rejections unsatisfiable; out-of-stock cart request labelled None", rejections.len()))
}

fn alignment_oracle() -> Outcome {
    let mut hp = Hp::new();
    let mut worst: f64 = 0.0;
    let mut track = |a: f64, b: f64| worst = worst.max((a - b).abs());

    let probs = [1e-6, 0.01, 0.1, 0.25, 0.5, 0.6, 0.75, 0.9, 0.99, 0.999999];
    for &pw in &probs {
        for &pl in &probs {
            let (lw, ll) = (f64::ln(pw), f64::ln(pl));
            let pair = PreferencePair {
                prompt_id: "g".into(),
                winner: ScoredAction { action: Action::None, score: SequenceScore { tokens: vec![], token_logprobs: vec![lw] } },
                loser: ScoredAction { action: Action::None, score: SequenceScore { tokens: vec![], token_logprobs: vec![ll] } },
            };
            let got = orpo_loss(&pair, 0.1).map_err(|e| e.to_string())?;
            let (loss, nll, or_term) = hp.orpo(lw, ll, 0.1);
            track(got.loss, loss);
            track(got.nll, nll);
            track(got.or_term, or_term);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let batch: Vec<Vec<f64>> = (0..rng.random_range(1..8))
            .map(|_| (0..rng.random_range(1..20)).map(|_| -rng.random_range(0.0..3.0)).collect())
            .collect();
        let scores: Vec<SequenceScore> = batch.iter().map(|lp| SequenceScore { tokens: vec![], token_logprobs: lp.clone() }).collect();
        track(sft_nll(&scores).map_err(|e| e.to_string())?, hp.sft_nll(&batch));
    }

    let mut moments_checked = 0;
    for i in 0..100 {
        let rewards: Vec<f64> = match i % 4 {
            0 => vec![3.1; 5],
            1 => (0..5).map(|_| [0.0, 0.1, 1.1, 2.1, 3.1][rng.random_range(0..5)]).collect(),
            _ => (0..5).map(|_| rng.random_range(0.0..3.1)).collect(),
        };
        let adv = grpo_advantages(&GroupSample { rewards: rewards.clone(), group_size: 5 }).map_err(|e| e.to_string())?;
        let distinct = rewards.iter().any(|&r| r != rewards[0]);
        if distinct {
            for (a, o) in adv.iter().zip(hp.grpo(&rewards)) {
                track(*a, o);
            }
            let mean = adv.iter().sum::<f64>() / 5.0;
            let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 5.0;
            check(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9, || format!("moments {mean} {var} for {rewards:?}"))?;
            moments_checked += 1;
        } else {
            check(adv.iter().all(|&a| a == 0.0), || format!("zero-variance group gave {adv:?}"))?;
        }
    }
    check(worst < 1e-9, || format!("max abs error {worst:e}"))?;
    Ok(format!("max abs error {worst:.2e} over 300 points; {moments_checked} groups with mean 0 / variance 1"))
}

fn random_action(rng: &mut ChaCha8Rng) -> Action {
    let element_id = NodeId(rng.random_range(0..4));
    let words = ["red", "shoes", "apple", "blue"];
    let arg = |rng: &mut ChaCha8Rng| (0..rng.random_range(1..3)).map(|_| words[rng.random_range(0..4)]).collect::<Vec<_>>().join(" ");
    match rng.random_range(0..4) {
        0 => Action::Click { element_id },
        1 => Action::Type { element_id, argument: arg(rng) },
        2 => Action::Select { element_id, argument: arg(rng) },
        _ => Action::None,
    }
}

fn metrics_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let config = MetricsConfig::default();
    for _ in 0..1000 {
        let mut records = Vec::new();
        for t in 0..rng.random_range(1..6) {
            for s in 0..rng.random_range(1..7) {
                let gold = random_action(&mut rng);
                let predicted = if rng.random_bool(0.5) { gold.clone() } else { random_action(&mut rng) };
                records.push(StepRecord { task_id: format!("t{t}"), step_index: s, predicted, gold, raw_output: None });
            }
        }
        let r = compute_report(&records, &config).map_err(|e| e.to_string())?;
        let mean = (r.acc_micro + r.f1_micro + r.acc_macro + r.f1_macro) / 4.0;
        check((r.composite - mean).abs() <= 1e-12, || format!("composite {} vs {mean}", r.composite))?;
        check(r.step_sr <= r.acc_micro, || format!("step_sr {} > acc {}", r.step_sr, r.acc_micro))?;
    }
    let click = |i| Action::Click { element_id: NodeId(i) };
    let divergence = vec![
        StepRecord { task_id: "a".into(), step_index: 0, predicted: click(1), gold: click(1), raw_output: None },
        StepRecord { task_id: "b".into(), step_index: 0, predicted: Action::None, gold: click(1), raw_output: None },
        StepRecord { task_id: "b".into(), step_index: 1, predicted: Action::None, gold: click(2), raw_output: None },
    ];
    let r = compute_report(&divergence, &config).map_err(|e| e.to_string())?;
    check((r.acc_micro - 1.0 / 3.0).abs() <= 1e-12 && (r.acc_macro - 0.5).abs() <= 1e-12, || {
        format!("acc_micro {} acc_macro {}", r.acc_micro, r.acc_macro)
    })?;
    Ok(format!("1000 runs; divergence fixture acc_micro={:.4} acc_macro={}", r.acc_micro, r.acc_macro))
}

fn end_to_end_determinism() -> Outcome {
    let start = Instant::now();
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = common::run_pipeline(a.path(), 11, 4);
    let second = common::run_pipeline(b.path(), 11, 2);
    within("two pipeline runs", start.elapsed(), Duration::from_secs(30))?;
    check(first.len() == second.len(), || "different file sets".into())?;
    for ((na, da), (nb, db)) in first.iter().zip(&second) {
        check(na == nb && da == db, || format!("{na} differs between runs"))?;
    }
    let jsonl = first.iter().filter(|(n, _)| n.ends_with(".jsonl")).count();
    Ok(format!("{jsonl} JSONL files byte-identical across runs, {:.1?}", start.elapsed()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("Reward case table", reward_cases),
        ("Flight-card mining", flight_mining),
        ("TED oracle equivalence", ted_equivalence),
        ("Similarity bounds & formula", similarity_bounds),
        ("Consensus filter semantics", consensus_semantics),
        ("Rejection soundness", rejection_soundness),
        ("Alignment math oracle", alignment_oracle),
        ("Metrics identities", metrics_identities),
        ("End-to-end determinism", end_to_end_determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("criterion {} PASS  {name}: {detail}", i + 1),
            Err(reason) => {
                failed += 1;
                println!("criterion {} FAIL  {name}: {reason}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
