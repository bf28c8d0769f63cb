//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use autoskill::agent::{
    call_model_with_retry, resume_task, run_task, truncate_tool_output, AgentDeps, LoopConfig,
    LoopError, ModelRequest, Purpose, RecordingSleeper, RetryError, RunStatus, ScriptedModel,
    TimeoutClass, ToolRegistry, MAX_RETRY, TOOL_TEXT_LIMIT, VERIFY_COMPLETION_TURN_THRESHOLD,
};
use autoskill::context::{
    maybe_compress_history, AgentContext, CompressionBudget, CompressionLevel, ContextError,
    HeadTruncationSummarizer, TurnPayload,
};
use autoskill::lifecycle::{evaluate_skill, refine_skill};
use autoskill::memory::{self, MemoryTier};
use autoskill::sandbox::{
    normalize_sandbox_path, LocalProcessFactory, SandboxError, SandboxFactory, EXEC_CODE_TIMEOUT,
};
use autoskill::session::{self, EventKind, WORKSPACE_ENTRIES};
use autoskill::skill_bank::BankError;
use autoskill::skill_package::{parse_skill_md, write_skill_package, SkillPackage, SKILL_MD};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde_json::json;

const SCHEMA_BLOCK: &str = "---
name:        <kebab-case skill identifier; must match the directory name>
description: <one-paragraph natural-language description; this is what the
              agent reads when deciding whether to invoke the skill>
---

# <Skill title in Title Case>

## When to use
- Bullet list of triggering task types.

## Core principles
1. Numbered list of invariants the implementation must preserve.

## Recommended tools and libraries
- Concrete library names, CLI commands, or sandbox tools.

## Workflow
Step-by-step procedure the agent should follow at runtime.
";

fn main() {
    // The 60 s kill check runs in the background while the other criteria run.
    let (kill_tx, kill_rx) = mpsc::channel();
    thread::spawn(move || {
        let _ = kill_tx.send(panic::catch_unwind(sandbox_run_class_timeout).map_err(panic_message));
    });

    type Check = Box<dyn Fn()>;
    let criteria: Vec<(&str, Check)> = vec![
        ("1 format round-trip", Box::new(format_round_trip)),
        ("2 compression properties", Box::new(compression_properties)),
        ("3 registration gating", Box::new(registration_gating)),
        ("4 resume equivalence", Box::new(resume_equivalence)),
        ("5 memory suite", Box::new(memory_suite)),
        (
            "6 loop constants",
            Box::new(move || loop_constants(&kill_rx)),
        ),
        (
            "7 end-to-end scripted session",
            Box::new(end_to_end_session),
        ),
        ("8 sandbox isolation", Box::new(sandbox_isolation)),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).map_err(panic_message);
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(()) => println!("PASS criterion {name} ({secs:.2}s)"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name} ({secs:.2}s): {msg}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_message(e: Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

// 1 -------------------------------------------------------------------------

fn format_round_trip() {
    let start = Instant::now();
    let packages = skill_fixtures();
    assert!(packages.len() >= 20, "only {} fixtures", packages.len());
    let tmp = tempfile::tempdir().unwrap();
    for dir in &packages {
        let name = dir.file_name().unwrap().to_str().unwrap();
        let text = fs::read_to_string(dir.join(SKILL_MD)).unwrap();
        let parsed = parse_skill_md(&text, name).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(
            parsed.skill_md.render(),
            text,
            "{name}: SKILL.md render differs"
        );

        let pkg = SkillPackage::load(dir).unwrap();
        let written = write_skill_package(&pkg, tmp.path()).unwrap();
        assert_eq!(
            tree_bytes(&written),
            tree_bytes(dir),
            "{name}: package bytes differ after write"
        );
        assert_eq!(
            SkillPackage::load(&written).unwrap(),
            pkg,
            "{name}: reparse differs"
        );
    }

    // The schema block is reproduced byte for byte apart from a concrete name.
    let template = fs::read_to_string(
        fixtures()
            .join("skills/skill-schema-template")
            .join(SKILL_MD),
    )
    .unwrap();
    let expected = SCHEMA_BLOCK.replace(
        "<kebab-case skill identifier; must match the directory name>",
        "skill-schema-template",
    );
    assert_eq!(template, expected);
    let parsed = parse_skill_md(&template, "skill-schema-template").unwrap();
    assert_eq!(
        parsed.skill_md.frontmatter.description(),
        "<one-paragraph natural-language description; this is what the agent reads when deciding whether to invoke the skill>"
    );
    assert!(
        start.elapsed() < Duration::from_secs(5),
        "took {:?}",
        start.elapsed()
    );
}

// 2 -------------------------------------------------------------------------

fn chain_with(sizes_bytes: &[usize]) -> (AgentContext, Vec<TurnPayload>) {
    let mut ctx = AgentContext::new(CompressionBudget::default());
    let mut shadow = Vec::new();
    for (i, &n) in sizes_bytes.iter().enumerate() {
        let p = TurnPayload::text(char::from(b'a' + (i % 26) as u8).to_string().repeat(n));
        shadow.push(p.clone());
        ctx.append_turn(p);
    }
    (ctx, shadow)
}

fn compression_properties() {
    let start = Instant::now();
    let budget = CompressionBudget::default();
    assert_eq!(
        (
            budget.compress_token_threshold,
            budget.node_compress_token_threshold,
            budget.keep_first_turns,
            budget.keep_last_turns
        ),
        (180_000, 15_000, 5, 5)
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut levels = [0usize; 4];
    for case in 0..1_000 {
        let len = rng.random_range(1..=60);
        let sizes: Vec<usize> = (0..len).map(|_| rng.random_range(0..=40 * 1024)).collect();
        let (mut ctx, shadow) = chain_with(&sizes);
        let before_ids = ctx.active_chain_ids().unwrap();
        let before_texts: Vec<String> = ctx
            .active_chain()
            .unwrap()
            .into_iter()
            .map(|e| e.text)
            .collect();
        let tokens: Vec<usize> = sizes.iter().map(|n| n.div_ceil(4)).collect();
        let snapshot = ctx.to_snapshot();
        let mut summarizer = HeadTruncationSummarizer { max_bytes: 2_048 };
        let result = maybe_compress_history(&mut ctx, &mut summarizer);

        assert_eq!(
            ctx.replay_full_history().unwrap(),
            shadow,
            "case {case}: replay changed"
        );
        let report = match result {
            Err(ContextError::ChainTooShort { .. }) => {
                levels[3] += 1;
                assert!(
                    len <= 10 && tokens.iter().sum::<usize>() > 180_000,
                    "case {case}"
                );
                assert_eq!(
                    ctx.to_snapshot(),
                    snapshot,
                    "case {case}: modified on refusal"
                );
                continue;
            }
            r => r.unwrap(),
        };
        levels[report.level as usize] += 1;

        // Budget restoration.
        assert!(
            ctx.active_tokens().unwrap() <= 180_000,
            "case {case}: still over budget"
        );
        assert_eq!(
            report.tokens_after,
            ctx.active_tokens().unwrap(),
            "case {case}"
        );

        // Pinning.
        let ids = ctx.active_chain_ids().unwrap();
        let texts: Vec<String> = ctx
            .active_chain()
            .unwrap()
            .into_iter()
            .map(|e| e.text)
            .collect();
        let pin = 5.min(before_ids.len());
        assert_eq!(ids[..pin], before_ids[..pin], "case {case}: head moved");
        assert_eq!(
            texts[..pin],
            before_texts[..pin],
            "case {case}: head rewritten"
        );
        assert_eq!(
            ids[ids.len() - pin..],
            before_ids[before_ids.len() - pin..],
            "case {case}: tail moved"
        );
        assert_eq!(
            texts[texts.len() - pin..],
            before_texts[before_texts.len() - pin..],
            "case {case}: tail rewritten"
        );

        // Level 1 before level 2.
        if report.level == CompressionLevel::Level2 {
            assert!(report.level1_attempted, "case {case}");
            let eligible: Vec<usize> = (5..len - 5).filter(|&p| tokens[p] > 15_000).collect();
            assert_eq!(
                report.level1_positions, eligible,
                "case {case}: level 2 ran before level 1 was exhausted"
            );
            assert_eq!(ids.len(), 11, "case {case}");
        }
        if report.level == CompressionLevel::Untouched {
            assert_eq!(ids, before_ids, "case {case}");
        }

        // Summary-node isolation.
        let originals: BTreeSet<&str> = before_ids.iter().map(String::as_str).collect();
        for node in ctx.nodes() {
            if node.is_summary() {
                assert!(
                    node.history_prev().is_none() && node.history_next().is_none(),
                    "case {case}"
                );
                assert!(!originals.contains(node.node_id()), "case {case}");
            } else {
                for link in [node.history_prev(), node.history_next()]
                    .into_iter()
                    .flatten()
                {
                    assert!(
                        originals.contains(link),
                        "case {case}: history links to a summary"
                    );
                }
            }
        }
    }
    // Payloads of at most 40 KB never exceed the per-node threshold, so level 1
    // is exercised by the worked examples rather than the random chains.
    assert!(
        levels[0] > 0 && levels[2] > 0,
        "uncovered levels: {levels:?}"
    );
    worked_examples();
    assert!(
        start.elapsed() < Duration::from_secs(30),
        "took {:?}",
        start.elapsed()
    );
}

fn worked_examples() {
    // 12 turns, all small.
    let (mut ctx, _) = chain_with(&[50_000 * 4 / 12; 12]);
    let r =
        maybe_compress_history(&mut ctx, &mut HeadTruncationSummarizer { max_bytes: 100 }).unwrap();
    assert_eq!(r.level, CompressionLevel::Untouched);

    // 12 turns, turn 7 at 20K tokens, 185K in total.
    let mut sizes = [15_000 * 4; 12];
    sizes[6] = 20_000 * 4;
    let (mut ctx, shadow) = chain_with(&sizes);
    assert_eq!(ctx.active_tokens().unwrap(), 185_000);
    let ids = ctx.active_chain_ids().unwrap();
    let r =
        maybe_compress_history(&mut ctx, &mut HeadTruncationSummarizer { max_bytes: 100 }).unwrap();
    assert_eq!(r.level, CompressionLevel::Level1);
    assert_eq!(r.level1_positions, vec![6]);
    assert_eq!(r.level2_span, None);
    assert_eq!(r.tokens_after, 165_025);
    assert_eq!(ctx.active_chain_ids().unwrap(), ids);
    assert!(ctx.node(&ids[6]).unwrap().is_node_compressed());
    assert_eq!(ctx.replay_full_history().unwrap(), shadow);

    // 40 turns still over budget after level 1.
    let (mut ctx, shadow) = chain_with(&[5_000 * 4; 40]);
    let ids = ctx.active_chain_ids().unwrap();
    let r =
        maybe_compress_history(&mut ctx, &mut HeadTruncationSummarizer { max_bytes: 100 }).unwrap();
    assert_eq!(r.level, CompressionLevel::Level2);
    assert_eq!(r.level2_span, Some((5, 35)));
    let after = ctx.active_chain_ids().unwrap();
    assert_eq!(after.len(), 11);
    assert_eq!(after[..5], ids[..5]);
    assert_eq!(after[6..], ids[35..]);
    assert!(ctx.node(&after[5]).unwrap().is_summary());
    assert_eq!(ctx.replay_full_history().unwrap().len(), 40);
    assert_eq!(ctx.replay_full_history().unwrap(), shadow);
}

// 3 -------------------------------------------------------------------------

fn registration_gating() {
    let tmp = tempfile::tempdir().unwrap();
    let home = new_home(tmp.path());
    let clock = step_clock();
    let mut bank = open_bank(&home, clock);
    let factory = LocalProcessFactory::default();
    let staging = tmp.path().join("staging");
    let pkg = SkillPackage::load(
        &write_skill_package(
            &SkillPackage::load(&fixtures().join("buggy/add-numbers")).unwrap(),
            &staging,
        )
        .unwrap(),
    )
    .unwrap();

    let first = evaluate_skill(&pkg, &factory, EXEC_CODE_TIMEOUT).unwrap();
    assert_eq!((first.tests_run, first.tests_passed), (1, 0));
    match bank.register_skill(&pkg, &first) {
        Err(BankError::EvaluationFailed { .. }) => {}
        other => panic!("failing package was not refused: {other:?}"),
    }
    assert!(!bank.contains("add-numbers"));
    assert!(!home.skills_dir().join("add-numbers").exists());

    let mut fixer = ScriptedModel::from_json(
        &json!({"generation": {"refine": [json!({"patches": {"scripts/add.sh": "#!/bin/sh\necho $(($1 + $2))\n"}}).to_string()]}})
            .to_string(),
    )
    .unwrap();
    let refined = refine_skill(pkg, first, &mut fixer, &factory, 3, EXEC_CODE_TIMEOUT).unwrap();
    assert_eq!(refined.rounds, 1);
    assert!(refined.result.all_passed());
    let reg = bank
        .register_skill(&refined.package, &refined.result)
        .unwrap();
    assert!(!reg.already_registered);
    assert!(bank.contains("add-numbers"));

    // Post-hoc scan: every package in the bank passes its own tests, and
    // every registration was recorded with a passing evaluation.
    let mut scanned = 0;
    for entry in fs::read_dir(home.skills_dir()).unwrap() {
        let path = entry.unwrap().path();
        if !path.is_dir() || path.file_name().unwrap().to_string_lossy().starts_with('.') {
            continue;
        }
        let pkg = SkillPackage::load(&path).unwrap();
        let eval = evaluate_skill(&pkg, &factory, EXEC_CODE_TIMEOUT).unwrap();
        assert!(
            eval.all_passed(),
            "{} is in the bank but fails its tests",
            pkg.name()
        );
        scanned += 1;
    }
    assert_eq!(scanned, 1);
    let events = bank.registry_events().unwrap();
    assert!(!events.is_empty());
    for e in events.iter().filter(|e| e.action == "register") {
        assert!(
            e.eval_passed == Some(true) && e.tests_run.unwrap_or(0) > 0,
            "{} registered with failing evaluation",
            e.name
        );
    }
}

// 4 -------------------------------------------------------------------------

struct RunOutput {
    events: String,
    stdout: String,
    replay: Vec<TurnPayload>,
    run_meta: String,
    memory: String,
}

fn resume_cfg() -> LoopConfig {
    LoopConfig {
        budget: small_budget(),
        ..LoopConfig::default()
    }
}

fn resume_run(root: &Path, split: Option<usize>) -> RunOutput {
    let home = new_home(root);
    let notes = root.join("notes.txt");
    fs::write(&notes, "remember the milk\n").unwrap();
    let ws = session::create_session(&home, "Work for ten turns.", &[notes], &[], Some("resume"))
        .unwrap();
    let clock = step_clock();
    let mut bank = open_bank(&home, clock.clone());

    let mut model = script("ten_turns.json");
    let mut deps = AgentDeps::deterministic(clock.clone(), 3);
    let status = match split {
        None => run_task(&home, &ws, &mut bank, &mut model, &resume_cfg(), &mut deps).unwrap(),
        Some(k) => {
            let cfg = LoopConfig {
                stop_after_turns: Some(k),
                ..resume_cfg()
            };
            assert_eq!(
                run_task(&home, &ws, &mut bank, &mut model, &cfg, &mut deps).unwrap(),
                RunStatus::Paused { turn_count: k }
            );
            // A fresh process: new model, bank handle and deps; same clock.
            let mut model = script("ten_turns.json");
            let mut bank = open_bank(&home, clock.clone());
            let mut deps = AgentDeps::deterministic(clock.clone(), 3);
            resume_task(
                &home,
                "resume",
                &mut bank,
                &mut model,
                &resume_cfg(),
                &mut deps,
            )
            .unwrap()
        }
    };
    let RunStatus::Finished(meta) = status else {
        panic!("run did not finish")
    };
    assert_eq!(meta.turn_count, 10);
    let snapshot = session::load_snapshot(&ws, resume_cfg().budget).unwrap();
    RunOutput {
        events: fs::read_to_string(ws.path(session::EVENTS_JSONL)).unwrap(),
        stdout: fs::read_to_string(ws.path(session::AGENT_STDOUT)).unwrap(),
        replay: snapshot.replay_full_history().unwrap(),
        run_meta: fs::read_to_string(ws.path(session::RUN_META_JSON)).unwrap(),
        memory: fs::read_to_string(ws.path(session::MEMORY_MD)).unwrap(),
    }
}

fn resume_equivalence() {
    let tmp = tempfile::tempdir().unwrap();
    let reference = resume_run(&tmp.path().join("unsplit"), None);
    let kinds: Vec<serde_json::Value> = reference
        .events
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].clone())
        .collect();
    assert!(
        kinds.contains(&json!("compression")),
        "the reference run never compressed"
    );
    assert_eq!(reference.replay.len(), 10);
    for k in 1..=9 {
        let split = resume_run(&tmp.path().join(format!("split-{k}")), Some(k));
        assert!(
            split.events == reference.events,
            "split at {k}: events differ"
        );
        assert!(
            split.stdout == reference.stdout,
            "split at {k}: stdout log differs"
        );
        assert!(
            split.replay == reference.replay,
            "split at {k}: replay differs"
        );
        assert_eq!(
            split.run_meta, reference.run_meta,
            "split at {k}: run_meta differs"
        );
        assert_eq!(
            split.memory, reference.memory,
            "split at {k}: session memory differs"
        );
    }
}

// 5 -------------------------------------------------------------------------

fn memory_suite() {
    let header =
        Regex::new(r"^## [0-9]{4}-[0-9]{2}-[0-9]{2} [0-9]{2}:[0-9]{2}:[0-9]{2} UTC$").unwrap();
    assert_eq!(memory::format_header(t0()), "## 2026-05-07 10:34:33 UTC");

    let tmp = tempfile::tempdir().unwrap();
    let home = new_home(tmp.path());
    session::create_session(&home, "memory", &[], &[], Some("mem")).unwrap();
    fs::create_dir_all(home.skills_dir().join("csv-summarize")).unwrap();
    let tiers = [
        MemoryTier::LongTerm,
        MemoryTier::Session("mem".into()),
        MemoryTier::Skill("csv-summarize".into()),
    ];
    let clock = step_clock();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut expected: Vec<Vec<String>> = vec![Vec::new(); 3];
    for step in 0..300 {
        let t = rng.random_range(0..3);
        let path = tiers[t].path(&home);
        let before = memory::read_text(&path).unwrap();
        let lines = rng.random_range(1..4);
        let content: Vec<String> = (0..lines)
            .map(|l| {
                format!(
                    "note {step}.{l}: {}",
                    "ü#x ".repeat(rng.random_range(0..20))
                )
            })
            .collect();
        let content = content.join("\n");
        let block = memory::append_block(&path, &content, &*clock).unwrap();
        expected[t].push(memory::normalize_content(&content));

        let after = memory::read_text(&path).unwrap();
        assert!(
            after.starts_with(&before),
            "step {step}: existing entries changed"
        );
        let appended = &after[before.len()..];
        let first_line = appended.lines().next().unwrap();
        assert!(
            header.is_match(first_line),
            "step {step}: header `{first_line}`"
        );
        assert_eq!(
            appended,
            memory::render_block(block.timestamp.unwrap(), &block.content)
        );

        let blocks = memory::read_blocks(&path).unwrap();
        let contents: Vec<String> = blocks.iter().map(|b| b.content.clone()).collect();
        assert_eq!(contents, expected[t], "step {step}: read-after-write");
        assert!(blocks.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    }
    for (t, tier) in tiers.iter().enumerate() {
        let text = memory::read_text(&tier.path(&home)).unwrap();
        let headers = text.lines().filter(|l| l.starts_with("## ")).count();
        assert_eq!(headers, expected[t].len());
        assert!(text
            .lines()
            .filter(|l| l.starts_with("## "))
            .all(|l| header.is_match(l)));
    }
}

// 6 -------------------------------------------------------------------------

fn sandbox_run_class_timeout() {
    assert_eq!(EXEC_CODE_TIMEOUT, Duration::from_secs(60));
    let registry = ToolRegistry::with_builtins();
    let class = registry.spec("sandbox_run").unwrap().timeout_class;
    assert_eq!(class, TimeoutClass::ExecCode);
    let timeout = class.duration(&LoopConfig::default());
    assert_eq!(timeout, Duration::from_secs(60));

    let mut sbx = LocalProcessFactory::default().create_sandbox().unwrap();
    let start = Instant::now();
    let r = sbx
        .run("echo started; sleep 120; echo finished", timeout)
        .unwrap();
    let elapsed = start.elapsed();
    sbx.close();
    assert!(r.timed_out, "not killed");
    assert!(
        elapsed >= Duration::from_secs(60),
        "killed early after {elapsed:?}"
    );
    assert!(
        elapsed < Duration::from_secs(70),
        "killed late after {elapsed:?}"
    );
    assert!(r.stdout.contains("started") && !r.stdout.contains("finished"));
}

/// Number of forced verify_completion calls when final_answer arrives at `turn`.
fn forced_verifications(turn: usize) -> usize {
    let mut turns: Vec<serde_json::Value> = (1..turn)
        .map(|t| json!({"text": format!("working {t}")}))
        .collect();
    turns.push(json!({"text": "done", "tool_calls": [{"name": "final_answer", "arguments": {"message": "ok"}}]}));
    let mut model = ScriptedModel::from_json(&json!({"turns": turns}).to_string()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let run = run_scripted(
        tmp.path(),
        "gate",
        "gate",
        &mut model,
        &LoopConfig::default(),
    );
    assert!(matches!(run.result, Ok(RunStatus::Finished(_))));
    events(&run.ws)
        .iter()
        .filter(|e| {
            e.kind == EventKind::ToolCall
                && e.payload["name"] == "verify_completion"
                && e.payload["forced"] == true
        })
        .count()
}

fn loop_constants(kill: &mpsc::Receiver<Result<(), String>>) {
    // Truncation.
    assert_eq!(TOOL_TEXT_LIMIT, 8_192);
    let exact = "a".repeat(8_192);
    assert_eq!(truncate_tool_output(&exact, TOOL_TEXT_LIMIT), exact);
    let over = "a".repeat(8_193);
    let cut = truncate_tool_output(&over, TOOL_TEXT_LIMIT);
    assert_eq!(cut.chars().count(), 8_192);
    assert!(cut.ends_with(" chars omitted]"));
    let mut model = ScriptedModel::from_json(
        &json!({"turns": [
            {"text": "big", "tool_calls": [{"name": "terminal", "arguments": {"command": "yes é | head -c 30000"}}]},
            {"text": "exact", "tool_calls": [{"name": "terminal", "arguments": {"command": "head -c 8170 /dev/zero | tr '\\0' y"}}]},
        ]})
        .to_string(),
    )
    .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = LoopConfig {
        max_turns: 2,
        ..LoopConfig::default()
    };
    let run = run_scripted(tmp.path(), "trunc", "truncate", &mut model, &cfg);
    assert!(matches!(run.result, Ok(RunStatus::Finished(_))));
    let obs: Vec<String> = events(&run.ws)
        .iter()
        .filter(|e| e.kind == EventKind::Observation)
        .map(|e| e.payload["text"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(obs[0].chars().count(), 8_192);
    assert!(obs[0].ends_with(" chars omitted]"));
    // "exit_code: 0\nstdout:\n" (21 chars) + 8170 bytes + "\n" = exactly the limit: kept whole.
    assert_eq!(obs[1].chars().count(), 8_192, "{}", &obs[1][..40]);
    assert!(obs[1].ends_with("y\n"));

    // Retry: five retries succeed, a sixth failure exhausts.
    assert_eq!(MAX_RETRY, 5);
    let cfg = LoopConfig::default();
    for (failures, ok) in [(5, true), (6, false)] {
        let mut m = ScriptedModel::from_json(
            &json!({"turns": [{"text": "x"}], "transient_failures": {"1": failures}}).to_string(),
        )
        .unwrap();
        let mut sleeper = RecordingSleeper::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let req = ModelRequest::new(Purpose::Turn, "", "").with_turn(1);
        let r = call_model_with_retry(&mut m, &req, &cfg.retry_policy(), &mut sleeper, &mut rng);
        assert_eq!(sleeper.sleeps.len(), 5, "failures={failures}");
        for (i, s) in sleeper.sleeps.iter().enumerate() {
            assert!(*s <= Duration::from_secs(1 << i), "sleep {i} = {s:?}");
        }
        match (r, ok) {
            (Ok(out), true) => assert_eq!(out.attempts, 6),
            (Err(RetryError::ExhaustedRetries { attempts, .. }), false) => assert_eq!(attempts, 6),
            (other, _) => panic!("failures={failures}: {other:?}"),
        }
    }
    let mut m = ScriptedModel::from_json(
        &json!({"turns": [{"text": "x"}], "transient_failures": {"1": 6}}).to_string(),
    )
    .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let run = run_scripted(tmp.path(), "retry", "retry", &mut m, &cfg);
    match run.result {
        Err(LoopError::ModelExhaustedRetries {
            turn: 1,
            attempts: 6,
            ..
        }) => {}
        other => panic!("expected exhausted retries, got {other:?}"),
    }
    assert!(!run.ws.is_finalized());

    // Completion gate.
    assert_eq!(VERIFY_COMPLETION_TURN_THRESHOLD, 4);
    for turn in 1..=5 {
        assert_eq!(
            forced_verifications(turn),
            usize::from(turn < 4),
            "final_answer at turn {turn}"
        );
    }

    // sandbox_run class timeout (started in the background at launch).
    kill.recv()
        .expect("kill check thread")
        .unwrap_or_else(|e| panic!("sandbox_run timeout: {e}"));
}

// 7 -------------------------------------------------------------------------

struct E2e {
    listing: Vec<String>,
    events: String,
    stdout: String,
    message: String,
    run_meta: String,
    outputs: std::collections::BTreeMap<String, Vec<u8>>,
    bank: std::collections::BTreeMap<String, Vec<u8>>,
    memory: String,
}

fn e2e_run(root: &Path) -> E2e {
    let home = new_home(root);
    let operands = root.join("operands.txt");
    fs::write(&operands, "19 23\n").unwrap();
    let ws = session::create_session(
        &home,
        "Add 19 and 23 with a reusable skill and write the sum to sum.txt.",
        &[operands],
        &[],
        Some("e2e"),
    )
    .unwrap();
    let clock = step_clock();
    let mut bank = open_bank(&home, clock.clone());
    let mut model = script("e2e_skill_lifecycle.json");
    let mut deps = AgentDeps::deterministic(clock, 11);
    let status = run_task(
        &home,
        &ws,
        &mut bank,
        &mut model,
        &LoopConfig::default(),
        &mut deps,
    )
    .unwrap();
    let RunStatus::Finished(meta) = status else {
        panic!("run paused")
    };
    assert!(meta.succeeded());

    let events = session::read_events(&ws).unwrap();
    let stages: Vec<String> = events
        .iter()
        .filter(|e| e.kind == EventKind::Observation && e.payload["name"] == "skill_create")
        .flat_map(|e| {
            let v: serde_json::Value =
                serde_json::from_str(e.payload["text"].as_str().unwrap()).unwrap();
            v["steps"]
                .as_array()
                .unwrap()
                .iter()
                .map(|s| s["stage"].as_str().unwrap().to_string())
                .collect::<Vec<_>>()
        })
        .collect();
    assert_eq!(
        stages,
        ["create", "evaluate", "refine", "evaluate", "register"]
    );
    let read = events
        .iter()
        .find(|e| e.kind == EventKind::Observation && e.payload["name"] == "read_skill")
        .unwrap();
    assert!(read.payload["text"]
        .as_str()
        .unwrap()
        .contains("--- skill memory ---"));
    assert_eq!(events.last().unwrap().kind, EventKind::FinalAnswer);
    assert_eq!(
        fs::read_to_string(ws.path("result_output_files/sum.txt")).unwrap(),
        "42\n"
    );
    let usage = bank.usage_records().unwrap();
    assert!(usage.iter().any(|u| u.name == "add-numbers"));

    E2e {
        listing: top_level_entries(ws.root()),
        events: fs::read_to_string(ws.path(session::EVENTS_JSONL)).unwrap(),
        stdout: fs::read_to_string(ws.path(session::AGENT_STDOUT)).unwrap(),
        message: fs::read_to_string(ws.path(session::AGENT_MESSAGE_MD)).unwrap(),
        run_meta: fs::read_to_string(ws.path(session::RUN_META_JSON)).unwrap(),
        outputs: tree_bytes(&ws.path(session::RESULT_OUTPUT_FILES)),
        bank: tree_bytes(&home.skills_dir().join("add-numbers")),
        memory: fs::read_to_string(ws.path(session::MEMORY_MD)).unwrap(),
    }
}

fn end_to_end_session() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let a = e2e_run(&tmp.path().join("a"));
    let b = e2e_run(&tmp.path().join("b"));
    let listing: Vec<&str> = a.listing.iter().map(String::as_str).collect();
    assert_eq!(listing, WORKSPACE_ENTRIES);
    assert_eq!(
        listing,
        [
            "agent.stdout.txt",
            "agent_message.md",
            "ctx_state.json",
            "events.jsonl",
            "instruction.md",
            "memory.md",
            "profile.json",
            "result_output_files",
            "run_meta.json",
            "submitted_inputs",
            "submitted_skillhub",
        ]
    );
    assert_eq!(a.listing, b.listing);
    assert!(a.events == b.events, "events differ between runs");
    assert!(a.stdout == b.stdout, "stdout log differs between runs");
    assert_eq!(a.message, b.message);
    assert_eq!(a.run_meta, b.run_meta);
    assert_eq!(a.outputs, b.outputs);
    assert_eq!(a.bank, b.bank);
    assert_eq!(a.memory, b.memory);
    assert!(
        start.elapsed() < Duration::from_secs(60),
        "took {:?}",
        start.elapsed()
    );
}

// 8 -------------------------------------------------------------------------

/// Independent oracle: does a relative path climb above its starting directory?
fn escapes(path: &str) -> bool {
    let mut depth: i64 = 0;
    for part in path.split('/') {
        match part {
            "" | "." => {}
            ".." => {
                depth -= 1;
                if depth < 0 {
                    return true;
                }
            }
            _ => depth += 1,
        }
    }
    false
}

fn random_path(rng: &mut ChaCha8Rng) -> String {
    let parts: Vec<&str> = (0..rng.random_range(1..7))
        .map(|_| match rng.random_range(0..6) {
            0 | 1 => "..",
            2 => ".",
            3 => "inputs",
            4 => "outputs",
            _ => "f.txt",
        })
        .collect();
    parts.join("/")
}

fn sandbox_isolation() {
    let factory = LocalProcessFactory::default();
    let mut a = factory.create_sandbox().unwrap();
    let mut b = factory.create_sandbox().unwrap();
    let cwd = std::env::current_dir().unwrap();
    let cwd_before = top_level_entries(&cwd);

    let r = a
        .run(
            "mkdir -p outputs && echo secret > outputs/result.txt && echo private > top.txt",
            Duration::from_secs(10),
        )
        .unwrap();
    assert_eq!(r.exit_code, 0);
    assert_eq!(a.download("outputs/result.txt").unwrap(), b"secret\n");
    assert!(b.download("outputs/result.txt").is_err());
    assert!(b.download("top.txt").is_err());
    let r = b
        .run("cat outputs/result.txt top.txt", Duration::from_secs(10))
        .unwrap();
    assert_ne!(r.exit_code, 0);
    assert!(!r.stdout.contains("secret") && !r.stdout.contains("private"));
    assert_eq!(
        top_level_entries(&cwd),
        cwd_before,
        "host working directory changed"
    );

    let host_file = tempfile::NamedTempFile::new().unwrap();
    fs::write(host_file.path(), "x").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut escaping = 0;
    let mut tried = 0;
    while escaping < 100 {
        tried += 1;
        assert!(tried < 10_000);
        let mut path = random_path(&mut rng);
        if escaping < 100 && !path.contains("..") {
            path = format!("inputs/../{path}");
        }
        let expect_escape = escapes(&path);
        let normalized = normalize_sandbox_path(&path);
        assert_eq!(normalized.is_err(), expect_escape, "normalize `{path}`");
        if expect_escape {
            escaping += 1;
            assert!(matches!(normalized, Err(SandboxError::PathEscape(_))));
            assert!(
                matches!(a.download(&path), Err(SandboxError::PathEscape(_))),
                "download `{path}`"
            );
            assert!(
                matches!(
                    a.upload(host_file.path(), Some(&path)),
                    Err(SandboxError::PathEscape(_))
                ),
                "upload `{path}`"
            );
            let abs = format!("/sandbox/{path}");
            assert!(normalize_sandbox_path(&abs).is_err(), "`{abs}`");
        }
    }
    assert!(normalize_sandbox_path("/etc/passwd").is_err());
    a.close();
    b.close();
    assert_eq!(top_level_entries(&cwd), cwd_before);
}
