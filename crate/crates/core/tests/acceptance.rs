//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so that the lines come out in order and
//! unbuffered. Exit status is non-zero when any deterministic criterion
//! fails. Criterion 7 is a single-seed training run: its verdict is printed,
//! and it only affects the exit status with `KNOWPOS_DESK=strict`.
//!
//! The desk experiment (criterion 7) trains four models. Its outputs are kept
//! under `target/tmp/acceptance-desk/` and reused while both the config and
//! the `knowpos` binary are unchanged; training is deterministic, so a cached
//! run is the run.
//! `KNOWPOS_DESK=skip` skips it, `KNOWPOS_DESK=fresh` discards the cache.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use itertools::Itertools;
use rand::Rng as _;
use serde_json::{json, Value};

use common::{grad_config, grad_loss};
use knowpos::assembly::{assemble, permute_knowledge, AssembledInput, PositionScheme, SchemeKind, SpecialTokens, SEG_KNOWLEDGE};
use knowpos::data::{load_jsonl, save_jsonl, DialogueSample, Speaker, Turn};
use knowpos::harness::{
    perplexity_from_log_probs, read_report, self_bleu, shuffle_eval, FirstPositionCopier, QueriedFactOracle,
    ReportFile, RunLabels, ShuffleProtocol,
};
use knowpos::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use knowpos::nn::{check_gradients, grad_check, CoordSampling, Graph, NodeId, Tensor};
use knowpos::rng::rng_from;
use knowpos::synth::{generate_corpus, CorpusConfig};
use knowpos::trainer::{lm_loss, nsp_loss, nsp_loss_value, read_log_jsonl, write_log_record, StepRecord};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s as f64, || {
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

fn corpus(k: usize, n: usize, seed: u64) -> Vec<DialogueSample> {
    generate_corpus(&CorpusConfig {
        n_samples: n,
        k_min: k,
        k_max: k,
        seed,
        ..CorpusConfig::default()
    })
    .unwrap()
}

fn desk_model(scheme: PositionScheme) -> ModelConfig {
    ModelConfig {
        vocab_size: CorpusConfig::default().vocab_size(),
        scheme,
        ..ModelConfig::default()
    }
}

fn knowledge_quads(a: &AssembledInput) -> HashMap<(u32, usize, String, usize), usize> {
    let mut m = HashMap::new();
    for i in 1..a.knowledge_end() {
        if a.segment_ids[i] == SEG_KNOWLEDGE {
            let q = (a.word_ids[i], a.position_ids[i], format!("{:?}", a.table_ids[i]), a.segment_ids[i]);
            *m.entry(q).or_insert(0) += 1;
        }
    }
    m
}

fn c1_permutation_invariance() -> Check {
    let t = Instant::now();
    let sp = SpecialTokens::default();
    let shared = desk_model(PositionScheme::new(SchemeKind::RestartShared));
    let seq = desk_model(PositionScheme::new(SchemeKind::Sequential));
    let mut checked = 0;
    for k in [4usize, 5] {
        let s = &corpus(k, 1, 7)[0];
        let base = assemble(s, shared.scheme, &sp, &shared.limits()).map_err(|e| e.to_string())?;
        let want = knowledge_quads(&base);
        for perm in (0..k).permutations(k) {
            let p = permute_knowledge(s, &perm).map_err(|e| e.to_string())?;
            let a = assemble(&p, shared.scheme, &sp, &shared.limits()).map_err(|e| e.to_string())?;
            ensure(knowledge_quads(&a) == want, || format!("k={k} perm {perm:?}: knowledge multiset differs"))?;
            let b = assemble(&p, seq.scheme, &sp, &seq.limits()).map_err(|e| e.to_string())?;
            ensure(b.position_ids == (0..b.len()).collect::<Vec<_>>(), || {
                format!("k={k} perm {perm:?}: sequential positions are not 0..L-1")
            })?;
            checked += 1;
        }
    }
    within(t.elapsed(), 5)?;
    Ok(format!("{checked} orders (24 + 120), {:.2}s", t.elapsed().as_secs_f64()))
}

fn c2_gradients() -> Check {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for kind in [SchemeKind::Sequential, SchemeKind::RestartShared, SchemeKind::RestartPerSlot] {
        let model = Model::init(grad_config(kind, false)).map_err(|e| e.to_string())?;
        let rep = grad_check(&model.params.tensors, |g, ids| grad_loss(&model, g, ids), 1e-4, &CoordSampling::All)
            .map_err(|e| e.to_string())?;
        ensure(rep.max_rel_error <= 1e-4, || format!("{kind}: max rel error {:.3e}", rep.max_rel_error))?;
        worst = worst.max(rep.max_rel_error);
    }

    let model = Model::init(grad_config(SchemeKind::Sequential, false)).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let ids: Vec<NodeId> = model.params.tensors.iter().map(|t| g.param(t.clone())).collect();
    let l = grad_loss(&model, &mut g, &ids).map_err(|e| e.to_string())?;
    let grads = g.backward(l).map_err(|e| e.to_string())?;
    let mut analytic: Vec<Tensor> = ids.iter().map(|&id| grads.get(id)).collect();
    let pi = model.layout().layers[0].w_v;
    let c = analytic[pi]
        .data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap();
    analytic[pi].data_mut()[c] *= 2.0;
    let planted = check_gradients(&model.params.tensors, &analytic, |g, ids| grad_loss(&model, g, ids), 1e-4, &CoordSampling::All)
        .map_err(|e| e.to_string())?;
    ensure(planted.max_rel_error > 1e-4 && (planted.worst_param, planted.worst_coord) == (pi, c), || {
        format!("planted doubled entry not flagged: {planted:?}")
    })?;
    within(t.elapsed(), 60)?;
    Ok(format!(
        "max rel error {worst:.2e} over 3 schemes; planted bug flagged at rel {:.2}; {:.1}s",
        planted.max_rel_error,
        t.elapsed().as_secs_f64()
    ))
}

fn random_tokens(rng: &mut impl rand::Rng, vocab: u32) -> Vec<u32> {
    let n = rng.random_range(1..=4);
    (0..n).map(|_| rng.random_range(6..vocab)).collect()
}

fn random_sample(rng: &mut impl rand::Rng, vocab: u32) -> DialogueSample {
    let k = rng.random_range(1..=5);
    let knowledge = (0..k).map(|_| random_tokens(rng, vocab)).collect();
    let history = (0..rng.random_range(0..=3))
        .map(|i| Turn {
            speaker: if i % 2 == 0 { Speaker::Partner } else { Speaker::Agent },
            tokens: random_tokens(rng, vocab),
        })
        .collect();
    let response = random_tokens(rng, vocab);
    DialogueSample {
        knowledge,
        history,
        response,
        gold_grounding: Some(0),
        facts: None,
    }
}

fn c3_causality() -> Check {
    let t = Instant::now();
    let mut rng = rng_from(303);
    let vocab = 64u32;
    let schemes = [SchemeKind::Sequential, SchemeKind::RestartShared, SchemeKind::RestartPerSlot];
    for trial in 0..200usize {
        let scheme = PositionScheme {
            kind: schemes[trial % 3],
            isolate_knowledge: trial % 2 == 1,
        };
        let model = Model::init(ModelConfig {
            vocab_size: vocab as usize,
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            init_std: 0.3,
            seed: trial as u64,
            scheme,
            ..ModelConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let s = random_sample(&mut rng, vocab);
        let a = assemble(&s, scheme, &SpecialTokens::default(), &model.config.limits()).map_err(|e| e.to_string())?;
        let at = rng.random_range(1..a.len());
        let mut b = a.clone();
        let old = b.word_ids[at];
        b.word_ids[at] = 6 + (old.max(6) - 6 + rng.random_range(1..vocab - 6)) % (vocab - 6);
        let la = model.forward(&a).map_err(|e| e.to_string())?.lm_logits;
        let lb = model.forward(&b).map_err(|e| e.to_string())?.lm_logits;
        let v = vocab as usize;
        ensure(la.data()[..at * v] == lb.data()[..at * v], || {
            format!("trial {trial} ({}): rows before {at} changed", scheme.label())
        })?;
        ensure(la.data()[at * v..(at + 1) * v] != lb.data()[at * v..(at + 1) * v], || {
            format!("trial {trial}: perturbed row {at} unchanged")
        })?;
    }
    within(t.elapsed(), 30)?;
    Ok(format!("200 trials, all schemes and masks, {:.1}s", t.elapsed().as_secs_f64()))
}

fn c4_isolated_invariance() -> Check {
    let t = Instant::now();
    let scheme = PositionScheme::isolated(SchemeKind::RestartShared);
    let model = Model::init(ModelConfig {
        seed: 4,
        ..desk_model(scheme)
    })
    .map_err(|e| e.to_string())?;
    let sp = SpecialTokens::default();
    let s = &corpus(4, 1, 11)[0];
    let base = assemble(s, scheme, &sp, &model.config.limits()).map_err(|e| e.to_string())?;
    let from = base.knowledge_end();
    let v = model.config.vocab_size;
    let want = model.forward(&base).map_err(|e| e.to_string())?.lm_logits;
    let mut worst: f64 = 0.0;
    for perm in (0..4).permutations(4) {
        let p = permute_knowledge(s, &perm).map_err(|e| e.to_string())?;
        let a = assemble(&p, scheme, &sp, &model.config.limits()).map_err(|e| e.to_string())?;
        ensure(a.response_start == base.response_start, || "response moved".into())?;
        let got = model.forward(&a).map_err(|e| e.to_string())?.lm_logits;
        for (x, y) in want.data()[from * v..].iter().zip(&got.data()[from * v..]) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-300);
            worst = worst.max(rel);
        }
    }
    ensure(worst <= 1e-6, || format!("max relative difference {worst:.3e}"))?;
    within(t.elapsed(), 60)?;
    Ok(format!(
        "24 orders, dialogue and response logits max rel diff {worst:.1e}, {:.2}s",
        t.elapsed().as_secs_f64()
    ))
}

fn c5_metric_oracles() -> Check {
    let close = |name: &str, got: f64, want: f64, tol: f64| {
        ensure((got - want).abs() <= tol, || format!("{name}: {got} vs {want}"))
    };
    let uniform = vec![(1.0f64 / 100.0).ln(); 9];
    close("ppl uniform", perplexity_from_log_probs(&uniform).unwrap().value, 100.0, 1e-9)?;
    let two = [0.5f64.ln(), 0.125f64.ln()];
    close("ppl two-token", perplexity_from_log_probs(&two).unwrap().value, 4.0, 1e-9)?;
    close("self-bleu identical", self_bleu(&vec![vec![9, 8, 7, 6, 5]; 3], 4).unwrap().score, 1.0, 1e-9)?;
    let disjoint = vec![vec![1, 2, 3], vec![4, 5, 6], vec![7, 8, 9]];
    ensure(self_bleu(&disjoint, 4).unwrap().score == 0.0, || "self-bleu disjoint not 0".into())?;
    for d in 1..=6usize {
        close("nsp closed form", nsp_loss_value(0.7, &vec![0.7; d]), ((d + 1) as f64).ln(), 1e-9)?;
        let mut g = Graph::new();
        let gold = g.constant(Tensor::filled(&[1, 1], -1.3));
        let others: Vec<NodeId> = (0..d).map(|_| g.constant(Tensor::filled(&[1, 1], -1.3))).collect();
        let n = nsp_loss(&mut g, gold, &others).map_err(|e| e.to_string())?;
        close("nsp graph", g.value(n).item(), ((d + 1) as f64).ln(), 1e-9)?;
    }
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(&[6, 100]));
    let words = [1, 10, 20, 30, 40, 2];
    let mask = [false, false, true, true, true, true];
    let l = lm_loss(&mut g, logits, &words, &mask).map_err(|e| e.to_string())?;
    close("lm uniform", g.value(l).item(), 100f64.ln(), 1e-6)?;
    Ok("ppl, self-bleu, nsp (D=1..6) and lm closed forms".into())
}

fn c6_oracle_policies() -> Check {
    let t = Instant::now();
    let data = corpus(4, 400, 21);
    let p = ShuffleProtocol::default();
    let labels = RunLabels {
        scheme: "oracle".into(),
        loss_mode: "none".into(),
    };
    let copier = shuffle_eval(&FirstPositionCopier, &data, &p, &labels).map_err(|e| e.to_string())?;
    ensure(copier[0].per_position_mean == [1.0, 0.0, 0.0, 0.0] && copier[0].max_min_gap == 1.0, || {
        format!("copier: {:?} gap {}", copier[0].per_position_mean, copier[0].max_min_gap)
    })?;
    let oracle = shuffle_eval(&QueriedFactOracle, &data, &p, &labels).map_err(|e| e.to_string())?;
    ensure(oracle[0].max_min_gap == 0.0, || {
        format!("oracle: {:?} gap {}", oracle[0].per_position_mean, oracle[0].max_min_gap)
    })?;
    within(t.elapsed(), 60)?;
    Ok(format!(
        "copier gap 1 {:?}; oracle gap 0; 400 samples x 50 shuffles, {:.1}s",
        copier[0].per_position_mean,
        t.elapsed().as_secs_f64()
    ))
}

fn bin(args: &[&str]) -> Result<Value, String> {
    let mut c = Command::new(env!("CARGO_BIN_EXE_knowpos"));
    for (k, _) in std::env::vars() {
        if k.starts_with("KNOWPOS_") {
            c.env_remove(k);
        }
    }
    let out = c.args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("knowpos {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().unwrap_or("null")).map_err(|e| e.to_string())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// gen-data, train and evaluate with the given scheme/loss under `root`.
fn pipeline(root: &Path, config: &Path, scheme: &str, loss: &str) -> Result<PathBuf, String> {
    let data = root.join("data");
    if !data.join("train.jsonl").exists() {
        bin(&["gen-data", "--config", p(config), "--out", p(&data)])?;
    }
    let run = root.join(format!("{scheme}-{loss}"));
    bin(&[
        "train",
        "--config",
        p(config),
        "--data",
        p(&data.join("train.jsonl")),
        "--scheme",
        scheme,
        "--loss",
        loss,
        "--out",
        p(&run),
    ])?;
    bin(&[
        "evaluate",
        "--config",
        p(config),
        "--checkpoint",
        p(&run.join("checkpoint.bin")),
        "--data",
        p(&data.join("test.jsonl")),
        "--format",
        "json,csv,svg",
        "--out",
        p(&run.join("eval")),
    ])?;
    Ok(run)
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

const SMALL: &str = r#"{
  "corpus": {"n_samples": 40, "n_test": 8, "k_min": 4, "k_max": 5, "seed": 8},
  "model": {"vocab_size": 302, "n_layers": 2, "n_heads": 2, "d_model": 16, "d_ff": 32, "seed": 8},
  "train": {"epochs": 2, "batch_size": 8, "learning_rate": 0.002, "seed": 8},
  "protocol": {"n_shuffles": 4, "seed": 8}
}"#;

fn c8_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("config.json");
    fs::write(&config, SMALL).map_err(|e| e.to_string())?;
    let mut trees = Vec::new();
    for rep in 0..2 {
        let root = tmp.path().join(format!("rep{rep}"));
        for (scheme, loss) in [("sequential", "transfertransfo"), ("restart-shared", "lm-only")] {
            pipeline(&root, &config, scheme, loss)?;
        }
        trees.push(tree(&root));
    }
    let (a, b) = (&trees[0], &trees[1]);
    ensure(a.keys().eq(b.keys()), || "different file sets".into())?;
    for (name, bytes) in a {
        ensure(&b[name] == bytes, || format!("{} differs between reruns", name.display()))?;
    }
    let needed = ["train_log.jsonl", "checkpoint.bin", "report.json", "report.csv", "report.svg", "train.jsonl"];
    for n in needed {
        ensure(a.keys().any(|k| k.file_name().is_some_and(|f| f == n)), || format!("{n} missing"))?;
    }
    Ok(format!("{} files byte-identical across two full pipeline runs", a.len()))
}

fn c9_round_trips() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let model = Model::init(ModelConfig {
        init_std: 0.7,
        seed: 99,
        ..desk_model(PositionScheme::new(SchemeKind::RestartPerSlot))
    })
    .map_err(|e| e.to_string())?;
    let ck = tmp.path().join("m.bin");
    let meta = json!({"next_step": 12, "note": "x"});
    save_checkpoint(&ck, &model, &meta).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&ck).map_err(|e| e.to_string())?;
    let bits = |m: &Model| -> Vec<u64> { m.params.tensors.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect() };
    ensure(bits(&back.model) == bits(&model) && back.model.config == model.config && back.meta == meta, || {
        "checkpoint round trip changed values".into()
    })?;

    let data = corpus(5, 50, 3);
    let jl = tmp.path().join("d.jsonl");
    save_jsonl(&data, &jl).map_err(|e| e.to_string())?;
    ensure(load_jsonl(&jl).map_err(|e| e.to_string())? == data, || "dataset JSONL round trip differs".into())?;

    let mut rng = rng_from(9);
    let recs: Vec<StepRecord> = (0..64)
        .map(|i| StepRecord {
            step: i,
            lr: rng.random::<f64>() * 1e-3,
            lm_loss: rng.random::<f64>() * 7.0,
            nsp_loss: if i % 2 == 0 { Some(rng.random::<f64>()) } else { None },
            total_loss: f64::from_bits(rng.random::<u64>() >> 2),
        })
        .collect();
    let mut buf = Vec::new();
    for r in &recs {
        write_log_record(&mut buf, r).map_err(|e| e.to_string())?;
    }
    let parsed = read_log_jsonl(&String::from_utf8(buf).unwrap())?;
    let key = |r: &StepRecord| (r.step, r.lr.to_bits(), r.lm_loss.to_bits(), r.nsp_loss.map(f64::to_bits), r.total_loss.to_bits());
    ensure(parsed.iter().map(key).eq(recs.iter().map(key)), || "log JSONL round trip not bit-exact".into())?;

    let good = fs::read(&ck).unwrap();
    let mut diags = Vec::new();
    for (what, bytes) in [
        ("magic", { let mut b = good.clone(); b[1] ^= 0xff; b }),
        ("version", { let mut b = good.clone(); b[8] = 0x7f; b }),
        ("truncated", good[..good.len() - 5].to_vec()),
        ("truncated", good[..20].to_vec()),
    ] {
        fs::write(&ck, &bytes).unwrap();
        let e = match load_checkpoint(&ck) {
            Ok(_) => return Err(format!("corrupted checkpoint ({what}) accepted")),
            Err(e) => e.to_string(),
        };
        ensure(e.contains(what), || format!("diagnostic for {what} was: {e}"))?;
        diags.push(what);
    }
    let text = fs::read_to_string(&jl).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[6] = r#"{"knowledge": [], "history": [], "response": [5]}"#;
    fs::write(&jl, lines.join("\n")).unwrap();
    let e = load_jsonl(&jl).err().ok_or("empty knowledge accepted")?.to_string();
    ensure(e.contains("line 7"), || format!("JSONL diagnostic lacks line number: {e}"))?;
    lines[6] = "{\"knowledge\": [[1]";
    fs::write(&jl, lines.join("\n")).unwrap();
    let e = load_jsonl(&jl).err().ok_or("malformed line accepted")?.to_string();
    ensure(e.contains("line 7"), || format!("JSONL diagnostic lacks line number: {e}"))?;
    ensure(read_log_jsonl("{\"step\": 1}\n").is_err(), || "incomplete log record accepted".into())?;
    Ok(format!(
        "checkpoint, dataset and log bit-exact; rejected {} corrupt checkpoints and 2 bad JSONL lines",
        diags.len()
    ))
}

/// Settings for the four desk runs. The corpus uses a single statement
/// template; training settings are the desk defaults.
const DESK: &str = r#"{
  "corpus": {"n_samples": 2000, "n_test": 200, "k_min": 4, "k_max": 4, "template_variants": 1, "seed": 0},
  "model": {"vocab_size": 302, "n_layers": 2, "d_model": 64, "seed": 0},
  "train": {"epochs": 30, "learning_rate": 1e-3},
  "protocol": {"n_shuffles": 50, "seed": 0}
}"#;

const DESK_RUNS: [(&str, &str); 4] = [
    ("sequential", "transfertransfo"),
    ("restart-shared", "transfertransfo"),
    ("sequential", "lm-only"),
    ("restart-shared", "lm-only"),
];

struct DeskRun {
    label: String,
    report: ReportFile,
    train_secs: f64,
}

fn desk_runs() -> Result<Vec<DeskRun>, String> {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk");
    let fresh = std::env::var("KNOWPOS_DESK").is_ok_and(|v| v == "fresh");
    let config = root.join("desk-config.json");
    let stamp_path = root.join("stamp.txt");
    let exe = fs::metadata(env!("CARGO_BIN_EXE_knowpos")).map_err(|e| e.to_string())?;
    let stamp = format!("{DESK}\n{} {:?}\n", exe.len(), exe.modified().ok());
    if fresh || fs::read_to_string(&stamp_path).ok().as_deref() != Some(stamp.as_str()) {
        let _ = fs::remove_dir_all(&root);
    }
    fs::create_dir_all(&root).map_err(|e| e.to_string())?;
    fs::write(&config, DESK).map_err(|e| e.to_string())?;
    fs::write(&stamp_path, &stamp).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for (scheme, loss) in DESK_RUNS {
        let run = root.join(format!("{scheme}-{loss}"));
        let timing = run.join("train_seconds.txt");
        let report_path = run.join("eval").join("report.json");
        if !report_path.exists() || !timing.exists() {
            let t = Instant::now();
            pipeline(&root, &config, scheme, loss)?;
            // Evaluation is a small share; the whole pipeline is charged to training.
            fs::write(&timing, format!("{:.1}\n", t.elapsed().as_secs_f64())).map_err(|e| e.to_string())?;
        } else {
            println!("    (reusing {})", run.display());
        }
        let secs: f64 = fs::read_to_string(&timing).unwrap().trim().parse().unwrap();
        let report = read_report(&report_path).map_err(|e| e.to_string())?;
        out.push(DeskRun {
            label: format!("{scheme}/{loss}"),
            report,
            train_secs: secs,
        });
    }
    Ok(out)
}

fn c7_desk_experiment() -> Check {
    let runs = desk_runs()?;
    let mut lines = Vec::new();
    for r in &runs {
        let x = &r.report.reports[0];
        lines.push(format!(
            "    {:32} gap {:.3}±{:.3}  acc {:.3}  ppl {:.3}  self-bleu {:.3}  per-pos {:?}±{:?}  {:.0}s",
            r.label,
            x.max_min_gap,
            x.max_min_gap_std,
            x.grounding_accuracy,
            x.ppl_mean.unwrap_or(f64::NAN),
            x.self_bleu_mean.unwrap_or(f64::NAN),
            x.per_position_mean.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            x.per_position_std.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            r.train_secs
        ));
    }
    println!("{}", lines.join("\n"));
    let get = |label: &str| &runs.iter().find(|r| r.label == label).unwrap().report.reports[0];
    let (seq, shared) = (get("sequential/transfertransfo"), get("restart-shared/transfertransfo"));
    let mut failures = Vec::new();
    if !(shared.max_min_gap < seq.max_min_gap) {
        failures.push(format!("(a) gap restart-shared {:.3} !< sequential {:.3}", shared.max_min_gap, seq.max_min_gap));
    }
    for r in &runs {
        let x = &r.report.reports[0];
        if !(x.grounding_accuracy > 0.5) {
            failures.push(format!("(b) {} accuracy {:.3}", r.label, x.grounding_accuracy));
        }
        if r.train_secs > 1800.0 {
            failures.push(format!("{} took {:.0}s", r.label, r.train_secs));
        }
        let complete = x.per_position_std.len() == x.k
            && x.ppl_std.is_some()
            && x.self_bleu_std.is_some()
            && x.n_shuffles == 50
            && x.max_min_gap_std.is_finite()
            && x.grounding_accuracy_std.is_finite();
        if !complete {
            failures.push(format!("(d) {} lacks a spread over 50 shuffles", r.label));
        }
    }
    for loss in ["transfertransfo", "lm-only"] {
        let (a, b) = (get(&format!("sequential/{loss}")), get(&format!("restart-shared/{loss}")));
        let (pa, pb) = (a.ppl_mean.unwrap_or(f64::INFINITY), b.ppl_mean.unwrap_or(f64::INFINITY));
        if !(pb <= 1.25 * pa) {
            failures.push(format!("(c) {loss}: ppl restart-shared {pb:.3} > 1.25 x sequential {pa:.3}"));
        }
    }
    if failures.is_empty() {
        Ok(format!(
            "gap {:.3} -> {:.3} (transfertransfo), accuracy and ppl within bounds, std over 50 shuffles reported",
            seq.max_min_gap, shared.max_min_gap
        ))
    } else {
        Err(failures.join("; "))
    }
}

fn main() {
    let desk = std::env::var("KNOWPOS_DESK").unwrap_or_default();
    let criteria: [Criterion; 9] = [
        ("assembly permutation invariance", c1_permutation_invariance),
        ("gradient soundness", c2_gradients),
        ("causality", c3_causality),
        ("isolated-mask set invariance", c4_isolated_invariance),
        ("metric unit oracles", c5_metric_oracles),
        ("oracle-policy harness", c6_oracle_policies),
        ("desk direction experiment", c7_desk_experiment),
        ("end-to-end determinism", c8_determinism),
        ("round trips and corruption", c9_round_trips),
    ];
    let mut failed = 0;
    let mut desk_failed = false;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if n == 7 && desk == "skip" {
            println!("criterion {n} SKIP  {name}: KNOWPOS_DESK=skip");
            continue;
        }
        let r = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match r {
            Ok(detail) => println!("criterion {n} PASS  {name}: {detail}"),
            Err(why) => {
                println!("criterion {n} FAIL  {name}: {why}");
                if n == 7 && desk != "strict" {
                    desk_failed = true;
                } else {
                    failed += 1;
                }
            }
        }
    }
    if desk_failed {
        println!("criterion 7 is a single-seed statistical run; it does not set the exit status unless KNOWPOS_DESK=strict");
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
