//! Regenerates the synthetic side inputs next to a config file: unigram
//! log-probability traces and simulated human ratings whose information
//! level follows the heuristic memory delta, with annotator noise.
//!
//! `cargo run -p cig-cli --example synth_fixtures -- fixtures/synthetic/cig.toml`

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use cig_core::gateway::CachePolicy;
use cig_core::pipeline::{Overrides, Pipeline, ResolvedConfig, Stage};
use cig_core::transcript::parse_episode;

const INFO_ANNOTATORS: [&str; 3] = ["ann1", "ann2", "ann3"];
const ASPECT_ANNOTATORS: [&str; 2] = ["ann1", "ann2"];

fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

fn logprobs(cfg: &ResolvedConfig) -> anyhow::Result<String> {
    let mut episodes = Vec::new();
    for p in &cfg.config.inputs.episodes {
        episodes.push(parse_episode(&std::fs::read_to_string(cfg.resolve(p))?)?);
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for u in episodes.iter().flat_map(|e| &e.utterances) {
        for w in words(&u.text) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let total: usize = counts.values().sum();
    let vocab = counts.len();
    let mut out = String::new();
    for e in &episodes {
        for u in &e.utterances {
            writeln!(
                out,
                "{}",
                json!({"episode": e.id, "index": u.index, "token": "<s>", "logprob": 0.0, "special": true})
            )?;
            for w in words(&u.text) {
                let p = (counts[&w] + 1) as f64 / (total + vocab) as f64;
                writeln!(
                    out,
                    "{}",
                    json!({"episode": e.id, "index": u.index, "token": w, "logprob": p.log2()})
                )?;
            }
        }
    }
    Ok(out)
}

fn jitter(rng: &mut ChaCha8Rng, level: i64) -> i64 {
    let shift = if rng.random_bool(0.3) {
        if rng.random_bool(0.5) {
            1
        } else {
            -1
        }
    } else {
        0
    };
    (level + shift).clamp(1, 4)
}

fn human_ratings(out: &std::path::Path, cfg: &ResolvedConfig) -> anyhow::Result<String> {
    let features: Vec<Value> = serde_json::from_str(&std::fs::read_to_string(
        out.join("features/features.json"),
    )?)?;
    let delta: BTreeMap<(String, u64), i64> = features
        .iter()
        .filter(|f| f["skipped"] == false)
        .map(|f| {
            let key = (
                f["episode_id"].as_str().unwrap_or_default().to_string(),
                f["utterance_index"].as_u64().unwrap_or(0),
            );
            (key, f["memory"]["mem_delta"].as_i64().unwrap_or(0))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.config.seed ^ 0x5eed);
    let mut lines = String::new();
    for ep in &cfg.config.inputs.episodes {
        let id = ep
            .file_stem()
            .and_then(|s| s.to_str())
            .context("episode file name")?;
        let seg: Value = serde_json::from_str(&std::fs::read_to_string(
            out.join(format!("segment/{id}.json")),
        )?)?;
        let chosen: Vec<u64> = seg["annotation_segments"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(Value::as_u64)
            .collect();
        for s in seg["result"]["segments"].as_array().into_iter().flatten() {
            let k = s["segment_index"].as_u64().unwrap_or(0);
            if !chosen.contains(&k) {
                continue;
            }
            let (start, end) = (
                s["interval"]["start"].as_u64().unwrap_or(0),
                s["interval"]["end"].as_u64().unwrap_or(0),
            );
            for i in start..=end {
                let Some(&d) = delta.get(&(id.to_string(), i)) else {
                    continue;
                };
                let level = (1 + d).clamp(1, 4);
                for a in INFO_ANNOTATORS {
                    let cig = jitter(&mut rng, level);
                    let rec = json!({"episode_id": id, "segment_index": k, "utterance_index": i, "source_id": a,
                        "condition": "human", "scores": {"cig": cig}});
                    writeln!(lines, "{rec}")?;
                }
                for a in ASPECT_ANNOTATORS {
                    let scores = json!({"novelty": jitter(&mut rng, level), "relevance": jitter(&mut rng, 3),
                        "implication_scope": jitter(&mut rng, level.min(3))});
                    let rec = json!({"episode_id": id, "segment_index": k, "utterance_index": i, "source_id": a,
                        "condition": "human", "scores": scores});
                    writeln!(lines, "{rec}")?;
                }
            }
        }
    }
    Ok(lines)
}

fn main() -> anyhow::Result<()> {
    let Some(path) = std::env::args().nth(1).map(PathBuf::from) else {
        bail!("usage: synth_fixtures <cig.toml>")
    };
    let mut cfg = ResolvedConfig::load(&path, &Overrides::default())?;
    let lp_path = cfg.resolve(
        cfg.config
            .inputs
            .logprobs
            .as_deref()
            .context("config names no logprobs input")?,
    );
    let hr_path = cfg.resolve(
        cfg.config
            .inputs
            .human_ratings
            .as_deref()
            .context("config names no human_ratings input")?,
    );
    std::fs::write(&lp_path, logprobs(&cfg)?)?;
    println!("wrote {}", lp_path.display());

    let scratch = tempfile::tempdir()?;
    cfg.config.inputs.human_ratings = None;
    cfg.config.out_dir = scratch.path().join("out");
    cfg.config.cache_dir = scratch.path().join("cache");
    let pipeline = Pipeline::new(cfg.clone(), CachePolicy::Off)?;
    for s in [
        Stage::Preprocess,
        Stage::Segment,
        Stage::Consolidate,
        Stage::Summarise,
        Stage::Rate,
        Stage::Features,
    ] {
        pipeline.run_stage(s)?;
    }
    std::fs::write(&hr_path, human_ratings(pipeline.out_dir(), &cfg)?)?;
    println!("wrote {}", hr_path.display());
    Ok(())
}
