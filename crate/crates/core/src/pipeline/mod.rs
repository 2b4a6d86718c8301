//! Stage orchestration: resumable stages with content digests, a run
//! manifest, and the artifact layout under the output directory.

pub mod analysis;
pub mod config;
mod stages;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{CachePolicy, Gateway};
use crate::text::RuleAnalyzer;
pub use config::{
    parse_conditions, sha256_hex, Overrides, PipelineConfig, ProviderMode, ResolvedConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Preprocess,
    Segment,
    Consolidate,
    Summarise,
    Rate,
    Features,
    Stats,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Preprocess,
        Stage::Segment,
        Stage::Consolidate,
        Stage::Summarise,
        Stage::Rate,
        Stage::Features,
        Stage::Stats,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Segment => "segment",
            Stage::Consolidate => "consolidate",
            Stage::Summarise => "summarise",
            Stage::Rate => "rate",
            Stage::Features => "features",
            Stage::Stats => "stats",
            Stage::Report => "report",
        }
    }

    /// Stages whose outputs this one reads.
    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Preprocess => &[],
            Stage::Segment | Stage::Consolidate => &[Stage::Preprocess],
            Stage::Summarise => &[Stage::Preprocess, Stage::Segment, Stage::Consolidate],
            Stage::Rate => &[
                Stage::Preprocess,
                Stage::Segment,
                Stage::Consolidate,
                Stage::Summarise,
            ],
            Stage::Features => &[Stage::Preprocess, Stage::Consolidate, Stage::Rate],
            Stage::Stats => &[Stage::Preprocess, Stage::Features, Stage::Rate],
            Stage::Report => &[Stage::Stats],
        }
    }

    fn downstream(self) -> Vec<Stage> {
        let mut out: Vec<Stage> = Vec::new();
        for s in Stage::ALL {
            if s.deps().iter().any(|d| *d == self || out.contains(d)) {
                out.push(s);
            }
        }
        out
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    /// Artifact path → sha256 of what the stage read.
    pub inputs: BTreeMap<String, String>,
    /// Artifact path (relative to the output directory) → sha256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub config_digest: String,
    pub stages: BTreeMap<Stage, StageEntry>,
}

pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

impl Manifest {
    pub fn load(out: &Path) -> Result<Option<Self>> {
        let p = out.join(MANIFEST);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(p)?)?))
    }
}

/// Wall-clock and provider accounting for one stage execution. Kept out of
/// the output tree so that reruns stay byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub outputs: Vec<String>,
    pub provider_calls: u64,
    pub embed_calls: u64,
    pub wall_seconds: f64,
}

pub struct Pipeline {
    cfg: ResolvedConfig,
    out: PathBuf,
    policy: CachePolicy,
    gateway: Gateway,
    analyzer: RuleAnalyzer,
}

pub(crate) type Artifacts = Vec<(String, Vec<u8>)>;

impl Pipeline {
    pub fn new(cfg: ResolvedConfig, policy: CachePolicy) -> Result<Self> {
        let gateway = cfg.build_gateway(policy != CachePolicy::Off)?;
        let out = cfg.out_dir();
        Ok(Self {
            cfg,
            out,
            policy,
            gateway,
            analyzer: RuleAnalyzer,
        })
    }

    pub fn config(&self) -> &ResolvedConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn run_id(&self) -> String {
        self.cfg.digest()[..16].to_string()
    }

    /// Runs every stage in order.
    pub fn run_all(&self) -> Result<Vec<StageOutcome>> {
        Stage::ALL.iter().map(|s| self.run_stage(*s)).collect()
    }

    fn check_upstream(&self, stage: Stage) -> Result<(Manifest, BTreeMap<String, String>)> {
        let digest = self.cfg.digest();
        let missing = |dep: Stage| Error::MissingStage {
            stage: dep.to_string(),
            needed_by: stage.to_string(),
        };
        if stage == Stage::Preprocess {
            return Ok((
                Manifest {
                    run_id: self.run_id(),
                    config_digest: digest,
                    stages: BTreeMap::new(),
                },
                BTreeMap::new(),
            ));
        }
        let manifest = Manifest::load(&self.out)?.ok_or_else(|| missing(stage.deps()[0]))?;
        if manifest.config_digest != digest {
            return Err(Error::config(format!(
                "config digest mismatch: artifacts in {} were produced by configuration {}, current is {}; rerun from preprocess",
                self.out.display(),
                &manifest.config_digest[..16],
                &digest[..16]
            )));
        }
        let mut inputs = BTreeMap::new();
        for dep in stage.deps() {
            let entry = manifest.stages.get(dep).ok_or_else(|| missing(*dep))?;
            for (path, want) in &entry.outputs {
                let got = fs::read(self.out.join(path))
                    .map(|b| sha256_hex(&b))
                    .map_err(|_| {
                        Error::validation(format!("artifact {path} of stage {dep} is missing"))
                    })?;
                if &got != want {
                    return Err(Error::validation(format!(
                        "artifact {path} of stage {dep} changed since it was written"
                    )));
                }
                inputs.insert(path.clone(), got);
            }
        }
        Ok((manifest, inputs))
    }

    /// Runs one stage after checking that its upstream artifacts exist and
    /// belong to the current configuration. Downstream manifest entries are
    /// invalidated.
    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        let started = Instant::now();
        let calls_before = self.gateway.total_provider_calls();
        let embeds_before = self.gateway.embed_calls();
        let (mut manifest, mut inputs) = self.check_upstream(stage)?;
        let artifacts = match stage {
            Stage::Preprocess => {
                let (inp, arts) = stages::preprocess(self)?;
                inputs = inp;
                arts
            }
            Stage::Segment => stages::segment(self)?,
            Stage::Consolidate => stages::consolidate(self)?,
            Stage::Summarise => stages::summarise(self)?,
            Stage::Rate => stages::rate(self)?,
            Stage::Features => stages::features(self)?,
            Stage::Stats => stages::stats(self)?,
            Stage::Report => stages::report(self)?,
        };

        let clear: Vec<Stage> = if stage == Stage::Preprocess {
            Stage::ALL.to_vec()
        } else {
            vec![stage]
        };
        for s in clear {
            let dir = self.out.join(s.as_str());
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
        }
        let mut entry = StageEntry {
            inputs,
            outputs: BTreeMap::new(),
        };
        for (rel, bytes) in &artifacts {
            let path = self.out.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&path, bytes)?;
            entry.outputs.insert(rel.clone(), sha256_hex(bytes));
        }
        for s in stage.downstream() {
            manifest.stages.remove(&s);
        }
        manifest.stages.insert(stage, entry);
        fs::create_dir_all(&self.out)?;
        fs::write(self.out.join(MANIFEST), to_json(&manifest))?;
        fs::write(self.out.join(RESOLVED_CONFIG), to_json(&self.cfg.stamp()))?;

        let outcome = StageOutcome {
            stage,
            outputs: artifacts.into_iter().map(|(p, _)| p).collect(),
            provider_calls: self.gateway.total_provider_calls() - calls_before,
            embed_calls: self.gateway.embed_calls() - embeds_before,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        self.write_telemetry(&outcome)?;
        tracing::info!(stage = %stage, calls = outcome.provider_calls, seconds = outcome.wall_seconds, "stage finished");
        Ok(outcome)
    }

    fn write_telemetry(&self, outcome: &StageOutcome) -> Result<()> {
        let dir = self.cfg.cache_dir().join("telemetry").join(self.run_id());
        fs::create_dir_all(&dir)?;
        let body = serde_json::json!({
            "outcome": outcome,
            "latency": self.gateway.latency_report(),
        });
        fs::write(dir.join(format!("{}.json", outcome.stage)), to_json(&body))?;
        Ok(())
    }

    pub(crate) fn read(&self, rel: &str) -> Result<String> {
        fs::read_to_string(self.out.join(rel))
            .map_err(|e| Error::validation(format!("cannot read artifact {rel}: {e}")))
    }

    pub(crate) fn read_json<T: serde::de::DeserializeOwned>(&self, rel: &str) -> Result<T> {
        Ok(serde_json::from_str(&self.read(rel)?)?)
    }

    /// Human annotation sessions built from the summarised contexts of the
    /// selected segments.
    pub fn annotation_sessions(&self) -> Result<Vec<crate::annotation::SessionSpec>> {
        self.check_upstream(Stage::Rate)?;
        stages::annotation_sessions(self)
    }
}

pub(crate) fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("artifacts serialize");
    s.push('\n');
    s
}
