//! Shared command plumbing: global paths, gateway construction, run ids.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use scifi_core::audit::{AuditWriter, RunHeader};
use scifi_core::clock::{wall_now_ms, RunClock};
use scifi_core::gateway::scripted::ScriptedProvider;
use scifi_core::gateway::{Gateway, GatewayConfig};
use scifi_core::skills::{load_library, SkillLibrary};
use scifi_core::store::{RunId, StorePaths};

pub struct Globals {
    pub config_path: Option<PathBuf>,
    pub store_root: PathBuf,
    pub skills_dir: PathBuf,
    pub porcelain: bool,
}

impl Globals {
    pub fn resolve(
        config: Option<PathBuf>,
        store_root: Option<PathBuf>,
        skills_dir: Option<PathBuf>,
        porcelain: bool,
    ) -> Globals {
        let config_path = config.or_else(|| std::env::var_os("SCIFI_CONFIG").map(PathBuf::from));
        let store_root = store_root
            .or_else(|| std::env::var_os("SCIFI_STORE_ROOT").map(PathBuf::from))
            .unwrap_or_else(|| {
                let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_default();
                home.join(".scifi")
            });
        let skills_dir = skills_dir
            .or_else(|| std::env::var_os("SCIFI_SKILLS_DIR").map(PathBuf::from))
            .unwrap_or_else(|| store_root.join("skills"));
        Globals {
            config_path,
            store_root,
            skills_dir,
            porcelain,
        }
    }

    pub fn load_gateway_config(&self) -> Result<GatewayConfig> {
        let path = self
            .config_path
            .as_ref()
            .context("no gateway config: pass --config or set SCIFI_CONFIG")?;
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("could not read gateway config {}", path.display()))?;
        let config: GatewayConfig = toml::from_str(&raw)
            .with_context(|| format!("bad gateway config {}", path.display()))?;
        if config.models.is_empty() {
            bail!("gateway config {} declares no models", path.display());
        }
        Ok(config)
    }

    /// Build the live gateway, loading the scripted rule file when any
    /// configured model uses the scripted provider.
    pub fn build_gateway(
        &self,
        clock: Arc<RunClock>,
        scripted_rules: Option<&Path>,
    ) -> Result<(Arc<Gateway>, GatewayConfig)> {
        let config = self.load_gateway_config()?;
        let needs_script = config.models.iter().any(|m| m.provider == "scripted");
        let script = match (needs_script, scripted_rules) {
            (true, Some(path)) => Some(Arc::new(
                ScriptedProvider::from_rules_file(path).map_err(anyhow::Error::msg)?,
            )),
            (true, None) => {
                bail!("config uses scripted models; pass --scripted <rules.json>")
            }
            (false, _) => None,
        };
        let gateway = Gateway::from_config(&config, clock, script)
            .map_err(|e| anyhow::anyhow!("gateway setup: {e}"))?;
        Ok((Arc::new(gateway), config))
    }

    /// Load the skill library; a missing directory is an empty library.
    pub fn load_skills(&self) -> Result<SkillLibrary> {
        if !self.skills_dir.is_dir() {
            return Ok(SkillLibrary::default());
        }
        load_library(&self.skills_dir).map_err(|e| anyhow::anyhow!("skill library: {e}"))
    }

    /// Stores for UI tools that run outside any task folder.
    pub fn ui_store(&self) -> StorePaths {
        StorePaths::at(self.store_root.clone(), self.store_root.clone())
    }

    /// Attach a fresh audit tap for a UI-tool invocation and return its id.
    pub fn attach_ui_audit(&self, gateway: &Gateway) -> Result<RunId> {
        let run_id = RunId::new(format!("ui-{}", wall_now_ms()));
        let store = self.ui_store();
        let writer = AuditWriter::open(
            &store.audit_file(&run_id),
            RunHeader {
                run_id: run_id.clone(),
                source_digest: String::new(),
                created_at: wall_now_ms(),
            },
        )?;
        gateway.attach_audit(run_id.clone(), writer);
        Ok(run_id)
    }
}

pub fn generate_run_id() -> RunId {
    RunId::new(format!("r{}", wall_now_ms()))
}
