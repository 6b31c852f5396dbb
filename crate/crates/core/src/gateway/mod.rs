//! Model gateway: one completion interface over many providers.
//!
//! Models register with a capability rank and a role set (control, work).
//! Selection is round-robin within the requested rank bucket; an unusable
//! bucket falls back to the next higher rank, then the next lower. A task's
//! `model_preference` hint wins ties inside the serving bucket without
//! disturbing the rotation. Budgets are charged from reported usage (or a
//! flat estimate) and a model that exhausts its ceiling is disabled for the
//! rest of the run.
//!
//! Every completion passes through the audit tap before the response is
//! released; a gateway without a tap refuses to serve. In replay mode the
//! gateway serves recorded responses instead of calling providers, and a
//! consumed tape behaves exactly like an exhausted budget.

pub mod provider;
pub mod scripted;
pub mod types;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::Deserialize;
use thiserror::Error;

use crate::audit::{AttemptNote, AuditError, AuditWriter, ReplayError, ReplaySource};
use crate::clock::{wall_now_ms, RunClock};
use crate::store::{Phase, RunId};
use provider::Provider;
use types::{CallContext, CompletionRequest, CompletionResponse, RoleClass};

/// One registered model.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub name: String,
    pub provider_id: String,
    /// Capability tier, 1 = weakest. Same-rank models are interchangeable.
    pub rank: u32,
    pub roles: Vec<RoleClass>,
    /// Budget ceiling in cost units; infinite when unset in config.
    pub budget_ceiling: f64,
    /// Cost per token for usage-reported calls.
    pub price_per_token: f64,
    /// Charged when a provider reports no usage.
    pub flat_cost_estimate: f64,
}

/// Budget state returned by [`Gateway::charge_budget`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetState {
    pub consumed: f64,
    pub ceiling: f64,
    pub enabled: bool,
}

/// A successful completion as seen by the engine.
#[derive(Debug, Clone)]
pub struct GatewayCompletion {
    pub response: CompletionResponse,
    pub model: String,
    pub cost: f64,
    /// Audit sequence of the record covering this exchange.
    pub sequence: u64,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("a model named {0:?} is already registered")]
    DuplicateName(String),
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("no usable {role} model at any rank")]
    NoUsableModel { role: RoleClass },
    #[error("all providers failed: {}", summarize_attempts(.attempts))]
    AllProvidersFailed { attempts: Vec<AttemptNote> },
    #[error("phase {0} may not revise model ranks")]
    ForbiddenCaller(Phase),
    #[error("rank {0} is not a valid rank (ranks start at 1)")]
    InvalidRank(u32),
    #[error("no audit tap attached for run {0}; refusing to serve unaudited calls")]
    AuditTapMissing(RunId),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Replay(ReplayError),
    #[error("model {model} references unknown provider {provider:?}")]
    UnknownProvider { model: String, provider: String },
}

fn summarize_attempts(attempts: &[AttemptNote]) -> String {
    attempts
        .iter()
        .map(|a| format!("{}: {}", a.model, a.error))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone)]
struct ModelState {
    spec: ModelSpec,
    consumed: f64,
    enabled: bool,
}

impl ModelState {
    fn usable(&self, role: RoleClass) -> bool {
        self.enabled && self.spec.roles.contains(&role)
    }
}

/// Rank buckets plus rotation cursors and per-run rank overrides.
#[derive(Debug, Default)]
struct RankTable {
    models: Vec<ModelState>,
    cursors: HashMap<u32, usize>,
    rank_overrides: HashMap<RunId, u32>,
}

impl RankTable {
    fn bucket(&self, role: RoleClass, rank: u32) -> Vec<usize> {
        self.models
            .iter()
            .enumerate()
            .filter(|(_, m)| m.spec.rank == rank && m.usable(role))
            .map(|(i, _)| i)
            .collect()
    }

    /// Ranks to try, in documented order: requested, then higher ascending,
    /// then lower descending.
    fn rank_order(&self, role: RoleClass, requested: u32) -> Vec<u32> {
        let mut ranks: Vec<u32> = self
            .models
            .iter()
            .filter(|m| m.usable(role))
            .map(|m| m.spec.rank)
            .collect();
        ranks.sort_unstable();
        ranks.dedup();
        let mut order = vec![requested];
        order.extend(ranks.iter().copied().filter(|r| *r > requested));
        order.extend(ranks.iter().rev().copied().filter(|r| *r < requested));
        order
    }
}

enum Mode {
    Live,
    Replay(Arc<ReplaySource>),
}

/// The gateway. Interior-mutable and shareable; completions block their
/// caller.
pub struct Gateway {
    table: Mutex<RankTable>,
    providers: Mutex<HashMap<String, Arc<dyn Provider>>>,
    taps: Mutex<HashMap<RunId, AuditWriter>>,
    clock: Arc<RunClock>,
    mode: Mode,
}

impl Gateway {
    pub fn new(clock: Arc<RunClock>) -> Self {
        Gateway {
            table: Mutex::new(RankTable::default()),
            providers: Mutex::new(HashMap::new()),
            taps: Mutex::new(HashMap::new()),
            clock,
            mode: Mode::Live,
        }
    }

    /// A gateway that answers from a recorded run instead of providers.
    pub fn replay(clock: Arc<RunClock>, source: Arc<ReplaySource>) -> Self {
        Gateway {
            table: Mutex::new(RankTable::default()),
            providers: Mutex::new(HashMap::new()),
            taps: Mutex::new(HashMap::new()),
            clock,
            mode: Mode::Replay(source),
        }
    }

    pub fn is_replay(&self) -> bool {
        matches!(self.mode, Mode::Replay(_))
    }

    /// The replay source, when in replay mode (the replay tool runner
    /// shares its cursor).
    pub fn replay_source(&self) -> Option<Arc<ReplaySource>> {
        match &self.mode {
            Mode::Replay(source) => Some(Arc::clone(source)),
            Mode::Live => None,
        }
    }

    pub fn clock(&self) -> Arc<RunClock> {
        Arc::clone(&self.clock)
    }

    pub fn register_provider(&self, id: impl Into<String>, provider: Arc<dyn Provider>) {
        self.providers
            .lock()
            .expect("provider map poisoned")
            .insert(id.into(), provider);
    }

    /// Register a model into its rank bucket.
    pub fn register_model(&self, spec: ModelSpec) -> Result<(), GatewayError> {
        if spec.rank < 1 {
            return Err(GatewayError::InvalidRank(spec.rank));
        }
        let mut table = self.table.lock().expect("rank table poisoned");
        if table.models.iter().any(|m| m.spec.name == spec.name) {
            return Err(GatewayError::DuplicateName(spec.name));
        }
        table.models.push(ModelState {
            spec,
            consumed: 0.0,
            enabled: true,
        });
        Ok(())
    }

    /// Attach the audit tap for a run. Must happen before any call for that
    /// run is served.
    pub fn attach_audit(&self, run_id: RunId, writer: AuditWriter) {
        self.taps
            .lock()
            .expect("audit taps poisoned")
            .insert(run_id, writer);
    }

    /// Detach and return a run's tap (used when a run ends).
    pub fn detach_audit(&self, run_id: &RunId) -> Option<AuditWriter> {
        self.taps.lock().expect("audit taps poisoned").remove(run_id)
    }

    /// Record the start of an engine invocation on the run's tape. A replay
    /// gateway ignores this (the marker is already on the tape being
    /// replayed).
    pub fn begin_invocation(
        &self,
        run_id: &RunId,
        marker: crate::audit::InvocationMarker,
    ) -> Result<(), GatewayError> {
        if self.is_replay() {
            return Ok(());
        }
        let mut taps = self.taps.lock().expect("audit taps poisoned");
        let tap = taps
            .get_mut(run_id)
            .ok_or_else(|| GatewayError::AuditTapMissing(run_id.clone()))?;
        tap.append_invocation(marker)?;
        Ok(())
    }

    /// True while any model is still enabled (or in replay mode, where the
    /// tape itself is the budget).
    pub fn has_any_enabled(&self) -> bool {
        if self.is_replay() {
            return true;
        }
        self.table
            .lock()
            .expect("rank table poisoned")
            .models
            .iter()
            .any(|m| m.enabled && !m.spec.roles.is_empty())
    }

    /// Highest rank currently usable for control calls; 1 when none.
    pub fn control_rank(&self) -> u32 {
        self.table
            .lock()
            .expect("rank table poisoned")
            .models
            .iter()
            .filter(|m| m.usable(RoleClass::Control))
            .map(|m| m.spec.rank)
            .max()
            .unwrap_or(1)
    }

    /// Round-robin pick from the requested rank bucket, falling back to the
    /// nearest higher then nearest lower rank. Never returns a disabled
    /// model or one lacking the role.
    pub fn select_model(&self, role: RoleClass, rank: u32) -> Result<String, GatewayError> {
        let mut table = self.table.lock().expect("rank table poisoned");
        let plan = plan_attempts(&mut table, role, rank, None)?;
        Ok(plan.first)
    }

    /// Set the per-run work rank. Only control phases may call this; the
    /// engine records the revision on the history tape.
    pub fn revise_rank(
        &self,
        run_id: &RunId,
        caller: Phase,
        new_rank: u32,
    ) -> Result<(), GatewayError> {
        if !matches!(caller, Phase::PreScan | Phase::Review) {
            return Err(GatewayError::ForbiddenCaller(caller));
        }
        if new_rank < 1 {
            return Err(GatewayError::InvalidRank(new_rank));
        }
        self.table
            .lock()
            .expect("rank table poisoned")
            .rank_overrides
            .insert(run_id.clone(), new_rank);
        Ok(())
    }

    /// Re-apply a persisted rank override on resume, without the caller
    /// check (it was validated when first issued).
    pub fn restore_rank_override(&self, run_id: &RunId, rank: u32) {
        self.table
            .lock()
            .expect("rank table poisoned")
            .rank_overrides
            .insert(run_id.clone(), rank);
    }

    /// The effective work rank for a run after overrides.
    pub fn effective_work_rank(&self, run_id: &RunId, requested: u32) -> u32 {
        self.table
            .lock()
            .expect("rank table poisoned")
            .rank_overrides
            .get(run_id)
            .copied()
            .unwrap_or(requested)
    }

    /// Charge `cost` to a model; at or past the ceiling the model is
    /// disabled and stays disabled for the run.
    pub fn charge_budget(&self, model: &str, cost: f64) -> Result<BudgetState, GatewayError> {
        let mut table = self.table.lock().expect("rank table poisoned");
        let state = table
            .models
            .iter_mut()
            .find(|m| m.spec.name == model)
            .ok_or_else(|| GatewayError::UnknownModel(model.to_string()))?;
        state.consumed += cost;
        if state.consumed >= state.spec.budget_ceiling {
            state.enabled = false;
        }
        Ok(BudgetState {
            consumed: state.consumed,
            ceiling: state.spec.budget_ceiling,
            enabled: state.enabled,
        })
    }

    /// Budget snapshot for one model.
    pub fn budget_state(&self, model: &str) -> Result<BudgetState, GatewayError> {
        let table = self.table.lock().expect("rank table poisoned");
        let state = table
            .models
            .iter()
            .find(|m| m.spec.name == model)
            .ok_or_else(|| GatewayError::UnknownModel(model.to_string()))?;
        Ok(BudgetState {
            consumed: state.consumed,
            ceiling: state.spec.budget_ceiling,
            enabled: state.enabled,
        })
    }

    /// Issue one completion: select, call, audit, charge. On provider
    /// failure, retry one same-rank alternate, then one rank-fallback model.
    /// Exactly one audit record is written per successful completion, with
    /// failed attempts annotated on it.
    pub fn complete(
        &self,
        ctx: &CallContext,
        role: RoleClass,
        rank: u32,
        prefer: Option<&str>,
        request: &CompletionRequest,
    ) -> Result<GatewayCompletion, GatewayError> {
        if let Mode::Replay(source) = &self.mode {
            let record = match source.next_exchange(ctx, request) {
                Ok(record) => record,
                Err(ReplayError::TapeExhausted { .. }) => {
                    return Err(GatewayError::NoUsableModel { role })
                }
                Err(e) => return Err(GatewayError::Replay(e)),
            };
            self.clock.advance_to(record.timestamp);
            return Ok(GatewayCompletion {
                response: record.response.clone(),
                model: record.model.clone(),
                cost: record.cost,
                sequence: record.sequence,
            });
        }

        let effective_rank = if role == RoleClass::Work {
            self.effective_work_rank(&ctx.run_id, rank)
        } else {
            rank
        };
        let plan = {
            let mut table = self.table.lock().expect("rank table poisoned");
            plan_attempts(&mut table, role, effective_rank, prefer)?
        };

        let mut attempts: Vec<AttemptNote> = Vec::new();
        for model_name in plan.ordered() {
            let (provider, price, flat) = {
                let table = self.table.lock().expect("rank table poisoned");
                let state = table
                    .models
                    .iter()
                    .find(|m| m.spec.name == model_name)
                    .expect("planned model exists");
                let providers = self.providers.lock().expect("provider map poisoned");
                let provider = providers
                    .get(&state.spec.provider_id)
                    .cloned()
                    .ok_or_else(|| GatewayError::UnknownProvider {
                        model: model_name.clone(),
                        provider: state.spec.provider_id.clone(),
                    })?;
                (
                    provider,
                    state.spec.price_per_token,
                    state.spec.flat_cost_estimate,
                )
            };

            let started = std::time::Instant::now();
            match provider.complete(ctx, &model_name, request) {
                Ok(response) => {
                    let latency_ms = started.elapsed().as_millis() as u64;
                    let cost = response
                        .usage
                        .map(|u| u.total() as f64 * price)
                        .unwrap_or(flat);
                    let timestamp = wall_now_ms();
                    let sequence = {
                        let mut taps = self.taps.lock().expect("audit taps poisoned");
                        let tap = taps
                            .get_mut(&ctx.run_id)
                            .ok_or_else(|| GatewayError::AuditTapMissing(ctx.run_id.clone()))?;
                        tap.record_call(
                            ctx,
                            &model_name,
                            request,
                            &response,
                            attempts.clone(),
                            latency_ms,
                            cost,
                            timestamp,
                        )?
                    };
                    self.clock.advance_to(timestamp);
                    self.charge_budget(&model_name, cost)?;
                    return Ok(GatewayCompletion {
                        response,
                        model: model_name,
                        cost,
                        sequence,
                    });
                }
                Err(e) => attempts.push(AttemptNote {
                    model: model_name.clone(),
                    error: e.to_string(),
                }),
            }
        }
        Err(GatewayError::AllProvidersFailed { attempts })
    }
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("replay", &self.is_replay())
            .finish_non_exhaustive()
    }
}

/// Attempt plan for one completion: the pick, an optional same-rank
/// alternate, and an optional rank-fallback model.
struct AttemptPlan {
    first: String,
    same_rank_alternate: Option<String>,
    rank_fallback: Option<String>,
}

impl AttemptPlan {
    fn ordered(&self) -> Vec<String> {
        let mut out = vec![self.first.clone()];
        out.extend(self.same_rank_alternate.clone());
        out.extend(self.rank_fallback.clone());
        out
    }
}

fn plan_attempts(
    table: &mut RankTable,
    role: RoleClass,
    requested: u32,
    prefer: Option<&str>,
) -> Result<AttemptPlan, GatewayError> {
    let order = table.rank_order(role, requested);
    let serving_rank = order
        .iter()
        .copied()
        .find(|r| !table.bucket(role, *r).is_empty())
        .ok_or(GatewayError::NoUsableModel { role })?;
    let bucket = table.bucket(role, serving_rank);

    let preferred_idx = prefer.and_then(|name| {
        bucket
            .iter()
            .copied()
            .find(|i| table.models[*i].spec.name == name)
    });

    let (first_idx, alternate_idx) = if let Some(idx) = preferred_idx {
        // Preference pins the pick without disturbing the rotation.
        let alternate = bucket.iter().copied().find(|i| *i != idx);
        (idx, alternate)
    } else {
        let cursor = table.cursors.entry(serving_rank).or_insert(0);
        let pos = *cursor % bucket.len();
        *cursor = cursor.wrapping_add(1);
        let first = bucket[pos];
        let alternate = if bucket.len() > 1 {
            Some(bucket[(pos + 1) % bucket.len()])
        } else {
            None
        };
        (first, alternate)
    };

    let fallback_rank = order
        .iter()
        .copied()
        .filter(|r| *r != serving_rank)
        .find(|r| !table.bucket(role, *r).is_empty());
    let fallback_idx = fallback_rank.map(|r| table.bucket(role, r)[0]);

    Ok(AttemptPlan {
        first: table.models[first_idx].spec.name.clone(),
        same_rank_alternate: alternate_idx.map(|i| table.models[i].spec.name.clone()),
        rank_fallback: fallback_idx.map(|i| table.models[i].spec.name.clone()),
    })
}

/// Gateway configuration file schema (`[[model]]` tables in TOML).
#[derive(Debug, Clone, Deserialize)]
pub struct GatewayConfig {
    #[serde(rename = "model", default)]
    pub models: Vec<ModelConfig>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    /// `http` or `scripted`.
    pub provider: String,
    /// Base URL for http providers.
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Environment variable holding the credential. The credential itself
    /// never appears in config files.
    #[serde(default)]
    pub credential_env: Option<String>,
    pub rank: u32,
    pub roles: Vec<RoleClass>,
    /// Cost per token.
    #[serde(default)]
    pub price: f64,
    /// Cost charged when the provider reports no usage.
    #[serde(default = "default_flat_estimate")]
    pub flat_estimate: f64,
    /// Absent means unlimited.
    #[serde(default)]
    pub budget_ceiling: Option<f64>,
    /// Request timeout for http providers, seconds.
    #[serde(default = "default_http_timeout")]
    pub timeout_secs: u64,
}

fn default_flat_estimate() -> f64 {
    1.0
}

fn default_http_timeout() -> u64 {
    120
}

impl Gateway {
    /// Build a live gateway from config. Scripted models share the given
    /// rule set; http models each get an adapter for their endpoint.
    pub fn from_config(
        config: &GatewayConfig,
        clock: Arc<RunClock>,
        script: Option<Arc<scripted::ScriptedProvider>>,
    ) -> Result<Gateway, GatewayError> {
        let gateway = Gateway::new(clock);
        for model in &config.models {
            let provider_id = format!("{}:{}", model.provider, model.name);
            let provider: Arc<dyn Provider> = match model.provider.as_str() {
                "scripted" => match &script {
                    Some(p) => p.clone(),
                    None => {
                        return Err(GatewayError::UnknownProvider {
                            model: model.name.clone(),
                            provider: "scripted (no rule file supplied)".to_string(),
                        })
                    }
                },
                "http" => {
                    let endpoint =
                        model
                            .endpoint
                            .clone()
                            .ok_or_else(|| GatewayError::UnknownProvider {
                                model: model.name.clone(),
                                provider: "http (endpoint missing)".to_string(),
                            })?;
                    Arc::new(provider::HttpProvider::new(
                        endpoint,
                        model.credential_env.clone(),
                        std::time::Duration::from_secs(model.timeout_secs),
                    ))
                }
                other => {
                    return Err(GatewayError::UnknownProvider {
                        model: model.name.clone(),
                        provider: other.to_string(),
                    })
                }
            };
            gateway.register_provider(provider_id.clone(), provider);
            gateway.register_model(ModelSpec {
                name: model.name.clone(),
                provider_id,
                rank: model.rank,
                roles: model.roles.clone(),
                budget_ceiling: model.budget_ceiling.unwrap_or(f64::INFINITY),
                price_per_token: model.price,
                flat_cost_estimate: model.flat_estimate,
            })?;
        }
        Ok(gateway)
    }

    /// Credential env-var names referenced by a config (export redaction
    /// wants their values scrubbed).
    pub fn credential_env_vars(config: &GatewayConfig) -> Vec<String> {
        config
            .models
            .iter()
            .filter_map(|m| m.credential_env.clone())
            .collect()
    }
}
