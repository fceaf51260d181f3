//! Run configuration: defaults < TOML file < THOR_* environment < flags.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use thor_core::client::{HttpClient, HttpClientConfig, LlmClient, MockClient, ScriptedReply};
use thor_core::inference::{BonConfig, CorrectionConfig};
use thor_core::rl::RlConfig;
use thor_core::rollout::{RolloutLimits, DEFAULT_GROUP_SIZE};
use thor_core::sandbox::{SandboxConfig, SubprocessExecutor};
use thor_core::tirgen::TirGenConfig;
use thor_core::trajectory::PartitionUnit;

pub const DEFAULT_INSTRUCTION: &str = "Solve the following math problem. You may write Python code in a \
```python block; its output will be shown to you in a ```output block. \
Put the final answer in \\boxed{}.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientKind {
    #[default]
    Http,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientSettings {
    pub kind: ClientKind,
    pub base_url: String,
    pub model: String,
    /// Script file for `kind = "scripted"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub continue_final_message: bool,
}

impl Default for ClientSettings {
    fn default() -> Self {
        let http = HttpClientConfig::default();
        ClientSettings {
            kind: ClientKind::Http,
            base_url: http.base_url,
            model: http.model,
            script: None,
            timeout_secs: http.timeout_secs,
            max_attempts: http.max_attempts,
            initial_backoff_ms: http.initial_backoff_ms,
            continue_final_message: http.continue_final_message,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSettings {
    pub group_size: usize,
    pub max_code_rounds: usize,
    pub max_total_tokens: usize,
    pub stop_on_answer: bool,
    pub temperature: f64,
}

impl Default for RolloutSettings {
    fn default() -> Self {
        let l = RolloutLimits::default();
        RolloutSettings {
            group_size: DEFAULT_GROUP_SIZE,
            max_code_rounds: l.max_code_rounds,
            max_total_tokens: l.max_total_tokens,
            stop_on_answer: l.stop_on_answer,
            temperature: l.temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSettings {
    pub self_correct: bool,
    pub max_attempts: u32,
    pub suffix_len: usize,
    pub unit: PartitionUnit,
    pub bon_n: usize,
    pub zero_calls_rate_zero: bool,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        let c = CorrectionConfig::default();
        let b = BonConfig::default();
        InferenceSettings {
            self_correct: false,
            max_attempts: c.max_attempts,
            suffix_len: c.suffix_len,
            unit: c.unit,
            bon_n: b.n,
            zero_calls_rate_zero: b.zero_calls_rate_zero,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub jobs: usize,
    /// System prompt for rollouts and inference.
    pub instruction: String,
    pub client: ClientSettings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critic: Option<ClientSettings>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<ClientSettings>,
    pub sandbox: SandboxConfig,
    pub rollout: RolloutSettings,
    pub inference: InferenceSettings,
    pub rl: RlConfig,
    pub tirgen: TirGenConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            jobs: 1,
            instruction: DEFAULT_INSTRUCTION.into(),
            client: ClientSettings::default(),
            critic: None,
            baseline: None,
            sandbox: SandboxConfig::default(),
            rollout: RolloutSettings::default(),
            inference: InferenceSettings::default(),
            rl: RlConfig::default(),
            tirgen: TirGenConfig::default(),
        }
    }
}

fn parse_env<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| anyhow::anyhow!("environment variable {key}={value:?}: {e}"))
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies THOR_* overrides; `get` looks up one variable.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(v) = get("THOR_SEED") {
            self.seed = parse_env("THOR_SEED", &v)?;
        }
        if let Some(v) = get("THOR_JOBS") {
            self.jobs = parse_env("THOR_JOBS", &v)?;
        }
        if let Some(v) = get("THOR_API_BASE") {
            self.client.base_url = v;
        }
        if let Some(v) = get("THOR_MODEL") {
            self.client.model = v;
        }
        if let Some(v) = get("THOR_CLIENT_KIND") {
            self.client.kind = match v.trim() {
                "http" => ClientKind::Http,
                "scripted" => ClientKind::Scripted,
                other => bail!("environment variable THOR_CLIENT_KIND={other:?}: expected http or scripted"),
            };
        }
        if let Some(v) = get("THOR_SCRIPT") {
            self.client.script = Some(PathBuf::from(v));
        }
        if let Some(v) = get("THOR_SANDBOX_CMD") {
            self.sandbox.cmd = v.split_whitespace().map(String::from).collect();
        }
        if let Some(v) = get("THOR_SANDBOX_TIMEOUT_MS") {
            self.sandbox.timeout_ms = parse_env("THOR_SANDBOX_TIMEOUT_MS", &v)?;
        }
        if let Some(v) = get("THOR_GROUP_SIZE") {
            self.rollout.group_size = parse_env("THOR_GROUP_SIZE", &v)?;
        }
        Ok(())
    }

    /// Pushes the global seed and job count into the engine sections.
    pub fn propagate(&mut self) {
        self.tirgen.seed = self.seed;
        self.tirgen.jobs = self.jobs;
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            bail!("jobs must be >= 1");
        }
        self.sandbox.validate().context("sandbox")?;
        self.rl.validate().context("rl")?;
        self.tirgen.validate().context("tirgen")?;
        if self.rollout.group_size < 2 {
            bail!("rollout.group_size must be >= 2");
        }
        if self.rollout.max_total_tokens == 0 {
            bail!("rollout.max_total_tokens must be >= 1");
        }
        if self.inference.bon_n == 0 {
            bail!("inference.bon_n must be >= 1");
        }
        if self.inference.suffix_len == 0 {
            bail!("inference.suffix_len must be >= 1");
        }
        for (name, c) in self.client_sections() {
            if c.kind == ClientKind::Scripted && c.script.is_none() {
                bail!("{name}: kind = \"scripted\" needs a script file");
            }
        }
        Ok(())
    }

    fn client_sections(&self) -> Vec<(&'static str, &ClientSettings)> {
        let mut out = vec![("client", &self.client)];
        if let Some(c) = &self.critic {
            out.push(("critic", c));
        }
        if let Some(c) = &self.baseline {
            out.push(("baseline", c));
        }
        out
    }

    pub fn limits(&self) -> RolloutLimits {
        RolloutLimits {
            max_code_rounds: self.rollout.max_code_rounds,
            max_total_tokens: self.rollout.max_total_tokens,
            stop_on_answer: self.rollout.stop_on_answer,
            temperature: self.rollout.temperature,
            parallelism: self.jobs,
        }
    }

    pub fn correction(&self) -> CorrectionConfig {
        CorrectionConfig {
            max_attempts: self.inference.max_attempts,
            suffix_len: self.inference.suffix_len,
            unit: self.inference.unit.clone(),
        }
    }

    pub fn bon(&self) -> BonConfig {
        BonConfig {
            n: self.inference.bon_n,
            zero_calls_rate_zero: self.inference.zero_calls_rate_zero,
        }
    }

    pub fn executor(&self) -> Result<SubprocessExecutor> {
        SubprocessExecutor::new(self.sandbox.clone()).context("sandbox")
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing effective config")
    }
}

/// Script file for the scripted client.
///
/// `rules` are tried first, in order: a rule fires when every `contains`
/// string occurs in the request's messages. Otherwise the next entry of
/// `replies` is used.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Script {
    pub rules: Vec<Rule>,
    pub replies: Vec<Reply>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub contains: OneOrMany,
    pub reply: Reply,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl OneOrMany {
    fn all_in(&self, haystack: &str) -> bool {
        match self {
            OneOrMany::One(s) => haystack.contains(s.as_str()),
            OneOrMany::Many(v) => v.iter().all(|s| haystack.contains(s.as_str())),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Reply {
    Plain(String),
    Structured(ScriptedReply),
}

impl From<Reply> for ScriptedReply {
    fn from(r: Reply) -> Self {
        match r {
            Reply::Plain(s) => ScriptedReply::text(s),
            Reply::Structured(s) => s,
        }
    }
}

pub fn load_script(path: &Path) -> Result<Script> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading script {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing script {}", path.display()))
}

pub fn scripted_client(script: Script) -> MockClient {
    let fifo: Mutex<VecDeque<ScriptedReply>> = Mutex::new(script.replies.into_iter().map(Into::into).collect());
    let rules = script.rules;
    MockClient::with_responder(move |req| {
        let haystack: String = req.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n");
        if let Some(rule) = rules.iter().find(|r| r.contains.all_in(&haystack)) {
            return Some(rule.reply.clone().into());
        }
        fifo.lock().unwrap_or_else(|e| e.into_inner()).pop_front()
    })
}

pub fn build_client(settings: &ClientSettings, api_key: Option<String>) -> Result<Arc<dyn LlmClient>> {
    match settings.kind {
        ClientKind::Scripted => {
            let path = settings.script.as_ref().context("scripted client needs a script file")?;
            Ok(Arc::new(scripted_client(load_script(path)?)))
        }
        ClientKind::Http => {
            let cfg = HttpClientConfig {
                base_url: settings.base_url.clone(),
                model: settings.model.clone(),
                api_key,
                timeout_secs: settings.timeout_secs,
                max_attempts: settings.max_attempts,
                initial_backoff_ms: settings.initial_backoff_ms,
                continue_final_message: settings.continue_final_message,
            };
            Ok(Arc::new(HttpClient::new(cfg)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;
    use thor_core::client::GenerationRequest;
    use thor_core::client::Message;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = Config::default();
        let text = cfg.to_toml().unwrap();
        let back: Config = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Config>("bogus = 1").is_err());
        assert!(toml::from_str::<Config>("[rl]\nalpha = 0.5\nbeta = 1").is_err());
        let ok: Config = toml::from_str("[rl]\nalpha = 0.5").unwrap();
        assert_eq!(ok.rl.alpha, 0.5);
        assert_eq!(ok.rl.eps_high, 0.28);
    }

    #[test]
    fn env_overrides_file() {
        let mut cfg: Config = toml::from_str("seed = 3\n[client]\nbase_url = \"http://file\"").unwrap();
        let env: HashMap<&str, &str> = [("THOR_SEED", "9"), ("THOR_API_BASE", "http://env"), ("THOR_SANDBOX_CMD", "python3 r.py")]
            .into_iter()
            .collect();
        cfg.apply_env(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.client.base_url, "http://env");
        assert_eq!(cfg.sandbox.cmd, vec!["python3", "r.py"]);
        assert!(cfg.apply_env(|k| (k == "THOR_JOBS").then(|| "many".to_string())).is_err());
    }

    #[test]
    fn scripted_rules_then_fifo() {
        let script: Script = serde_json::from_str(
            r#"{"rules": [{"contains": ["yes or no"], "reply": "yes"}], "replies": ["first", {"text": "second"}]}"#,
        )
        .unwrap();
        let client = scripted_client(script);
        let ask = |s: &str| client.generate(&GenerationRequest::new(vec![Message::user(s)], 64)).map(|g| g.text);
        assert_eq!(ask("answer yes or no").unwrap(), "yes");
        assert_eq!(ask("x").unwrap(), "first");
        assert_eq!(ask("answer yes or no").unwrap(), "yes");
        assert_eq!(ask("y").unwrap(), "second");
        assert!(ask("z").is_err());
    }

    #[test]
    fn scripted_kind_needs_script() {
        let cfg: Config = toml::from_str("[client]\nkind = \"scripted\"").unwrap();
        assert!(cfg.validate().is_err());
    }
}
