//! `serve` settings in key=value form, overridable from the command line.

use std::path::PathBuf;
use std::time::Duration;

use crate::error::{Result, RuntimeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Master,
    Worker,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub role: Role,
    pub rank: usize,
    pub n: usize,
    /// `host:port` the master listens on and workers connect to.
    pub master: String,
    /// Defaults to `model.cfg` inside the shard directory.
    pub model: Option<PathBuf>,
    pub shards: PathBuf,
    /// Blocks in the sliding window; `None` takes the model config's value,
    /// zero keeps every block resident.
    pub window: Option<usize>,
    pub retention: Option<usize>,
    pub max_new: usize,
    /// Text prompt, tokenized as bytes.
    pub prompt: Option<String>,
    /// Prompt as raw ids; wins over `prompt`.
    pub prompt_ids: Option<Vec<u32>>,
    pub metrics: Option<PathBuf>,
    pub timeline: Option<PathBuf>,
    pub timeout: Duration,
    pub disk_delay_ms: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            role: Role::Master,
            rank: 0,
            n: 1,
            master: "127.0.0.1:7070".into(),
            model: None,
            shards: PathBuf::from("shards"),
            window: None,
            retention: None,
            max_new: 16,
            prompt: None,
            prompt_ids: None,
            metrics: None,
            timeline: None,
            timeout: Duration::from_secs(30),
            disk_delay_ms: 0.0,
        }
    }
}

fn parse_opt<T: std::str::FromStr>(value: &str) -> std::result::Result<Option<T>, String> {
    match value {
        "" | "none" => Ok(None),
        v => v
            .parse()
            .map(Some)
            .map_err(|_| format!("invalid value {v:?}")),
    }
}

fn parse<T: std::str::FromStr>(value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?}"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "role" => {
                self.role = match value {
                    "master" => Role::Master,
                    "worker" => Role::Worker,
                    _ => return Err(format!("role must be master or worker, got {value:?}")),
                }
            }
            "rank" => self.rank = parse(value)?,
            "n" => self.n = parse(value)?,
            "master" => self.master = value.to_string(),
            "model" => self.model = Some(PathBuf::from(value)),
            "shards" => self.shards = PathBuf::from(value),
            "window" => self.window = parse_opt(value)?,
            "retention" => self.retention = parse_opt(value)?,
            "max_new" => self.max_new = parse(value)?,
            "prompt" => self.prompt = Some(value.to_string()),
            "prompt_ids" => {
                let ids: std::result::Result<Vec<u32>, _> =
                    value.split(',').map(|s| s.trim().parse()).collect();
                self.prompt_ids = Some(ids.map_err(|_| format!("invalid id list {value:?}"))?);
            }
            "metrics" => self.metrics = Some(PathBuf::from(value)),
            "timeline" => self.timeline = Some(PathBuf::from(value)),
            "timeout_s" => self.timeout = Duration::from_secs_f64(parse::<f64>(value)?.max(0.001)),
            "disk_delay_ms" => self.disk_delay_ms = parse(value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of the defaults. `#` starts a comment.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut rc = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                RuntimeError::config(format!("line {}: expected key=value", i + 1))
            })?;
            rc.set(k.trim(), v.trim())
                .map_err(|e| RuntimeError::config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(rc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.rank >= self.n {
            return Err(RuntimeError::config(format!(
                "rank {} outside a world of {}",
                self.rank, self.n
            )));
        }
        match (self.role, self.rank) {
            (Role::Master, 0) | (Role::Worker, 1..) => {}
            _ => return Err(RuntimeError::config("the master is rank 0 and only rank 0")),
        }
        if self.role == Role::Master && self.prompt_tokens().is_empty() {
            return Err(RuntimeError::config("the master needs a non-empty prompt"));
        }
        if self.retention == Some(0) {
            return Err(RuntimeError::config("retention period must be positive"));
        }
        Ok(())
    }

    /// Prompt ids: explicit ids, else the prompt's bytes.
    pub fn prompt_tokens(&self) -> Vec<u32> {
        if let Some(ids) = &self.prompt_ids {
            return ids.clone();
        }
        self.prompt
            .as_deref()
            .map(|p| p.bytes().map(u32::from).collect())
            .unwrap_or_default()
    }

    pub fn model_path(&self) -> PathBuf {
        self.model
            .clone()
            .unwrap_or_else(|| self.shards.join(crate::shard_io::MODEL_CONFIG_NAME))
    }
}

/// Renders ids as text where they are bytes.
pub fn detokenize(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter_map(|&i| u8::try_from(i).ok()).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_validates() {
        let rc = RunConfig::from_kv_str(
            "role = worker\nrank=2\nn=4 # four devices\nwindow=none\nretention=3\ntimeout_s=1.5\n",
        )
        .unwrap();
        assert_eq!(rc.role, Role::Worker);
        assert_eq!(
            (rc.rank, rc.n, rc.window, rc.retention),
            (2, 4, None, Some(3))
        );
        assert_eq!(rc.timeout, Duration::from_millis(1500));
        rc.validate().unwrap();
    }

    #[test]
    fn master_must_be_rank_zero_with_a_prompt() {
        let mut rc = RunConfig::default();
        assert!(rc.validate().is_err());
        rc.prompt = Some("hi".into());
        rc.validate().unwrap();
        rc.rank = 1;
        rc.n = 2;
        assert_eq!(rc.validate().unwrap_err().exit_code(), 2);
        assert!(RunConfig::from_kv_str("bogus=1").is_err());
    }

    #[test]
    fn byte_tokens() {
        let mut rc = RunConfig {
            prompt: Some("Hi!".into()),
            ..RunConfig::default()
        };
        assert_eq!(rc.prompt_tokens(), vec![72, 105, 33]);
        assert_eq!(detokenize(&[72, 105, 300]), "Hi");
        rc.set("prompt_ids", "5, 6").unwrap();
        assert_eq!(rc.prompt_tokens(), vec![5, 6]);
    }
}
