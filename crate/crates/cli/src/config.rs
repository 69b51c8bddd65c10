//! Flat `section.key = value` run configuration with typed accessors.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Every recognized key with its default value.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("run.seed", "0"),
    ("model.kind", "encoder_decoder"),
    ("model.n_enc_layers", "2"),
    ("model.n_dec_layers", "2"),
    ("model.d_model", "64"),
    ("model.n_heads", "4"),
    ("model.n_kv_heads", "2"),
    // 0 means 4 * d_model
    ("model.d_ff", "0"),
    ("model.vocab_size", "512"),
    ("model.rope_base", "10000"),
    ("model.ntk_train_len", "2048"),
    ("model.max_enc_len", "256"),
    ("model.max_dec_len", "256"),
    ("init.checkpoint", ""),
    ("init.resume", "false"),
    ("train.peak_lr", "1e-3"),
    ("train.warmup_steps", "100"),
    ("train.total_steps", "500"),
    ("train.batch_size", "8"),
    ("train.grad_accum_steps", "1"),
    ("train.weight_decay", "0.1"),
    ("data.task", "copy"),
    ("data.records", ""),
    ("data.n_train", "512"),
    ("data.n_eval", "64"),
    ("data.min_len", "8"),
    ("data.max_len", "32"),
    ("data.alphabet", "16"),
    ("data.corpus", ""),
    ("data.n_docs", "200"),
    ("data.doc_len", "600"),
    ("data.chunk_len", "128"),
    ("data.noise_ratio", "0.15"),
    ("data.span_len", "3"),
    ("teacher.checkpoint", ""),
    ("kd.alpha", "0.5"),
    ("kd.temperature", "2.0"),
    ("kd.kl_direction", "reverse"),
    ("kd.generation_source", "student"),
    ("kd.max_gen_len", "64"),
    // 0 decodes greedily
    ("kd.sampling_temperature", "0"),
    ("eval.metric", "rouge_l"),
    ("eval.checkpoints", ""),
    ("eval.tasks", "copy"),
    ("eval.seeds", "0"),
    ("pair.n_enc_layers", "8"),
    ("pair.n_dec_layers", "4"),
    ("pair.deconly_layers", "13"),
    ("pair.d_model", "256"),
    ("pair.n_heads", "8"),
    ("pair.n_kv_heads", "2"),
    ("pair.vocab_size", "512"),
    ("profile.input_lens", "64,128,256,512,1024,2048,4096"),
    ("profile.output_len", "256"),
    ("profile.batch_size", "1"),
    ("profile.element_bytes", "2"),
    ("profile.cross_kv", "precomputed"),
    ("bench.input_len", "512"),
    ("bench.output_len", "128"),
    ("bench.trials", "10"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|&(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

/// Full key for `key`: itself if known, else the unique key ending in `.key`.
pub fn resolve_key(key: &str) -> Result<&'static str, CliError> {
    if let Some(&(k, _)) = DEFAULTS.iter().find(|(k, _)| *k == key) {
        return Ok(k);
    }
    let suffix = format!(".{key}");
    let hits: Vec<&'static str> = DEFAULTS.iter().map(|&(k, _)| k).filter(|k| k.ends_with(&suffix)).collect();
    match hits[..] {
        [k] => Ok(k),
        [] => Err(CliError::Usage(format!("unknown config key `{key}`"))),
        _ => Err(CliError::Usage(format!("ambiguous config key `{key}` (matches {})", hits.join(", ")))),
    }
}

fn split_pair(s: &str) -> Option<(&str, &str)> {
    let (k, v) = s.split_once('=')?;
    Some((k.trim(), v.trim()))
}

impl Config {
    /// Defaults, then the file at `path` (if any), then `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config file {}: {e}", p.display())))?;
            cfg.apply_text(&text, p)?;
        }
        for o in overrides {
            let (k, v) = split_pair(o).ok_or_else(|| CliError::Usage(format!("override `{o}` is not key=value")))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    fn apply_text(&mut self, text: &str, path: &Path) -> Result<(), CliError> {
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_pair(line).ok_or_else(|| {
                CliError::Config(format!("{}:{}: expected key = value, got `{line}`", path.display(), i + 1))
            })?;
            let full = resolve_key(k)?;
            if seen.contains(&full) {
                return Err(CliError::Config(format!("{}:{}: duplicate key `{full}`", path.display(), i + 1)));
            }
            seen.push(full);
            self.values.insert(full.to_string(), v.to_string());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let full = resolve_key(key)?;
        self.values.insert(full.to_string(), value.to_string());
        Ok(())
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("no config key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.str(key);
        v.parse().map_err(|e| CliError::Config(format!("{key} = `{v}`: {e}")))
    }

    /// Comma-separated list; empty string gives an empty list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.str(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| CliError::Config(format!("{key} entry `{s}`: {e}"))))
            .collect()
    }

    /// Path-valued key; `None` when empty.
    pub fn path(&self, key: &str) -> Option<&Path> {
        let v = self.str(key);
        (!v.is_empty()).then(|| Path::new(v))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// `key=value` lines in key order.
    pub fn canonical(&self) -> String {
        self.entries().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// sha256 of the subcommand and canonical config.
    pub fn hash(&self, subcommand: &str) -> String {
        let mut h = Sha256::new();
        h.update(format!("subcommand={subcommand}\n"));
        h.update(self.canonical());
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffix_resolution() {
        assert_eq!(resolve_key("alpha").unwrap(), "kd.alpha");
        assert_eq!(resolve_key("kd.alpha").unwrap(), "kd.alpha");
        assert!(matches!(resolve_key("batch_size"), Err(CliError::Usage(_))));
        assert!(matches!(resolve_key("nope"), Err(CliError::Usage(_))));
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "# comment\nmodel.d_model = 32\nseed=4 # trailing\n\n").unwrap();
        let c = Config::load(Some(&p), &["model.d_model=48".into()]).unwrap();
        assert_eq!(c.get::<usize>("model.d_model").unwrap(), 48);
        assert_eq!(c.get::<u64>("run.seed").unwrap(), 4);
        assert_ne!(c.hash("pretrain"), Config::default().hash("pretrain"));
        assert_ne!(c.hash("pretrain"), c.hash("finetune"));
        std::fs::write(&p, "seed=1\nrun.seed=2\n").unwrap();
        assert!(matches!(Config::load(Some(&p), &[]), Err(CliError::Config(_))));
    }

    #[test]
    fn typed_access_errors_name_the_key() {
        let mut c = Config::default();
        c.set("train.total_steps", "ten").unwrap();
        let e = c.get::<usize>("train.total_steps").unwrap_err();
        assert!(e.to_string().contains("train.total_steps"));
        c.set("eval.seeds", "1, 2,3").unwrap();
        assert_eq!(c.list::<u64>("eval.seeds").unwrap(), vec![1, 2, 3]);
    }
}
