//! Flat key-value run configuration: a TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rpt_core::corpus::Tokenizer;
use rpt_core::eval::EvalNeighbors;
use rpt_core::lexical::Bm25Params;
use rpt_core::model::{Mode, ModelConfig};
use rpt_core::supervision::N_CAND;
use rpt_core::training::{AdaBelief, SamplingSchedule, Schedules, TrainConfig};
use rpt_core::{Result, RptError};

/// Every setting of a run. Model, schedule and optimizer keys left unset
/// fall back to the chosen preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_name: String,
    /// Run whose ingested corpus and supervision records this run reads.
    pub data_run: Option<String>,
    pub mode: String,
    pub preset: String,
    pub seed: u64,

    pub train_corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    /// `bytes` or `ids` (whitespace-separated integers).
    pub tokenizer: String,
    pub vocab_size: Option<usize>,

    pub n_layers: Option<usize>,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub head_dim: Option<usize>,
    pub ffn_mult: Option<usize>,
    pub chunk_len: Option<usize>,
    /// Chunks before the query chunk that may not be retrieved.
    pub exclusion: Option<usize>,
    pub top_k: Option<usize>,
    pub cca_every: Option<usize>,
    pub neighbor_gating: Option<bool>,
    pub neighbor_query_attention: Option<bool>,
    pub gate_floor: Option<f64>,
    pub rope_base: Option<f64>,
    pub window: Option<usize>,
    pub stride: Option<usize>,
    pub dropout: Option<f64>,
    pub init_std: Option<f64>,

    pub steps: u64,
    pub lr_max: Option<f64>,
    pub lr_min_ratio: Option<f64>,
    pub warmup_steps: Option<u64>,
    pub alpha_max: Option<f64>,
    pub alpha_ramp: Option<f64>,
    pub tau_max: Option<f64>,
    pub sampling_anneal: Option<f64>,
    /// `anneal` or `fixed:<p>`.
    pub sampling: String,

    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub weight_decay: Option<f64>,
    pub clip_norm: Option<f64>,

    /// `model` (a trained txl checkpoint, see `scorer_checkpoint`),
    /// `cache-lm`, `command` or `uniform`.
    pub provider: String,
    /// `semantic` or `lexical`.
    pub record_kind: String,
    pub n_cand: usize,
    pub n_pos: usize,
    pub cache_weight: f64,
    pub scorer_command: Option<String>,
    pub scorer_checkpoint: Option<PathBuf>,
    pub bm25_k1: f64,
    pub bm25_b: f64,

    pub log_every: u64,
    /// 0 writes a checkpoint only at the end.
    pub checkpoint_every: u64,

    /// `own`, `oracle` or `none`.
    pub eval_neighbors: String,
    pub ks: Vec<usize>,
    /// Run whose evaluation is the baseline for analysis; by default the
    /// model is compared against itself without neighbors.
    pub baseline_run: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bm25 = Bm25Params::default();
        Self {
            run_name: "default".into(),
            data_run: None,
            mode: "rpt".into(),
            preset: "desk".into(),
            seed: 0,
            train_corpus: None,
            test_corpus: None,
            tokenizer: "bytes".into(),
            vocab_size: None,
            n_layers: None,
            d_model: None,
            n_heads: None,
            head_dim: None,
            ffn_mult: None,
            chunk_len: None,
            exclusion: None,
            top_k: None,
            cca_every: None,
            neighbor_gating: None,
            neighbor_query_attention: None,
            gate_floor: None,
            rope_base: None,
            window: None,
            stride: None,
            dropout: None,
            init_std: None,
            steps: 1000,
            lr_max: None,
            lr_min_ratio: None,
            warmup_steps: None,
            alpha_max: None,
            alpha_ramp: None,
            tau_max: None,
            sampling_anneal: None,
            sampling: "anneal".into(),
            beta1: None,
            beta2: None,
            adam_eps: None,
            weight_decay: None,
            clip_norm: None,
            provider: "model".into(),
            record_kind: "semantic".into(),
            n_cand: N_CAND,
            n_pos: N_CAND,
            cache_weight: 0.3,
            scorer_command: None,
            scorer_checkpoint: None,
            bm25_k1: bm25.k1,
            bm25_b: bm25.b,
            log_every: 1,
            checkpoint_every: 0,
            eval_neighbors: "own".into(),
            ks: vec![2, 10, 20],
            baseline_run: None,
        }
    }
}

fn known_keys() -> Vec<String> {
    match serde_json::to_value(RunConfig::default()) {
        Ok(serde_json::Value::Object(map)) => map.keys().cloned().collect(),
        _ => unreachable!("RunConfig serializes to an object"),
    }
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back to
/// a bare string so `mode=rpt` works without quotes.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn value_error(key: &str, message: impl Into<String>) -> RptError {
    RptError::ConfigValue { key: key.to_string(), message: message.into() }
}

impl RunConfig {
    /// Builds a config from TOML text and `key=value` overrides applied in order.
    pub fn from_sources(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table = match text {
            Some(t) => toml::from_str::<toml::Table>(t).map_err(|e| RptError::Config(e.to_string()))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) =
                o.split_once('=').ok_or_else(|| RptError::Config(format!("override {o:?} is not key=value")))?;
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let known = known_keys();
        if let Some(k) = table.keys().find(|k| !known.contains(k)) {
            return Err(RptError::UnknownConfigKey(k.clone()));
        }
        let cfg: RunConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| RptError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| RptError::io(p, e))?),
            None => None,
        };
        Self::from_sources(text.as_deref(), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    fn check(&self) -> Result<()> {
        self.mode()?;
        self.tokenizer()?;
        self.sampling()?;
        self.eval_neighbors()?;
        if !matches!(self.provider.as_str(), "cache-lm" | "model" | "command" | "uniform") {
            return Err(value_error("provider", "expected cache-lm, model, command or uniform"));
        }
        if !matches!(self.record_kind.as_str(), "semantic" | "lexical") {
            return Err(value_error("record_kind", "expected semantic or lexical"));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(value_error("ks", "cutoffs must be positive and non-empty"));
        }
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return Err(value_error("run_name", "must be a plain directory name"));
        }
        Ok(())
    }

    pub fn mode(&self) -> Result<Mode> {
        Mode::parse(&self.mode).map_err(|_| value_error("mode", "expected txl, retro or rpt"))
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        let vocab = self.vocab_size.unwrap_or(0);
        let t =
            Tokenizer::parse(&self.tokenizer, vocab).map_err(|_| value_error("tokenizer", "expected bytes or ids"))?;
        if matches!(t, Tokenizer::Ids { .. }) && vocab == 0 {
            return Err(value_error("vocab_size", "the ids tokenizer needs an explicit vocab_size"));
        }
        Ok(t)
    }

    pub fn sampling(&self) -> Result<SamplingSchedule> {
        match self.sampling.as_str() {
            "anneal" => Ok(SamplingSchedule::Anneal),
            s => s
                .strip_prefix("fixed:")
                .and_then(|p| p.parse::<f64>().ok())
                .filter(|p| (0.0..=1.0).contains(p))
                .map(SamplingSchedule::Fixed)
                .ok_or_else(|| value_error("sampling", "expected anneal or fixed:<p> with p in [0, 1]")),
        }
    }

    pub fn eval_neighbors(&self) -> Result<EvalNeighbors> {
        match self.eval_neighbors.as_str() {
            "own" => Ok(EvalNeighbors::Own),
            "oracle" => Ok(EvalNeighbors::Oracle),
            "none" => Ok(EvalNeighbors::None),
            _ => Err(value_error("eval_neighbors", "expected own, oracle or none")),
        }
    }

    pub fn bm25(&self) -> Bm25Params {
        Bm25Params { k1: self.bm25_k1, b: self.bm25_b }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut c = ModelConfig::preset(&self.preset, self.mode()?)?;
        c.vocab_size = self.vocab_size.unwrap_or(self.tokenizer()?.vocab_size());
        macro_rules! set {
            ($($key:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$key { c.$field = v; })*
            };
        }
        set!(
            n_layers => n_layers, d_model => d, n_heads => n_heads, head_dim => head_dim,
            ffn_mult => ffn_mult, chunk_len => m, exclusion => w, top_k => k, cca_every => cca_every,
            neighbor_gating => neighbor_gating, neighbor_query_attention => neighbor_query_attention,
            gate_floor => gate_floor, rope_base => rope_base, window => window, stride => stride,
            dropout => dropout, init_std => init_std,
        );
        c.validate()?;
        Ok(c)
    }

    pub fn schedules(&self) -> Result<Schedules> {
        let mut s = if self.preset == "paper" { Schedules::paper(self.steps) } else { Schedules::desk(self.steps) };
        macro_rules! set {
            ($($key:ident),*) => { $(if let Some(v) = self.$key { s.$key = v; })* };
        }
        set!(lr_max, lr_min_ratio, warmup_steps, alpha_max, alpha_ramp, tau_max, sampling_anneal);
        s.sampling = self.sampling()?;
        Ok(s)
    }

    pub fn optimizer(&self) -> AdaBelief {
        let mut o = AdaBelief::default();
        macro_rules! set {
            ($($key:ident => $field:ident),*) => { $(if let Some(v) = self.$key { o.$field = v; })* };
        }
        set!(beta1 => beta1, beta2 => beta2, adam_eps => eps, weight_decay => weight_decay, clip_norm => clip_norm);
        o
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            model: self.model_config()?,
            schedules: self.schedules()?,
            optimizer: self.optimizer(),
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_sources(Some("mode = \"txl\"\nlearning_rate = 3.0\n"), &[]).unwrap_err();
        assert!(matches!(&err, RptError::UnknownConfigKey(k) if k == "learning_rate"), "{err}");
        let err = RunConfig::from_sources(None, &["bogus=1".into()]).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn overrides_win_and_parse_types() {
        let text = "mode = \"retro\"\nseed = 3\nd_model = 64\n";
        let cfg = RunConfig::from_sources(
            Some(text),
            &["seed=9".into(), "mode=txl".into(), "neighbor_gating=true".into(), "ks=[1, 5]".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.mode().unwrap(), Mode::Txl);
        assert_eq!(cfg.d_model, Some(64));
        assert_eq!(cfg.neighbor_gating, Some(true));
        assert_eq!(cfg.ks, vec![1, 5]);
    }

    #[test]
    fn frozen_copy_round_trips() {
        let cfg = RunConfig::from_sources(None, &["sampling=fixed:0.5".into(), "lr_max=0.001".into()]).unwrap();
        let again = RunConfig::from_sources(Some(&cfg.to_toml()), &[]).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.train_config().unwrap(), cfg.train_config().unwrap());
        assert_eq!(again.schedules().unwrap().sampling, SamplingSchedule::Fixed(0.5));
    }

    #[test]
    fn model_keys_map_onto_the_preset() {
        let cfg =
            RunConfig::from_sources(None, &["chunk_len=4".into(), "top_k=3".into(), "exclusion=5".into()]).unwrap();
        let m = cfg.model_config().unwrap();
        assert_eq!((m.m, m.k, m.w), (4, 3, 5));
        assert_eq!(m.vocab_size, 256);
        assert_eq!(cfg.optimizer(), AdaBelief::default());
    }

    #[test]
    fn bad_values_are_rejected() {
        for o in ["sampling=fixed:2", "mode=gpt", "provider=web", "tokenizer=ids", "ks=[]", "run_name=a/b"] {
            assert!(RunConfig::from_sources(None, &[o.into()]).is_err(), "{o}");
        }
        assert!(RunConfig::from_sources(None, &["tokenizer=ids".into(), "vocab_size=50".into()]).is_ok());
    }
}
