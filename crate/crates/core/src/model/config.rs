use serde::{Deserialize, Serialize};

use crate::error::{Result, RptError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Sliding-window decoder with no retrieval.
    Txl,
    /// Chunked cross-attention over BM25 neighbors.
    Retro,
    /// Self-retrieval with a learned retriever.
    Rpt,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "txl" => Ok(Mode::Txl),
            "retro" => Ok(Mode::Retro),
            "rpt" => Ok(Mode::Rpt),
            other => Err(RptError::ConfigValue {
                key: "mode".into(),
                message: format!("expected txl, retro or rpt, got {other:?}"),
            }),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Txl => "txl",
            Mode::Retro => "retro",
            Mode::Rpt => "rpt",
        }
    }

    pub fn uses_neighbors(self) -> bool {
        self != Mode::Txl
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_mult: usize,
    /// Chunk length in tokens.
    pub m: usize,
    /// Chunks excluded from retrieval before the query chunk.
    pub w: usize,
    /// Neighbors per query chunk.
    pub k: usize,
    /// CCA is inserted in upper layers whose index is a multiple of this.
    pub cca_every: usize,
    pub neighbor_gating: bool,
    /// Neighbor tokens cross-attend to the query chunk before gating.
    pub neighbor_query_attention: bool,
    pub gate_floor: f64,
    pub rope_base: f64,
    pub window: usize,
    pub stride: usize,
    pub dropout: f64,
    pub init_std: f64,
}

impl ModelConfig {
    /// Small defaults that train on a CPU in minutes.
    pub fn desk(mode: Mode) -> Self {
        Self {
            mode,
            vocab_size: 256,
            n_layers: 4,
            d: 64,
            n_heads: 4,
            head_dim: 16,
            ffn_mult: 4,
            m: 8,
            w: 2,
            k: 2,
            cca_every: 1,
            neighbor_gating: mode == Mode::Rpt,
            neighbor_query_attention: true,
            gate_floor: 0.1,
            rope_base: 10_000.0,
            window: 64,
            stride: 32,
            dropout: 0.05,
            init_std: 0.02,
        }
    }

    /// Published model shape (12 layers, width 1024, 64-token chunks).
    pub fn paper(mode: Mode) -> Self {
        Self {
            n_layers: 12,
            d: 1024,
            n_heads: 8,
            head_dim: 128,
            m: 64,
            cca_every: 2,
            window: 2048,
            stride: 1024,
            ..Self::desk(mode)
        }
    }

    pub fn preset(name: &str, mode: Mode) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(mode)),
            "paper" => Ok(Self::paper(mode)),
            other => Err(RptError::ConfigValue {
                key: "preset".into(),
                message: format!("unknown preset {other:?} (expected desk or paper)"),
            }),
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn n_lower(&self) -> usize {
        self.n_layers / 2
    }

    pub fn n_upper(&self) -> usize {
        self.n_layers - self.n_lower()
    }

    pub fn has_cca(&self, upper_index: usize) -> bool {
        self.mode.uses_neighbors() && upper_index % self.cca_every == 0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RptError::Config(msg));
        if self.n_layers == 0 || self.n_layers % 2 != 0 {
            return bad(format!("n_layers must be even and positive, got {}", self.n_layers));
        }
        if self.d == 0 || self.n_heads == 0 || self.head_dim == 0 || self.head_dim % 2 != 0 {
            return bad("d, n_heads must be positive and head_dim positive and even".into());
        }
        if self.vocab_size == 0 || self.m == 0 || self.w == 0 || self.cca_every == 0 {
            return bad("vocab_size, m, w and cca_every must be positive".into());
        }
        if self.mode.uses_neighbors() && self.k == 0 {
            return bad("k must be at least 1 when retrieval is used".into());
        }
        if self.stride == 0 || self.window < self.stride {
            return bad(format!("need 0 < stride <= window, got {}/{}", self.stride, self.window));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(0.0..1.0).contains(&self.gate_floor) {
            return bad(format!("gate_floor must lie in [0, 1), got {}", self.gate_floor));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for mode in [Mode::Txl, Mode::Retro, Mode::Rpt] {
            ModelConfig::desk(mode).validate().unwrap();
            ModelConfig::paper(mode).validate().unwrap();
        }
        let p = ModelConfig::paper(Mode::Rpt);
        assert_eq!((p.n_layers, p.d, p.n_heads, p.head_dim, p.k, p.cca_every), (12, 1024, 8, 128, 2, 2));
    }

    #[test]
    fn odd_layers_rejected() {
        let mut c = ModelConfig::desk(Mode::Rpt);
        c.n_layers = 3;
        assert!(c.validate().is_err());
        c.n_layers = 4;
        c.k = 0;
        assert!(c.validate().is_err());
        c.mode = Mode::Txl;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn cca_placement() {
        let mut c = ModelConfig::paper(Mode::Rpt);
        let upper: Vec<bool> = (0..c.n_upper()).map(|u| c.has_cca(u)).collect();
        assert_eq!(upper, vec![true, false, true, false, true, false]);
        c.mode = Mode::Txl;
        assert!((0..c.n_upper()).all(|u| !c.has_cca(u)));
    }
}
