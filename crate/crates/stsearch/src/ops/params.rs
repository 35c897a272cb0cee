//! Cell kinds and per-cell parameter declarations.
//!
//! Parameter structs hold store keys, not tensors: the [`ParamStore`] is the
//! single owner of values, gradients, and optimizer state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::xavier;
use crate::error::{Error, Result};
use crate::tensor::{Element, ParamStore, Tensor};

/// The three spatial-temporal cell kinds. Ordering (`STP < STT < TTS`) is
/// the lexicographic order used when enumerating the search space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CellKind {
    /// Spatial and temporal operators in parallel, concatenated.
    Stp,
    /// Spatial first, then temporal.
    Stt,
    /// Temporal first, then spatial.
    Tts,
}

impl CellKind {
    pub const ALL: [CellKind; 3] = [CellKind::Stp, CellKind::Stt, CellKind::Tts];

    /// The name used in prompts and serialized architectures.
    pub fn canonical_name(self) -> &'static str {
        match self {
            CellKind::Stp => "spatial-temporal-parallel",
            CellKind::Stt => "spatial-then-temporal",
            CellKind::Tts => "temporal-then-spatial",
        }
    }

    /// Parses a module name, case-insensitively. Accepts the background
    /// prompt's variant spelling "spatial-temporal-parallely" for STP.
    pub fn from_name(name: &str) -> Result<CellKind> {
        match name.trim().to_ascii_lowercase().as_str() {
            "spatial-temporal-parallel" | "spatial-temporal-parallely" => Ok(CellKind::Stp),
            "spatial-then-temporal" => Ok(CellKind::Stt),
            "temporal-then-spatial" => Ok(CellKind::Tts),
            other => Err(Error::ResponseParse(format!("unknown module name {other:?}"))),
        }
    }
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.canonical_name())
    }
}

/// Mixed graph convolution parameters: four projection matrices, two node
/// embeddings for the adaptive adjacency, and the graph order.
#[derive(Clone, Debug)]
pub struct SpatialParams {
    pub w_g: String,
    pub w_f: String,
    pub w_b: String,
    pub w_adp: String,
    pub e1: String,
    pub e2: String,
    pub ord: usize,
    pub max_ord: usize,
}

impl SpatialParams {
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        nodes: usize,
        channels: usize,
        ord: usize,
        max_ord: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if ord > max_ord {
            return Err(Error::Config(format!(
                "graph order {ord} exceeds configured maximum {max_ord}"
            )));
        }
        let name = |suffix: &str| format!("{prefix}.{suffix}");
        for key in ["w_g", "w_f", "w_b", "w_adp"] {
            store.insert(name(key), xavier(rng, channels, channels))?;
        }
        store.insert(name("e1"), xavier(rng, nodes, channels))?;
        store.insert(name("e2"), xavier(rng, nodes, channels))?;
        Ok(SpatialParams {
            w_g: name("w_g"),
            w_f: name("w_f"),
            w_b: name("w_b"),
            w_adp: name("w_adp"),
            e1: name("e1"),
            e2: name("e2"),
            ord,
            max_ord,
        })
    }
}

/// Multi-head linear attention parameters.
#[derive(Clone, Debug)]
pub struct AttnParams {
    pub w_q: String,
    pub w_k: String,
    pub w_v: String,
    pub w_o: String,
    pub attn_dim: usize,
    pub heads: usize,
}

impl AttnParams {
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        channels: usize,
        attn_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || attn_dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {attn_dim} not divisible by head count {heads}"
            )));
        }
        let name = |suffix: &str| format!("{prefix}.{suffix}");
        for key in ["w_q", "w_k", "w_v"] {
            store.insert(name(key), xavier(rng, channels, attn_dim))?;
        }
        store.insert(name("w_o"), xavier(rng, attn_dim, channels))?;
        Ok(AttnParams {
            w_q: name("w_q"),
            w_k: name("w_k"),
            w_v: name("w_v"),
            w_o: name("w_o"),
            attn_dim,
            heads,
        })
    }
}

/// Position-wise feed-forward parameters.
#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w1: String,
    pub b1: String,
    pub w2: String,
    pub b2: String,
}

impl FfnParams {
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        channels: usize,
        ffn_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let name = |suffix: &str| format!("{prefix}.{suffix}");
        store.insert(name("w1"), xavier(rng, channels, ffn_dim))?;
        store.insert(name("b1"), Tensor::zeros(vec![ffn_dim]))?;
        store.insert(name("w2"), xavier(rng, ffn_dim, channels))?;
        store.insert(name("b2"), Tensor::zeros(vec![channels]))?;
        Ok(FfnParams {
            w1: name("w1"),
            b1: name("b1"),
            w2: name("w2"),
            b2: name("b2"),
        })
    }
}

/// Full parameter set for one cell. `merge` is the learned 2C -> C
/// projection used only by the parallel (STP) kind, where concatenation
/// doubles the feature width.
#[derive(Clone, Debug)]
pub struct CellParams {
    pub kind: CellKind,
    pub spatial: SpatialParams,
    pub temporal: AttnParams,
    pub ffn: FfnParams,
    pub merge: Option<String>,
}

impl CellParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        prefix: &str,
        kind: CellKind,
        nodes: usize,
        channels: usize,
        attn_dim: usize,
        heads: usize,
        ffn_dim: usize,
        ord: usize,
        max_ord: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let spatial = SpatialParams::init(
            store,
            &format!("{prefix}.spatial"),
            nodes,
            channels,
            ord,
            max_ord,
            rng,
        )?;
        let temporal = AttnParams::init(
            store,
            &format!("{prefix}.attn"),
            channels,
            attn_dim,
            heads,
            rng,
        )?;
        let ffn = FfnParams::init(store, &format!("{prefix}.ffn"), channels, ffn_dim, rng)?;
        let merge = if kind == CellKind::Stp {
            let key = format!("{prefix}.w_m");
            store.insert(key.clone(), xavier(rng, 2 * channels, channels))?;
            Some(key)
        } else {
            None
        };
        Ok(CellParams { kind, spatial, temporal, ffn, merge })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_kind_names_round_trip() {
        for kind in CellKind::ALL {
            assert_eq!(CellKind::from_name(kind.canonical_name()).unwrap(), kind);
        }
        assert_eq!(
            CellKind::from_name("spatial-temporal-parallely").unwrap(),
            CellKind::Stp
        );
        assert_eq!(CellKind::from_name("Spatial-Then-Temporal").unwrap(), CellKind::Stt);
        assert!(CellKind::from_name("temporal-only").is_err());
    }

    #[test]
    fn lexicographic_order() {
        assert!(CellKind::Stp < CellKind::Stt);
        assert!(CellKind::Stt < CellKind::Tts);
    }

    #[test]
    fn attention_head_divisibility_checked() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store: ParamStore<f64> = ParamStore::new();
        assert!(AttnParams::init(&mut store, "a", 4, 6, 4, &mut rng).is_err());
    }

    #[test]
    fn graph_order_bounded_by_config() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store: ParamStore<f64> = ParamStore::new();
        assert!(SpatialParams::init(&mut store, "s", 3, 4, 5, 2, &mut rng).is_err());
    }
}
