//! Which parameters train: frozen video and text encoders, the last `k`
//! auxiliary-encoder blocks, and every head.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MovError, Result};
use crate::fusion::model::{AUX, TEXT, VIDEO};
use crate::fusion::MovModel;
use crate::numcore::ParamSet;

/// Trainable depth of the auxiliary encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LayersRepr", into = "LayersRepr")]
pub enum TrainableLayers {
    /// The final `k` transformer blocks (plus the output norm).
    Last(usize),
    /// The whole encoder including patch, class-token and position tables.
    All,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LayersRepr {
    Count(usize),
    Word(String),
}

impl TryFrom<LayersRepr> for TrainableLayers {
    type Error = MovError;

    fn try_from(r: LayersRepr) -> Result<Self> {
        match r {
            LayersRepr::Count(k) => Ok(TrainableLayers::Last(k)),
            LayersRepr::Word(s) => s.parse(),
        }
    }
}

impl From<TrainableLayers> for LayersRepr {
    fn from(t: TrainableLayers) -> Self {
        match t {
            TrainableLayers::Last(k) => LayersRepr::Count(k),
            TrainableLayers::All => LayersRepr::Word("all".into()),
        }
    }
}

impl FromStr for TrainableLayers {
    type Err = MovError;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(TrainableLayers::All);
        }
        s.parse::<usize>()
            .map(TrainableLayers::Last)
            .map_err(|_| MovError::config(format!("trainable layers must be a count or `all`, got `{s}`")))
    }
}

impl fmt::Display for TrainableLayers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainableLayers::Last(k) => write!(f, "{k}"),
            TrainableLayers::All => f.write_str("all"),
        }
    }
}

/// Per-parameter trainable flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezePlan {
    pub flags: BTreeMap<String, bool>,
}

impl FreezePlan {
    pub fn apply(&self, ps: &mut ParamSet) -> Result<()> {
        for (name, &t) in &self.flags {
            ps.set_trainable(name, t)?;
        }
        Ok(())
    }

    pub fn trainable(&self) -> impl Iterator<Item = &String> {
        self.flags.iter().filter(|(_, &t)| t).map(|(n, _)| n)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.flags.get(name).copied().unwrap_or(false)
    }
}

/// Flags for every parameter in `ps` under trainable depth `layers`.
pub fn build_freeze_plan(layers: TrainableLayers, model: &MovModel, ps: &ParamSet) -> Result<FreezePlan> {
    let depth = model.cfg.vit.layers;
    let first_trainable = match layers {
        TrainableLayers::All => 0,
        TrainableLayers::Last(k) if k > depth => {
            return Err(MovError::config(format!(
                "cannot train the last {k} layers of a {depth}-layer encoder"
            )))
        }
        TrainableLayers::Last(k) => depth - k,
    };
    let aux_dot = format!("{AUX}.");
    let trainable_aux: Vec<String> = (first_trainable..depth)
        .map(|i| model.aux.block_prefix(i))
        .chain(std::iter::once(format!("{AUX}.ln_post.")))
        .collect();
    let flags = ps
        .names()
        .map(|name| {
            let t = if name.starts_with(&format!("{VIDEO}.")) || name.starts_with(&format!("{TEXT}.")) {
                false
            } else if name.starts_with(&aux_dot) {
                layers == TrainableLayers::All || trainable_aux.iter().any(|p| name.starts_with(p))
            } else {
                true
            };
            (name.clone(), t)
        })
        .collect();
    Ok(FreezePlan { flags })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{TextConfig, VitConfig};
    use crate::fusion::{AuxModality, FusionMode, ModelConfig};

    fn model(layers: usize) -> MovModel {
        MovModel::new(ModelConfig {
            vit: VitConfig {
                image_hw: (8, 8),
                patch_size: 4,
                embed_dim: 8,
                layers,
                heads: 2,
                ..VitConfig::default()
            },
            text: TextConfig {
                vocab_size: 17,
                embed_dim: 8,
                layers: 1,
                heads: 2,
                max_tokens: 4,
                ..TextConfig::default()
            },
            aux: AuxModality::Flow,
            fusion: FusionMode::CrossAttention,
            temporal_layers: 1,
            head_heads: 2,
            head_mlp_ratio: 2,
        })
        .unwrap()
    }

    #[test]
    fn encoders_always_frozen() {
        let m = model(3);
        let ps = m.init_params(0).unwrap();
        for k in [TrainableLayers::Last(0), TrainableLayers::Last(2), TrainableLayers::All] {
            let plan = build_freeze_plan(k, &m, &ps).unwrap();
            assert!(plan.trainable().all(|n| !n.starts_with("video.") && !n.starts_with("text.")));
            assert!(plan.is_trainable("cross_x.mlp.fc2.w"));
        }
    }

    #[test]
    fn last_one_is_final_block_and_norm() {
        let m = model(3);
        let ps = m.init_params(0).unwrap();
        let plan = build_freeze_plan(TrainableLayers::Last(1), &m, &ps).unwrap();
        let aux: Vec<&String> = plan.trainable().filter(|n| n.starts_with("aux.")).collect();
        assert!(!aux.is_empty());
        assert!(aux.iter().all(|n| n.starts_with("aux.block2.") || n.starts_with("aux.ln_post.")));
        let block_params = ps.names().filter(|n| n.starts_with("aux.block2.")).count();
        assert_eq!(aux.len(), block_params + 2);
    }

    #[test]
    fn all_covers_whole_aux_encoder() {
        let m = model(2);
        let ps = m.init_params(0).unwrap();
        let plan = build_freeze_plan(TrainableLayers::All, &m, &ps).unwrap();
        assert!(ps.names().filter(|n| n.starts_with("aux.")).all(|n| plan.is_trainable(n)));
        let full = build_freeze_plan(TrainableLayers::Last(2), &m, &ps).unwrap();
        assert!(!full.is_trainable("aux.patch.w") && !full.is_trainable("aux.pos"));
    }

    #[test]
    fn too_deep_is_config_error() {
        let m = model(2);
        let ps = m.init_params(0).unwrap();
        assert!(matches!(
            build_freeze_plan(TrainableLayers::Last(3), &m, &ps),
            Err(MovError::Config(_))
        ));
    }

    #[test]
    fn parse_and_serde() {
        assert_eq!("all".parse::<TrainableLayers>().unwrap(), TrainableLayers::All);
        assert_eq!("6".parse::<TrainableLayers>().unwrap(), TrainableLayers::Last(6));
        assert!("six".parse::<TrainableLayers>().is_err());
        let j = serde_json::to_string(&TrainableLayers::All).unwrap();
        assert_eq!(j, "\"all\"");
        let k: TrainableLayers = serde_json::from_str("9").unwrap();
        assert_eq!(k, TrainableLayers::Last(9));
    }
}
