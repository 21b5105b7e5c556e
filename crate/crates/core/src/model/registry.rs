//! Enumeration of quantization sites in network order.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::DiTConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SiteKind {
    /// Linear layer: weight `W` and input activation `X`.
    WeightLinear,
    /// Linear layer whose input is a GELU output.
    PostGeluLinear,
    /// Matrix product of two activations (`Q·Kᵀ`).
    GenericMatmul,
    /// Matrix product whose left operand is a softmax output (`A·V`).
    PostSoftmaxMatmul,
}

impl SiteKind {
    pub fn is_linear(self) -> bool {
        matches!(self, SiteKind::WeightLinear | SiteKind::PostGeluLinear)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::WeightLinear => "weight-linear",
            SiteKind::PostGeluLinear => "post-gelu-linear",
            SiteKind::GenericMatmul => "generic-matmul",
            SiteKind::PostSoftmaxMatmul => "post-softmax-matmul",
        }
    }

    /// Whether the right operand enters the product transposed.
    pub fn transposed_rhs(self) -> bool {
        matches!(self, SiteKind::GenericMatmul)
    }
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Site {
    pub id: String,
    pub kind: SiteKind,
    pub block: Option<usize>,
}

impl Site {
    /// Name of the weight tensor owned by a linear site.
    pub fn weight_name(&self) -> Option<String> {
        self.kind.is_linear().then(|| format!("{}.weight", self.id))
    }

    pub fn bias_name(&self) -> Option<String> {
        self.kind.is_linear().then(|| format!("{}.bias", self.id))
    }
}

/// Ordered list of quantization sites for one model configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerTapRegistry {
    sites: Vec<Site>,
    index: HashMap<String, usize>,
}

impl LayerTapRegistry {
    pub fn for_config(config: &DiTConfig) -> Self {
        let mut sites = Vec::new();
        let mut push = |id: String, kind, block| sites.push(Site { id, kind, block });
        push("t_embed.fc1".into(), SiteKind::WeightLinear, None);
        push("t_embed.fc2".into(), SiteKind::WeightLinear, None);
        push("patch_embed".into(), SiteKind::WeightLinear, None);
        for b in 0..config.num_blocks {
            let p = format!("blocks.{b}");
            push(format!("{p}.adaln"), SiteKind::WeightLinear, Some(b));
            push(format!("{p}.attn.qkv"), SiteKind::WeightLinear, Some(b));
            push(format!("{p}.attn.qk"), SiteKind::GenericMatmul, Some(b));
            push(format!("{p}.attn.av"), SiteKind::PostSoftmaxMatmul, Some(b));
            push(format!("{p}.attn.proj"), SiteKind::WeightLinear, Some(b));
            push(format!("{p}.mlp.fc1"), SiteKind::WeightLinear, Some(b));
            push(format!("{p}.mlp.fc2"), SiteKind::PostGeluLinear, Some(b));
        }
        push("final.adaln".into(), SiteKind::WeightLinear, None);
        push("final.linear".into(), SiteKind::WeightLinear, None);
        let index = sites
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();
        LayerTapRegistry { sites, index }
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, index: usize) -> Option<&Site> {
        self.sites.get(index)
    }
}
