//! Run configuration. Flat JSON on disk; command-line flags override
//! individual fields.

use serde::{Deserialize, Serialize};

use crate::ast::Order;

/// Frontier discipline plus node-selection policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMethod {
    DfsL2r,
    DfsRandom,
    BfsL2r,
    BfsRandom,
}

impl OrderMethod {
    pub fn order(self) -> Order {
        match self {
            OrderMethod::DfsL2r | OrderMethod::DfsRandom => Order::Dfs,
            OrderMethod::BfsL2r | OrderMethod::BfsRandom => Order::Bfs,
        }
    }

    pub fn is_random(self) -> bool {
        matches!(self, OrderMethod::DfsRandom | OrderMethod::BfsRandom)
    }

    pub fn parse(s: &str) -> Option<OrderMethod> {
        match s {
            "dfs_l2r" => Some(OrderMethod::DfsL2r),
            "dfs_random" => Some(OrderMethod::DfsRandom),
            "bfs_l2r" => Some(OrderMethod::BfsL2r),
            "bfs_random" => Some(OrderMethod::BfsRandom),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OrderMethod::DfsL2r => "dfs_l2r",
            OrderMethod::DfsRandom => "dfs_random",
            OrderMethod::BfsL2r => "bfs_l2r",
            OrderMethod::BfsRandom => "bfs_random",
        }
    }
}

/// Everything a training run needs. Serialized next to checkpoints so runs
/// can be reproduced.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub order_method: OrderMethod,
    /// Relation distance clamp R.
    pub r: usize,
    /// Hidden size d.
    pub d: usize,
    /// Decoder layers L.
    pub l: usize,
    /// Attention heads H.
    pub h: usize,
    /// Depth embedding table size.
    pub d_max: usize,
    pub enc_layers: usize,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub beam_size: usize,
    pub max_decode_steps: usize,
    pub seed: u64,
    /// Dev EM is computed every this many optimizer steps.
    pub eval_every: usize,
    /// Stop early once dev EM reaches this value, if set.
    pub target_dev_em: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // Desk-scale sizes. The reference setup behind this architecture
        // uses d=512, 8 heads, 8 encoder layers and 100k steps; these
        // defaults train in minutes on a laptop CPU instead.
        TrainConfig {
            order_method: OrderMethod::DfsL2r,
            r: 4,
            d: 64,
            l: 2,
            h: 4,
            d_max: 32,
            enc_layers: 2,
            dropout: 0.0,
            lr: 1e-3,
            weight_decay: 0.1,
            warmup_ratio: 0.1,
            batch_size: 16,
            total_steps: 3000,
            beam_size: 5,
            max_decode_steps: 200,
            seed: 1,
            eval_every: 200,
            target_dev_em: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d == 0 || self.h == 0 || self.l == 0 || self.enc_layers == 0 {
            return Err("model dimensions must be positive".into());
        }
        if self.d % self.h != 0 {
            return Err(format!("d={} must be divisible by h={}", self.d, self.h));
        }
        if self.r < 1 {
            return Err("relation clamp r must be >= 1".into());
        }
        if self.batch_size == 0 || self.total_steps == 0 || self.beam_size == 0 {
            return Err("batch_size, total_steps and beam_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err("warmup_ratio must be in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must be in [0, 1)".into());
        }
        Ok(())
    }
}
