use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How region tokens are assigned to experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Sinkhorn interleaved with log-plan diffusion over the region graph.
    GraphOt,
    /// Plain capacity-constrained Sinkhorn.
    Ot,
    /// Row-wise softmax of `−C/ε`, scaled by supply; no capacity constraint.
    Softmax,
}

impl std::fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::GraphOt => "graph_ot",
            Self::Ot => "ot",
            Self::Softmax => "softmax",
        })
    }
}

/// Architecture and routing hyperparameters plus ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoamConfig {
    /// Patch embedding width. Left unset, it is taken from the data.
    pub d_in: Option<usize>,
    pub d: usize,
    pub target_m: usize,
    pub k_nn: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    pub lambda_s: f64,
    pub n_smooth: usize,
    /// Explicit diffusion points (Sinkhorn pair counts); evenly spaced when unset.
    pub smoothing_schedule: Option<Vec<usize>>,
    pub d_attn: usize,
    pub dropout: f64,
    pub n_classes: usize,
    pub head_hidden: usize,
    /// Use the raw region features as routing embeddings.
    pub no_routing_gnn: bool,
    /// Skip the diffusion steps inside Sinkhorn.
    pub no_graph_reg: bool,
    /// Replace Sinkhorn with a row-wise softmax.
    pub softmax_routing: bool,
    /// Pool with plain attention over each support, ignoring dispatch mass.
    pub no_ot_modulation: bool,
    /// Feed dispatch mass to pooling as a constant.
    pub detach_routing: bool,
}

impl Default for RoamConfig {
    fn default() -> Self {
        Self {
            d_in: None,
            d: 512,
            target_m: 256,
            k_nn: 8,
            n_experts: 8,
            top_k: 2,
            epsilon: 0.1,
            sinkhorn_iters: 20,
            lambda_s: 0.3,
            n_smooth: 3,
            smoothing_schedule: None,
            d_attn: 64,
            dropout: 0.25,
            n_classes: 2,
            head_hidden: 256,
            no_routing_gnn: false,
            no_graph_reg: false,
            softmax_routing: false,
            no_ot_modulation: false,
            detach_routing: false,
        }
    }
}

impl RoamConfig {
    pub fn routing_mode(&self) -> RoutingMode {
        if self.softmax_routing {
            RoutingMode::Softmax
        } else if self.no_graph_reg {
            RoutingMode::Ot
        } else {
            RoutingMode::GraphOt
        }
    }

    pub fn d_in(&self) -> Result<usize> {
        self.d_in.ok_or_else(|| Error::invalid("d_in is not set"))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("target_m", self.target_m),
            ("k_nn", self.k_nn),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
            ("sinkhorn_iters", self.sinkhorn_iters),
            ("d_attn", self.d_attn),
            ("n_classes", self.n_classes),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.d_in == Some(0) {
            return Err(Error::invalid("d_in must be positive"));
        }
        if self.top_k > self.n_experts {
            return Err(Error::invalid(format!(
                "top_k {} exceeds n_experts {}",
                self.top_k, self.n_experts
            )));
        }
        if self.n_smooth > self.sinkhorn_iters {
            return Err(Error::invalid(format!(
                "n_smooth {} exceeds sinkhorn_iters {}",
                self.n_smooth, self.sinkhorn_iters
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda_s) {
            return Err(Error::invalid(format!(
                "lambda_s must lie in [0, 1], got {}",
                self.lambda_s
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if let Some(s) = &self.smoothing_schedule {
            if s.iter().any(|&t| t == 0 || t > self.sinkhorn_iters) {
                return Err(Error::invalid(format!(
                    "smoothing schedule {s:?} outside 1..={}",
                    self.sinkhorn_iters
                )));
            }
        }
        Ok(())
    }
}
