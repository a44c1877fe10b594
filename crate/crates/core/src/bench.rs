//! Operation counts of the graph stage against the analytic cost terms
//! `B·L_g·K·|E|·d` (sparse work) and `L_g·N·B·d` (node buffers).

use std::time::Instant;

use serde::Serialize;

use crate::data::{Dataset, Phase};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::build_model;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub level: usize,
    pub subbands: usize,
    pub cheby_order: usize,
    pub layers: usize,
    pub d: usize,
    pub num_nodes: usize,
    pub num_edges: usize,
    pub sparse_products: u64,
    pub sparse_madds: u64,
    /// `B·L_g·K·|E|·d`
    pub predicted_madds: u64,
    /// Bytes of every sparse-product output (the propagated node buffers).
    pub node_buffer_bytes: u64,
    /// `8·L_g·N·B·d`
    pub predicted_node_bytes: u64,
    /// Bytes of every value recorded by the graph stage; the tape keeps them
    /// all alive, so this is also the peak.
    pub peak_value_bytes: u64,
    pub seconds: f64,
}

impl BenchReport {
    pub fn madd_ratio(&self) -> f64 {
        self.sparse_madds as f64 / self.predicted_madds as f64
    }

    /// Each Laplacian product touches both directions of every edge, so the
    /// count sits at twice the edge term.
    pub fn within_factor_two(&self) -> bool {
        self.sparse_madds >= self.predicted_madds && self.sparse_madds <= 2 * self.predicted_madds
    }
}

/// Runs one full forward pass with the given transform depth, order and
/// number of layers, counting the graph stage's work.
pub fn bench(ds: &Dataset, base: &ModelConfig, level: usize, cheby_order: usize, layers: usize) -> Result<BenchReport> {
    let cfg = ModelConfig {
        level,
        cheby_order,
        graph_layers: layers,
        ..base.clone()
    };
    let model = build_model(&cfg, ds)?;
    let store = model.init_params()?;
    let t0 = Instant::now();
    let (_, stats) = model.forward_all_with_stats(&store, &ds.inputs(Phase::Test))?;
    let seconds = t0.elapsed().as_secs_f64();
    let (b, l, k, d) = (cfg.num_subbands(), cfg.effective_layers(), cheby_order, cfg.d);
    let (n, e) = (ds.num_users() + ds.num_items(), model.laplacian().num_edges);
    Ok(BenchReport {
        level: cfg.effective_level(),
        subbands: b,
        cheby_order: k,
        layers: l,
        d,
        num_nodes: n,
        num_edges: e,
        sparse_products: stats.sparse_products,
        sparse_madds: stats.sparse_madds,
        predicted_madds: (b * l * k * e * d) as u64,
        node_buffer_bytes: stats.sparse_output_bytes,
        predicted_node_bytes: (8 * l * n * b * d) as u64,
        peak_value_bytes: stats.value_bytes,
        seconds,
    })
}

/// Checks that sparse work is proportional to `B·K` across `reports` taken
/// at fixed `L_g`, `|E|` and `d`, and node-buffer bytes to `B` at fixed `K`.
pub fn check_linearity(reports: &[BenchReport]) -> Result<()> {
    let Some(first) = reports.first() else {
        return Ok(());
    };
    let unit = first.sparse_madds as f64 / (first.subbands * first.cheby_order) as f64;
    for r in reports {
        let per = r.sparse_madds as f64 / (r.subbands * r.cheby_order) as f64;
        if per != unit {
            return Err(Error::Numerical(format!(
                "sparse work per subband and order is {per} at B={}, K={} but {unit} at B={}, K={}",
                r.subbands, r.cheby_order, first.subbands, first.cheby_order
            )));
        }
        let per_b = r.node_buffer_bytes as f64 / (r.subbands * r.cheby_order) as f64;
        let unit_b = first.node_buffer_bytes as f64 / (first.subbands * first.cheby_order) as f64;
        if per_b != unit_b {
            return Err(Error::Numerical(format!("node-buffer bytes are not linear in B at B={}", r.subbands)));
        }
    }
    Ok(())
}
