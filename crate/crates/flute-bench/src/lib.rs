//! Shared fixtures for the criterion benchmarks.

use flute_core::flute::{self, FactoredModel, FluteConfig};
use flute_core::synth::{make_client_shards, make_ground_truth, ClientShard, GroundTruth};

/// Standard benchmark problem: d = 10, M = 15, N = 12, k = 2.
pub fn standard_problem() -> (GroundTruth, Vec<ClientShard>, FactoredModel, FluteConfig) {
    let gt = make_ground_truth(10, 15, 1).expect("valid dimensions");
    let shards = make_client_shards(&gt, 12, 0.3, 1);
    let cfg = FluteConfig::defaults(10, 1, 1);
    let model = flute::init_factored(10, 2, 15, cfg.alpha, cfg.seed);
    (gt, shards, model, cfg)
}
