use std::collections::BTreeMap;

use super::{model, NodeRound, Setup};
use crate::netsim::NodeId;

/// Federated averaging in the clear: every round, every participant takes one
/// step from the shared model and the results are averaged.
pub(crate) fn run(setup: &Setup) -> BTreeMap<NodeId, Vec<NodeRound>> {
    let cfg = &setup.cfg;
    let dealers: Vec<NodeId> = (0..cfg.n as NodeId).collect();
    let mut w = setup.init.clone();
    let mut history = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let mut sum = vec![0.0; w.len()];
        for data in &setup.data {
            let local = model::local_train(&w, data, cfg.learning_rate);
            sum.iter_mut().zip(&local).for_each(|(s, x)| *s += x);
        }
        w = sum.iter().map(|s| s / cfg.n as f64).collect();
        history.push(NodeRound {
            w: w.clone(),
            dealers: dealers.clone(),
            dealer_cosines: BTreeMap::new(),
            started_at: 0,
            finished_at: 0,
        });
    }
    dealers.iter().map(|&id| (id, history.clone())).collect()
}
