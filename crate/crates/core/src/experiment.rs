//! The per-seed pipeline: biased split, SGC, CEGIS and replacement.
//! Shared by the command-line driver and the integration tests.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cegis::{cegis_loop, init_training_set, CegisConfig, CegisReport};
use crate::dataset::{biased_split, reduce_features, GraphBundle, SplitSpec, Splits};
use crate::error::{Error, Result};
use crate::neuralnet::ClosedLoop;
use crate::numerics::PcaModel;
use crate::reconstruct::{
    check_representative, class_representative, evaluate, replace_and_predict,
    replace_nodes_and_predict, SeedResult,
};
use crate::sgc::{fit_sgc, SgcConfig, SgcModel, SgcTrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub pca_dim: usize,
    pub per_class_train: usize,
    pub val_total: usize,
    pub test_total: usize,
    pub ppr_teleport: f64,
    pub sgc: SgcConfig,
    pub cegis: CegisConfig,
    pub class_id: usize,
    /// Controlled node; a seeded random training node of `class_id` if None.
    pub node_id: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            pca_dim: 20,
            per_class_train: 20,
            val_total: 500,
            test_total: 1000,
            ppr_teleport: 0.15,
            sgc: SgcConfig::default(),
            cegis: CegisConfig::default(),
            class_id: 0,
            node_id: None,
        }
    }
}

impl ExperimentConfig {
    pub fn split_spec(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            per_class_train: self.per_class_train,
            val_total: self.val_total,
            test_total: self.test_total,
            bias_seed: seed,
            ppr_teleport: self.ppr_teleport,
        }
    }
}

/// Reduces features to `pca_dim` (fit on all nodes). Seed independent.
pub fn prepare_features(raw: &GraphBundle, pca_dim: usize) -> Result<(GraphBundle, PcaModel)> {
    raw.validate()?;
    reduce_features(raw, pca_dim)
}

/// The bundle's own splits if it ships them, else a biased split drawn
/// from `seed`.
pub fn splits_for_seed(g: &GraphBundle, cfg: &ExperimentConfig, seed: u64) -> Result<Splits> {
    match &g.splits {
        Some(s) => Ok(s.clone()),
        None => biased_split(g, &cfg.split_spec(seed)),
    }
}

pub fn train_baseline(
    g: &GraphBundle,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(SgcModel, SgcTrainReport)> {
    let sgc_cfg = SgcConfig {
        seed,
        ..cfg.sgc.clone()
    };
    fit_sgc(g, &sgc_cfg)
}

/// `cfg.node_id`, or a seeded random training node of the class.
pub fn select_node(g: &GraphBundle, cfg: &ExperimentConfig, seed: u64) -> Result<usize> {
    if cfg.class_id >= g.num_classes {
        return Err(Error::InvalidArgument(format!(
            "class {} out of range for {} classes",
            cfg.class_id, g.num_classes
        )));
    }
    if let Some(v) = cfg.node_id {
        return Ok(v);
    }
    let splits = g.splits()?;
    let candidates: Vec<usize> = (0..g.num_nodes())
        .filter(|&v| splits.train[v] && g.labels[v] == cfg.class_id)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.choose(&mut rng).copied().ok_or_else(|| {
        Error::InvalidArgument(format!("no training nodes of class {}", cfg.class_id))
    })
}

pub fn run_cegis(
    g: &GraphBundle,
    model: &SgcModel,
    node_id: usize,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(ClosedLoop, CegisReport)> {
    let ccfg = CegisConfig {
        seed,
        ..cfg.cegis.clone()
    };
    let (mut cl, mut state) = init_training_set(model, g, node_id, cfg.class_id, &ccfg)?;
    let report = cegis_loop(&mut cl, &mut state, &ccfg)?;
    Ok((cl, report))
}

/// Replacement metrics for trained networks.
pub fn evaluate_seed(
    g: &GraphBundle,
    model: &SgcModel,
    cl: &ClosedLoop,
    certified: bool,
    eps: f64,
    seed: u64,
) -> Result<SeedResult> {
    let class_id = cl.equilibrium_class();
    let h_star = class_representative(&cl.controller, class_id, cl.num_classes())?;
    let before = model.predict(None)?;
    let after = replace_and_predict(g, model, &h_star, class_id)?;
    let single = replace_nodes_and_predict(g, model, &h_star, &[cl.plant.node_id])?;
    let acc = evaluate(g, &before, &after.predictions)?;
    let acc_single = evaluate(g, &before, &single)?;
    Ok(SeedResult {
        seed,
        class_id,
        node_id: cl.plant.node_id,
        certified,
        representative_ok: check_representative(&cl.plant, &h_star, class_id, eps)?,
        n_replaced: after.n_replaced,
        accuracy_before: acc.before,
        accuracy_after: acc.after,
        accuracy_after_single: acc_single.after,
    })
}

/// Everything one seed produces.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub graph: GraphBundle,
    pub sgc: SgcModel,
    pub sgc_report: SgcTrainReport,
    pub closed_loop: ClosedLoop,
    pub cegis: CegisReport,
    pub result: SeedResult,
}

/// Full pipeline for one seed on already reduced features.
pub fn run_seed(reduced: &GraphBundle, cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let mut g = reduced.clone();
    g.splits = Some(splits_for_seed(reduced, cfg, seed)?);
    let (sgc, sgc_report) = train_baseline(&g, cfg, seed)?;
    let node_id = select_node(&g, cfg, seed)?;
    let (closed_loop, cegis) = run_cegis(&g, &sgc, node_id, cfg, seed)?;
    let result = evaluate_seed(&g, &sgc, &closed_loop, cegis.certified, cfg.cegis.eps, seed)?;
    Ok(SeedRun {
        graph: g,
        sgc,
        sgc_report,
        closed_loop,
        cegis,
        result,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_graph, SynthSpec};

    fn small() -> (GraphBundle, ExperimentConfig) {
        let raw = synth_graph(&SynthSpec {
            blocks: 2,
            nodes_per_block: 20,
            p_in: 0.5,
            p_out: 0.05,
            feature_dim: 32,
            seed: 1,
        })
        .unwrap();
        let cfg = ExperimentConfig {
            per_class_train: 4,
            val_total: 8,
            test_total: 20,
            cegis: CegisConfig {
                max_rounds: 2,
                epochs_per_round: 20,
                delta: 5e-2,
                record_wall_time: false,
                ..CegisConfig::default()
            },
            ..ExperimentConfig::default()
        };
        (prepare_features(&raw, 20).unwrap().0, cfg)
    }

    #[test]
    fn selected_node_is_labeled_member_of_class() {
        let (g, cfg) = small();
        let mut g = g;
        g.splits = Some(splits_for_seed(&g, &cfg, 3).unwrap());
        let v = select_node(&g, &cfg, 3).unwrap();
        assert_eq!(g.labels[v], 0);
        assert!(g.splits().unwrap().train[v]);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let (g, cfg) = small();
        let a = run_seed(&g, &cfg, 5).unwrap();
        let b = run_seed(&g, &cfg, 5).unwrap();
        assert_eq!(
            serde_json::to_string(&a.cegis).unwrap(),
            serde_json::to_string(&b.cegis).unwrap()
        );
        assert_eq!(a.result, b.result);
    }
}
