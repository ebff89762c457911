use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use urm_core::catalog::{load_catalog, ItemId};
use urm_core::checkpoint::{self, Checkpoint};
use urm_core::linalg::Matrix;
use urm_core::neighbor_index::{self, load_graph};
use urm_core::sampler::{Retriever, SamplerConfig};
use urm_core::trainer::UrmModel;
use urm_core::{CandidateCatalog, ItemMode, NeighborGraph, ObjectiveRegistry};

/// One retrieval request, as read from the wire or the command line.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Request {
    pub history: Vec<u32>,
    pub objective: String,
    #[serde(default)]
    pub query: Option<String>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub items: Vec<u32>,
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}

/// Catalog, trained model, neighbor graph and sampler defaults loaded as one
/// read-only unit.
pub struct EngineBundle {
    pub catalog: CandidateCatalog,
    pub model: UrmModel<f32>,
    pub graph: NeighborGraph,
    pub registry: Option<ObjectiveRegistry>,
    pub sampler: SamplerConfig,
    pub mode: ItemMode,
    items: Arc<Matrix<f32>>,
}

impl EngineBundle {
    pub fn load(
        catalog: &Path,
        checkpoint: &Path,
        graph: &Path,
        registry: Option<&Path>,
        sampler: SamplerConfig,
        mode: ItemMode,
    ) -> Result<Self> {
        let catalog = load_catalog(catalog).with_context(|| format!("loading catalog {}", catalog.display()))?;
        let ck =
            Checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
        let graph = load_graph(graph).with_context(|| format!("loading graph {}", graph.display()))?;
        let registry = registry
            .map(|p| ObjectiveRegistry::load(p).with_context(|| format!("loading objective registry {}", p.display())))
            .transpose()?;
        Self::from_parts(catalog, ck, graph, registry, sampler, mode)
    }

    pub fn from_parts(
        catalog: CandidateCatalog,
        ck: Checkpoint,
        graph: NeighborGraph,
        registry: Option<ObjectiveRegistry>,
        sampler: SamplerConfig,
        mode: ItemMode,
    ) -> Result<Self> {
        sampler.validate()?;
        let n = catalog.n_items();
        if ck.v_dis.rows() != n {
            bail!("checkpoint has {} items but the catalog has {n}", ck.v_dis.rows());
        }
        if ck.p_trans.rows() != catalog.text_dim() {
            bail!(
                "checkpoint expects {}-dimensional text features, catalog has {}",
                ck.p_trans.rows(),
                catalog.text_dim()
            );
        }
        if graph.n_items() != n {
            bail!("graph has {} items but the catalog has {n}", graph.n_items());
        }
        let Some(generator) = ck.generator.clone() else {
            bail!("checkpoint has no feature generator section");
        };
        generator.validate(n)?;
        let mapping = ck.mapping(Arc::new(catalog.text_features().clone()))?;
        if generator.feature_dim != mapping.feature_dim() {
            bail!(
                "generator emits {}-dimensional queries, mapping expects {}",
                generator.feature_dim,
                mapping.feature_dim()
            );
        }
        let items = Arc::new(mapping.effective_items(mode));
        Ok(EngineBundle {
            catalog,
            model: UrmModel { mapping, generator },
            graph,
            registry,
            sampler,
            mode,
            items,
        })
    }

    pub fn retriever(&self) -> Result<Retriever<'_, f32>> {
        Ok(Retriever::with_items(
            &self.model.mapping,
            self.items.clone(),
            &self.graph,
        )?)
    }

    /// Serve one request. Pure: equal requests give equal responses.
    pub fn handle(&self, req: &Request) -> Result<Response> {
        let n = self.catalog.n_items();
        if let Some(bad) = req.history.iter().find(|&&i| i as usize >= n) {
            bail!("history item {bad} out of range for {n} items");
        }
        let history: Vec<ItemId> = req.history.iter().map(|&i| ItemId(i)).collect();
        let (block, mut warning) = self.model.generator.forward(&history, &req.objective)?;
        if let Some(reg) = &self.registry {
            if reg.get(&req.objective).is_none() && warning.is_none() {
                warning = Some(format!("objective {:?} is not in the registry", req.objective));
            }
        }
        let cfg = SamplerConfig {
            k: req.k.unwrap_or(self.sampler.k),
            seed: req.seed.unwrap_or(self.sampler.seed),
            ..self.sampler.clone()
        };
        let out = self.retriever()?.retrieve(&block, &cfg)?;
        Ok(Response {
            items: out.iter().map(|p| p.0 .0).collect(),
            scores: out.iter().map(|p| p.1).collect(),
            warning,
        })
    }

    /// File format versions this build reads.
    pub fn versions() -> (u32, u32) {
        (checkpoint::VERSION, neighbor_index::VERSION)
    }
}

/// Handle one wire line, always producing one response line.
pub fn respond(bundle: &EngineBundle, line: &str) -> String {
    let result = serde_json::from_str::<Request>(line)
        .map_err(anyhow::Error::from)
        .and_then(|req| bundle.handle(&req));
    match result {
        Ok(resp) => serde_json::to_string(&resp).expect("response serializes"),
        Err(e) => serde_json::to_string(&ErrorResponse {
            error: format!("{e:#}"),
        })
        .expect("error serializes"),
    }
}
