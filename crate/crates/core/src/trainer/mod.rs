//! NCE training of the decomposed mapping and the toy feature generator.

pub mod generator;
pub mod gradcheck;
pub mod nce;
pub mod negatives;
pub mod optim;

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{CandidateCatalog, InteractionRecord, ItemId, DEFAULT_MAX_HISTORY};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, streams};
use crate::scoring::{DecomposedMapping, DEFAULT_BOUND};

pub use generator::{FeatureGenerator, ToyFeatureGenerator};
pub use nce::{
    model_gradients, model_loss, nce_gradients, nce_loss, Example, ModelGradients, NceGradients, NceOptions, RowCache,
    UrmModel,
};
pub use negatives::{NegativeSampler, DEFAULT_POWER};
pub use optim::{Adam, ParamGroup};

/// Records per parallel work unit inside a batch; fixed so that gradient
/// summation order does not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Negatives drawn per batch, shared by its records.
    pub n_neg: usize,
    /// Exponent on item frequency for negative sampling.
    pub power: f64,
    /// Learning-rate multiplier for groups listed in `pretrained`.
    pub pretrained_lr_ratio: f64,
    pub pretrained: Vec<ParamGroup>,
    /// Low rank `H`.
    pub rank: usize,
    /// Query width `D`.
    pub feature_dim: usize,
    /// Query count `M`.
    pub n_queries: usize,
    /// Generator embedding width.
    pub embed_dim: usize,
    pub head_norm: bool,
    pub bound: f64,
    /// Divide training logits by this temperature when set.
    pub train_tau: Option<f64>,
    pub init_std: f64,
    pub max_history: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 64,
            epochs: 5,
            seed: 0,
            n_neg: 512,
            power: DEFAULT_POWER,
            pretrained_lr_ratio: 0.1,
            pretrained: Vec::new(),
            rank: 32,
            feature_dim: 128,
            n_queries: 8,
            embed_dim: 32,
            head_norm: true,
            bound: DEFAULT_BOUND,
            train_tau: None,
            init_std: 0.02,
            max_history: DEFAULT_MAX_HISTORY,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("n_neg", self.n_neg),
            ("rank", self.rank),
            ("feature_dim", self.feature_dim),
            ("n_queries", self.n_queries),
            ("embed_dim", self.embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate >= 0.0) || !(self.pretrained_lr_ratio >= 0.0) {
            return Err(Error::InvalidArgument("learning rates must be non-negative".into()));
        }
        if !(self.bound > 0.0) {
            return Err(Error::InvalidArgument("bound must be positive".into()));
        }
        if let Some(t) = self.train_tau {
            if !(t > 0.0) {
                return Err(Error::InvalidArgument("train_tau must be positive".into()));
            }
        }
        Ok(())
    }

    fn lr(&self, group: ParamGroup) -> f64 {
        if self.pretrained.contains(&group) {
            self.learning_rate * self.pretrained_lr_ratio
        } else {
            self.learning_rate
        }
    }

    fn nce_options(&self) -> NceOptions {
        NceOptions {
            bound: self.bound,
            logit_scale: self.train_tau.map_or(1.0, |t| 1.0 / t),
        }
    }
}

/// Objective tags in first-appearance order.
pub fn collect_tags(records: &[InteractionRecord]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    records
        .iter()
        .filter(|r| seen.insert(r.objective.clone()))
        .map(|r| r.objective.clone())
        .collect()
}

/// Deterministic initial parameters. `V_dis` rows of items the catalog marks
/// unseen start at zero.
pub fn init_model(catalog: &CandidateCatalog, tags: Vec<String>, config: &TrainConfig) -> Result<UrmModel<f32>> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, streams::TRAIN_INIT);
    let n = catalog.n_items();
    let (d, h, g) = (config.feature_dim, config.rank, catalog.text_dim());
    let u = Matrix::random_normal(d, h, 1.0 / (d as f64).sqrt(), &mut rng);
    let mut v_dis = Matrix::random_normal(n, h, config.init_std, &mut rng);
    for i in catalog.unseen_ids() {
        v_dis.row_mut(i.index()).fill(0.0);
    }
    let p_trans = Matrix::random_normal(g, h, config.init_std, &mut rng);
    let mapping = DecomposedMapping::new(
        u,
        v_dis,
        p_trans,
        Arc::new(catalog.text_features().clone()),
        config.head_norm,
    )?;
    let mut generator = ToyFeatureGenerator::init(
        n,
        tags,
        config.embed_dim,
        d,
        config.n_queries,
        1.0 / (config.embed_dim as f64).sqrt(),
        &mut rng,
    )?;
    generator.max_history = config.max_history;
    Ok(UrmModel { mapping, generator })
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: UrmModel<f32>,
    /// Mean per-record loss of every epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean per-record loss of every batch.
    pub batch_losses: Vec<f64>,
}

/// Train from scratch.
pub fn train(
    records: &[InteractionRecord],
    catalog: &CandidateCatalog,
    tags: Option<Vec<String>>,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    let tags = tags.unwrap_or_else(|| collect_tags(records));
    let model = init_model(catalog, tags, config)?;
    train_model(model, records, catalog, config)
}

/// Continue training an existing model.
pub fn train_model(
    mut model: UrmModel<f32>,
    records: &[InteractionRecord],
    catalog: &CandidateCatalog,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::Empty("no training records".into()));
    }
    if let Some((i, _)) = records.iter().enumerate().find(|(_, r)| r.positives.is_empty()) {
        return Err(Error::InvalidArgument(format!("training record {i} has no positives")));
    }
    model.generator.validate(catalog.n_items())?;
    let sampler = NegativeSampler::new(catalog.frequencies(), config.power)?;
    let opts = config.nce_options();
    let mut opt = Adam::new();
    let mut shuffle_rng = rng::stream(config.seed, streams::TRAIN_SHUFFLE);
    let mut neg_rng = rng::stream(config.seed, streams::TRAIN_NEGATIVES);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut batch_losses = Vec::new();

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_total = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let negatives = sampler.sample(config.n_neg, &mut neg_rng)?;
            let rows = RowCache::build(
                &model.mapping,
                batch
                    .iter()
                    .flat_map(|&r| records[r].positives.iter().copied())
                    .chain(negatives.iter().copied()),
            )?;
            let model_ref = &model;
            let partial: Vec<(f64, ModelGradients)> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut acc = ModelGradients::zeros(model_ref);
                    let mut loss = 0.0;
                    for &r in chunk {
                        let rec = &records[r];
                        let ex = Example {
                            history: &rec.history,
                            objective: &rec.objective,
                            positives: &rec.positives,
                        };
                        let (l, g) = nce::model_gradients_cached(model_ref, &rows, &ex, &negatives, &opts)?;
                        loss += l;
                        acc.add_assign(&g);
                    }
                    Ok((loss, acc))
                })
                .collect::<Result<_>>()?;
            let mut grads = ModelGradients::zeros(&model);
            let mut loss = 0.0;
            for (l, g) in &partial {
                loss += l;
                grads.add_assign(g);
            }
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    message: format!("batch loss is {loss}"),
                });
            }
            grads.scale(1.0 / batch.len() as f64);
            apply(&mut model, &grads, &mut opt, config);
            if !model.mapping.u.is_finite() || !model.mapping.gain.iter().all(|g| g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    message: "non-finite parameters after update".into(),
                });
            }
            epoch_total += loss;
            batch_losses.push(loss / batch.len() as f64);
        }
        let mean = epoch_total / records.len() as f64;
        log::info!("epoch {epoch}: mean NCE loss {mean:.4}");
        epoch_losses.push(mean);
    }
    Ok(TrainOutput {
        model,
        epoch_losses,
        batch_losses,
    })
}

fn apply(model: &mut UrmModel<f32>, grads: &ModelGradients, opt: &mut Adam, config: &TrainConfig) {
    opt.tick();
    let dp = grads.mapping.p_trans(&model.mapping);
    let m = &mut model.mapping;
    opt.update_dense(
        ParamGroup::U,
        config.lr(ParamGroup::U),
        m.u.as_mut_slice(),
        &grads.mapping.u,
    );
    if m.head_norm {
        opt.update_dense(
            ParamGroup::Gain,
            config.lr(ParamGroup::Gain),
            &mut m.gain,
            &grads.mapping.gain,
        );
    }
    opt.update_dense(
        ParamGroup::PTrans,
        config.lr(ParamGroup::PTrans),
        m.p_trans.as_mut_slice(),
        &dp,
    );
    opt.update_rows(
        ParamGroup::VDis,
        config.lr(ParamGroup::VDis),
        &mut m.v_dis,
        &grads.mapping.item_rows,
    );
    let g = &mut model.generator;
    opt.update_dense(
        ParamGroup::Heads,
        config.lr(ParamGroup::Heads),
        g.heads.as_mut_slice(),
        &grads.heads,
    );
    opt.update_rows(
        ParamGroup::ObjectiveEmbed,
        config.lr(ParamGroup::ObjectiveEmbed),
        &mut g.objective_embed,
        &grads.objective_embed,
    );
    opt.update_rows(
        ParamGroup::ItemEmbed,
        config.lr(ParamGroup::ItemEmbed),
        &mut g.item_embed,
        &grads.item_embed,
    );
}

/// Items a batch touches in `V_dis`: its positives and its negatives.
pub fn touched_items(records: &[&InteractionRecord], negatives: &[ItemId]) -> BTreeSet<ItemId> {
    records
        .iter()
        .flat_map(|r| r.positives.iter().copied())
        .chain(negatives.iter().copied())
        .collect()
}
