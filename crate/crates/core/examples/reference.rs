//! Train on the reference synthetic instance and print an evaluation report.

use std::time::Instant;

use urm_core::eval::{self, EvalConfig, SyntheticSpec};
use urm_core::neighbor_index::build_exact_knn;
use urm_core::trainer::{self, TrainConfig};

fn main() -> urm_core::Result<()> {
    let t0 = Instant::now();
    let data = eval::gen_synthetic(&SyntheticSpec::default())?;
    let cfg = TrainConfig::default();
    let out = trainer::train(&data.train, &data.catalog, None, &cfg)?;
    println!(
        "trained in {:.1}s, epoch losses {:?}",
        t0.elapsed().as_secs_f64(),
        out.epoch_losses
    );
    let graph = build_exact_knn(&out.model.mapping, 16)?;
    let report = eval::evaluate(&out.model, &data.catalog, &graph, &data.test, &EvalConfig::default())?;
    println!("{}", report.to_table());
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
