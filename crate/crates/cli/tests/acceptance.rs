//! Acceptance run on the reference instance: one PASS/FAIL line per
//! criterion, nonzero exit if any fails.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{ensure, Result};
use rand::Rng;
use urm_core::catalog::{load_catalog, ItemId};
use urm_core::checkpoint::Checkpoint;
use urm_core::eval::{self, flops_estimate, gen_synthetic, EvalConfig, SyntheticData, SyntheticSpec};
use urm_core::linalg::{norm, standard_normal, Matrix};
use urm_core::neighbor_index::{build_exact_knn, load_graph, save_graph, NeighborGraph};
use urm_core::rng;
use urm_core::sampler::{Retriever, SamplerConfig};
use urm_core::scoring::{
    bound_constrain, full_distribution, max_score, project_queries, score_all, softmax_tau, DecomposedMapping,
    ItemMode, ProjectedQueryBlock, QueryBlock,
};
use urm_core::trainer::gradcheck::{check_instance, instance_kind, InstanceKind};
use urm_core::trainer::{self, NegativeSampler, TrainConfig, UrmModel};

const DEGREE: usize = 16;
const K: usize = 100;

struct Reference {
    data: SyntheticData,
    model: UrmModel<f32>,
    graph: NeighborGraph,
    report: eval::EvalReport,
}

fn reference() -> Result<Reference> {
    let data = gen_synthetic(&SyntheticSpec::default())?;
    let t = Instant::now();
    let out = trainer::train(&data.train, &data.catalog, None, &TrainConfig::default())?;
    println!("       trained reference model in {:.1}s", t.elapsed().as_secs_f64());
    let graph = build_exact_knn(&out.model.mapping, DEGREE)?;
    let report = eval::evaluate(&out.model, &data.catalog, &graph, &data.test, &EvalConfig::default())?;
    Ok(Reference {
        data,
        model: out.model,
        graph,
        report,
    })
}

fn zero_temperature(r: &Reference) -> Result<String> {
    let n = r.data.catalog.n_items();
    let retriever = Retriever::new(&r.model.mapping, &r.graph, ItemMode::Sum)?;
    let items = r.model.mapping.effective_items(ItemMode::Sum);
    let cfg = SamplerConfig {
        steps: 1,
        k: K,
        tau: 1e-9,
        init_subset: Some(n),
        ..Default::default()
    };
    let mut checked = 0;
    for (i, rec) in r.data.test.iter().take(50).enumerate() {
        let (f, _) = r.model.generator.forward(&rec.history, &rec.objective)?;
        let got: Vec<ItemId> = retriever
            .retrieve(
                &f,
                &SamplerConfig {
                    seed: i as u64,
                    ..cfg.clone()
                },
            )?
            .into_iter()
            .map(|p| p.0)
            .collect();
        let bounded = bound_constrain(&f, cfg.bound)?;
        // The logits of the full distribution, ranked with ties by id.
        let q = project_queries(&r.model.mapping, &bounded)?;
        let expect: Vec<ItemId> = score_all(&items, &q)?.top_k(K).into_iter().map(|p| p.0).collect();
        let p = full_distribution(&r.model.mapping, &bounded, cfg.tau)?;
        ensure!(
            p[expect[0].index()] > 0.5,
            "record {i}: full distribution mode is not the top score"
        );
        let a: HashSet<_> = got.iter().collect();
        let b: HashSet<_> = expect.iter().collect();
        ensure!(a == b, "record {i}: sampled set differs from the exact top-{K}");
        checked += 1;
    }
    Ok(format!("{checked} queries, |C|={n}"))
}

fn step_convergence(r: &Reference) -> Result<String> {
    let p: Vec<f64> = r.report.precision.iter().map(|s| s.mean).collect();
    ensure!(p.len() >= 5, "sweep has {} steps", p.len());
    let shown = p.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    ensure!(p[0] < p[1] && p[1] < p[2] && p[2] < p[3], "not increasing: {shown}");
    ensure!((p[4] - p[3]).abs() < 0.03, "T=5 moves by {:.4}: {shown}", p[4] - p[3]);
    ensure!(p[3] >= 0.80, "prec(4) = {:.4}", p[3]);
    Ok(format!("prec(T=1..5) = {shown}"))
}

fn continuity() -> Result<String> {
    let mut r = rng::stream(4242, 0);
    let mut worst = f64::NEG_INFINITY;
    for draw in 0..1000 {
        let d = r.random_range(1..8);
        let h = r.random_range(1..6);
        let m = r.random_range(1..5);
        let bound: f64 = r.random_range(0.1..200.0);
        let u = Matrix::<f64>::random_normal(d, h, 1.0, &mut r);
        let v1 = Matrix::<f64>::random_normal(1, h, 1.0, &mut r).into_vec();
        let step: f64 = r.random_range(1e-4..1.0);
        let v2: Vec<f64> = v1.iter().map(|x| x + step * standard_normal(&mut r)).collect();
        let diff: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a - b).collect();
        let eps = norm(&u.matvec(&diff)) * r.random_range(1.0..1.5);
        let mapping = DecomposedMapping::new(
            u,
            Matrix::from_rows(&[v1, v2])?,
            Matrix::zeros(1, h),
            Arc::new(Matrix::zeros(2, 1)),
            false,
        )?;
        let f = QueryBlock::from_matrix(Matrix::random_normal(m, d, bound * 0.7, &mut r))?;
        let q = project_queries(&mapping, &bound_constrain(&f, bound)?)?;
        let gap = (max_score(mapping.v_dis.row(0), &q).0 - max_score(mapping.v_dis.row(1), &q).0).abs();
        ensure!(
            gap <= eps * bound + 1e-6,
            "draw {draw}: gap {gap} exceeds {}",
            eps * bound
        );
        worst = worst.max(gap - eps * bound);
    }
    Ok(format!("1000 draws, max(gap - eps*B) = {worst:.3e}"))
}

fn gradients() -> Result<String> {
    let (mut worst, mut clipped, mut unclipped, mut ties) = (0.0f64, 0, 0, 0);
    for i in 0..100 {
        let kind = instance_kind(i);
        let c = check_instance(i, kind)?;
        worst = worst.max(c.max_error());
        clipped += c.clipped;
        unclipped += c.unclipped;
        ties += usize::from(kind == InstanceKind::Tie);
    }
    ensure!(clipped > 0 && unclipped > 0 && ties > 0, "branch coverage missing");
    ensure!(worst < 1e-4, "max relative error {worst:.3e}");
    Ok(format!(
        "100 instances, max error {worst:.2e}, {clipped} clipped / {unclipped} unclipped columns, {ties} ties"
    ))
}

fn flops() -> Result<String> {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_urm"))
        .arg("flops")
        .output()?;
    ensure!(out.status.success(), "urm flops failed");
    let text = String::from_utf8(out.stdout)?;
    let f = flops_estimate(128, 128, 4096, 4, 1000, 32, 10_000_000)?;
    ensure!(text.contains(&f.sampled.to_string()), "unexpected output {text:?}");
    ensure!((f.sampled as f64 / 1e9 - 2.16).abs() < 0.005, "sampled {}", f.sampled);
    ensure!((f.full as f64 / 1e12 - 5.24).abs() < 0.005, "full {}", f.full);
    ensure!((f.ratio() - 2423.0).abs() <= 1.0, "ratio {}", f.ratio());
    Ok(format!(
        "sampled {:.3e}, full {:.3e}, ratio {:.1}",
        f.sampled as f64,
        f.full as f64,
        f.ratio()
    ))
}

fn training(r: &Reference) -> Result<String> {
    let rows = &r.report.recall_by_tag;
    let n: usize = rows.values().map(|t| t.records).sum();
    let recall = rows.values().map(|t| t.sampled * t.records as f64).sum::<f64>() / n as f64;
    let b = &r.report.baselines;
    let random = K as f64 / r.data.catalog.n_items() as f64;
    ensure!(recall >= 10.0 * random, "R@{K} {recall:.4} < 10 x {random}");
    ensure!(
        recall >= 2.0 * b.popularity,
        "R@{K} {recall:.4} < 2 x popularity {:.4}",
        b.popularity
    );
    Ok(format!(
        "R@{K} {recall:.4} vs random {:.4} / popularity {:.4}, {} epochs",
        b.random,
        b.popularity,
        TrainConfig::default().epochs
    ))
}

fn cold_start(r: &Reference) -> Result<String> {
    let get = |m: ItemMode| r.report.ablation.iter().find(|a| a.mode == m).cloned();
    let (Some(dis), Some(trans), Some(sum)) = (get(ItemMode::Dis), get(ItemMode::Trans), get(ItemMode::Sum)) else {
        anyhow::bail!("ablation rows missing");
    };
    let shown = format!(
        "unseen dis {:.4} trans {:.4} sum {:.4}; all dis {:.4} sum {:.4}",
        dis.unseen, trans.unseen, sum.unseen, dis.all, sum.all
    );
    ensure!(
        sum.unseen >= trans.unseen && trans.unseen >= dis.unseen,
        "unseen order broken: {shown}"
    );
    ensure!(sum.all >= dis.all, "all-item order broken: {shown}");
    Ok(shown)
}

fn negatives() -> Result<String> {
    let s = NegativeSampler::new(&[16, 1], 0.75)?;
    let n = 1_000_000;
    let draws = s.sample(n, &mut rng::stream(99, 0))?;
    let a = draws.iter().filter(|i| i.0 == 0).count() as f64;
    let p = 8.0 / 9.0;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    let z = (a - n as f64 * p) / sigma;
    ensure!(z.abs() <= 3.0, "z = {z:.2}");
    Ok(format!("ratio {:.4}:1, z = {z:.2}", a / (n as f64 - a)))
}

fn normalization(r: &Reference) -> Result<String> {
    let mut worst = 0.0f64;
    for rec in r.data.test.iter().take(50) {
        let (f, _) = r.model.generator.forward(&rec.history, &rec.objective)?;
        let b = bound_constrain(&f, 100.0)?;
        for tau in [1e-3, 0.07, 1.0] {
            let p = full_distribution(&r.model.mapping, &b, tau)?;
            worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let mut g = rng::stream(7, 1);
    for _ in 0..200 {
        let n = g.random_range(1..500);
        let s: Vec<f64> = (0..n).map(|_| g.random_range(-80.0..80.0)).collect();
        let p = softmax_tau(&s, g.random_range(0.01..3.0))?;
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
    }
    ensure!(worst <= 1e-9, "probability mass off by {worst:e}");

    for i in 0..200 {
        let b: f64 = g.random_range(0.5..200.0);
        let scale = g.random_range(0.01..500.0);
        let f64_block = QueryBlock::from_matrix(Matrix::<f64>::random_normal(4, 9, scale, &mut g))?;
        let f32_block = QueryBlock::from_matrix(Matrix::<f32>::random_normal(4, 9, scale, &mut g))?;
        let once = bound_constrain(&f64_block, b)?;
        let twice = bound_constrain(&once.clone().into_block(), b)?;
        let once32 = bound_constrain(&f32_block, b)?;
        let twice32 = bound_constrain(&once32.clone().into_block(), b)?;
        for j in 0..4 {
            ensure!(once.column(j) == twice.column(j), "draw {i}: bound not idempotent");
            ensure!(
                once32.column(j) == twice32.column(j),
                "draw {i}: f32 bound not idempotent"
            );
            ensure!(
                norm(once.column(j)) <= b && norm(once32.column(j)) <= b,
                "draw {i}: norm above cap"
            );
            if norm(f64_block.column(j)) <= b {
                ensure!(once.column(j) == f64_block.column(j), "draw {i}: short column changed");
            }
        }
    }

    // One query: max aggregation is the plain inner product.
    let items = Matrix::<f64>::random_normal(64, 5, 1.0, &mut g);
    let q = Matrix::<f64>::random_normal(1, 5, 1.0, &mut g);
    let s = score_all(&items, &ProjectedQueryBlock::from_matrix(q.clone())?)?;
    for i in 0..64 {
        ensure!(
            s.scores[i] == urm_core::linalg::dot(items.row(i), q.row(0)),
            "M=1 score {i} differs"
        );
    }
    Ok(format!(
        "max |sum p - 1| = {worst:.1e}; bound idempotent and capped; M=1 exact"
    ))
}

fn determinism(r: &Reference) -> Result<String> {
    let retriever = Retriever::new(&r.model.mapping, &r.graph, ItemMode::Sum)?;
    let cfg = SamplerConfig {
        k: K,
        init_subset: Some(K),
        seed: 11,
        ..Default::default()
    };
    for rec in r.data.test.iter().take(20) {
        let (f, _) = r.model.generator.forward(&rec.history, &rec.objective)?;
        let a = format!("{:?}", retriever.retrieve(&f, &cfg)?);
        ensure!(
            a == format!("{:?}", retriever.retrieve(&f, &cfg)?),
            "retrieval output differs"
        );
    }

    let small = EvalConfig {
        n_seeds: 3,
        max_records: Some(50),
        ..EvalConfig::default()
    };
    let queries = eval::prepare(&r.model, &r.data.test, &small)?;
    let csv = |_: ()| -> Result<String> { Ok(eval::sweep_csv(&eval::precision_sweep(&retriever, &queries, &small)?)) };
    ensure!(csv(())? == csv(())?, "sweep CSV differs between runs");

    let dir = tempfile::tempdir()?;
    let (cp, gp, catp) = (
        dir.path().join("m.urmm"),
        dir.path().join("g.urmg"),
        dir.path().join("c.jsonl"),
    );
    let ck = Checkpoint::from_parts(&r.model.mapping, Some(&r.model.generator));
    ck.save(&cp)?;
    save_graph(&r.graph, &gp)?;
    r.data.catalog.save(&catp)?;
    let (cb, gb, catb) = (std::fs::read(&cp)?, std::fs::read(&gp)?, std::fs::read(&catp)?);
    ensure!(Checkpoint::load(&cp)?.encode() == cb, "checkpoint re-encode differs");
    ensure!(load_graph(&gp)?.encode() == gb, "graph re-encode differs");
    let cat2 = dir.path().join("c2.jsonl");
    load_catalog(&catp)?.save(&cat2)?;
    ensure!(std::fs::read(&cat2)? == catb, "catalog re-save differs");
    for (name, bytes, decode) in [
        (
            "URMM",
            &cb,
            (|b: &[u8]| Checkpoint::decode(b).is_err()) as fn(&[u8]) -> bool,
        ),
        ("URMG", &gb, |b: &[u8]| NeighborGraph::decode(b).is_err()),
    ] {
        for pos in [0, 5, bytes.len() / 3, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            ensure!(decode(&bad), "{name}: corruption at byte {pos} accepted");
        }
    }
    Ok(format!(
        "{} B checkpoint, {} B graph round-trip; CRC rejects flips",
        cb.len(),
        gb.len()
    ))
}

fn main() {
    let t0 = Instant::now();
    let reference = reference();
    let mut failed = 0;
    let mut report = |id: usize, name: &str, result: Result<String>, t: Instant| {
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {id:>2} {name}: {detail} ({secs:.1}s)"),
            Err(e) => {
                failed += 1;
                println!("FAIL  {id:>2} {name}: {e:#} ({secs:.1}s)");
            }
        }
    };
    let with_ref = |f: fn(&Reference) -> Result<String>| match &reference {
        Ok(r) => f(r),
        Err(e) => Err(anyhow::anyhow!("reference instance unavailable: {e:#}")),
    };

    let t = Instant::now();
    report(1, "zero-temperature oracle equivalence", with_ref(zero_temperature), t);
    let t = Instant::now();
    report(2, "sampling-step convergence", with_ref(step_convergence), t);
    let t = Instant::now();
    report(3, "continuity bound", continuity(), t);
    let t = Instant::now();
    report(4, "gradient correctness", gradients(), t);
    let t = Instant::now();
    report(5, "FLOP estimate", flops(), t);
    let t = Instant::now();
    report(6, "training efficacy", with_ref(training), t);
    let t = Instant::now();
    report(7, "cold-start trend", with_ref(cold_start), t);
    let t = Instant::now();
    report(8, "negative-sampler statistics", negatives(), t);
    let t = Instant::now();
    report(9, "softmax and normalization", with_ref(normalization), t);
    let t = Instant::now();
    report(10, "determinism and formats", with_ref(determinism), t);

    println!(
        "{} of 10 criteria passed in {:.1}s",
        10 - failed,
        t0.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
