//! Trains the holistic head on the desk profile and compares it with the
//! mask heuristics on the held-out split.
//!
//! `cargo run --release --example desk_run -- [config.json]`

use std::time::Instant;

use geoorder_core::harness::data::{generate_split, Split};
use geoorder_core::harness::{evaluate, train, ExperimentConfig, HeadPredictor, Heuristic, HeuristicPredictor};
use geoorder_core::metrics::MetricsReport;

fn main() -> geoorder_core::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    let t0 = Instant::now();
    let tr = generate_split(&cfg.data, Split::Train)?;
    let va = generate_split(&cfg.data, Split::Val)?;
    let te = generate_split(&cfg.data, Split::Test)?;
    eprintln!("data {:.1}s", t0.elapsed().as_secs_f64());
    let t1 = Instant::now();
    let out = train(&cfg, &tr, &va, &mut |l| eprintln!("[{:7.1}s] {l}", t1.elapsed().as_secs_f64()))?;
    eprintln!("train {:.1}s, best step {}", t1.elapsed().as_secs_f64(), out.log.best_step);
    let head = evaluate(&te, &HeadPredictor { model: &out.model, coherent_depth: cfg.eval.coherent_depth }, cfg.eval.aggregation)?;
    let oracle = cfg.model.backbone.oracle;
    let y = evaluate(&te, &HeuristicPredictor { heuristic: Heuristic::YAxis, oracle }, cfg.eval.aggregation)?;
    let a = evaluate(&te, &HeuristicPredictor { heuristic: Heuristic::Area, oracle }, cfg.eval.aggregation)?;
    print!("{}", MetricsReport::table(&[&head, &y, &a]));
    Ok(())
}
