//! Compare FT+KD with FT+KD+PL over several seeded runs and print the
//! aggregate table with confidence intervals. Set `use_kd: false` to get the
//! FT and FT+PL rows instead.
//!
//! ```text
//! cargo run --release --example experiment -- [runs]
//! ```

use fscil_seg::datamodel::{generate_splits, SplitSizes, SyntheticWorldSpec};
use fscil_seg::network::GridEmbedder;
use fscil_seg::trainer::{run_experiment, ExperimentConfig, TrainConfig};

fn main() -> fscil_seg::Result<()> {
    env_logger::init();
    let runs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let spec = SyntheticWorldSpec::driving();
    let schedule = spec.default_schedule()?;
    let data = generate_splits(&spec, SplitSizes::default(), 7)?;
    let cfg = ExperimentConfig {
        train: TrainConfig {
            epochs_base: 15,
            epochs_phase1: 10,
            epochs_phase2: 10,
            ..TrainConfig::default()
        },
        runs,
        ..ExperimentConfig::default()
    };

    let report = run_experiment(&schedule, &data.splits, &cfg, &GridEmbedder::default())?;
    print!("{}", report.render_table());
    for c in &report.comparisons {
        println!(
            "step {} {}: {} vs {}, mean difference {}, better in {}/{} runs",
            c.stage,
            c.task_set,
            c.method.label(),
            c.baseline.label(),
            c.mean_difference.map_or("-".into(), |d| format!("{d:+.1}")),
            c.wins,
            c.pairs
        );
    }
    Ok(())
}
