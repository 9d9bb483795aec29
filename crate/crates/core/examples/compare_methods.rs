//! Run every dropout method on the label-skewed benchmark and tabulate
//! best accuracy and simulated wall-clock time across seeds.
//!
//! ```text
//! cargo run --release --example compare_methods
//! ```

use invdrop::cli::{run_seeds, ExperimentConfig};
use invdrop::sim::DropoutMethod;

fn main() -> invdrop::Result<()> {
    let base = ExperimentConfig::from_toml(include_str!("../configs/label_skew.toml"))?;
    println!("{:>10}  {:>8}  {:>6}  {:>10}", "method", "best acc", "sd", "sim time");
    for method in DropoutMethod::ALL {
        let mut cfg = base.clone();
        cfg.method = method.name().into();
        let runs = run_seeds(&cfg)?;
        let accs: Vec<f64> = runs.iter().map(|r| 100.0 * r.summary.best_accuracy).collect();
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let sd = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
        let time = runs.iter().map(|r| r.summary.total_sim_time_s).sum::<f64>() / n;
        println!("{:>10}  {mean:7.2}%  {sd:6.2}  {time:9.1}s", method.name());
    }
    Ok(())
}
