//! Runs the synthetic transfer experiment and prints per-seed F1.
//!
//! ```text
//! cargo run --release -p lilt --example transfer [config.json]
//! ```
//!
//! The optional JSON file overrides fields of `TransferConfig`.

use std::time::Instant;

use lilt::experiment::{run_transfer, TransferConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg: TransferConfig = match std::env::args().nth(1) {
        Some(path) => {
            let mut base = serde_json::to_value(TransferConfig::default())?;
            let over: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            merge(&mut base, over);
            serde_json::from_value(base)?
        }
        None => TransferConfig::default(),
    };
    let t0 = Instant::now();
    let report = run_transfer(&cfg, |line| println!("[{:>7.1}s] {line}", t0.elapsed().as_secs_f64()))?;
    println!(
        "pretrained mean F1 {:.4}, scratch mean F1 {:.4}, gain {:.2} points ({:.0}s)",
        report.pretrained_mean_f1(),
        report.scratch_mean_f1(),
        report.gain_points(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}
