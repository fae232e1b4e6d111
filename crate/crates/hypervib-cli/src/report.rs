use std::collections::BTreeMap;
use std::path::Path;

use hypervib_core::data_io::{read_results, ResultRecord};
use hypervib_core::Result;

/// Aggregates results CSVs: per-method totals (runs, wall time, parameter
/// count), a per-beta table joined across methods, and the wall-time
/// reduction when both methods are present. Pure function of its inputs.
pub fn report(inputs: &[std::path::PathBuf], out: Option<&Path>) -> Result<i32> {
    let mut records: Vec<ResultRecord> = Vec::new();
    for path in inputs {
        records.extend(read_results(path)?);
    }

    // Per-method totals.
    #[derive(Default)]
    struct MethodTotal {
        runs: usize,
        wall_seconds: f64,
        param_count: usize,
    }
    let mut totals: BTreeMap<String, MethodTotal> = BTreeMap::new();
    for r in &records {
        let t = totals.entry(r.method.clone()).or_default();
        t.runs += 1;
        t.wall_seconds += r.wall_seconds;
        t.param_count = t.param_count.max(r.param_count);
    }

    println!("method totals");
    for (method, t) in &totals {
        println!(
            "  {method}: rows {} wall_seconds {:.3} param_count {}",
            t.runs, t.wall_seconds, t.param_count
        );
    }
    if let (Some(hyper), Some(vib)) = (totals.get("hyper"), totals.get("vib")) {
        if vib.wall_seconds > 0.0 {
            let reduction = 100.0 * (1.0 - hyper.wall_seconds / vib.wall_seconds);
            println!("time_reduction_percent {reduction:.1}");
        }
    }

    // Per-beta join, keyed by the serialized beta (exactly what the writer
    // emitted, so equal betas group exactly).
    let mut by_beta: BTreeMap<String, BTreeMap<String, &ResultRecord>> = BTreeMap::new();
    for r in &records {
        by_beta
            .entry(format!("{:.8e}", r.beta))
            .or_default()
            .insert(r.method.clone(), r);
    }
    let methods: Vec<String> = totals.keys().cloned().collect();
    let mut rows: Vec<(f64, &BTreeMap<String, &ResultRecord>)> =
        by_beta.values().map(|m| (m.values().next().expect("nonempty").beta, m)).collect();
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite betas"));

    println!("per-beta metrics");
    for (beta, group) in &rows {
        let mut line = format!("  beta {beta:.8e}");
        for method in &methods {
            match group.get(method) {
                Some(r) => {
                    let metric = r
                        .accuracy
                        .map(|a| format!("acc {a:.4}"))
                        .or_else(|| r.mse.map(|m| format!("mse {m:.4e}")))
                        .unwrap_or_else(|| "-".into());
                    line.push_str(&format!(" | {method}: {metric} total {:.4e}", r.total));
                }
                None => line.push_str(&format!(" | {method}: -")),
            }
        }
        println!("{line}");
    }

    if let Some(path) = out {
        let mut writer = csv::Writer::from_path(path)?;
        let mut header = vec!["beta".to_string()];
        for method in &methods {
            for col in ["accuracy", "mse", "distortion", "rate", "total", "wall_seconds"] {
                header.push(format!("{method}_{col}"));
            }
        }
        writer.write_record(&header).map_err(hypervib_core::Error::from)?;
        for (beta, group) in &rows {
            let mut row = vec![format!("{beta:.8e}")];
            for method in &methods {
                match group.get(method) {
                    Some(r) => {
                        row.push(r.accuracy.map(|v| format!("{v:.8e}")).unwrap_or_default());
                        row.push(r.mse.map(|v| format!("{v:.8e}")).unwrap_or_default());
                        row.push(format!("{:.8e}", r.distortion));
                        row.push(format!("{:.8e}", r.rate));
                        row.push(format!("{:.8e}", r.total));
                        row.push(format!("{:.8e}", r.wall_seconds));
                    }
                    None => row.extend(std::iter::repeat_n(String::new(), 6)),
                }
            }
            writer.write_record(&row).map_err(hypervib_core::Error::from)?;
        }
        writer.flush()?;
    }
    Ok(0)
}
