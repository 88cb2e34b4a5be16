//! Grid sweeps: train and evaluate every combination of config overrides.

use std::io::Write;
use std::path::Path;

use csn_core::config::{default_of, parse_pairs, Config};
use csn_core::{CsnError, Result};
use serde::Serialize;

use crate::{evaluate_model, run_train};

/// One swept key with its alternatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

/// Parses grid lines `key = v1 | v2 | ...`. Alternatives are separated by
/// `|` because list-valued keys such as `model.hidden` use commas.
pub fn parse_grid(text: &str) -> Result<Vec<Axis>> {
    let mut axes = Vec::new();
    for (key, raw, line) in parse_pairs(text)? {
        let values: Vec<String> = raw.split('|').map(|v| v.trim().to_string()).collect();
        if values.iter().any(String::is_empty) {
            return Err(CsnError::Config(format!("grid line {line}: empty alternative for `{key}`")));
        }
        if default_of(&key).is_none() {
            return Err(CsnError::Config(format!("grid line {line}: unknown key `{key}`")));
        }
        axes.push(Axis { key, values });
    }
    if axes.is_empty() {
        return Err(CsnError::Config("grid file names no keys".into()));
    }
    Ok(axes)
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn combinations(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    let mut out: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((axis.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub combination: String,
    pub mean: f64,
    pub ci95: f64,
    pub episodes: usize,
}

/// Trains and tests each combination with the base config's seed. With
/// `out`, run `i` keeps its artifacts under `out/runNNN`.
pub fn run_ablate(base: &Config, axes: &[Axis], out: Option<&Path>) -> Result<Vec<AblationRow>> {
    let episodes: usize = base.parse("eval.episodes")?;
    let seed: u64 = base.parse("train.seed")?;
    let mut rows = Vec::new();
    for (i, combo) in combinations(axes).into_iter().enumerate() {
        let mut cfg = base.clone();
        for (k, v) in &combo {
            cfg.set(k, v)?;
        }
        let dir = out.map(|d| d.join(format!("run{i:03}")));
        let run = run_train(&cfg, dir.as_deref())?;
        let report = evaluate_model(&run.model, &run.config, episodes, seed)?;
        let combination = combo.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";");
        rows.push(AblationRow {
            combination,
            mean: report.mean,
            ci95: report.ci95,
            episodes: report.episodes,
        });
    }
    Ok(rows)
}

pub fn write_csv(rows: &[AblationRow], w: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)
            .map_err(|e| CsnError::Usage(format!("writing ablation csv: {e}")))?;
    }
    wtr.flush().map_err(|e| CsnError::Usage(format!("writing ablation csv: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_product_and_order() {
        let axes = parse_grid("memory.value_fn = mlp3 | perceptron1\nmodel.hidden = 32,32 | 64\n").unwrap();
        let combos = combinations(&axes);
        assert_eq!(combos.len(), 4);
        assert_eq!(combos[1], vec![
            ("memory.value_fn".to_string(), "mlp3".to_string()),
            ("model.hidden".to_string(), "64".to_string())
        ]);
    }

    #[test]
    fn grid_rejects_unknown_keys() {
        assert!(parse_grid("memory.valu_fn = mlp3\n").is_err());
        assert!(parse_grid("# nothing\n").is_err());
    }
}
