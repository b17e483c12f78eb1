//! Multi-seed ablation and sensitivity sweeps.
//!
//! Every variant is trained once per seed. Variants whose training configs
//! coincide (the full method also being the middle point of each sweep, for
//! example) share their runs.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Ablation, DataConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::EncoderTag;
use crate::train::train;

/// One configuration of the suite.
#[derive(Clone, Debug)]
pub struct Variant {
    /// Which comparison the variant belongs to, e.g. `ablation` or `clusters`.
    pub axis: String,
    pub setting: String,
    pub cfg: TrainConfig,
}

impl Variant {
    fn new(axis: &str, setting: impl Into<String>, cfg: TrainConfig) -> Self {
        Variant {
            axis: axis.into(),
            setting: setting.into(),
            cfg,
        }
    }
}

/// Result of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub recall1: f64,
    pub variance_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub axis: String,
    pub setting: String,
    pub runs: Vec<SeedResult>,
    /// First failure, if any seed failed. Completed seeds are kept.
    pub error: Option<String>,
}

impl SuiteRow {
    pub fn mean_recall1(&self) -> Option<f64> {
        mean(self.runs.iter().map(|r| r.recall1))
    }

    pub fn mean_variance_ratio(&self) -> Option<f64> {
        mean(self.runs.iter().map(|r| r.variance_ratio))
    }

    pub fn recall1_of(&self, seed: u64) -> Option<f64> {
        self.runs.iter().find(|r| r.seed == seed).map(|r| r.recall1)
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Names of the four ablation rows, in table order.
pub const BASELINE: &str = "baseline";
pub const CLUST_NO_STAND: &str = "clust";
pub const CLUST_STAND: &str = "clust+stand";
pub const FULL: &str = "clust+stand+mutinfo";

/// The standard plan around `base`, which is taken as the full method:
/// the ablation rows, cluster counts {C/2, C, 2C}, update periods
/// {1, 2, 5, 10} and auxiliary widths {0, D_α/4, D_α}.
pub fn standard_plan(base: &TrainConfig) -> Vec<Variant> {
    let with = |a: Ablation| TrainConfig {
        ablation: a,
        ..base.clone()
    };
    let full = with(Ablation::FULL);
    let mut plan = vec![
        Variant::new("ablation", BASELINE, base.baseline()),
        Variant::new(
            "ablation",
            CLUST_NO_STAND,
            with(Ablation {
                clustering: true,
                ..Ablation::ALL_OFF
            }),
        ),
        Variant::new(
            "ablation",
            CLUST_STAND,
            with(Ablation {
                clustering: true,
                standardize: true,
                ..Ablation::ALL_OFF
            }),
        ),
        Variant::new("ablation", FULL, full.clone()),
    ];
    let c = base.clusters;
    for k in [(c / 2).max(1), c, 2 * c] {
        plan.push(Variant::new("clusters", k.to_string(), TrainConfig { clusters: k, ..full.clone() }));
    }
    for t in [1, 2, 5, 10] {
        plan.push(Variant::new(
            "update_period",
            t.to_string(),
            TrainConfig {
                update_period: t,
                ..full.clone()
            },
        ));
    }
    for d in [0, base.d_alpha / 4, base.d_alpha] {
        let cfg = if d == 0 {
            base.baseline()
        } else {
            TrainConfig { d_beta: d, ..full.clone() }
        };
        plan.push(Variant::new("d_beta", d.to_string(), cfg));
    }
    plan
}

/// Trains every variant on every seed. The synthetic generator and the
/// training run both take the seed. A failing run ends that row's seeds but
/// not the suite. `progress` sees each row as it completes.
pub fn run_suite(
    plan: &[Variant],
    data: &DataConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&SuiteRow),
) -> Result<Vec<SuiteRow>> {
    if seeds.is_empty() {
        return Err(Error::invalid("ablation suite needs at least one seed"));
    }
    let mut splits = Vec::with_capacity(seeds.len());
    for &s in seeds {
        splits.push(data.load_split(Some(s))?);
    }
    let mut cache: HashMap<String, std::result::Result<SeedResult, String>> = HashMap::new();
    let mut rows = Vec::with_capacity(plan.len());
    for v in plan {
        let mut row = SuiteRow {
            axis: v.axis.clone(),
            setting: v.setting.clone(),
            runs: Vec::new(),
            error: None,
        };
        for (&seed, (tr, te)) in seeds.iter().zip(&splits) {
            let cfg = TrainConfig { seed, ..v.cfg.clone() };
            let key = serde_json::to_string(&cfg).map_err(|e| Error::invalid(e.to_string()))?;
            let res = cache.entry(key).or_insert_with(|| {
                let out = train(&cfg, tr, Some(te)).map_err(|e| e.to_string())?;
                let r = out
                    .log
                    .final_test(EncoderTag::Alpha)
                    .ok_or_else(|| "run produced no test evaluation".to_string())?;
                Ok(SeedResult {
                    seed,
                    recall1: r.recall1(),
                    variance_ratio: r.intra_class_variance_ratio,
                })
            });
            match res {
                Ok(r) => row.runs.push(r.clone()),
                Err(e) => {
                    row.error = Some(format!("seed {seed}: {e}"));
                    break;
                }
            }
        }
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Writes one line per row: axis, setting, completed seeds, mean Recall@1,
/// mean variance ratio, per-seed Recall@1 separated by `;`, and the error.
pub fn write_suite_csv(rows: &[SuiteRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e: std::io::Error| Error::io(path, e);
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::invalid(format!("{}: {e}", path.display()));
    w.write_record(["axis", "setting", "seeds", "mean_recall1", "mean_variance_ratio", "recall1_per_seed", "error"])
        .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        let per_seed: Vec<String> = r.runs.iter().map(|s| format!("{}:{}", s.seed, s.recall1)).collect();
        w.write_record([
            r.axis.clone(),
            r.setting.clone(),
            r.runs.len().to_string(),
            opt(r.mean_recall1()),
            opt(r.mean_variance_ratio()),
            per_seed.join(";"),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io)
}

/// Finds a row by axis and setting.
pub fn find<'a>(rows: &'a [SuiteRow], axis: &str, setting: &str) -> Option<&'a SuiteRow> {
    rows.iter().find(|r| r.axis == axis && r.setting == setting)
}
