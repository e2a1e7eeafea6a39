//! Evaluation, statistics and validation protocols.

mod protocols;
mod smdp;
pub mod stats;

pub use protocols::{
    calibration, calibration_pairs, collect_decisions, geometry_diagnostics, kendall_protocol,
    CalibrationReport, ExecutedDecision, GeometryDiagnostics, KendallConfig, KendallReport,
    KendallSeed, SubgoalGeometry, PROTOCOL_EPISODE_BASE,
};
pub use smdp::{DiscountGap, SmdpOutcome, ToySmdp};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Result;
use stats::mean_sem;

/// Hex SHA-256 of a serialized configuration.
pub fn fingerprint<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub sem: f64,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn from_seed_means(per_seed: Vec<f64>, fingerprint: String) -> Self {
        let (mean, sem) = mean_sem(&per_seed);
        Self {
            per_seed,
            mean,
            sem,
            fingerprint,
        }
    }
}

/// Runs `episodes` greedy episodes per instance for every seed and reports
/// per-seed mean returns. `run(seed, instance, episode)` plays one episode.
pub fn evaluate<F>(
    seeds: &[u64],
    instances: usize,
    episodes: usize,
    fingerprint: String,
    mut run: F,
) -> Result<EvalReport>
where
    F: FnMut(u64, usize, u64) -> Result<f64>,
{
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut total = 0.0;
        for i in 0..instances {
            for e in 0..episodes {
                total += run(seed, i, e as u64)?;
            }
        }
        per_seed.push(total / (instances * episodes).max(1) as f64);
    }
    Ok(EvalReport::from_seed_means(per_seed, fingerprint))
}

/// One line of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub env: String,
    pub n: usize,
    pub t: usize,
    pub k: usize,
    pub mean: f64,
    pub sem: f64,
    pub seeds: usize,
}

pub const RESULTS_HEADER: &str = "method\tenv\tN\tT\tK\tmean\tsem\tseeds";

impl ResultRow {
    pub fn from_report(
        method: &str,
        env: &str,
        n: usize,
        t: usize,
        k: usize,
        r: &EvalReport,
    ) -> Self {
        Self {
            method: method.to_string(),
            env: env.to_string(),
            n,
            t,
            k,
            mean: r.mean,
            sem: r.sem,
            seeds: r.per_seed.len(),
        }
    }

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{}",
            self.method, self.env, self.n, self.t, self.k, self.mean, self.sem, self.seeds
        )
    }
}

/// Tab-separated table with a header line.
pub fn results_table(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_tsv());
        out.push('\n');
    }
    out
}
