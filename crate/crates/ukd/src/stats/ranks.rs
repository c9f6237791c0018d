//! Benchmark aggregation: per-task average ranks across models, the Nemenyi
//! critical difference, and pairwise signed-rank tests over task scores.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Result, UkdError};
use crate::stats::qtable::q_crit;
use crate::stats::wilcoxon::{wilcoxon_signed_rank, Alternative};

/// A models-by-tasks score table. Values are stored row major, one row per
/// model, and every cell must be present and finite.
#[derive(Debug, Clone)]
pub struct RankMatrix {
    pub models: Vec<String>,
    pub tasks: Vec<String>,
    values: Vec<f64>,
    /// Per task: whether a larger score is better (true for metrics such as
    /// AUC, false for e.g. error rates).
    pub higher_is_better: Vec<bool>,
}

impl RankMatrix {
    pub fn new(
        models: Vec<String>,
        tasks: Vec<String>,
        values: Vec<f64>,
        higher_is_better: Vec<bool>,
    ) -> Result<Self> {
        if models.is_empty() || tasks.is_empty() {
            return Err(UkdError::Config("rank matrix needs at least one model and one task".into()));
        }
        if values.len() != models.len() * tasks.len() {
            return Err(UkdError::IncompleteBenchmark(format!(
                "{} values for {} models x {} tasks",
                values.len(),
                models.len(),
                tasks.len()
            )));
        }
        if higher_is_better.len() != tasks.len() {
            return Err(UkdError::Config("one orientation flag per task".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            let (m, t) = (i / tasks.len(), i % tasks.len());
            return Err(UkdError::IncompleteBenchmark(format!(
                "missing score for model {} on task {}",
                models[m], tasks[t]
            )));
        }
        let unique: BTreeSet<&String> = models.iter().collect();
        if unique.len() != models.len() {
            return Err(UkdError::Config("duplicate model names".into()));
        }
        Ok(Self { models, tasks, values, higher_is_better })
    }

    pub fn value(&self, model: usize, task: usize) -> f64 {
        self.values[model * self.tasks.len() + task]
    }

    /// All task scores for one model, in task order.
    pub fn row(&self, model: usize) -> &[f64] {
        let w = self.tasks.len();
        &self.values[model * w..(model + 1) * w]
    }
}

/// Per-model average rank across tasks. Within a task the best score gets
/// rank 1 and tied scores share the mean of the ranks they span.
pub fn average_ranks(m: &RankMatrix) -> Vec<f64> {
    let k = m.models.len();
    let mut sums = vec![0.0; k];
    for t in 0..m.tasks.len() {
        let mut order: Vec<usize> = (0..k).collect();
        // Orient so index 0 is the best model on this task.
        order.sort_by(|&a, &b| {
            let (va, vb) = (m.value(a, t), m.value(b, t));
            if m.higher_is_better[t] {
                vb.partial_cmp(&va).expect("finite scores")
            } else {
                va.partial_cmp(&vb).expect("finite scores")
            }
        });
        let mut i = 0;
        while i < k {
            let mut j = i;
            while j + 1 < k && m.value(order[j + 1], t) == m.value(order[i], t) {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &model in &order[i..=j] {
                sums[model] += avg;
            }
            i = j + 1;
        }
    }
    let n = m.tasks.len() as f64;
    sums.iter().map(|s| s / n).collect()
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CdResult {
    pub k: usize,
    pub n_tasks: usize,
    pub alpha: f64,
    pub q_critical: f64,
    pub cd: f64,
}

/// Nemenyi critical difference for comparing k models over n tasks: two
/// average ranks further apart than this differ significantly at `alpha`.
pub fn nemenyi_cd(k: usize, n_tasks: usize, alpha: f64) -> Result<CdResult> {
    if n_tasks == 0 {
        return Err(UkdError::Parameter("critical difference needs at least one task".into()));
    }
    let q = q_crit(k, alpha)?;
    let kf = k as f64;
    let cd = q * (kf * (kf + 1.0) / (6.0 * n_tasks as f64)).sqrt();
    Ok(CdResult { k, n_tasks, alpha, q_critical: q, cd })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ModelSummary {
    pub model: String,
    pub mean_score: f64,
    pub average_rank: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PairwiseTest {
    pub model_a: String,
    pub model_b: String,
    /// None when the test is undefined (for example all task scores tie).
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchmarkReport {
    /// Sorted best first by average rank; mean score breaks rank ties.
    pub summaries: Vec<ModelSummary>,
    pub critical_difference: Option<CdResult>,
    pub pairwise: Vec<PairwiseTest>,
}

/// Aggregate a score table into per-model summaries sorted best first, a
/// critical difference when the table is large enough for one, and
/// two-sided pairwise signed-rank tests over the task scores.
pub fn compare_models(m: &RankMatrix, alpha: f64) -> Result<BenchmarkReport> {
    let ranks = average_ranks(m);
    let k = m.models.len();
    let mut summaries: Vec<ModelSummary> = (0..k)
        .map(|i| {
            let row = m.row(i);
            ModelSummary {
                model: m.models[i].clone(),
                mean_score: row.iter().sum::<f64>() / row.len() as f64,
                average_rank: ranks[i],
            }
        })
        .collect();
    summaries.sort_by(|a, b| {
        a.average_rank
            .partial_cmp(&b.average_rank)
            .unwrap()
            .then(b.mean_score.partial_cmp(&a.mean_score).unwrap())
            .then(a.model.cmp(&b.model))
    });

    let critical_difference =
        if k >= 2 && k <= 20 { Some(nemenyi_cd(k, m.tasks.len(), alpha)?) } else { None };

    let mut pairwise = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let p = match wilcoxon_signed_rank(m.row(a), m.row(b), Alternative::TwoSided) {
                Ok(r) => Some(r.p_value),
                Err(UkdError::UndefinedTest(_)) => None,
                Err(e) => return Err(e),
            };
            pairwise.push(PairwiseTest {
                model_a: m.models[a].clone(),
                model_b: m.models[b].clone(),
                p_value: p,
            });
        }
    }
    Ok(BenchmarkReport { summaries, critical_difference, pairwise })
}

/// Read a score table from CSV: the header row names the tasks, the first
/// column of each following row names the model. All tasks are treated as
/// higher-is-better; flip columns upstream if needed.
pub fn read_rank_csv(path: &Path) -> Result<RankMatrix> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 {
        return Err(UkdError::IncompleteBenchmark(
            "score table needs a model column and at least one task column".into(),
        ));
    }
    let tasks: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
    let mut models = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(UkdError::IncompleteBenchmark(format!(
                "row {} has {} fields, expected {}",
                models.len() + 2,
                record.len(),
                headers.len()
            )));
        }
        models.push(record[0].to_owned());
        for field in record.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| UkdError::IncompleteBenchmark(format!("unparseable score {field:?}")))?;
            values.push(v);
        }
    }
    let n_tasks = tasks.len();
    RankMatrix::new(models, tasks, values, vec![true; n_tasks])
}
