//! Dice scores, the stage × task Dice matrix and transfer metrics.
//!
//! With `n` tasks, `D[i][j]` is the mean test Dice of the model after stage
//! `i` on task `j` and `B[j]` that of the single-task reference model on
//! task `j`. Then
//!
//! ```text
//! BWT(j) = D[n][j] − D[j][j]      for j = 1 ..= n−1
//! FWT(i) = D[i−1][i] − B[i]       for i = 2 ..= n
//! ```
//!
//! Internally everything is a fraction; reports are in percent.

mod report;

pub use report::{emit_report, fixed_json, read_report, Timings, TransferReport, CSV_FILE, JSON_FILE, TIMINGS_FILE};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{predict_head, select_head, NcadaptModel, NqmRule};
use crate::autodiff::{Rng, Tensor};
use crate::data::Case;
use crate::error::{Error, Result};

const EVAL_STREAM: u64 = 0xE7A1;

/// `2|P∩T| / (|P|+|T|)`, and 1 when both masks are empty.
pub fn dice_score(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(target.data()) {
        let (a, b) = (a > 0.5, b > 0.5);
        inter += (a && b) as usize;
        p += a as usize;
        t += b as usize;
    }
    Ok(if p + t == 0 { 1.0 } else { 2.0 * inter as f64 / (p + t) as f64 })
}

/// How a model picks the head for a test case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Use the head of the case's own domain when the model has one;
    /// otherwise fall back to quality-score selection.
    #[default]
    OracleId,
    /// Always select by quality score.
    Nqm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: InferenceMode,
    pub n_samples: usize,
    pub rule: NqmRule,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: InferenceMode::OracleId,
            n_samples: 10,
            rule: NqmRule::Min,
            seed: 0,
        }
    }
}

/// Test set of one task.
#[derive(Debug, Clone, Copy)]
pub struct TestSet<'a> {
    pub label: &'a str,
    pub cases: &'a [Case],
}

/// Per-case outcome of evaluating one model on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub dice: Vec<f64>,
    /// Head used for each case.
    pub heads: Vec<usize>,
    /// Whether the head was chosen by quality score.
    pub selected: Vec<bool>,
}

impl TaskEval {
    pub fn mean(&self) -> f64 {
        mean(&self.dice)
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
pub(crate) fn sd(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Evaluates `model` on task number `task` (0-based position in the task
/// sequence). Case `c` uses the stream `[task, c]`, so the same head sees
/// the same fire masks in every checkpoint.
pub fn evaluate_task(model: &NcadaptModel, test: TestSet<'_>, task: usize, cfg: &EvalConfig) -> Result<TaskEval> {
    if cfg.n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one inference sample".into()));
    }
    let own = match cfg.mode {
        InferenceMode::OracleId => model.domain_id(test.label),
        InferenceMode::Nqm => None,
    };
    let rows: Vec<(f64, usize, bool)> = test
        .cases
        .par_iter()
        .enumerate()
        .map(|(c, case)| {
            let rng = Rng::new(cfg.seed, EVAL_STREAM).fork_path(&[task as u64, c as u64]);
            let (head, mask, selected) = match own {
                Some(d) => {
                    let p = predict_head(model, &case.image, d, cfg.n_samples, &rng)?;
                    (d, p.mask, false)
                }
                None => {
                    let choice = select_head(model, &case.image, cfg.n_samples.max(2), &rng, cfg.rule)?;
                    (choice.domain, choice.prediction, true)
                }
            };
            Ok((dice_score(&mask, &case.label)?, head, selected))
        })
        .collect::<Result<_>>()?;
    Ok(TaskEval {
        dice: rows.iter().map(|r| r.0).collect(),
        heads: rows.iter().map(|r| r.1).collect(),
        selected: rows.iter().map(|r| r.2).collect(),
    })
}

/// Dice of every stage checkpoint on every task, plus the single-task
/// reference row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceMatrix {
    pub tasks: Vec<String>,
    /// `d[i][j]`: checkpoint after stage `i + 1` on task `j + 1`.
    pub d: Vec<Vec<f64>>,
    /// `b[j]`: reference model of task `j + 1` on task `j + 1`.
    pub b: Vec<f64>,
    /// Per-case results behind `d`.
    pub cells: Vec<Vec<TaskEval>>,
    /// Per-case results behind `b`.
    pub baseline_cells: Vec<TaskEval>,
}

impl DiceMatrix {
    pub fn n(&self) -> usize {
        self.tasks.len()
    }

    /// Builds a matrix from plain numbers (no per-case detail).
    pub fn from_values(tasks: Vec<String>, d: Vec<Vec<f64>>, b: Vec<f64>) -> Result<Self> {
        let n = tasks.len();
        if d.len() != n || d.iter().any(|r| r.len() != n) || b.len() != n {
            return Err(Error::Shape(format!("Dice matrix must be {n}x{n} with {n} reference values")));
        }
        Ok(Self {
            tasks,
            d,
            b,
            cells: Vec::new(),
            baseline_cells: Vec::new(),
        })
    }

    /// Fraction of quality-score selections that picked the case's own
    /// domain, over cells where that domain's head existed. `None` when no
    /// such selection happened.
    pub fn selection_accuracy(&self) -> Option<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for (i, row) in self.cells.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                if j > i {
                    continue;
                }
                for (&head, &sel) in cell.heads.iter().zip(&cell.selected) {
                    if sel {
                        total += 1;
                        hit += (head == j + 1) as usize;
                    }
                }
            }
        }
        (total > 0).then(|| hit as f64 / total as f64)
    }
}

/// Evaluates every stage checkpoint on every task and every reference
/// model on its own task. Cells are independent and run in parallel.
pub fn build_dice_matrix(
    stages: &[NcadaptModel],
    baselines: &[NcadaptModel],
    tests: &[TestSet<'_>],
    cfg: &EvalConfig,
) -> Result<DiceMatrix> {
    let n = tests.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no test sets".into()));
    }
    if stages.len() != n {
        return Err(Error::InvalidArgument(format!("{} stage checkpoints for {n} tasks", stages.len())));
    }
    if baselines.len() != n {
        return Err(Error::InvalidArgument(format!("{} reference models for {n} tasks", baselines.len())));
    }
    let jobs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let results: Vec<TaskEval> = jobs
        .par_iter()
        .map(|&(i, j)| evaluate_task(&stages[i], tests[j], j, cfg))
        .collect::<Result<_>>()?;
    let baseline_cells: Vec<TaskEval> = (0..n)
        .into_par_iter()
        .map(|j| evaluate_task(&baselines[j], tests[j], j, cfg))
        .collect::<Result<_>>()?;
    let mut cells: Vec<Vec<TaskEval>> = Vec::with_capacity(n);
    let mut it = results.into_iter();
    for _ in 0..n {
        cells.push(it.by_ref().take(n).collect());
    }
    Ok(DiceMatrix {
        tasks: tests.iter().map(|t| t.label.to_string()).collect(),
        d: cells.iter().map(|r| r.iter().map(TaskEval::mean).collect()).collect(),
        b: baseline_cells.iter().map(TaskEval::mean).collect(),
        cells,
        baseline_cells,
    })
}

/// Backward and forward transfer as fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMetrics {
    /// `BWT(j)` for `j = 1 ..= n−1`.
    pub bwt: Vec<f64>,
    /// `FWT(i)` for `i = 2 ..= n`.
    pub fwt: Vec<f64>,
}

pub fn transfer_metrics(m: &DiceMatrix) -> TransferMetrics {
    let n = m.n();
    if n < 2 {
        return TransferMetrics {
            bwt: Vec::new(),
            fwt: Vec::new(),
        };
    }
    TransferMetrics {
        bwt: (0..n - 1).map(|j| m.d[n - 1][j] - m.d[j][j]).collect(),
        fwt: (1..n).map(|i| m.d[i - 1][i] - m.b[i]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask(&[1., 1., 0., 0.]);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &mask(&[0., 0., 1., 1.])).unwrap(), 0.0);
        assert_eq!(dice_score(&a, &mask(&[0., 1., 1., 0.])).unwrap(), 0.5);
        let z = mask(&[0.; 4]);
        assert_eq!(dice_score(&z, &z).unwrap(), 1.0);
        assert!(dice_score(&a, &mask(&[1.])).is_err());
    }

    fn matrix(d: Vec<Vec<f64>>, b: Vec<f64>) -> DiceMatrix {
        let tasks = (1..=d.len()).map(|i| format!("t{i}")).collect();
        DiceMatrix::from_values(tasks, d, b).unwrap()
    }

    #[test]
    fn bwt_hand_example() {
        let m = matrix(
            vec![vec![0.9, 0.0, 0.0], vec![0.0, 0.85, 0.0], vec![0.70, 0.80, 0.9]],
            vec![0.0; 3],
        );
        let t = transfer_metrics(&m);
        assert!((t.bwt[0] + 0.20).abs() < 1e-12 && (t.bwt[1] + 0.05).abs() < 1e-12);
        assert!((mean(&t.bwt) + 0.125).abs() < 1e-12);
    }

    #[test]
    fn fwt_hand_example() {
        let m = matrix(
            vec![vec![0.0, 0.50, 0.0], vec![0.0, 0.0, 0.40], vec![0.0; 3]],
            vec![0.0, 0.85, 0.80],
        );
        let t = transfer_metrics(&m);
        assert!((t.fwt[0] + 0.35).abs() < 1e-12 && (t.fwt[1] + 0.40).abs() < 1e-12);
        assert!((mean(&t.fwt) + 0.375).abs() < 1e-12);
    }

    #[test]
    fn single_task_has_no_transfer() {
        let t = transfer_metrics(&matrix(vec![vec![0.8]], vec![0.8]));
        assert!(t.bwt.is_empty() && t.fwt.is_empty());
    }

    #[test]
    fn population_sd() {
        assert_eq!(sd(&[1.0, 3.0]), 1.0);
        assert_eq!(sd(&[2.0]), 0.0);
    }
}
