//! Separation metrics: SI-SDR, plain SDR, permutation-invariant assignment
//! and the frame-level speaker swap rate.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound returned when the error energy vanishes.
pub const DB_CAP: f64 = 100.0;

const CAP_RATIO: f64 = 1e-20;
const MAX_PIT_SOURCES: usize = 8;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_pair(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::shape(reference.len(), estimate.len()));
    }
    let energy = dot(reference, reference);
    if energy == 0.0 {
        return Err(Error::param("reference signal is identically zero"));
    }
    Ok(energy)
}

fn ratio_db(signal: f64, error: f64) -> f64 {
    if error < CAP_RATIO * signal {
        DB_CAP
    } else {
        (10.0 * (signal / error).log10()).min(DB_CAP)
    }
}

/// Scale-invariant SDR in dB.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    let energy = check_pair(reference, estimate)?;
    let alpha = dot(estimate, reference) / energy;
    let target = alpha * alpha * energy;
    let error: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(s, e)| (e - alpha * s).powi(2))
        .sum();
    Ok(ratio_db(target, error))
}

/// Plain signal-to-error ratio in dB.
pub fn sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    let energy = check_pair(reference, estimate)?;
    let error: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(s, e)| (s - e).powi(2))
        .sum();
    Ok(ratio_db(energy, error))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    SiSdr,
    Sdr,
}

impl Metric {
    pub fn eval(self, reference: &[f64], estimate: &[f64]) -> Result<f64> {
        match self {
            Metric::SiSdr => si_sdr(reference, estimate),
            Metric::Sdr => sdr(reference, estimate),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `perm[k]` is the estimate matched to reference `k`.
    pub perm: Vec<usize>,
    /// Metric of each reference against its matched estimate.
    pub scores: Vec<f64>,
}

impl Assignment {
    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Exhaustive search for the assignment maximising the mean metric. Ties go
/// to the lexicographically first permutation.
pub fn pit_assign(refs: &[Vec<f64>], ests: &[Vec<f64>], metric: Metric) -> Result<Assignment> {
    let k = refs.len();
    if k == 0 {
        return Err(Error::param("no reference signals"));
    }
    if k > MAX_PIT_SOURCES {
        return Err(Error::param(format!(
            "exhaustive assignment supports at most {MAX_PIT_SOURCES} sources, got {k}"
        )));
    }
    if ests.len() != k {
        return Err(Error::shape(k, ests.len()));
    }
    let mut table = vec![vec![0.0; k]; k];
    for (i, r) in refs.iter().enumerate() {
        for (j, e) in ests.iter().enumerate() {
            table[i][j] = metric.eval(r, e)?;
        }
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = perm.clone();
    let mut best_total = f64::NEG_INFINITY;
    loop {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| table[i][j]).sum();
        if total > best_total {
            best_total = total;
            best.copy_from_slice(&perm);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let scores = best.iter().enumerate().map(|(i, &j)| table[i][j]).collect();
    Ok(Assignment { perm: best, scores })
}

/// Fraction of frames whose locally best two-source assignment disagrees
/// with the global SI-SDR assignment. Frames where either reference is
/// silent are skipped; the trailing partial frame is ignored.
pub fn swap_rate(refs: &[Vec<f64>], ests: &[Vec<f64>], frame_len: usize) -> Result<f64> {
    if refs.len() != 2 || ests.len() != 2 {
        return Err(Error::param(format!(
            "swap rate is defined for two sources, got {} references and {} estimates",
            refs.len(),
            ests.len()
        )));
    }
    if frame_len == 0 {
        return Err(Error::param("frame length must be positive"));
    }
    let n = refs[0].len();
    for x in refs.iter().chain(ests) {
        if x.len() != n {
            return Err(Error::shape(n, x.len()));
        }
    }
    let global = pit_assign(refs, ests, Metric::SiSdr)?;
    let crossed_globally = global.perm[0] == 1;
    let mut counted = 0usize;
    let mut swapped = 0usize;
    for start in (0..n / frame_len).map(|f| f * frame_len) {
        let seg = |x: &Vec<f64>| x[start..start + frame_len].to_vec();
        let (r0, r1) = (seg(&refs[0]), seg(&refs[1]));
        if dot(&r0, &r0) == 0.0 || dot(&r1, &r1) == 0.0 {
            continue;
        }
        let (e0, e1) = (seg(&ests[0]), seg(&ests[1]));
        let straight = si_sdr(&r0, &e0)? + si_sdr(&r1, &e1)?;
        let crossed = si_sdr(&r0, &e1)? + si_sdr(&r1, &e0)?;
        counted += 1;
        if (crossed > straight) != crossed_globally {
            swapped += 1;
        }
    }
    Ok(if counted == 0 {
        0.0
    } else {
        swapped as f64 / counted as f64
    })
}

/// One row per (mixture, solver, source).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub mixture_id: usize,
    pub solver: String,
    pub source_idx: usize,
    pub si_sdr_db: f64,
    pub sdr_db: f64,
    pub swap_rate: Option<f64>,
    /// Estimate index matched to this source.
    pub perm: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub mixture_id: usize,
    pub solver: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_err = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std_err, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub solver: String,
    pub si_sdr_db: Option<MeanSe>,
    pub sdr_db: Option<MeanSe>,
    /// Per-mixture swap rates, averaged.
    pub swap_rate: Option<MeanSe>,
    pub failures: usize,
}

/// Per-row results plus failures. Rows are kept sorted by
/// (solver order of first appearance, mixture, source).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub failures: Vec<FailedRun>,
}

pub const CSV_HEADER: &str = "mixture_id,solver,source_idx,si_sdr_db,sdr_db,swap_rate,perm";

impl EvalReport {
    /// Scores one separation and appends its rows.
    pub fn push_run(
        &mut self,
        mixture_id: usize,
        solver: &str,
        refs: &[Vec<f64>],
        ests: &[Vec<f64>],
        swap_frame: usize,
    ) -> Result<()> {
        let si = pit_assign(refs, ests, Metric::SiSdr)?;
        let swap = if refs.len() == 2 {
            Some(swap_rate(refs, ests, swap_frame)?)
        } else {
            None
        };
        for (k, &j) in si.perm.iter().enumerate() {
            self.rows.push(EvalRow {
                mixture_id,
                solver: solver.to_string(),
                source_idx: k,
                si_sdr_db: si.scores[k],
                sdr_db: sdr(&refs[k], &ests[j])?,
                swap_rate: swap,
                perm: j,
            });
        }
        Ok(())
    }

    pub fn push_failure(&mut self, mixture_id: usize, solver: &str, error: &Error) {
        self.failures.push(FailedRun {
            mixture_id,
            solver: solver.to_string(),
            error: error.to_string(),
        });
    }

    /// Merges reports and orders rows by the given solver order.
    pub fn merge(parts: Vec<EvalReport>, solver_order: &[&str]) -> Self {
        let rank = |s: &str| solver_order.iter().position(|o| *o == s).unwrap_or(usize::MAX);
        let mut out = EvalReport::default();
        for p in parts {
            out.rows.extend(p.rows);
            out.failures.extend(p.failures);
        }
        out.rows
            .sort_by_key(|r| (rank(&r.solver), r.mixture_id, r.source_idx));
        out.failures
            .sort_by_key(|f| (rank(&f.solver), f.mixture_id));
        out
    }

    pub fn solvers(&self) -> Vec<String> {
        let mut seen: Vec<String> = Vec::new();
        for name in self
            .rows
            .iter()
            .map(|r| &r.solver)
            .chain(self.failures.iter().map(|f| &f.solver))
        {
            if !seen.contains(name) {
                seen.push(name.clone());
            }
        }
        seen
    }

    pub fn summary(&self) -> Vec<SolverSummary> {
        self.solvers()
            .into_iter()
            .map(|solver| {
                let rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.solver == solver).collect();
                let si: Vec<f64> = rows.iter().map(|r| r.si_sdr_db).collect();
                let sd: Vec<f64> = rows.iter().map(|r| r.sdr_db).collect();
                let swaps: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.source_idx == 0)
                    .filter_map(|r| r.swap_rate)
                    .collect();
                SolverSummary {
                    failures: self.failures.iter().filter(|f| f.solver == solver).count(),
                    si_sdr_db: MeanSe::of(&si),
                    sdr_db: MeanSe::of(&sd),
                    swap_rate: MeanSe::of(&swaps),
                    solver,
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let swap = r.swap_rate.map(|s| format!("{s:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{},{}",
                r.mixture_id, r.solver, r.source_idx, r.si_sdr_db, r.sdr_db, swap, r.perm
            );
        }
        out
    }

    /// Fixed-width table in the shape of a results table, one line per solver.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<18} {:>16} {:>16} {:>14} {:>8}\n",
            "solver", "SI-SDR (dB)", "SDR (dB)", "swap rate", "failed"
        );
        let fmt = |m: &Option<MeanSe>, p: usize| match m {
            Some(m) => format!("{:.p$} ± {:.p$}", m.mean, m.std_err),
            None => "-".into(),
        };
        for s in self.summary() {
            let _ = writeln!(
                out,
                "{:<18} {:>16} {:>16} {:>14} {:>8}",
                s.solver,
                fmt(&s.si_sdr_db, 2),
                fmt(&s.sdr_db, 2),
                fmt(&s.swap_rate, 3),
                s.failures
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        assert!(si_sdr(&[1.0, 0.0], &[1.0, 1.0]).unwrap().abs() < 1e-12);
        assert_eq!(si_sdr(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), DB_CAP);
        assert_eq!(si_sdr(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), DB_CAP);
        assert!(sdr(&[1.0], &[2.0]).unwrap().abs() < 1e-12);
        assert_eq!(sdr(&[0.5, -1.0], &[0.5, -1.0]).unwrap(), DB_CAP);
    }

    #[test]
    fn errors() {
        assert!(si_sdr(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(sdr(&[1.0], &[1.0, 2.0]).is_err());
        let nine = vec![vec![1.0]; 9];
        assert!(pit_assign(&nine, &nine, Metric::SiSdr).is_err());
        let three = vec![vec![1.0, 0.0]; 3];
        assert!(swap_rate(&three, &three, 1).is_err());
    }

    #[test]
    fn reversed_estimates() {
        let refs = vec![vec![1.0, 0.0, 0.2], vec![0.0, 1.0, -0.3], vec![0.4, 0.4, 1.0]];
        let ests: Vec<Vec<f64>> = refs.iter().rev().cloned().collect();
        let a = pit_assign(&refs, &ests, Metric::SiSdr).unwrap();
        assert_eq!(a.perm, vec![2, 1, 0]);
        let one = pit_assign(&refs[..1], &ests[..1], Metric::Sdr).unwrap();
        assert_eq!(one.perm, vec![0]);
    }

    fn two_tones(n: usize) -> Vec<Vec<f64>> {
        vec![
            (0..n).map(|i| (i as f64 * 0.3).sin()).collect(),
            (0..n).map(|i| (i as f64 * 1.1).cos()).collect(),
        ]
    }

    #[test]
    fn swap_rate_constructions() {
        let refs = two_tones(400);
        assert_eq!(swap_rate(&refs, &refs, 50).unwrap(), 0.0);
        let mut ests = refs.clone();
        for i in 200..400 {
            ests[0][i] = refs[1][i];
            ests[1][i] = refs[0][i];
        }
        assert!((swap_rate(&refs, &ests, 50).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn report_rows_and_summary() {
        let refs = two_tones(200);
        let ests: Vec<Vec<f64>> = vec![refs[1].clone(), refs[0].iter().map(|v| 0.9 * v).collect()];
        let mut a = EvalReport::default();
        a.push_run(1, "hybrid", &refs, &ests, 50).unwrap();
        let mut b = EvalReport::default();
        b.push_run(0, "hybrid", &refs, &refs, 50).unwrap();
        b.push_run(0, "dirac", &refs, &refs, 50).unwrap();
        let r = EvalReport::merge(vec![a, b], &["dirac", "hybrid"]);
        let keys: Vec<(String, usize, usize)> = r
            .rows
            .iter()
            .map(|x| (x.solver.clone(), x.mixture_id, x.source_idx))
            .collect();
        assert_eq!(keys[0], ("dirac".to_string(), 0, 0));
        assert_eq!(keys[2], ("hybrid".to_string(), 0, 0));
        assert_eq!(r.rows[4].perm, 1);
        let csv = r.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 7);
        let hybrid = &r.summary()[1];
        let mean = r.rows[2..].iter().map(|x| x.si_sdr_db).sum::<f64>() / 4.0;
        assert!((hybrid.si_sdr_db.as_ref().unwrap().mean - mean).abs() < 1e-12);
        assert_eq!(hybrid.swap_rate.as_ref().unwrap().n, 2);
    }
}
