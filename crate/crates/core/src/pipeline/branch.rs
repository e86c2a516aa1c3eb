use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Converged dual-branch loss `eta[b][m]` for every block and teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRecord {
    eta: Vec<Vec<Option<f64>>>,
    pub window: usize,
}

impl ConvergenceRecord {
    pub fn new(blocks: usize, teachers: usize, window: usize) -> Self {
        ConvergenceRecord {
            eta: vec![vec![None; teachers]; blocks],
            window,
        }
    }

    /// Builds a complete record from a `[block][teacher]` table.
    pub fn from_table(table: &[Vec<f64>], window: usize) -> Result<Self> {
        let teachers = table.first().map_or(0, Vec::len);
        let mut rec = ConvergenceRecord::new(table.len(), teachers, window);
        for (b, row) in table.iter().enumerate() {
            if row.len() != teachers {
                return Err(Error::invalid("convergence_record", "ragged eta table"));
            }
            for (m, &v) in row.iter().enumerate() {
                rec.set(b + 1, m + 1, v)?;
            }
        }
        Ok(rec)
    }

    pub fn blocks(&self) -> usize {
        self.eta.len()
    }

    pub fn teachers(&self) -> usize {
        self.eta.first().map_or(0, Vec::len)
    }

    /// Records `eta^{b,m}` (both 1-based).
    pub fn set(&mut self, b: usize, m: usize, value: f64) -> Result<()> {
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::invalid("convergence_record", format!("eta[{b}][{m}] = {value} is not a finite nonnegative loss")));
        }
        let slot = self
            .eta
            .get_mut(b.wrapping_sub(1))
            .and_then(|row| row.get_mut(m.wrapping_sub(1)))
            .ok_or_else(|| Error::invalid("convergence_record", format!("no slot ({b}, {m})")))?;
        *slot = Some(value);
        Ok(())
    }

    pub fn get(&self, b: usize, m: usize) -> Option<f64> {
        self.eta.get(b.wrapping_sub(1))?.get(m.wrapping_sub(1)).copied().flatten()
    }

    pub fn is_complete(&self) -> bool {
        !self.eta.is_empty() && self.eta.iter().all(|row| !row.is_empty() && row.iter().all(Option::is_some))
    }

    /// CSV with header `block,teacher,eta`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,teacher,eta\n");
        for (b, row) in self.eta.iter().enumerate() {
            for (m, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    let _ = writeln!(s, "{},{},{}", b + 1, m + 1, v);
                }
            }
        }
        s
    }

    pub fn from_csv(text: &str, blocks: usize, teachers: usize) -> Result<Self> {
        let mut rec = ConvergenceRecord::new(blocks, teachers, 0);
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            let bad = || Error::invalid("convergence_record", format!("malformed line {}: {line:?}", i + 1));
            if parts.len() != 3 {
                return Err(bad());
            }
            let b = parts[0].trim().parse().map_err(|_| bad())?;
            let m = parts[1].trim().parse().map_err(|_| bad())?;
            let v = parts[2].trim().parse().map_err(|_| bad())?;
            rec.set(b, m, v)?;
        }
        Ok(rec)
    }
}

/// Branch-out block `S[m]` per teacher.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchPlan {
    splits: Vec<usize>,
    block_count: usize,
}

impl BranchPlan {
    pub fn new(splits: Vec<usize>, block_count: usize) -> Result<Self> {
        if splits.is_empty() {
            return Err(Error::invalid("branch_plan", "no teachers"));
        }
        if let Some(&s) = splits.iter().find(|&&s| s < 1 || s > block_count) {
            return Err(Error::invalid("branch_plan", format!("split {s} outside [1, {block_count}]")));
        }
        Ok(BranchPlan { splits, block_count })
    }

    /// `S[m]` for teacher `m` (1-based).
    pub fn split(&self, m: usize) -> usize {
        self.splits[m - 1]
    }

    pub fn splits(&self) -> &[usize] {
        &self.splits
    }

    pub fn teachers(&self) -> usize {
        self.splits.len()
    }

    pub fn block_count(&self) -> usize {
        self.block_count
    }

    /// Number of leading blocks shared by every branch.
    pub fn shared_depth(&self) -> usize {
        *self.splits.iter().min().expect("nonempty")
    }

    /// One `S[m]=value` line per teacher.
    pub fn to_manifest(&self) -> String {
        self.splits
            .iter()
            .enumerate()
            .map(|(m, s)| format!("S[{}]={}\n", m + 1, s))
            .collect()
    }

    pub fn from_manifest(text: &str, block_count: usize) -> Result<Self> {
        let mut splits = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let bad = || Error::invalid("branch_plan", format!("malformed manifest line {line:?}"));
            let rest = line.trim().strip_prefix("S[").ok_or_else(bad)?;
            let (idx, value) = rest.split_once("]=").ok_or_else(bad)?;
            let idx: usize = idx.parse().map_err(|_| bad())?;
            if idx != splits.len() + 1 {
                return Err(bad());
            }
            splits.push(value.parse().map_err(|_| bad())?);
        }
        BranchPlan::new(splits, block_count)
    }
}

/// `S[m] = argmin_b eta[b][m]`, ties resolved toward the smaller `b`.
pub fn branch_out(record: &ConvergenceRecord) -> Result<BranchPlan> {
    if !record.is_complete() {
        return Err(Error::Ordering("branch-out needs a convergence value for every block and teacher".into()));
    }
    let splits = (1..=record.teachers())
        .map(|m| {
            let mut best = 1;
            let mut best_eta = record.get(1, m).expect("complete");
            for b in 2..=record.blocks() {
                let eta = record.get(b, m).expect("complete");
                if eta < best_eta {
                    best = b;
                    best_eta = eta;
                }
            }
            best
        })
        .collect();
    BranchPlan::new(splits, record.blocks())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        let rec = ConvergenceRecord::from_table(&[vec![0.5], vec![0.3], vec![0.4], vec![0.6]], 50).unwrap();
        assert_eq!(branch_out(&rec).unwrap().splits(), &[2]);
        let flat = ConvergenceRecord::from_table(&vec![vec![0.2, 0.1]; 4], 50).unwrap();
        assert_eq!(branch_out(&flat).unwrap().splits(), &[1, 1]);
    }

    #[test]
    fn incomplete_record_rejected() {
        let mut rec = ConvergenceRecord::new(2, 1, 10);
        rec.set(1, 1, 0.2).unwrap();
        assert!(branch_out(&rec).is_err());
        assert!(rec.set(3, 1, 0.1).is_err());
        assert!(rec.set(1, 1, f64::NAN).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let plan = BranchPlan::new(vec![2, 3], 4).unwrap();
        assert_eq!(plan.to_manifest(), "S[1]=2\nS[2]=3\n");
        assert_eq!(BranchPlan::from_manifest(&plan.to_manifest(), 4).unwrap(), plan);
        assert_eq!(plan.shared_depth(), 2);
        assert!(BranchPlan::from_manifest("S[1]=5\n", 4).is_err());
        assert!(BranchPlan::from_manifest("S[2]=1\n", 4).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let rec = ConvergenceRecord::from_table(&[vec![0.5, 0.25], vec![0.125, 1.0]], 0).unwrap();
        assert_eq!(ConvergenceRecord::from_csv(&rec.to_csv(), 2, 2).unwrap(), rec);
    }
}
