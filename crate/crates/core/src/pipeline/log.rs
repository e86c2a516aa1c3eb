use std::fmt::Write as _;

/// One optimiser step. Loss columns that do not apply to the stage stay empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LogRow {
    pub step: &'static str,
    pub block: usize,
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    pub one_hot: Option<f64>,
    pub activation: Option<f64>,
    pub info_entropy: Option<f64>,
    pub discrete: Option<f64>,
    pub consistency: Option<f64>,
    /// Per-teacher (or per-branch) loss.
    pub per_teacher: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn push(&mut self, row: LogRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: TrainingLog) {
        self.rows.extend(other.rows);
    }

    /// Totals of the rows belonging to `step` (and `block`, when given).
    pub fn totals(&self, step: &str, block: Option<usize>) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.step == step && block.is_none_or(|b| r.block == b))
            .map(|r| r.total)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let teachers = self.rows.iter().map(|r| r.per_teacher.len()).max().unwrap_or(0);
        let mut s = String::from("step,block,iteration,lr,total,one_hot,activation,info_entropy,discrete,consistency");
        for m in 1..=teachers {
            let _ = write!(s, ",loss_t{m}");
        }
        s.push('\n');
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = write!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.block,
                r.iteration,
                r.lr,
                r.total,
                opt(r.one_hot),
                opt(r.activation),
                opt(r.info_entropy),
                opt(r.discrete),
                opt(r.consistency)
            );
            for m in 0..teachers {
                s.push(',');
                if let Some(v) = r.per_teacher.get(m) {
                    let _ = write!(s, "{v}");
                }
            }
            s.push('\n');
        }
        s
    }
}
