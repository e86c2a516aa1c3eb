use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// All-points interpolated average precision.
///
/// Samples with equal scores form one threshold step, so the result does
/// not depend on sample order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("average_precision", &[scores.len()], &[labels.len()]));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Domain {
            op: "average_precision",
            detail: format!("score {bad} is not finite"),
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::invalid("average_precision", "no positive labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // (recall, precision) at each distinct threshold.
    let mut curve = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        curve.push((tp as f64 / positives as f64, tp as f64 / seen as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..curve.len() {
        let (recall, _) = curve[k];
        if recall > prev_recall {
            let best = curve[k..].iter().map(|&(_, p)| p).fold(0.0, f64::max);
            ap += (recall - prev_recall) * best;
            prev_recall = recall;
        }
    }
    Ok(ap)
}

/// Evaluation summary over a fixed label list.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub label_names: Vec<String>,
    /// `None` for labels without positives, which are left out of `map`.
    pub per_label_ap: Vec<Option<f64>>,
    pub map: f64,
    pub overall_precision: f64,
    pub overall_recall: f64,
    pub overall_f1: f64,
    pub class_precision: f64,
    pub class_recall: f64,
    pub class_f1: f64,
    pub top_k: usize,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Per-label AP, mAP and top-k precision/recall/F1 for `[N, C]` scores.
pub fn coco_style_metrics<T: Element>(
    scores: &Tensor<T>,
    labels: &Tensor<T>,
    k: usize,
    label_names: &[String],
) -> Result<MetricsReport> {
    let (n, c) = scores.dims2("coco_style_metrics")?;
    if labels.shape() != scores.shape() {
        return Err(Error::shape("coco_style_metrics", scores.shape(), labels.shape()));
    }
    if label_names.len() != c {
        return Err(Error::invalid("coco_style_metrics", format!("{} names for {c} labels", label_names.len())));
    }
    if k == 0 || k > c {
        return Err(Error::invalid("coco_style_metrics", format!("top-k {k} outside [1, {c}]")));
    }
    let s: Vec<f64> = scores.data().iter().map(|v| v.as_f64()).collect();
    let y: Vec<bool> = labels.data().iter().map(|v| v.as_f64() >= 0.5).collect();

    let mut per_label_ap = Vec::with_capacity(c);
    for j in 0..c {
        let col: Vec<f64> = (0..n).map(|i| s[i * c + j]).collect();
        let lab: Vec<bool> = (0..n).map(|i| y[i * c + j]).collect();
        per_label_ap.push(if lab.iter().any(|&l| l) {
            Some(average_precision(&col, &lab)?)
        } else {
            log::warn!("label {} has no positives; excluded from mAP", label_names[j]);
            None
        });
    }
    let evaluated: Vec<f64> = per_label_ap.iter().flatten().copied().collect();
    if evaluated.is_empty() {
        return Err(Error::invalid("coco_style_metrics", "no label has a positive sample"));
    }
    let map = evaluated.iter().sum::<f64>() / evaluated.len() as f64;

    let (mut tp, mut predicted, mut actual) = (vec![0usize; c], vec![0usize; c], vec![0usize; c]);
    for i in 0..n {
        let row = &s[i * c..(i + 1) * c];
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &j in &order[..k] {
            predicted[j] += 1;
            tp[j] += y[i * c + j] as usize;
        }
        for j in 0..c {
            actual[j] += y[i * c + j] as usize;
        }
    }
    let sum = |v: &[usize]| v.iter().sum::<usize>();
    let overall_precision = ratio(sum(&tp), sum(&predicted));
    let overall_recall = ratio(sum(&tp), sum(&actual));
    let classes: Vec<usize> = (0..c).filter(|&j| actual[j] > 0).collect();
    let mean = |f: &dyn Fn(usize) -> f64| classes.iter().map(|&j| f(j)).sum::<f64>() / classes.len() as f64;
    let class_precision = mean(&|j| ratio(tp[j], predicted[j]));
    let class_recall = mean(&|j| ratio(tp[j], actual[j]));
    Ok(MetricsReport {
        label_names: label_names.to_vec(),
        per_label_ap,
        map,
        overall_precision,
        overall_recall,
        overall_f1: f1(overall_precision, overall_recall),
        class_precision,
        class_recall,
        class_f1: f1(class_precision, class_recall),
        top_k: k,
    })
}

impl MetricsReport {
    /// `label,ap` rows plus a trailing `mAP` row.
    pub fn to_metrics_csv(&self) -> String {
        let mut s = String::from("label,ap\n");
        for (name, ap) in self.label_names.iter().zip(&self.per_label_ap) {
            match ap {
                Some(ap) => writeln!(s, "{name},{ap:.6}"),
                None => writeln!(s, "{name},"),
            }
            .expect("string write");
        }
        writeln!(s, "mAP,{:.6}", self.map).expect("string write");
        s
    }

    pub const SUMMARY_HEADER: &'static str = "mAP,C-P,C-R,C-F1,O-P,O-R,O-F1";

    pub fn summary_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.map,
            self.class_precision,
            self.class_recall,
            self.class_f1,
            self.overall_precision,
            self.overall_recall,
            self.overall_f1
        )
    }

    pub fn to_coco_csv(&self) -> String {
        format!("top_k,{}\n{},{}\n", Self::SUMMARY_HEADER, self.top_k, self.summary_row())
    }
}
