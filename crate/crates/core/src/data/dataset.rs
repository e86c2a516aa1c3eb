use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const SHAPES: [&str; 6] = ["square", "disc", "triangle", "cross", "ring", "diamond"];
pub const COLORS: [&str; 3] = ["red", "green", "blue"];
pub const MAX_LABELS: usize = SHAPES.len() * COLORS.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// Rendering statistics. `Similar` keeps the label semantics but shifts the
/// palette, object sizes and background.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Standard,
    Similar,
}

struct Palette {
    colors: [[f32; 3]; 3],
    background: f32,
    radius: (f32, f32),
}

impl Style {
    fn palette(self) -> Palette {
        match self {
            Style::Standard => Palette {
                colors: [[0.9, 0.15, 0.15], [0.15, 0.85, 0.2], [0.2, 0.3, 0.95]],
                background: 0.08,
                radius: (4.5, 6.5),
            },
            Style::Similar => Palette {
                colors: [[0.95, 0.55, 0.1], [0.1, 0.7, 0.65], [0.6, 0.2, 0.8]],
                background: 0.3,
                radius: (3.5, 7.5),
            },
        }
    }
}

/// Label `c` is the combination of shape `c / 3` and colour `c % 3`.
pub fn label_name(c: usize) -> String {
    format!("{}_{}", COLORS[c % COLORS.len()], SHAPES[c / COLORS.len()])
}

/// Whether pixel offset `(dx, dy)` from an object centre lies inside shape `kind`.
fn covers(kind: usize, dx: f32, dy: f32, r: f32) -> bool {
    match kind {
        0 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        1 => dx * dx + dy * dy <= r * r,
        2 => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
        3 => {
            let t = r / 3.0;
            (dx.abs() <= t && dy.abs() <= r) || (dy.abs() <= t && dx.abs() <= r)
        }
        4 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.3 * r * r
        }
        _ => dx.abs() + dy.abs() <= r,
    }
}

/// Multi-label images of coloured shapes, pixels scaled to `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub images: Tensor,
    pub labels: Tensor,
    pub label_names: Vec<String>,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct DatasetParams {
    pub seed: u64,
    pub samples: usize,
    pub labels: usize,
    pub split: Split,
    pub style: Style,
}

/// Train split with the standard style.
pub fn generate_dataset(seed: u64, samples: usize, labels: usize) -> Result<SyntheticDataset> {
    SyntheticDataset::generate(&DatasetParams {
        seed,
        samples,
        labels,
        split: Split::Train,
        style: Style::Standard,
    })
}

impl SyntheticDataset {
    pub fn generate(p: &DatasetParams) -> Result<Self> {
        if p.samples < 200 {
            return Err(Error::invalid("generate_dataset", format!("need at least 200 samples, got {}", p.samples)));
        }
        if p.labels < 4 || p.labels > MAX_LABELS {
            return Err(Error::invalid(
                "generate_dataset",
                format!("label count {} outside [4, {MAX_LABELS}]", p.labels),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ if p.split == Split::Eval { 0x9e37_79b9 } else { 0 });
        let max_objects = if p.labels > 12 { 4 } else { 3 };
        let palette = p.style.palette();
        let noise = Normal::new(0.0f32, 0.03).expect("valid");
        let px = 3 * IMAGE_SIZE * IMAGE_SIZE;
        let mut images = Vec::with_capacity(p.samples * px);
        let mut labels = vec![0.0f32; p.samples * p.labels];
        let mut deck: Vec<usize> = Vec::new();
        for i in 0..p.samples {
            let k = rng.random_range(1..=max_objects);
            let mut chosen: Vec<usize> = Vec::with_capacity(k);
            while chosen.len() < k {
                if deck.is_empty() {
                    deck = (0..p.labels).collect();
                    deck.shuffle(&mut rng);
                }
                let pos = deck.iter().position(|c| !chosen.contains(c));
                match pos {
                    Some(pos) => chosen.push(deck.remove(pos)),
                    None => deck.clear(),
                }
            }
            let mut quadrants = [0usize, 1, 2, 3];
            quadrants.shuffle(&mut rng);
            let mut canvas = vec![palette.background; px];
            for v in canvas.iter_mut() {
                *v += noise.sample(&mut rng);
            }
            let plane = IMAGE_SIZE * IMAGE_SIZE;
            for (slot, &c) in chosen.iter().enumerate() {
                labels[i * p.labels + c] = 1.0;
                let q = quadrants[slot];
                let r = rng.random_range(palette.radius.0..palette.radius.1);
                let cx = (q % 2) as f32 * 16.0 + rng.random_range(7.0f32..9.0);
                let cy = (q / 2) as f32 * 16.0 + rng.random_range(7.0f32..9.0);
                let mut rgb = palette.colors[c % COLORS.len()];
                for ch in rgb.iter_mut() {
                    *ch = (*ch + rng.random_range(-0.06f32..0.06)).clamp(0.0, 1.0);
                }
                let kind = c / COLORS.len();
                for y in 0..IMAGE_SIZE {
                    for x in 0..IMAGE_SIZE {
                        if covers(kind, x as f32 - cx, y as f32 - cy, r) {
                            for (ch, &value) in rgb.iter().enumerate() {
                                canvas[ch * plane + y * IMAGE_SIZE + x] = value;
                            }
                        }
                    }
                }
            }
            images.extend(canvas.iter().map(|v| v.clamp(0.0, 1.0) * 2.0 - 1.0));
        }
        let ds = SyntheticDataset {
            images: Tensor::new(&[p.samples, 3, IMAGE_SIZE, IMAGE_SIZE], images)?,
            labels: Tensor::new(&[p.samples, p.labels], labels)?,
            label_names: (0..p.labels).map(label_name).collect(),
            split: p.split,
            seed: p.seed,
        };
        if p.samples >= 1000 {
            let marginals = ds.marginals();
            if let Some((c, m)) = marginals.iter().enumerate().find(|(_, m)| !(0.1..=0.6).contains(*m)) {
                return Err(Error::invalid(
                    "generate_dataset",
                    format!("label {c} has marginal {m:.3}, outside [0.1, 0.6]"),
                ));
            }
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label_count(&self) -> usize {
        self.label_names.len()
    }

    /// Fraction of samples carrying each label.
    pub fn marginals(&self) -> Vec<f64> {
        let c = self.label_count();
        let mut counts = vec![0.0f64; c];
        for row in self.labels.data().chunks(c) {
            for (k, &v) in row.iter().enumerate() {
                counts[k] += v as f64;
            }
        }
        counts.iter().map(|n| n / self.len() as f64).collect()
    }

    /// Label columns `columns` in the given order.
    pub fn label_columns(&self, columns: &[usize]) -> Result<Tensor> {
        let c = self.label_count();
        if let Some(&bad) = columns.iter().find(|&&k| k >= c) {
            return Err(Error::invalid("label_columns", format!("label {bad} out of range for {c} labels")));
        }
        let data = self
            .labels
            .data()
            .chunks(c)
            .flat_map(|row| columns.iter().map(move |&k| row[k]))
            .collect();
        Tensor::new(&[self.len(), columns.len()], data)
    }
}

/// Label sets per teacher and the customised target set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub teacher_labels: Vec<Vec<usize>>,
    pub customized: Vec<usize>,
}

impl TaskSplit {
    pub fn new(teacher_labels: Vec<Vec<usize>>, customized: Vec<usize>, total_labels: usize) -> Result<Self> {
        let split = TaskSplit {
            teacher_labels,
            customized,
        };
        split.validate(total_labels)?;
        Ok(split)
    }

    pub fn validate(&self, total_labels: usize) -> Result<()> {
        if self.teacher_labels.is_empty() {
            return Err(Error::Config("task split has no teachers".into()));
        }
        let check = |set: &[usize], what: &str| -> Result<()> {
            if set.is_empty() {
                return Err(Error::Config(format!("{what} label set is empty")));
            }
            let mut sorted = set.to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != set.len() {
                return Err(Error::Config(format!("{what} label set {set:?} repeats a label")));
            }
            if let Some(&bad) = set.iter().find(|&&c| c >= total_labels) {
                return Err(Error::Config(format!("{what} label {bad} out of range for {total_labels} labels")));
            }
            Ok(())
        };
        for (m, set) in self.teacher_labels.iter().enumerate() {
            check(set, &format!("teacher {}", m + 1))?;
        }
        check(&self.customized, "customized")?;
        if let Some(&c) = self
            .customized
            .iter()
            .find(|c| !self.teacher_labels.iter().any(|set| set.contains(c)))
        {
            return Err(Error::Config(format!("customized label {c} is not covered by any teacher")));
        }
        Ok(())
    }

    pub fn teachers(&self) -> usize {
        self.teacher_labels.len()
    }

    /// Each customised label is served by the first teacher that knows it.
    /// Returns, per teacher, `(local index into Y_m, global label)` pairs.
    pub fn assignments(&self) -> Vec<Vec<(usize, usize)>> {
        let mut out = vec![Vec::new(); self.teachers()];
        for &c in &self.customized {
            let m = self
                .teacher_labels
                .iter()
                .position(|set| set.contains(&c))
                .expect("validated");
            let local = self.teacher_labels[m].iter().position(|&x| x == c).expect("present");
            out[m].push((local, c));
        }
        for list in &mut out {
            list.sort_unstable();
        }
        out
    }
}

/// Deterministic per-component seed derived from a master seed and a tag.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h = master ^ 0x243f_6a88_85a3_08d3;
    for &byte in tag.as_bytes() {
        h = splitmix(h ^ byte as u64);
    }
    splitmix(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn component_rng(master: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag))
}
