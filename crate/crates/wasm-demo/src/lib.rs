//! Browser bindings: render dataset samples, evaluate the generator-side
//! loss terms on a prediction batch, and pick branch-out points.
//!
//! The plain functions are ordinary Rust so they can be tested natively;
//! the `#[wasm_bindgen]` wrappers only adapt types.

use amalgam::data::{average_precision, generate_dataset, SyntheticDataset, IMAGE_SIZE};
use amalgam::losses::{discrete_loss, info_entropy_loss, one_hot_loss};
use amalgam::pipeline::{branch_out, ConvergenceRecord};
use amalgam::{Tape, Tensor};
use wasm_bindgen::prelude::*;

/// Smallest dataset the generator accepts.
const PREVIEW_SAMPLES: usize = 200;

fn preview(seed: u64, labels: usize) -> Result<SyntheticDataset, String> {
    generate_dataset(seed, PREVIEW_SAMPLES, labels).map_err(|e| e.to_string())
}

/// One dataset image as row-major RGBA bytes plus its label names.
pub fn sample(seed: u64, labels: usize, index: usize) -> Result<(Vec<u8>, Vec<String>), String> {
    let data = preview(seed, labels)?;
    let i = index % data.len();
    let [c, h, w] = [3, IMAGE_SIZE, IMAGE_SIZE];
    let pixels = &data.images.data()[i * c * h * w..(i + 1) * c * h * w];
    let mut rgba = Vec::with_capacity(h * w * 4);
    for p in 0..h * w {
        for ch in 0..c {
            let v = (pixels[ch * h * w + p] + 1.0) * 0.5;
            rgba.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        rgba.push(255);
    }
    let k = data.label_count();
    let names = (0..k)
        .filter(|&j| data.labels.data()[i * k + j] > 0.5)
        .map(|j| data.label_names[j].clone())
        .collect();
    Ok((rgba, names))
}

/// Rows separated by `;` or newlines, values by `,`.
fn parse_rows(text: &str) -> Result<Vec<Vec<f64>>, String> {
    let rows: Vec<Vec<f64>> = text
        .split([';', '\n'])
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .map(|r| {
            r.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| format!("not a number: {v:?}")))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let width = rows.first().map(Vec::len).ok_or("no rows")?;
    if rows.iter().any(|r| r.len() != width) {
        return Err("rows differ in length".into());
    }
    Ok(rows)
}

/// `(one_hot, discrete, info_entropy, -ln C)` for a batch of sigmoid outputs.
pub fn loss_terms(predictions: &str, epsilon: f64) -> Result<[f64; 4], String> {
    let rows = parse_rows(predictions)?;
    let (n, c) = (rows.len(), rows[0].len());
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let mut tape: Tape<f64> = Tape::new();
    let y = tape.constant(Tensor::from_f64(&[n, c], &flat).map_err(|e| e.to_string())?);
    let oh = one_hot_loss(&mut tape, y, epsilon).map_err(|e| e.to_string())?;
    let dis = discrete_loss(&mut tape, y);
    let ie = info_entropy_loss(&mut tape, y).map_err(|e| e.to_string())?;
    Ok([tape.scalar(oh), tape.scalar(dis), tape.scalar(ie), -(c as f64).ln()])
}

/// Branch-out manifest for a convergence table with one row per block and
/// one column per teacher.
pub fn plan_for(table: &str) -> Result<String, String> {
    let rows = parse_rows(table)?;
    let record = ConvergenceRecord::from_table(&rows, 0).map_err(|e| e.to_string())?;
    Ok(branch_out(&record).map_err(|e| e.to_string())?.to_manifest())
}

/// Average precision of comma-separated scores against 0/1 labels.
pub fn ap_for(scores: &str, labels: &str) -> Result<f64, String> {
    let s = parse_rows(scores)?.concat();
    let l: Vec<bool> = parse_rows(labels)?.concat().into_iter().map(|v| v > 0.5).collect();
    average_precision(&s, &l).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn sample_rgba(seed: u32, labels: usize, index: usize) -> Result<Vec<u8>, JsError> {
    sample(seed as u64, labels, index).map(|(px, _)| px).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn sample_labels(seed: u32, labels: usize, index: usize) -> Result<String, JsError> {
    sample(seed as u64, labels, index)
        .map(|(_, names)| names.join(", "))
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn generator_losses(predictions: &str, epsilon: f64) -> Result<Vec<f64>, JsError> {
    loss_terms(predictions, epsilon).map(|v| v.to_vec()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn branch_plan(table: &str) -> Result<String, JsError> {
    plan_for(table).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn average_precision_of(scores: &str, labels: &str) -> Result<f64, JsError> {
    ap_for(scores, labels).map_err(|e| JsError::new(&e))
}
