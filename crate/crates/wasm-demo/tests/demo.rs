use amalgam_wasm_demo::{ap_for, loss_terms, plan_for, sample};

#[test]
fn sample_is_rgba_with_labels() {
    let (px, names) = sample(7, 6, 3).unwrap();
    assert_eq!(px.len(), 32 * 32 * 4);
    assert!(px.chunks(4).all(|p| p[3] == 255));
    assert!(!names.is_empty() && names.len() <= 3);
    assert_eq!(sample(7, 6, 3).unwrap().0, px);
}

#[test]
fn sample_rejects_bad_label_count() {
    assert!(sample(7, 2, 0).is_err());
}

#[test]
fn uniform_batch_reaches_entropy_bound() {
    let [oh, dis, ie, bound] = loss_terms("0.5,0.5,0.5;0.5,0.5,0.5", 0.5).unwrap();
    assert!((oh - 2f64.ln()).abs() < 1e-9);
    assert!((dis + 0.5).abs() < 1e-12);
    assert!((ie - bound).abs() < 1e-9);
}

#[test]
fn ragged_rows_rejected() {
    assert!(loss_terms("0.1,0.2;0.3", 0.5).is_err());
    assert!(loss_terms("a,b", 0.5).is_err());
}

#[test]
fn plan_picks_minimum_eta() {
    let plan = plan_for("0.1,0.2\n0.05,0.4\n0.3,0.1").unwrap();
    assert_eq!(plan, "S[1]=2\nS[2]=3\n");
}

#[test]
fn ap_of_perfect_ranking_is_one() {
    assert_eq!(ap_for("0.9,0.8,0.1", "1,1,0").unwrap(), 1.0);
}
