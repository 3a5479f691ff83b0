// SPDX-License-Identifier: MIT OR Apache-2.0

// Error paths construct JS values and only run under wasm.

use introspect_demo::{judge, simulate_label, world_preview};
use serde_json::Value;

fn preview() -> Value {
    serde_json::from_str(&world_preview(3, 4).unwrap()).unwrap()
}

#[test]
fn preview_lists_labels_and_lines() {
    let p = preview();
    assert_eq!(p["corpus"].as_array().unwrap().len(), 4);
    assert!(p["labels"].as_array().unwrap().len() > 5);
    assert_eq!(world_preview(3, 4).unwrap(), world_preview(3, 4).unwrap());
}

#[test]
fn simulation_covers_every_token() {
    let p = preview();
    let label = p["labels"][0].as_str().unwrap();
    let s: Value = serde_json::from_str(&simulate_label(3, label, 1).unwrap()).unwrap();
    let acts = s["activations"].as_array().unwrap();
    assert_eq!(acts.len(), s["tokens"].as_array().unwrap().len());
    assert!(acts.iter().all(|a| a == 0.0 || a == 1.0));
}

#[test]
fn judge_is_reflexive_and_symmetric() {
    let p = preview();
    let labels: Vec<&str> = p["labels"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    let score = |a: &str, b: &str| -> f64 {
        let v: Value = serde_json::from_str(&judge(3, a, b).unwrap()).unwrap();
        v["score"].as_f64().unwrap()
    };
    for a in labels.iter().take(6) {
        assert_eq!(score(a, a), 1.0);
        for b in labels.iter().rev().take(6) {
            assert_eq!(score(a, b), score(b, a));
        }
    }
}
