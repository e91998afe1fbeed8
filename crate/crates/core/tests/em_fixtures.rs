use serde::Deserialize;

use r2d2::eval::{exact_match, normalize_answer};

#[derive(Deserialize)]
struct Case {
    prediction: String,
    golds: Vec<String>,
    normalized: String,
    em: bool,
}

#[test]
fn normalization_fixtures() {
    let text = include_str!("../fixtures/em_normalization.jsonl");
    let cases: Vec<Case> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(cases.len(), 25);
    for c in &cases {
        assert_eq!(normalize_answer(&c.prediction), c.normalized, "normalizing {:?}", c.prediction);
        assert_eq!(exact_match(&c.prediction, &c.golds), c.em, "{:?} vs {:?}", c.prediction, c.golds);
    }
}
