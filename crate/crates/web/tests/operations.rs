use lanekeep_web::{closed_loop_json, parameter_sets_json, terminal_slice_json};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn closed_loop_overlays_every_controller() {
    let v = parse(&closed_loop_json(r#"{"controllers": ["adaptive", "nominal", "lqr"], "steps": 40}"#).unwrap());
    assert!(v["states_svg"].as_str().unwrap().starts_with("<svg"));
    assert!(v["input_svg"].as_str().unwrap().contains("<path"));
    let summaries = v["summaries"].as_array().unwrap();
    assert_eq!(summaries.len(), 3);
    assert_eq!(summaries[0]["controller"], "adaptive");
    assert_eq!(summaries[0]["steps"], 41);
    assert_eq!(summaries[0]["violation_steps"], 0);
}

#[test]
fn parameter_sets_shrink_around_the_truth() {
    let v = parse(&parameter_sets_json(r#"{"steps": 60, "snapshot_every": 20}"#).unwrap());
    let svg = v["svg"].as_str().unwrap();
    assert_eq!(svg.matches("<polygon").count(), 4);
    assert!(svg.contains("true offset"));
    let volume = v["final_volume"].as_f64().unwrap();
    assert!(volume < 0.4 * 0.6, "volume {volume}");
}

#[test]
fn terminal_slice_grows_once_the_offset_is_known() {
    let v = parse(&terminal_slice_json(r#"{"axes": [0, 2]}"#).unwrap());
    let svg = v["svg"].as_str().unwrap();
    assert_eq!(svg.matches("<polygon").count(), 2);
    assert!(svg.contains("prior parameter set") && svg.contains("offset known"));
    assert!(v["prior_rows"].as_u64().unwrap() > 0);
    let (prior, learned) = (v["prior_area"].as_f64().unwrap(), v["learned_area"].as_f64().unwrap());
    assert!(
        prior > 0.0 && learned >= prior - 1e-9,
        "prior {prior}, learned {learned}"
    );
}

#[test]
fn empty_settings_use_defaults_and_bad_settings_are_reported() {
    assert!(terminal_slice_json("").is_ok());
    assert!(closed_loop_json(r#"{"steps": "many"}"#)
        .unwrap_err()
        .contains("bad settings"));
    assert!(closed_loop_json(r#"{"colour": 1}"#).is_err());
    assert!(closed_loop_json(r#"{"controllers": []}"#).is_err());
    assert!(terminal_slice_json(r#"{"axes": [1, 1]}"#).is_err());
}
