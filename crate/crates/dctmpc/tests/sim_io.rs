//! Report emission, schema validation, and log round-trip contracts.

use dctmpc::plant::State;
use dctmpc::report::{
    emit_report, estimator_csv, parse_csv_numeric, prediction_csv, summary_json, trajectories_csv,
    validate_against_schema,
};
use dctmpc::sim::{
    EstimatorRecord, Metrics, Mode, PredictionSnapshot, Scenario, SimLog, StepRecord,
};
use dctmpc::tube::FeasibilityPath;
use nalgebra::Vector4;

fn sample_log(steps: usize) -> SimLog {
    let records: Vec<StepRecord> = (0..steps)
        .map(|n| StepRecord {
            t: n as f64,
            state: State::new(1.0 + 0.1 * n as f64, 0.5 / (n + 1) as f64, 0.01 * n as f64, 0.02 * n as f64),
            u_applied: 0.01 + 1e-3 * n as f64,
            alpha: Vector4::new(1e-3, 2e-3, 3e-4, 4e-4) * (n + 1) as f64,
            beta: 1e-3 * (n + 1) as f64,
            cost: 1.5 + 0.1 * n as f64,
            iterations: 2,
            path: if n == 0 {
                FeasibilityPath::Initial
            } else {
                FeasibilityPath::Normal
            },
            estimator: Some(EstimatorRecord {
                h: [0.778 - 0.01 * n as f64, 0.25, 0.222, 0.15],
                theta_hat: [0.1 * n as f64 / steps as f64, 0.01],
                innovation_norm: 1e-3 / (n + 1) as f64,
                frozen: false,
            }),
            solve_seconds: 0.5,
            epigraph_gap: 1e-8,
            feasibility_violation: 1e-9,
        })
        .collect();
    SimLog {
        scenario: "io-test".into(),
        mode: Mode::AdaptiveMpc,
        seed: 7,
        records,
        final_state: State::new(2.0, 0.001, 0.96, 3.0),
        prediction_t0: Some(PredictionSnapshot {
            states: vec![State::batch_start(); 3],
            controls: vec![0.01; 3],
            lower: vec![Vector4::new(0.9, 0.4, -0.1, -0.1); 3],
            upper: vec![Vector4::new(1.1, 0.6, 0.1, 0.1); 3],
        }),
        metrics: Metrics {
            final_product: 0.96,
            min_substrate: 0.001,
            max_biomass: 2.0,
            constraint_violations: 0,
            fallback_steps: 0,
            emergency_steps: 0,
            theta_star_excluded_steps: 0,
            estimator_frozen_steps: 0,
            final_theta_set_area: 0.01,
            max_epigraph_gap: 1e-8,
            max_step_solve_seconds: 0.5,
            mean_step_solve_seconds: 0.4,
            total_iterations: 2 * steps,
        },
    }
}

#[test]
fn csv_round_trips_numeric_fields_exactly() {
    let log = sample_log(7);
    let text = trajectories_csv(&log);
    assert!(text.starts_with("# schema=trajectories/1\n"));
    let rows = parse_csv_numeric(&text);
    assert_eq!(rows.len(), 8); // T/delta + 1 state records
    for (n, r) in log.records.iter().enumerate() {
        assert_eq!(rows[n][0], r.t);
        assert_eq!(rows[n][1], r.state.biomass);
        assert_eq!(rows[n][2], r.state.substrate);
        assert_eq!(rows[n][3], r.state.product);
        assert_eq!(rows[n][4], r.state.volume);
        assert_eq!(rows[n][5], r.u_applied);
        assert_eq!(rows[n][6], r.alpha[0]);
        assert_eq!(rows[n][10], r.beta);
        assert_eq!(rows[n][11], r.cost);
    }
    // final record carries the terminal state
    let last = rows.last().unwrap();
    assert_eq!(last[1], log.final_state.biomass);
    assert!(last[5].is_nan());

    let est = estimator_csv(&log);
    let rows = parse_csv_numeric(&est);
    assert_eq!(rows.len(), 7);
    assert_eq!(rows[3][1], log.records[3].estimator.as_ref().unwrap().h[0]);
}

#[test]
fn empty_log_emits_headers_only() {
    let mut log = sample_log(0);
    log.prediction_t0 = None;
    let text = trajectories_csv(&log);
    let lines: Vec<&str> = text.lines().collect();
    // schema line, header, and the terminal state record
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("# schema="));
    assert_eq!(
        lines[1],
        "t,X,S,P,V,u,alpha1,alpha2,alpha3,alpha4,beta,cost,iters,path"
    );
    let est = estimator_csv(&log);
    assert_eq!(est.lines().count(), 2);
    let summary = summary_json(&log, None).unwrap();
    let value: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(value["steps"], 0);
}

#[test]
fn summary_validates_against_shipped_schema() {
    let log = sample_log(5);
    let sc = Scenario::adaptive("io-test");
    let summary = summary_json(&log, Some(&sc)).unwrap();
    let value: serde_json::Value = serde_json::from_str(&summary).unwrap();
    let schema_text = std::fs::read_to_string(
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/summary.schema.json"),
    )
    .expect("schema document shipped with the repository");
    let schema: serde_json::Value = serde_json::from_str(&schema_text).unwrap();
    validate_against_schema(&value, &schema).unwrap();
}

#[test]
fn schema_validator_rejects_missing_fields() {
    let schema: serde_json::Value = serde_json::json!({
        "type": "object",
        "required": ["a"],
        "properties": {"a": {"type": "number"}}
    });
    assert!(validate_against_schema(&serde_json::json!({"a": 1.0}), &schema).is_ok());
    assert!(validate_against_schema(&serde_json::json!({"b": 1.0}), &schema).is_err());
    assert!(validate_against_schema(&serde_json::json!({"a": "x"}), &schema).is_err());
}

#[test]
fn prediction_envelopes_bracket_the_nominal() {
    let log = sample_log(3);
    let snap = log.prediction_t0.as_ref().unwrap();
    let text = prediction_csv(snap);
    let rows = parse_csv_numeric(&text);
    assert_eq!(rows.len(), 3);
    for row in rows {
        for i in 0..4 {
            assert!(row[6 + i] <= row[1 + i] && row[1 + i] <= row[10 + i]);
        }
    }
}

#[test]
fn emit_report_writes_all_files() {
    let dir = std::env::temp_dir().join(format!("dctmpc_report_{}", std::process::id()));
    let log = sample_log(4);
    let sc = Scenario::adaptive("io-test");
    emit_report(&log, Some(&sc), &dir).unwrap();
    for file in ["trajectories.csv", "estimator.csv", "summary.json", "prediction_t0.csv"] {
        assert!(dir.join(file).exists(), "{file} missing");
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn scenario_toml_round_trip() {
    let sc = Scenario::dither("round-trip");
    let text = toml::to_string_pretty(&sc).unwrap();
    let back: Scenario = toml::from_str(&text).unwrap();
    assert_eq!(back.name, sc.name);
    assert_eq!(back.mode, Mode::AdaptiveDither);
    assert_eq!(back.mpc.horizon, sc.mpc.horizon);
    assert_eq!(back.w_tube, sc.w_tube);
    assert_eq!(back.estimator.window, sc.estimator.window);
}
