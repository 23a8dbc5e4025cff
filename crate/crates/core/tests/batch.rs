use lqac::experiments::{self, ExperimentPlan, Variant, CSV_COLUMNS, RAW_CSV, SUMMARY_JSON};

fn tiny_plan() -> ExperimentPlan {
    let mut plan = ExperimentPlan::preset("stable-paper").unwrap();
    plan.n_runs = 3;
    plan.set_horizon(300);
    plan.variants = vec![Variant::Stepwise, Variant::Logarithmic, Variant::Thompson];
    plan.base_seed = 17;
    plan
}

#[test]
fn same_seed_gives_identical_csv() {
    let plan = tiny_plan();
    let a = experiments::run_batch(&plan, Some(1)).unwrap();
    let b = experiments::run_batch(&plan, Some(3)).unwrap();
    assert_eq!(
        experiments::csv_bytes(&a.rows).unwrap(),
        experiments::csv_bytes(&b.rows).unwrap()
    );
}

#[test]
fn writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = tiny_plan();
    plan.output_dir = Some(dir.path().to_path_buf());
    let result = experiments::run_batch(&plan, None).unwrap();
    let rows = experiments::read_csv(&dir.path().join(RAW_CSV)).unwrap();
    assert_eq!(rows.len(), 3 * 3 * plan.checkpoints.len());
    assert_eq!(rows.len(), result.rows.len());
    let header = std::fs::read_to_string(dir.path().join(RAW_CSV)).unwrap();
    assert_eq!(header.lines().next().unwrap(), CSV_COLUMNS.join(","));
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join(SUMMARY_JSON)).unwrap()).unwrap();
    assert_eq!(json["variants"].as_array().unwrap().len(), 3);
    assert!(json["build"].is_string());
}

#[test]
fn single_run_short_horizon() {
    let mut plan = ExperimentPlan::preset("stable-paper").unwrap();
    plan.n_runs = 1;
    plan.set_horizon(10);
    plan.variants = vec![Variant::Stepwise];
    let result = experiments::run_batch(&plan, None).unwrap();
    assert_eq!(result.outputs.len(), 1);
    assert_eq!(result.outputs[0].record.recorded_horizon(), 10);
    assert!(result.rows.iter().all(|r| r.t <= 10));
}

#[test]
fn cumulative_cost_is_monotone_across_checkpoints() {
    let result = experiments::run_batch(&tiny_plan(), None).unwrap();
    for out in &result.outputs {
        let snaps = &out.record.snapshots;
        assert!(snaps.windows(2).all(|w| w[1].cost_cum >= w[0].cost_cum));
    }
}
