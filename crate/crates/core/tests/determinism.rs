use ibd_core::harness::{run_monte_carlo, Scenario, Setting, WORKERS_ENV};

#[test]
fn report_does_not_depend_on_worker_count() {
    let mut s = Scenario::new(Setting::S2, 20, 0.3, 0.5, 0.5, 77);
    s.replicates = 300;
    let mut reports = Vec::new();
    for workers in ["1", "3", "8"] {
        std::env::set_var(WORKERS_ENV, workers);
        let r = run_monte_carlo(&s).unwrap();
        reports.push(serde_json::to_string(&r).unwrap());
    }
    std::env::remove_var(WORKERS_ENV);
    assert_eq!(reports[0], reports[1]);
    assert_eq!(reports[0], reports[2]);

    let mut other = s.clone();
    other.seed += 1;
    assert_ne!(serde_json::to_string(&run_monte_carlo(&other).unwrap()).unwrap(), reports[0]);
}
