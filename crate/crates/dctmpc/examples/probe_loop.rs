// temporary probe for the closed loop
use dctmpc::icnn::DcModel;
use dctmpc::sim::{run_closed_loop, Mode, Scenario};

fn main() {
    let f_model = DcModel::load(std::path::Path::new("/tmp/dctmpc_models/f.json")).unwrap();
    let g_model = DcModel::load(std::path::Path::new("/tmp/dctmpc_models/g.json")).unwrap();
    let steps: f64 = std::env::var("STEPS").map(|s| s.parse().unwrap()).unwrap_or(30.0);
    let mode = std::env::var("MODE").unwrap_or_else(|_| "adaptive".into());
    let mut sc = match mode.as_str() {
        "nominal" => Scenario::nominal("probe-nominal"),
        "dither" => Scenario::dither("probe-dither"),
        _ => Scenario::adaptive("probe-adaptive"),
    };
    sc.duration = steps;
    sc.seed = std::env::var("SEED").map(|s| s.parse().unwrap()).unwrap_or(1);
    if std::env::var("NOISE_OFF").is_ok() {
        sc.noise.enabled = false;
    }
    if let Ok(iters) = std::env::var("ITERS") {
        sc.mpc.max_iters = iters.parse().unwrap();
    }
    let t0 = std::time::Instant::now();
    let log = run_closed_loop(&sc, &f_model, &g_model).unwrap();
    println!("mode {:?} steps {} in {:.1?}", sc.mode, log.records.len(), t0.elapsed());
    if std::env::var("DIAG").is_ok() {
        for r in log.records.iter().take(6) {
            println!("t={:4.1} costs={:?}", r.t, r.cost);
        }
    }
    for r in log.records.iter().step_by(5) {
        println!(
            "t={:5.1} X={:.3} S={:.4} P={:.4} V={:.3} u={:.4} iters={} path={:?} cost={:.3} est={:?}",
            r.t, r.state.biomass, r.state.substrate, r.state.product, r.state.volume,
            r.u_applied, r.iterations, r.path, r.cost,
            r.estimator.as_ref().map(|e| (e.h.map(|v| (v*1e3).round()/1e3), e.theta_hat.map(|v| (v*1e3).round()/1e3)))
        );
    }
    let m = &log.metrics;
    println!("final state: {:?}", log.final_state);
    println!(
        "final P {:.4}; violations {}; fallbacks {}; emergencies {}; theta* excluded {}; frozen {}; max gap {:.2e}; max step {:.2}s; mean step {:.2}s; area {:.5}",
        m.final_product, m.constraint_violations, m.fallback_steps, m.emergency_steps,
        m.theta_star_excluded_steps, m.estimator_frozen_steps, m.max_epigraph_gap,
        m.max_step_solve_seconds, m.mean_step_solve_seconds, m.final_theta_set_area
    );
}
