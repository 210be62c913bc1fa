// temporary probe for the tube problem pipeline
use dctmpc::estimate::ParamSet;
use dctmpc::plant::{Control, ModelParams, NominalModel, State, StateVec};
use dctmpc::rng::{stream, uniform, Stream};
use dctmpc::train::*;
use dctmpc::tube::*;
use dctmpc::tube::{build_problem, ProblemInputs, TubeOutcome};
use nalgebra::Vector2;

fn main() {
    let t_start = std::time::Instant::now();
    let nominal = ModelParams::nominal();
    let dir = std::path::Path::new("/tmp/dctmpc_models");
    std::fs::create_dir_all(dir).unwrap();
    let f_path = dir.join("f.json");
    let g_path = dir.join("g.json");
    let f_model = if f_path.exists() {
        dctmpc::icnn::DcModel::load(&f_path).unwrap()
    } else {
        let data = generate_dataset(100_000, &constraint_box(), &nominal, TargetMap::Rhs, 1).unwrap();
        let cfg_t = TrainConfig {
            seed: 1,
            epochs: std::env::var("EPOCHS").map(|s| s.parse().unwrap()).unwrap_or(2500),
            learning_rate: std::env::var("TRAINLR").map(|s| s.parse().unwrap()).unwrap_or(1e-4),
            ..TrainConfig::default()
        };
        let m = train_dc_pair(&data, &Architecture::rhs_pair(), &cfg_t).unwrap().model;
        m.save(&f_path).unwrap();
        m
    };
    println!("f model MAE {:.2e} ({:.1?})", f_model.meta.val_mae, t_start.elapsed());
    let g_model = if g_path.exists() {
        dctmpc::icnn::DcModel::load(&g_path).unwrap()
    } else {
        let data_g = generate_dataset(100_000, &constraint_box(), &nominal, TargetMap::Psi, 2).unwrap();
        let cfg_t = TrainConfig {
            seed: 2,
            epochs: std::env::var("EPOCHS").map(|s| s.parse().unwrap()).unwrap_or(2500),
            learning_rate: std::env::var("TRAINLR").map(|s| s.parse().unwrap()).unwrap_or(1e-4),
            ..TrainConfig::default()
        };
        let m = train_dc_pair(&data_g, &Architecture::psi_pair(), &cfg_t).unwrap().model;
        m.save(&g_path).unwrap();
        m
    };
    println!("g model MAE {:.2e}", g_model.meta.val_mae);

    let mpc = MpcConfig {
        lqr_q: std::env::var("LQ").map(|s| s.parse().unwrap()).unwrap_or(1e-5),
        lqr_r: std::env::var("LR").map(|s| s.parse().unwrap()).unwrap_or(1.0),
        horizon: std::env::var("N").map(|s| s.parse().unwrap()).unwrap_or(25),
        exact_theta_mismatch: std::env::var("MISMATCH").is_ok(),
        state_floor_relax: if std::env::var("RELAX_WIDE").is_ok() {
            nalgebra::Vector4::new(0.05, 0.3, 0.05, 0.02)
        } else {
            nalgebra::Vector4::new(0.02, 0.05, 0.02, 0.01)
        },
        n_term: std::env::var("NTERM").map(|s| s.parse().unwrap()).unwrap_or(5),
        x_term: if std::env::var("XTERM_WIDE").is_ok() {
            nalgebra::Vector4::new(3.7, 1.0, 3.0, 5.0)
        } else {
            nalgebra::Vector4::new(3.7, 0.1, 3.0, 5.0)
        },
        ..MpcConfig::default()
    };
    let model = NominalModel::new(nominal, mpc.delta);
    let phi = |x: &State, u: Control| model.propagate(x, u, None);

    let x0 = State::batch_start();
    let traj = NominalTrajectory::initialize(&x0, mpc.u_recovery, mpc.horizon, None, &phi).unwrap();
    let lins = linearize_trajectory(&f_model, Some(&g_model), &traj).unwrap();
    let gains = lqr_gains(&lins, &mpc).unwrap();
    println!("K_0 = {:?}", gains.gains[0]);
    let w = if std::env::var("WZERO").is_ok() {
        DisturbanceBounds::zero()
    } else if let Ok(s) = std::env::var("WSCALE") {
        DisturbanceBounds::paper_floor().scale(s.parse().unwrap())
    } else if std::env::var("WVEC").is_ok() {
        DisturbanceBounds {
            lower: -nalgebra::Vector4::new(1.5e-4, 2e-4, 2e-5, 1e-4),
            upper: nalgebra::Vector4::new(1.5e-4, 2e-4, 2e-5, 1e-4),
        }
    } else {
        DisturbanceBounds::paper_floor()
    };
    println!("gains(0) preview after init below; W = {:?}", w.upper.transpose());
    println!("traj S: {:?}", traj.states.iter().map(|s| (s.substrate * 1e3).round() / 1e3).collect::<Vec<_>>());
    println!("traj X: {:?}", traj.states.iter().map(|s| (s.biomass * 1e3).round() / 1e3).collect::<Vec<_>>());

    for (name, theta_set) in [("nominal", None), ("robust", Some(ParamSet::initial_paper()))] {
        let t0 = std::time::Instant::now();
        let problem = build_problem(
            &ProblemInputs {
                traj: &traj,
                gains: &gains,
                lins: &lins,
                w: &w,
                theta_set: theta_set.as_ref(),
                x_now: x0.as_vector(),
                u_prev: mpc.u_recovery,
            },
            &f_model,
            Some(&g_model),
            &mpc,
        )
        .unwrap();
        let build_t = t0.elapsed();
        println!(
            "[{name}] vars={} rows={} counts={:?}",
            problem.n_variables(),
            problem.n_rows(),
            problem.counts
        );
        let t0 = std::time::Instant::now();
        match problem.solve().unwrap() {
            TubeOutcome::Feasible(sol) => {
                println!(
                    "[{name}] cost={:.4} gap={:.2e} viol={:.2e} build={:.2?} solve={:.2?}",
                    sol.cost, sol.epigraph_gap, sol.feasibility_violation, build_t, t0.elapsed()
                );
                println!(
                    "[{name}] c = {:?}",
                    sol.c.iter().map(|c| (c * 1e4).round() / 1e4).collect::<Vec<_>>()
                );
                println!(
                    "[{name}] widths = {:?}",
                    (0..=mpc.horizon).map(|k| (sol.tube.width(k) * 1e3).round() / 1e3).collect::<Vec<_>>()
                );

                // Monte Carlo containment: surrogate dynamics + w in W
                let mut rng = stream(7, Stream::MonteCarlo);
                let mut worst: f64 = f64::NEG_INFINITY;
                let mut violations = 0;
                for _ in 0..200 {
                    let theta = match &theta_set {
                        Some(set) => {
                            let v = set.vertices().unwrap();
                            let pick = (uniform(&mut rng, 0.0, 4.0)) as usize;
                            if uniform(&mut rng, 0.0, 1.0) < 0.5 {
                                v[pick.min(3)]
                            } else {
                                Vector2::new(
                                    uniform(&mut rng, set.lower()[0], set.upper()[0]),
                                    uniform(&mut rng, set.lower()[1], set.upper()[1]),
                                )
                            }
                        }
                        None => Vector2::zeros(),
                    };
                    let mut x = x0.as_vector();
                    for k in 0..mpc.horizon {
                        let s = x - traj.states[k].as_vector();
                        if !sol.tube.contains(k, &s, 1e-6) {
                            violations += 1;
                            break;
                        }
                        let margin = (0..4)
                            .map(|i| -s[i] - sol.tube.alpha[k][i])
                            .fold(s.sum() - sol.tube.beta[k], f64::max);
                        worst = worst.max(margin);
                        let u = traj.controls[k] + (gains.gains[k] * s)[0] + sol.c[k];
                        let wd = StateVec::from_fn(|i, _| uniform(&mut rng, w.lower[i], w.upper[i]));
                        x = if theta_set.is_some() {
                            discrete_step_uncertain(&f_model, &g_model, &theta, &x, u, &wd, mpc.delta).unwrap()
                        } else {
                            discrete_step(&f_model, &x, u, &wd, mpc.delta).unwrap()
                        };
                    }
                    let s = x - traj.states[mpc.horizon].as_vector();
                    if !sol.tube.contains(mpc.horizon, &s, 1e-6) {
                        violations += 1;
                    }
                }
                println!("[{name}] containment violations: {violations}/200, worst margin {worst:.2e}");
            }
            TubeOutcome::Infeasible => {
                let (slack, hist) = problem.diagnose_infeasibility().unwrap();
                println!("[{name}] INFEASIBLE: min slack {slack:.4e}, binding families {hist:?}");
                let (_, rows) = { // re-run to get raw indices
                    problem.raw_slack_rows().unwrap()
                };
                for r in rows.iter().take(30) {
                    println!("    {}", problem.locate_row(*r));
                }
            }
        }
    }
}
