// temporary probe: one-step defect field statistics
use dctmpc::icnn::pack_input;
use dctmpc::plant::{integrate_step, Control, ModelParams, State};
use dctmpc::rng::{stream, uniform, Stream};
use dctmpc::train::constraint_box;

fn main() {
    let f_model = dctmpc::icnn::DcModel::load(std::path::Path::new("/tmp/dctmpc_models/f.json")).unwrap();
    let nominal = ModelParams::nominal();
    let sampling_box = if std::env::var("OPERATING").is_ok() {
        dctmpc::icnn::SamplingBox::new(
            nalgebra::DVector::from_vec(vec![0.8, 0.0, 0.0, 0.0, 0.0]),
            nalgebra::DVector::from_vec(vec![3.7, 0.8, 1.5, 3.0, 0.12]),
        )
        .unwrap()
    } else {
        constraint_box()
    };
    let mut rng = stream(3, Stream::MonteCarlo);
    let mut max_abs = [0.0f64; 4];
    let mut q: Vec<Vec<f64>> = vec![Vec::new(); 4];
    for _ in 0..20000 {
        let y = sampling_box.sample(&mut rng);
        let x = State::new(y[0], y[1], y[2], y[3]);
        let u = Control(y[4]);
        let next = integrate_step(&x, u, &nominal, 1.0, None).unwrap();
        let dc = f_model.dc_eval(&pack_input(&x.as_vector(), y[4])).unwrap();
        for i in 0..4 {
            let d = next.as_vector()[i] - x.as_vector()[i] - dc[i];
            max_abs[i] = max_abs[i].max(d.abs());
            q[i].push(d.abs());
        }
    }
    for i in 0..4 {
        q[i].sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = q[i].len();
        println!(
            "comp {i}: mean {:.2e}  q90 {:.2e}  q99 {:.2e}  q999 {:.2e}  max {:.2e}",
            q[i].iter().sum::<f64>() / n as f64,
            q[i][(n as f64 * 0.90) as usize],
            q[i][(n as f64 * 0.99) as usize],
            q[i][(n as f64 * 0.999) as usize],
            max_abs[i]
        );
    }
    // and along the u_r-hold trajectory from batch start
    let mut x = State::batch_start();
    let mut acc = [0.0f64; 4];
    for k in 0..25 {
        let next = integrate_step(&x, Control(0.01), &nominal, 1.0, None).unwrap();
        let dc = f_model.dc_eval(&pack_input(&x.as_vector(), 0.01)).unwrap();
        let mut row = [0.0; 4];
        for i in 0..4 {
            row[i] = next.as_vector()[i] - x.as_vector()[i] - dc[i];
            acc[i] += row[i];
        }
        if k % 4 == 0 {
            println!("traj k={k:2}: defect {:?}", row.map(|v| (v * 1e5).round() / 1e5));
        }
        x = next;
    }
    println!("accumulated signed defect along traj: {:?}", acc.map(|v| (v * 1e4).round() / 1e4));
}
