// temporary probe for affine-target convergence
use dctmpc::rng::{stream, Stream};
use dctmpc::train::*;
use nalgebra::DMatrix;

fn main() {
    let n = 10000;
    let sampling_box = constraint_box();
    let mut rng = stream(3, Stream::DatasetInputs);
    let mut inputs = DMatrix::zeros(5, n);
    let mut targets = DMatrix::zeros(2, n);
    for i in 0..n {
        let y = sampling_box.sample(&mut rng);
        targets[(0, i)] = 0.1 * y[0] - 0.1 * y[1] + 0.05;
        targets[(1, i)] = -0.04 * y[3] + 0.5 * y[4];
        inputs.column_mut(i).copy_from(&y);
    }
    let data = Dataset { inputs, targets, n_train: n * 4 / 5, sampling_box };
    for (w, lr, epochs) in [(4usize, 3e-5, 3000)] {
        let cfg = TrainConfig { epochs, learning_rate: lr, seed: 7, ..TrainConfig::default() };
        let t0 = std::time::Instant::now();
        let out = train_dc_pair(&data, &Architecture { hidden: vec![w, w] }, &cfg).unwrap();
        println!("affine w={w} lr={lr:.0e} epochs={epochs}: val MAE {:.6e}  ({:.1?})", out.model.meta.val_mae, t0.elapsed());
    }
}
