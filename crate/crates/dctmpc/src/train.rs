//! Dataset generation and joint training of ICNN pairs.
//!
//! Two networks are trained simultaneously so that the difference of their
//! outputs fits the sampled target map (the plant right-hand side at nominal
//! parameters, or the uncertainty regressor). Kernel weights are projected
//! onto the non-negative orthant after every optimizer step, which keeps the
//! convex structure exact at all times.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icnn::{DcModel, IcnnLayer, IcnnParams, SamplingBox, TrainingMeta};
use crate::plant::{regressor_psi, rhs, Control, ModelParams, State, StateVec};
use crate::rng::{stream, uniform, Stream};

/// Which map the dataset targets sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMap {
    /// Plant right-hand side at nominal parameters (4 outputs).
    Rhs,
    /// Uncertainty regressor psi (2 outputs).
    Psi,
}

impl TargetMap {
    pub fn output_dim(&self) -> usize {
        match self {
            TargetMap::Rhs => 4,
            TargetMap::Psi => 2,
        }
    }
}

/// Sampled training data, stored column-per-sample.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Inputs (x, u), one column per sample (n_y x n).
    pub inputs: DMatrix<f64>,
    /// Targets, one column per sample (n_out x n).
    pub targets: DMatrix<f64>,
    /// Number of leading columns forming the training split; the rest are
    /// the validation split.
    pub n_train: usize,
    pub sampling_box: SamplingBox,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_val(&self) -> usize {
        self.len() - self.n_train
    }

    pub fn val_columns(&self) -> impl Iterator<Item = (DVector<f64>, DVector<f64>)> + '_ {
        (self.n_train..self.len())
            .map(|i| (self.inputs.column(i).into_owned(), self.targets.column(i).into_owned()))
    }
}

/// Default sampling box: the constraint boxes on (x, u).
pub fn constraint_box() -> SamplingBox {
    SamplingBox::new(
        DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.0]),
        DVector::from_vec(vec![3.7, 1.0, 3.0, 5.0, 0.2]),
    )
    .expect("static box is non-degenerate")
}

/// Draw `n` i.i.d. uniform samples of (x, u) over the box and evaluate the
/// target map at nominal parameters, with an 80/20 train/validation split.
pub fn generate_dataset(
    n: usize,
    sampling_box: &SamplingBox,
    nominal: &ModelParams,
    target: TargetMap,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::ModelInput("dataset size must be at least 1".into()));
    }
    if sampling_box.dim() != 5 {
        return Err(Error::ModelInput("sampling box must cover (x, u)".into()));
    }
    let mut rng = stream(seed, Stream::DatasetInputs);
    let n_out = target.output_dim();
    let mut inputs = DMatrix::zeros(5, n);
    let mut targets = DMatrix::zeros(n_out, n);
    for i in 0..n {
        let y = sampling_box.sample(&mut rng);
        let x = State::new(y[0], y[1], y[2], y[3]);
        let u = Control(y[4]);
        match target {
            TargetMap::Rhs => {
                let d = rhs(&x, u, nominal)?;
                targets.column_mut(i).copy_from(&DVector::from_column_slice(d.as_slice()));
            }
            TargetMap::Psi => {
                let psi = regressor_psi(&x, u, nominal)?;
                targets
                    .column_mut(i)
                    .copy_from(&DVector::from_column_slice(psi.as_slice()));
            }
        }
        inputs.column_mut(i).copy_from(&y);
    }
    Ok(Dataset {
        inputs,
        targets,
        n_train: n * 4 / 5,
        sampling_box: sampling_box.clone(),
    })
}

/// Training hyperparameters (RMSProp, mean-absolute-error loss).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// RMSProp moving-average decay.
    pub rho: f64,
    /// RMSProp denominator offset.
    pub epsilon: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 250,
            learning_rate: 1e-3,
            rho: 0.9,
            epsilon: 1e-7,
            batch_size: 256,
            seed: 0,
        }
    }
}

/// Network shape: hidden widths only; input/output dims come from the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: Vec<usize>,
}

impl Architecture {
    /// Pair approximating the plant right-hand side: two hidden layers of 32.
    pub fn rhs_pair() -> Self {
        Architecture { hidden: vec![32, 32] }
    }

    /// Pair approximating the regressor: two hidden layers of 16.
    pub fn psi_pair() -> Self {
        Architecture { hidden: vec![16, 16] }
    }
}

/// One epoch record of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
}

pub struct TrainOutcome {
    pub model: DcModel,
    pub log: Vec<EpochRecord>,
}

// Mutable training view of one network: parameters plus RMSProp accumulators.
struct NetState {
    layers: Vec<LayerState>,
    output: LayerState,
}

struct LayerState {
    kernel: Option<DMatrix<f64>>,
    passthrough: DMatrix<f64>,
    bias: DVector<f64>,
    acc_kernel: Option<DMatrix<f64>>,
    acc_passthrough: DMatrix<f64>,
    acc_bias: DVector<f64>,
}

impl LayerState {
    fn new(kernel: Option<DMatrix<f64>>, passthrough: DMatrix<f64>, bias: DVector<f64>) -> Self {
        LayerState {
            acc_kernel: kernel.as_ref().map(|k| DMatrix::zeros(k.nrows(), k.ncols())),
            acc_passthrough: DMatrix::zeros(passthrough.nrows(), passthrough.ncols()),
            acc_bias: DVector::zeros(bias.len()),
            kernel,
            passthrough,
            bias,
        }
    }
}

fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn init_net(
    arch: &Architecture,
    input_dim: usize,
    output_dim: usize,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> NetState {
    let mut layers = Vec::new();
    let mut prev = 0usize;
    for (l, &n) in arch.hidden.iter().enumerate() {
        // kernels start uniform in [0, limit] so the projection constraint is
        // satisfied from the first step; passthroughs are symmetric Glorot
        let kernel = if l == 0 {
            None
        } else {
            let lim = glorot_limit(prev, n);
            Some(DMatrix::from_fn(n, prev, |_, _| uniform(rng, 0.0, lim)))
        };
        let lim_h = glorot_limit(input_dim, n);
        layers.push(LayerState::new(
            kernel,
            DMatrix::from_fn(n, input_dim, |_, _| uniform(rng, -lim_h, lim_h)),
            DVector::zeros(n),
        ));
        prev = n;
    }
    let lim_k = glorot_limit(prev, output_dim);
    let lim_h = glorot_limit(input_dim, output_dim);
    let output = LayerState::new(
        Some(DMatrix::from_fn(output_dim, prev, |_, _| uniform(rng, 0.0, lim_k))),
        DMatrix::from_fn(output_dim, input_dim, |_, _| uniform(rng, -lim_h, lim_h)),
        DVector::zeros(output_dim),
    );
    NetState { layers, output }
}

// Batched forward pass; returns per-layer (pre-activations, activations)
// and the output, one column per sample.
fn forward_batch(net: &NetState, y: &DMatrix<f64>) -> (Vec<(DMatrix<f64>, DMatrix<f64>)>, DMatrix<f64>) {
    let n = y.ncols();
    let mut acts: Vec<(DMatrix<f64>, DMatrix<f64>)> = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        let mut pre = &layer.passthrough * y;
        if let (Some(k), Some((_, z))) = (&layer.kernel, acts.last()) {
            pre += k * z;
        }
        for c in 0..n {
            let mut col = pre.column_mut(c);
            col += &layer.bias;
        }
        let act = pre.map(|v| v.max(0.0));
        acts.push((pre, act));
    }
    let mut out = &net.output.passthrough * y;
    if let (Some(k), Some((_, z))) = (&net.output.kernel, acts.last()) {
        out += k * z;
    }
    for c in 0..n {
        let mut col = out.column_mut(c);
        col += &net.output.bias;
    }
    (acts, out)
}

struct LayerGrads {
    kernel: Option<DMatrix<f64>>,
    passthrough: DMatrix<f64>,
    bias: DVector<f64>,
}

// Backpropagate d(loss)/d(output) through one network.
fn backward_batch(
    net: &NetState,
    y: &DMatrix<f64>,
    acts: &[(DMatrix<f64>, DMatrix<f64>)],
    d_out: &DMatrix<f64>,
) -> Vec<LayerGrads> {
    let n_layers = net.layers.len();
    let mut grads: Vec<Option<LayerGrads>> = (0..=n_layers).map(|_| None).collect();

    let last_act = &acts[n_layers - 1].1;
    grads[n_layers] = Some(LayerGrads {
        kernel: Some(d_out * last_act.transpose()),
        passthrough: d_out * y.transpose(),
        bias: sum_columns(d_out),
    });
    let mut d_z = net.output.kernel.as_ref().expect("output kernel").transpose() * d_out;

    for l in (0..n_layers).rev() {
        let (pre, _) = &acts[l];
        let mut d_pre = d_z.clone();
        for r in 0..d_pre.nrows() {
            for c in 0..d_pre.ncols() {
                if pre[(r, c)] <= 0.0 {
                    d_pre[(r, c)] = 0.0;
                }
            }
        }
        let kernel_grad = if l == 0 {
            None
        } else {
            Some(&d_pre * acts[l - 1].1.transpose())
        };
        if l > 0 {
            d_z = net.layers[l].kernel.as_ref().expect("kernel").transpose() * &d_pre;
        }
        grads[l] = Some(LayerGrads {
            kernel: kernel_grad,
            passthrough: &d_pre * y.transpose(),
            bias: sum_columns(&d_pre),
        });
    }
    grads.into_iter().map(|g| g.expect("grad filled")).collect()
}

fn sum_columns(m: &DMatrix<f64>) -> DVector<f64> {
    let mut v = DVector::zeros(m.nrows());
    for c in 0..m.ncols() {
        v += m.column(c);
    }
    v
}

fn rmsprop_update(
    value: &mut DMatrix<f64>,
    acc: &mut DMatrix<f64>,
    grad: &DMatrix<f64>,
    cfg: &TrainConfig,
    project: bool,
) {
    for ((v, a), g) in value.iter_mut().zip(acc.iter_mut()).zip(grad.iter()) {
        *a = cfg.rho * *a + (1.0 - cfg.rho) * g * g;
        *v -= cfg.learning_rate * g / (a.sqrt() + cfg.epsilon);
        if project && *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn rmsprop_update_vec(value: &mut DVector<f64>, acc: &mut DVector<f64>, grad: &DVector<f64>, cfg: &TrainConfig) {
    for ((v, a), g) in value.iter_mut().zip(acc.iter_mut()).zip(grad.iter()) {
        *a = cfg.rho * *a + (1.0 - cfg.rho) * g * g;
        *v -= cfg.learning_rate * g / (a.sqrt() + cfg.epsilon);
    }
}

fn apply_grads(net: &mut NetState, grads: &[LayerGrads], cfg: &TrainConfig) {
    let n_layers = net.layers.len();
    for (l, layer) in net.layers.iter_mut().enumerate() {
        let g = &grads[l];
        if let (Some(k), Some(a), Some(gk)) = (&mut layer.kernel, &mut layer.acc_kernel, &g.kernel) {
            rmsprop_update(k, a, gk, cfg, true);
        }
        rmsprop_update(&mut layer.passthrough, &mut layer.acc_passthrough, &g.passthrough, cfg, false);
        rmsprop_update_vec(&mut layer.bias, &mut layer.acc_bias, &g.bias, cfg);
    }
    let g = &grads[n_layers];
    if let (Some(k), Some(a), Some(gk)) = (
        &mut net.output.kernel,
        &mut net.output.acc_kernel,
        &g.kernel,
    ) {
        rmsprop_update(k, a, gk, cfg, true);
    }
    rmsprop_update(
        &mut net.output.passthrough,
        &mut net.output.acc_passthrough,
        &g.passthrough,
        cfg,
        false,
    );
    rmsprop_update_vec(&mut net.output.bias, &mut net.output.acc_bias, &g.bias, cfg);
}

fn net_to_params(net: &NetState, input_dim: usize, output_dim: usize, scale_w: &DVector<f64>, scale_b: &DVector<f64>) -> IcnnParams {
    IcnnParams {
        input_dim,
        output_dim,
        hidden: net
            .layers
            .iter()
            .map(|l| IcnnLayer {
                kernel: l.kernel.clone(),
                passthrough: l.passthrough.clone(),
                bias: l.bias.clone(),
            })
            .collect(),
        output: IcnnLayer {
            kernel: net.output.kernel.clone(),
            passthrough: net.output.passthrough.clone(),
            bias: net.output.bias.clone(),
        },
        scale_w: scale_w.clone(),
        scale_b: scale_b.clone(),
    }
}

fn min_kernel_entry(net: &NetState) -> f64 {
    let mut min = f64::INFINITY;
    for layer in &net.layers {
        if let Some(k) = &layer.kernel {
            min = min.min(k.iter().cloned().fold(f64::INFINITY, f64::min));
        }
    }
    if let Some(k) = &net.output.kernel {
        min = min.min(k.iter().cloned().fold(f64::INFINITY, f64::min));
    }
    min
}

/// Train a pair of ICNNs so their difference fits the dataset targets,
/// minimizing mean absolute error with RMSProp and projecting kernel weights
/// to the non-negative orthant after every step.
pub fn train_dc_pair(data: &Dataset, arch: &Architecture, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if data.is_empty() || data.n_train == 0 {
        return Err(Error::ModelInput("empty training split".into()));
    }
    let input_dim = data.inputs.nrows();
    let output_dim = data.targets.nrows();
    let (scale_w, scale_b) = data.sampling_box.unit_scaling();

    // pre-scale inputs once; the scaling map is stored with the weights
    let mut scaled = data.inputs.clone();
    for c in 0..scaled.ncols() {
        for r in 0..input_dim {
            scaled[(r, c)] = scaled[(r, c)] * scale_w[r] + scale_b[r];
        }
    }

    // Balance the loss across output components by training against
    // range-normalized targets. The positive per-component factor is folded
    // back into the affine output layers afterwards, which preserves the
    // non-negative kernel structure, so released models are unscaled.
    let mut target_scale = DVector::from_element(output_dim, 1.0);
    for r in 0..output_dim {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in 0..data.len() {
            lo = lo.min(data.targets[(r, c)]);
            hi = hi.max(data.targets[(r, c)]);
        }
        let range = (hi - lo).max(1e-9);
        target_scale[r] = 1.0 / range;
    }
    let mut norm_targets = data.targets.clone();
    for r in 0..output_dim {
        for c in 0..norm_targets.ncols() {
            norm_targets[(r, c)] *= target_scale[r];
        }
    }

    let mut rng = stream(cfg.seed, Stream::WeightInit);
    let mut net1 = init_net(arch, input_dim, output_dim, &mut rng);
    let mut net2 = init_net(arch, input_dim, output_dim, &mut rng);

    let mut shuffle_rng = stream(cfg.seed, Stream::BatchShuffle);
    let mut order: Vec<usize> = (0..data.n_train).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    let val_scaled = scaled.columns(data.n_train, data.n_val()).into_owned();
    let val_targets = data.targets.columns(data.n_train, data.n_val()).into_owned();
    let inv_scale = target_scale.map(|s| 1.0 / s);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut abs_sum = 0.0;
        let mut count = 0usize;

        let mut start = 0;
        while start < data.n_train {
            let end = (start + cfg.batch_size).min(data.n_train);
            let cols: Vec<usize> = order[start..end].to_vec();
            let y = scaled.select_columns(&cols);
            let t = norm_targets.select_columns(&cols);

            let (acts1, out1) = forward_batch(&net1, &y);
            let (acts2, out2) = forward_batch(&net2, &y);
            let resid = &out1 - &out2 - &t;
            if resid.iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainingDiverged(format!(
                    "non-finite residual at epoch {epoch}"
                )));
            }
            for r in 0..output_dim {
                for c in 0..resid.ncols() {
                    abs_sum += (resid[(r, c)] * inv_scale[r]).abs();
                }
            }
            count += resid.len();

            // MAE subgradient, averaged over batch entries
            let scale = 1.0 / resid.len() as f64;
            let d_out1 = resid.map(|v| scale * v.signum());
            let d_out2 = d_out1.map(|v| -v);

            let g1 = backward_batch(&net1, &y, &acts1, &d_out1);
            let g2 = backward_batch(&net2, &y, &acts2, &d_out2);
            apply_grads(&mut net1, &g1, cfg);
            apply_grads(&mut net2, &g2, cfg);

            start = end;
        }

        debug_assert!(min_kernel_entry(&net1) >= 0.0 && min_kernel_entry(&net2) >= 0.0);

        let val_mae = if data.n_val() > 0 {
            let (_, o1) = forward_batch(&net1, &val_scaled);
            let (_, o2) = forward_batch(&net2, &val_scaled);
            let mut r = o1 - o2;
            for row in 0..output_dim {
                for c in 0..r.ncols() {
                    r[(row, c)] = r[(row, c)] * inv_scale[row] - val_targets[(row, c)];
                }
            }
            r.iter().map(|v| v.abs()).sum::<f64>() / r.len() as f64
        } else {
            f64::NAN
        };
        log.push(EpochRecord {
            epoch,
            train_mae: abs_sum / count as f64,
            val_mae,
        });
    }

    for net in [&mut net1, &mut net2] {
        if let Some(k) = &mut net.output.kernel {
            for r in 0..output_dim {
                for c in 0..k.ncols() {
                    k[(r, c)] *= inv_scale[r];
                }
            }
        }
        for r in 0..output_dim {
            for c in 0..net.output.passthrough.ncols() {
                net.output.passthrough[(r, c)] *= inv_scale[r];
            }
            net.output.bias[r] *= inv_scale[r];
        }
    }
    let f1 = net_to_params(&net1, input_dim, output_dim, &scale_w, &scale_b);
    let f2 = net_to_params(&net2, input_dim, output_dim, &scale_w, &scale_b);
    let model = DcModel {
        f1,
        f2,
        sampling_box: data.sampling_box.clone(),
        meta: TrainingMeta {
            seed: cfg.seed,
            epochs: cfg.epochs,
            samples: data.len(),
            train_mae: log.last().map(|r| r.train_mae).unwrap_or(f64::NAN),
            val_mae: log.last().map(|r| r.val_mae).unwrap_or(f64::NAN),
        },
    };
    model.validate()?;
    Ok(TrainOutcome { model, log })
}

/// Box bound on the additive discrete-time disturbance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceBounds {
    pub lower: StateVec,
    pub upper: StateVec,
}

impl DisturbanceBounds {
    /// The bound vector used in the closed-loop study:
    /// |w| <= (1e-2, 1e-3, 1e-3, 1e-2).
    pub fn paper_floor() -> Self {
        let v = StateVec::new(1e-2, 1e-3, 1e-3, 1e-2);
        DisturbanceBounds { lower: -v, upper: v }
    }

    pub fn zero() -> Self {
        DisturbanceBounds {
            lower: StateVec::zeros(),
            upper: StateVec::zeros(),
        }
    }

    /// Componentwise minimum of w over the box.
    pub fn w_min(&self) -> StateVec {
        self.lower
    }

    /// max over the box of 1^T w.
    pub fn w_max_sum(&self) -> f64 {
        self.upper.sum()
    }

    pub fn contains(&self, w: &StateVec, slack: f64) -> bool {
        (0..4).all(|i| w[i] >= self.lower[i] - slack && w[i] <= self.upper[i] + slack)
    }

    pub fn scale(&self, factor: f64) -> Self {
        DisturbanceBounds {
            lower: self.lower * factor,
            upper: self.upper * factor,
        }
    }
}

/// Estimate disturbance bounds from validation residuals of the model:
/// the componentwise range of `delta * (target - dc_eval)`, inflated, and
/// never shrunk below the floor.
pub fn estimate_disturbance_bounds(
    dc: &DcModel,
    data: &Dataset,
    delta: f64,
    inflation: f64,
    floor: &DisturbanceBounds,
) -> Result<DisturbanceBounds> {
    if data.n_val() == 0 {
        return Err(Error::ModelInput("validation split is empty".into()));
    }
    let n_out = dc.output_dim();
    if n_out != 4 {
        return Err(Error::ModelInput(
            "disturbance bounds apply to the state-dimension model".into(),
        ));
    }
    let mut lo = StateVec::zeros();
    let mut hi = StateVec::zeros();
    for (y, t) in data.val_columns() {
        let r = (t - dc.dc_eval(&y)?) * delta;
        for i in 0..4 {
            lo[i] = lo[i].min(r[i]);
            hi[i] = hi[i].max(r[i]);
        }
    }
    let mut bounds = DisturbanceBounds {
        lower: lo * inflation,
        upper: hi * inflation,
    };
    for i in 0..4 {
        bounds.lower[i] = bounds.lower[i].min(floor.lower[i]);
        bounds.upper[i] = bounds.upper[i].max(floor.upper[i]);
    }
    Ok(bounds)
}
