//! Input-convex neural networks and the difference-of-convex model pair.
//!
//! A network is a stack of ReLU layers z_{l+1} = max(G_l z_l + H_l y + b_l, 0)
//! with non-negative kernel weights G_l, followed by an affine output layer
//! with a non-negative kernel on the last activation. Every output component
//! is then a convex function of the input y. Inputs are affinely scaled to
//! [0, 1] per component over the sampling box before the first layer; the
//! scaling is stored with the weights so a serialized model is
//! self-contained.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, uniform, Stream};

/// One layer: `pre = kernel * z + passthrough * y + bias`.
///
/// `kernel` is `None` for the first hidden layer (there is no previous
/// activation) and must be entrywise non-negative everywhere else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcnnLayer {
    pub kernel: Option<DMatrix<f64>>,
    pub passthrough: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl IcnnLayer {
    pub fn output_dim(&self) -> usize {
        self.bias.len()
    }

    fn min_kernel_entry(&self) -> f64 {
        self.kernel
            .as_ref()
            .map(|k| k.iter().cloned().fold(f64::INFINITY, f64::min))
            .unwrap_or(f64::INFINITY)
    }
}

/// Parameters of one input-convex network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcnnParams {
    pub input_dim: usize,
    pub output_dim: usize,
    /// ReLU hidden layers, in evaluation order.
    pub hidden: Vec<IcnnLayer>,
    /// Affine output layer; its kernel weight on the last activation must be
    /// non-negative, the input passthrough is unconstrained.
    pub output: IcnnLayer,
    /// Input scaling: y_scaled = scale_w .* y + scale_b (componentwise).
    pub scale_w: DVector<f64>,
    pub scale_b: DVector<f64>,
}

impl IcnnParams {
    /// Identity scaling constructor for hand-built networks.
    pub fn with_identity_scaling(
        input_dim: usize,
        output_dim: usize,
        hidden: Vec<IcnnLayer>,
        output: IcnnLayer,
    ) -> Self {
        IcnnParams {
            input_dim,
            output_dim,
            hidden,
            output,
            scale_w: DVector::from_element(input_dim, 1.0),
            scale_b: DVector::zeros(input_dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale_w.len() != self.input_dim || self.scale_b.len() != self.input_dim {
            return Err(Error::Network("input scaling dimension mismatch".into()));
        }
        let mut prev = 0usize;
        for (l, layer) in self.hidden.iter().enumerate() {
            let n = layer.output_dim();
            if layer.passthrough.nrows() != n || layer.passthrough.ncols() != self.input_dim {
                return Err(Error::Network(format!("hidden layer {l}: passthrough shape")));
            }
            match (&layer.kernel, l) {
                (Some(_), 0) => {
                    return Err(Error::Network("first hidden layer must have no kernel".into()))
                }
                (None, l) if l > 0 => {
                    return Err(Error::Network(format!("hidden layer {l}: kernel missing")))
                }
                (Some(k), _) => {
                    if k.nrows() != n || k.ncols() != prev {
                        return Err(Error::Network(format!("hidden layer {l}: kernel shape")));
                    }
                }
                (None, _) => {}
            }
            if layer.min_kernel_entry() < 0.0 {
                return Err(Error::Network(format!(
                    "hidden layer {l}: negative kernel entry {}",
                    layer.min_kernel_entry()
                )));
            }
            prev = n;
        }
        let out = &self.output;
        if out.output_dim() != self.output_dim
            || out.passthrough.nrows() != self.output_dim
            || out.passthrough.ncols() != self.input_dim
        {
            return Err(Error::Network("output layer shape".into()));
        }
        match &out.kernel {
            Some(k) if k.nrows() == self.output_dim && k.ncols() == prev => {}
            _ => return Err(Error::Network("output kernel shape".into())),
        }
        if out.min_kernel_entry() < 0.0 {
            return Err(Error::Network(format!(
                "output layer: negative kernel entry {}",
                out.min_kernel_entry()
            )));
        }
        Ok(())
    }

    pub fn scaled_input(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut s = y.component_mul(&self.scale_w);
        s += &self.scale_b;
        s
    }

    /// Evaluate the network, returning all hidden activations alongside the
    /// output (the activations are the tight values of the layerwise
    /// epigraph encoding used by the conic problem).
    pub fn forward_full(&self, y: &DVector<f64>) -> Result<(Vec<DVector<f64>>, DVector<f64>)> {
        if y.len() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: y.len(),
            });
        }
        self.validate()?;
        let ys = self.scaled_input(y);
        let mut activations: Vec<DVector<f64>> = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let mut pre = &layer.passthrough * &ys + &layer.bias;
            if let (Some(k), Some(z)) = (&layer.kernel, activations.last()) {
                pre += k * z;
            }
            activations.push(pre.map(|v| v.max(0.0)));
        }
        let mut out = &self.output.passthrough * &ys + &self.output.bias;
        if let (Some(k), Some(z)) = (&self.output.kernel, activations.last()) {
            out += k * z;
        }
        Ok((activations, out))
    }

    pub fn forward(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.forward_full(y)?.1)
    }

    /// Exact Jacobian of the active ReLU region with respect to the raw
    /// (unscaled) input; the subgradient at a kink is taken as 0.
    pub fn jacobian(&self, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        if y.len() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: y.len(),
            });
        }
        self.validate()?;
        let ys = self.scaled_input(y);
        // dy_scaled/dy = diag(scale_w)
        let jac = DMatrix::from_fn(self.input_dim, self.input_dim, |r, c| {
            if r == c {
                self.scale_w[r]
            } else {
                0.0
            }
        });
        let mut activation: Option<DVector<f64>> = None;
        let mut act_jac: Option<DMatrix<f64>> = None;
        for layer in &self.hidden {
            let mut pre = &layer.passthrough * &ys + &layer.bias;
            let mut pre_jac = &layer.passthrough * &jac;
            if let (Some(k), Some(z), Some(zj)) = (&layer.kernel, &activation, &act_jac) {
                pre += k * z;
                pre_jac += k * zj;
            }
            for (r, p) in pre.iter().enumerate() {
                if *p <= 0.0 {
                    pre_jac.row_mut(r).fill(0.0);
                }
            }
            activation = Some(pre.map(|v| v.max(0.0)));
            act_jac = Some(pre_jac);
        }
        let mut out_jac = &self.output.passthrough * &jac;
        if let (Some(k), Some(zj)) = (&self.output.kernel, &act_jac) {
            out_jac += k * zj;
        }
        Ok(out_jac)
    }
}

/// Jacobian of a network split into state and control blocks.
#[derive(Debug, Clone)]
pub struct Linearization {
    /// d out / d x at the expansion point (n_out x n_x).
    pub a: DMatrix<f64>,
    /// d out / d u at the expansion point (n_out x n_u).
    pub b: DMatrix<f64>,
    /// Network value at the expansion point.
    pub value: DVector<f64>,
}

impl Linearization {
    pub fn at(net: &IcnnParams, y: &DVector<f64>, n_x: usize) -> Result<Self> {
        let jac = net.jacobian(y)?;
        let value = net.forward(y)?;
        Ok(Linearization {
            a: jac.columns(0, n_x).into_owned(),
            b: jac.columns(n_x, jac.ncols() - n_x).into_owned(),
            value,
        })
    }
}

/// Metadata recorded with a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub samples: usize,
    pub train_mae: f64,
    pub val_mae: f64,
}

/// Axis-aligned sampling box for network inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl SamplingBox {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.iter().zip(upper.iter()).any(|(l, u)| l >= u) {
            return Err(Error::ModelInput("degenerate sampling box".into()));
        }
        Ok(SamplingBox { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn sample(&self, rng: &mut rand_chacha::ChaCha12Rng) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| uniform(rng, self.lower[i], self.upper[i]))
    }

    /// Scaling map sending the box onto [0, 1] per component.
    pub fn unit_scaling(&self) -> (DVector<f64>, DVector<f64>) {
        let w = DVector::from_fn(self.dim(), |i, _| 1.0 / (self.upper[i] - self.lower[i]));
        let b = DVector::from_fn(self.dim(), |i, _| -self.lower[i] / (self.upper[i] - self.lower[i]));
        (w, b)
    }
}

/// A difference-of-convex surrogate: dc_eval(y) = f1(y) - f2(y).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcModel {
    pub f1: IcnnParams,
    pub f2: IcnnParams,
    pub sampling_box: SamplingBox,
    pub meta: TrainingMeta,
}

impl DcModel {
    pub fn validate(&self) -> Result<()> {
        self.f1.validate()?;
        self.f2.validate()?;
        if self.f1.input_dim != self.f2.input_dim || self.f1.output_dim != self.f2.output_dim {
            return Err(Error::Network("pair signatures differ".into()));
        }
        if self.sampling_box.dim() != self.f1.input_dim {
            return Err(Error::Network("sampling box dimension mismatch".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.f1.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.f1.output_dim
    }

    pub fn dc_eval(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.f1.forward(y)? - self.f2.forward(y)?)
    }

    /// Convenience wrapper packing (x, u) into the network input.
    pub fn dc_eval_xu(&self, x: &crate::plant::StateVec, u: f64) -> Result<DVector<f64>> {
        self.dc_eval(&pack_input(x, u))
    }
}

/// Network input layout: (x_1..x_{n_x}, u).
pub fn pack_input(x: &crate::plant::StateVec, u: f64) -> DVector<f64> {
    let mut y = DVector::zeros(x.len() + 1);
    for i in 0..x.len() {
        y[i] = x[i];
    }
    y[x.len()] = u;
    y
}

/// Result of the structural and sampled convexity checks.
#[derive(Debug, Clone, Serialize)]
pub struct ConvexityReport {
    /// All kernel weights non-negative (sufficient for convexity).
    pub structural_pass: bool,
    pub min_kernel_entry: f64,
    /// Sampled midpoint check: f((a+b)/2) <= (f(a)+f(b))/2 + tol.
    pub sampled_pass: bool,
    pub worst_violation: f64,
    pub pairs_checked: usize,
}

impl ConvexityReport {
    pub fn pass(&self) -> bool {
        self.structural_pass && self.sampled_pass
    }
}

pub const MIDPOINT_TOL: f64 = 1e-9;

/// Check convexity of every output component: structurally via the weight
/// sign invariant, and statistically via midpoint sampling over the box.
pub fn verify_convexity(
    net: &IcnnParams,
    sampling_box: &SamplingBox,
    n_samples: usize,
    seed: u64,
) -> ConvexityReport {
    let mut min_kernel = f64::INFINITY;
    for layer in net.hidden.iter().chain(std::iter::once(&net.output)) {
        min_kernel = min_kernel.min(layer.min_kernel_entry());
    }
    let structural_pass = min_kernel >= 0.0;

    let mut rng = stream(seed, Stream::MonteCarlo);
    let mut worst: f64 = 0.0;
    for _ in 0..n_samples {
        let a = sampling_box.sample(&mut rng);
        let b = sampling_box.sample(&mut rng);
        let mid = (&a + &b) * 0.5;
        let (fa, fb, fm) = match (net.forward(&a), net.forward(&b), net.forward(&mid)) {
            (Ok(fa), Ok(fb), Ok(fm)) => (fa, fb, fm),
            // forward rejects structurally invalid nets; fall back to raw
            // evaluation so the sampled check still reports on them
            _ => (
                forward_unchecked(net, &a),
                forward_unchecked(net, &b),
                forward_unchecked(net, &mid),
            ),
        };
        for i in 0..fm.len() {
            let violation = fm[i] - 0.5 * (fa[i] + fb[i]);
            worst = worst.max(violation);
        }
    }
    ConvexityReport {
        structural_pass,
        min_kernel_entry: min_kernel,
        sampled_pass: worst <= MIDPOINT_TOL,
        worst_violation: worst,
        pairs_checked: n_samples,
    }
}

/// Forward pass without invariant validation, for report-only checks of
/// possibly-invalid networks.
pub fn forward_unchecked(net: &IcnnParams, y: &DVector<f64>) -> DVector<f64> {
    let ys = net.scaled_input(y);
    let mut activation: Option<DVector<f64>> = None;
    for layer in &net.hidden {
        let mut pre = &layer.passthrough * &ys + &layer.bias;
        if let (Some(k), Some(z)) = (&layer.kernel, &activation) {
            pre += k * z;
        }
        activation = Some(pre.map(|v| v.max(0.0)));
    }
    let mut out = &net.output.passthrough * &ys + &net.output.bias;
    if let (Some(k), Some(z)) = (&net.output.kernel, &activation) {
        out += k * z;
    }
    out
}

// ---------------------------------------------------------------------------
// Model file schema
// ---------------------------------------------------------------------------

pub const MODEL_SCHEMA: &str = "dc-model/1";

/// Row-major matrix representation for the model file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileMatrix(Vec<Vec<f64>>);

impl FileMatrix {
    fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        FileMatrix((0..m.nrows()).map(|r| m.row(r).iter().cloned().collect()).collect())
    }

    fn to_dmatrix(&self) -> Result<DMatrix<f64>> {
        let rows = self.0.len();
        let cols = self.0.first().map(|r| r.len()).unwrap_or(0);
        if self.0.iter().any(|r| r.len() != cols) {
            return Err(Error::Serialization("ragged matrix rows".into()));
        }
        Ok(DMatrix::from_fn(rows, cols, |r, c| self.0[r][c]))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileLayer {
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel: Option<FileMatrix>,
    passthrough: FileMatrix,
    bias: Vec<f64>,
}

impl FileLayer {
    fn from_layer(l: &IcnnLayer) -> Self {
        FileLayer {
            kernel: l.kernel.as_ref().map(FileMatrix::from_dmatrix),
            passthrough: FileMatrix::from_dmatrix(&l.passthrough),
            bias: l.bias.iter().cloned().collect(),
        }
    }

    fn to_layer(&self) -> Result<IcnnLayer> {
        Ok(IcnnLayer {
            kernel: self.kernel.as_ref().map(|k| k.to_dmatrix()).transpose()?,
            passthrough: self.passthrough.to_dmatrix()?,
            bias: DVector::from_vec(self.bias.clone()),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileNet {
    hidden: Vec<FileLayer>,
    output: FileLayer,
}

/// On-disk model document (JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema: String,
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub scale_w: Vec<f64>,
    pub scale_b: Vec<f64>,
    pub box_lower: Vec<f64>,
    pub box_upper: Vec<f64>,
    f1: FileNet,
    f2: FileNet,
    pub training: TrainingMeta,
}

impl ModelFile {
    pub fn from_model(m: &DcModel) -> Self {
        ModelFile {
            schema: MODEL_SCHEMA.to_string(),
            input_dim: m.f1.input_dim,
            output_dim: m.f1.output_dim,
            hidden_dims: m.f1.hidden.iter().map(|l| l.output_dim()).collect(),
            scale_w: m.f1.scale_w.iter().cloned().collect(),
            scale_b: m.f1.scale_b.iter().cloned().collect(),
            box_lower: m.sampling_box.lower.iter().cloned().collect(),
            box_upper: m.sampling_box.upper.iter().cloned().collect(),
            f1: FileNet {
                hidden: m.f1.hidden.iter().map(FileLayer::from_layer).collect(),
                output: FileLayer::from_layer(&m.f1.output),
            },
            f2: FileNet {
                hidden: m.f2.hidden.iter().map(FileLayer::from_layer).collect(),
                output: FileLayer::from_layer(&m.f2.output),
            },
            training: m.training_meta(),
        }
    }

    pub fn into_model(self) -> Result<DcModel> {
        if self.schema != MODEL_SCHEMA {
            return Err(Error::Serialization(format!(
                "unsupported model schema {:?}",
                self.schema
            )));
        }
        let scale_w = DVector::from_vec(self.scale_w.clone());
        let scale_b = DVector::from_vec(self.scale_b.clone());
        let build = |net: &FileNet| -> Result<IcnnParams> {
            Ok(IcnnParams {
                input_dim: self.input_dim,
                output_dim: self.output_dim,
                hidden: net.hidden.iter().map(|l| l.to_layer()).collect::<Result<_>>()?,
                output: net.output.to_layer()?,
                scale_w: scale_w.clone(),
                scale_b: scale_b.clone(),
            })
        };
        let model = DcModel {
            f1: build(&self.f1)?,
            f2: build(&self.f2)?,
            sampling_box: SamplingBox::new(
                DVector::from_vec(self.box_lower),
                DVector::from_vec(self.box_upper),
            )?,
            meta: self.training,
        };
        model.validate()?;
        Ok(model)
    }
}

impl DcModel {
    fn training_meta(&self) -> TrainingMeta {
        self.meta.clone()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let doc = ModelFile::from_model(self);
        let json = serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let doc: ModelFile =
            serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))?;
        doc.into_model()
    }
}
