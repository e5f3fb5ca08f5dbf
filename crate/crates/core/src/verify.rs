//! Self-checks: finite-difference gradient checks for every layer and for the whole
//! objective, agreement of the two descent algorithms, and propagation counts.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::Serialize;

use crate::data::{ClassId, Dataset, LabeledImage};
use crate::error::Result;
use crate::loss::{distance_diffs, objective, ImageTable, LossConfig, Triplet};
use crate::nn::{
    conv2d_backward, conv2d_forward, fc_backward, fc_forward, l2_normalize, l2_normalize_backward,
    maxpool_backward, maxpool_forward, relu, relu_backward, ArchitectureConfig, Network,
    ActivationPattern, NetworkParams, ParamGroup,
};
use crate::tensor::Tensor;
use crate::train::{generate_triplets, image_based_gradient, triplet_based_gradient};

pub const LAYER_STEP: f64 = 1e-6;
pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const NETWORK_STEP: f64 = 1e-5;
pub const NETWORK_TOLERANCE: f64 = 1e-4;
/// Largest probe step at the initialized network, whose fc output is tiny; see
/// [`probe_network`]. The step also shrinks with the smallest fc output norm.
pub const INIT_NETWORK_STEP: f64 = 1e-7;
/// At most one coordinate in this many may be skipped for crossing a kink.
const MAX_SKIPPED_DENOMINATOR: usize = 20;
const MAX_INSTANCE_DRAWS: usize = 5;
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-10;

/// Layer whose analytic gradient can be deliberately corrupted, for negative controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv,
    MaxPool,
    Relu,
    Fc,
    L2Normalize,
}

impl Layer {
    pub const ALL: [Layer; 5] = [Layer::Conv, Layer::MaxPool, Layer::Relu, Layer::Fc, Layer::L2Normalize];

    pub fn name(self) -> &'static str {
        match self {
            Layer::Conv => "conv",
            Layer::MaxPool => "maxpool",
            Layer::Relu => "relu",
            Layer::Fc => "fc",
            Layer::L2Normalize => "l2norm",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.name() == name)
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: Option<Layer>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// Largest observed error (relative, or a count mismatch for counting checks).
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Coordinates left out because the probe crossed a kink.
    pub skipped: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            write!(
                f,
                "{:<4} {:<48} max error {:.3e} (tolerance {:.0e})",
                if c.passed { "ok" } else { "FAIL" },
                c.name,
                c.max_error,
                c.tolerance
            )?;
            if c.skipped > 0 {
                write!(f, " [{} kink crossing(s) skipped]", c.skipped)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// `||a - b||₂ / max(||a||₂, ||b||₂)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_differences(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe)?;
        probe[i] = orig - step;
        let minus = f(&probe)?;
        probe[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn corrupt(grad: &mut [f64], layer: Layer, fault: Option<Layer>) {
    if fault == Some(layer) {
        for (i, g) in grad.iter_mut().enumerate() {
            *g = *g * 1.05 + if i == 0 { 1e-3 } else { 0.0 };
        }
    }
}

fn result(name: impl Into<String>, max_error: f64, tolerance: f64) -> CheckResult {
    CheckResult {
        name: name.into(),
        max_error,
        tolerance,
        passed: max_error.is_finite() && max_error < tolerance,
        skipped: 0,
    }
}

fn with_tensor(t: &Tensor, data: &[f64]) -> Tensor {
    Tensor::from_vec(t.shape().to_vec(), data.to_vec()).expect("same length")
}

fn check_conv(rng: &mut ChaCha8Rng, fault: Option<Layer>) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for (in_shape, w_shape, stride) in [([1, 4, 4], [1, 1, 2, 2], 1), ([2, 7, 6], [3, 2, 3, 2], 2)] {
        let x = normal_tensor(&in_shape, rng);
        let w = normal_tensor(&w_shape, rng);
        let b = normal_tensor(&[w_shape[0]], rng);
        let out = conv2d_forward(&x, &w, &b, stride)?;
        let r = normal_tensor(out.shape(), rng);
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| -> Result<f64> {
            Ok(dot(conv2d_forward(x, w, b, stride)?.data(), r.data()))
        };
        let mut g = conv2d_backward(&x, &w, stride, &r)?;
        corrupt(g.weight.data_mut(), Layer::Conv, fault);
        let dw = central_differences(w.data(), LAYER_STEP, |v| loss(&x, &with_tensor(&w, v), &b))?;
        let db = central_differences(b.data(), LAYER_STEP, |v| loss(&x, &w, &with_tensor(&b, v)))?;
        let dx = central_differences(x.data(), LAYER_STEP, |v| loss(&with_tensor(&x, v), &w, &b))?;
        worst = worst
            .max(relative_error(g.weight.data(), &dw))
            .max(relative_error(g.bias.data(), &db))
            .max(relative_error(g.input.data(), &dx));
    }
    Ok(result("conv2d backward vs finite differences", worst, LAYER_TOLERANCE))
}

fn check_pool(rng: &mut ChaCha8Rng, fault: Option<Layer>) -> Result<CheckResult> {
    // A permutation of well-spaced values keeps every window's maximum unique under the probe step.
    let n = 2 * 5 * 6;
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
    rand::seq::SliceRandom::shuffle(values.as_mut_slice(), rng);
    let x = Tensor::from_vec(vec![2, 5, 6], values)?;
    let (out, idx) = maxpool_forward(&x, 2, 1)?;
    let r = normal_tensor(out.shape(), rng);
    let mut g = maxpool_backward(&idx, &r)?;
    corrupt(g.data_mut(), Layer::MaxPool, fault);
    let num = central_differences(x.data(), LAYER_STEP, |v| {
        Ok(dot(maxpool_forward(&with_tensor(&x, v), 2, 1)?.0.data(), r.data()))
    })?;
    Ok(result("maxpool backward vs finite differences", relative_error(g.data(), &num), LAYER_TOLERANCE))
}

fn check_relu(rng: &mut ChaCha8Rng, fault: Option<Layer>) -> Result<CheckResult> {
    let away = Uniform::new(0.05, 2.0).expect("valid range");
    let x = Tensor::from_fn(&[3, 4, 5], |_| {
        let m = away.sample(rng);
        if rng.random_bool(0.5) { m } else { -m }
    });
    let r = normal_tensor(x.shape(), rng);
    let mut g = relu_backward(&x, &r)?;
    corrupt(g.data_mut(), Layer::Relu, fault);
    let num = central_differences(x.data(), LAYER_STEP, |v| Ok(dot(relu(&with_tensor(&x, v)).data(), r.data())))?;
    Ok(result("relu backward vs finite differences", relative_error(g.data(), &num), LAYER_TOLERANCE))
}

fn check_fc(rng: &mut ChaCha8Rng, fault: Option<Layer>) -> Result<CheckResult> {
    let x = normal_tensor(&[6], rng);
    let w = normal_tensor(&[4, 6], rng);
    let b = normal_tensor(&[4], rng);
    let r = normal_tensor(&[4], rng);
    let loss = |x: &[f64], w: &Tensor, b: &Tensor| -> Result<f64> { Ok(dot(&fc_forward(x, w, b)?, r.data())) };
    let mut g = fc_backward(x.data(), &w, r.data())?;
    corrupt(g.weight.data_mut(), Layer::Fc, fault);
    let dw = central_differences(w.data(), LAYER_STEP, |v| loss(x.data(), &with_tensor(&w, v), &b))?;
    let db = central_differences(b.data(), LAYER_STEP, |v| loss(x.data(), &w, &with_tensor(&b, v)))?;
    let dx = central_differences(x.data(), LAYER_STEP, |v| loss(v, &w, &b))?;
    let worst = relative_error(g.weight.data(), &dw)
        .max(relative_error(g.bias.data(), &db))
        .max(relative_error(&g.input, &dx));
    Ok(result("fully-connected backward vs finite differences", worst, LAYER_TOLERANCE))
}

fn check_l2(rng: &mut ChaCha8Rng, fault: Option<Layer>) -> Result<CheckResult> {
    let x = normal_tensor(&[5], rng);
    let r = normal_tensor(&[5], rng);
    let mut g = l2_normalize_backward(x.data(), r.data(), 1e-12)?;
    corrupt(&mut g, Layer::L2Normalize, fault);
    let num = central_differences(x.data(), LAYER_STEP, |v| Ok(dot(&l2_normalize(v, 1e-12)?, r.data())))?;
    Ok(result("l2 normalization backward vs finite differences", relative_error(&g, &num), LAYER_TOLERANCE))
}

/// Random images with class labels, and valid triplets sharing images.
pub fn random_instance(
    arch: &ArchitectureConfig,
    classes: usize,
    per_class: usize,
    triplets: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Tensor>, Vec<ClassId>, Vec<Triplet>)> {
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let images: Vec<LabeledImage> = (0..classes * per_class)
        .map(|i| LabeledImage {
            pixels: Tensor::from_fn(&arch.input_shape(), |_| unit.sample(rng)),
            person_id: format!("{:03}", i / per_class),
            source: "random".into(),
        })
        .collect();
    let dataset = Dataset::new(images)?;
    let all: Vec<ClassId> = dataset.class_ids().collect();
    let per_person = triplets.div_ceil(classes);
    let mut trips = generate_triplets(&dataset, &all, per_person, rng)?;
    trips.truncate(triplets);
    let pixels = dataset.images().iter().map(|i| i.pixels.clone()).collect();
    Ok((pixels, dataset.labels().to_vec(), trips))
}

/// Objective of `net` over `triplets`, evaluated directly from embeddings.
pub fn network_objective(net: &Network, images: &[Tensor], triplets: &[Triplet], loss: &LossConfig) -> Result<f64> {
    Ok(objective_with_pattern(net, images, triplets, loss)?.0)
}

/// Kink positions of the whole objective: per-image activation patterns and the hinge
/// state of every triplet.
type Kinks = (Vec<ActivationPattern>, Vec<bool>);

fn objective_with_pattern(
    net: &Network,
    images: &[Tensor],
    triplets: &[Triplet],
    loss: &LossConfig,
) -> Result<(f64, Kinks)> {
    let mut table = ImageTable::from_triplets(triplets);
    let mut patterns = Vec::with_capacity(table.len());
    for id in table.ids().to_vec() {
        let (e, cache) = net.forward(&images[id.0])?;
        patterns.push(cache.activation_pattern());
        table.set_embedding(id, e)?;
    }
    let hinge = distance_diffs(&table, triplets)?.into_iter().map(|d| d > loss.margin).collect();
    Ok((objective(&table, triplets, loss)?, (patterns, hinge)))
}

fn with_group(net: &Network, group: ParamGroup, data: &[f64]) -> Network {
    let mut n = net.clone();
    n.params_mut().group_mut(group).data_mut().copy_from_slice(data);
    n
}

/// Network with every parameter, biases included, drawn from `N(0, scale²)`.
///
/// At the default initialization the fc output has norm around 1e-5, so the
/// normalization is strongly curved on the scale of the probe step. Parameters of
/// order 0.1 keep central differences in their linear regime.
pub fn probe_network(arch: &ArchitectureConfig, scale: f64, rng: &mut ChaCha8Rng) -> Result<Network> {
    let shapes = NetworkParams::group_shapes(arch)?;
    let groups = shapes.map(|shape| {
        Tensor::from_fn(&shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
    });
    Network::new(arch.clone(), NetworkParams::from_groups(arch, groups)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetworkCheck {
    /// Worst per-group relative error over the smooth coordinates.
    pub error: f64,
    /// Coordinates whose probe crossed a ReLU, pooling or hinge kink.
    pub skipped: usize,
    pub total: usize,
}

/// Relative error of the image-based gradient against central differences of the
/// objective, per parameter group; returns the worst group. Coordinates whose `±step`
/// probe changes the activation pattern are excluded, since the objective is not
/// differentiable across a kink.
pub fn whole_network_check(net: &Network, images: &[Tensor], triplets: &[Triplet], step: f64) -> Result<NetworkCheck> {
    let loss = LossConfig::default();
    let analytic = image_based_gradient(net, images, triplets, &loss)?.gradient;
    let (_, base_kinks) = objective_with_pattern(net, images, triplets, &loss)?;
    let mut worst: f64 = 0.0;
    let (mut skipped, mut total) = (0, 0);
    for group in ParamGroup::ALL {
        let base = net.params().group(group).data().to_vec();
        let mut probe = base.clone();
        let (mut kept_analytic, mut kept_numeric) = (Vec::new(), Vec::new());
        for (i, &a) in analytic.group(group).data().iter().enumerate() {
            total += 1;
            probe[i] = base[i] + step;
            let (plus, k_plus) = objective_with_pattern(&with_group(net, group, &probe), images, triplets, &loss)?;
            probe[i] = base[i] - step;
            let (minus, k_minus) = objective_with_pattern(&with_group(net, group, &probe), images, triplets, &loss)?;
            probe[i] = base[i];
            if k_plus != base_kinks || k_minus != base_kinks {
                skipped += 1;
                continue;
            }
            kept_analytic.push(a);
            kept_numeric.push((plus - minus) / (2.0 * step));
        }
        worst = worst.max(relative_error(&kept_analytic, &kept_numeric));
    }
    Ok(NetworkCheck { error: worst, skipped, total })
}

fn within_skip_budget(check: &NetworkCheck) -> bool {
    check.skipped * MAX_SKIPPED_DENOMINATOR <= check.total
}

fn network_result(name: &str, check: NetworkCheck) -> CheckResult {
    let mut r = result(name, check.error, NETWORK_TOLERANCE);
    // Too many kink crossings would leave the comparison without teeth.
    r.passed &= within_skip_budget(&check);
    r.skipped = check.skipped;
    r
}

/// Probe step for `net`: [`INIT_NETWORK_STEP`], or a thousandth of the smallest fc
/// output norm over `images` if that is smaller.
pub fn init_step(net: &Network, images: &[Tensor]) -> Result<f64> {
    let mut step = INIT_NETWORK_STEP;
    for img in images {
        let (_, cache) = net.forward(img)?;
        let norm = cache.pre_normalization().iter().map(|x| x * x).sum::<f64>().sqrt();
        step = step.min(1e-3 * norm);
    }
    Ok(step)
}

/// Relative Frobenius distance between the triplet-based and image-based gradients.
pub fn equivalence_error(net: &Network, images: &[Tensor], triplets: &[Triplet]) -> Result<f64> {
    let loss = LossConfig::default();
    let by_image = image_based_gradient(net, images, triplets, &loss)?.gradient;
    let by_triplet = triplet_based_gradient(net, images, triplets, &loss)?.gradient;
    Ok(by_triplet.relative_difference(&by_image))
}

/// Runs every check on the small built-in architecture.
pub fn run(options: &VerifyOptions) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let fault = options.fault;
    let mut checks = vec![
        check_conv(&mut rng, fault)?,
        check_pool(&mut rng, fault)?,
        check_relu(&mut rng, fault)?,
        check_fc(&mut rng, fault)?,
        check_l2(&mut rng, fault)?,
    ];

    let arch = ArchitectureConfig::desk();
    // A random instance can sit almost on a hinge or ReLU boundary, where most probes
    // cross it. Such instances are redrawn; the gradient is the same function everywhere.
    let mut attempt = 0;
    let (at_probe, at_init) = loop {
        let (images, _, triplets) = random_instance(&arch, 3, 2, 8, &mut rng)?;
        let probe = probe_network(&arch, 0.1, &mut rng)?;
        let net = Network::initialized(arch.clone(), rng.random())?;
        let a = whole_network_check(&probe, &images, &triplets, NETWORK_STEP)?;
        let b = whole_network_check(&net, &images, &triplets, init_step(&net, &images)?)?;
        attempt += 1;
        if attempt == MAX_INSTANCE_DRAWS || (within_skip_budget(&a) && within_skip_budget(&b)) {
            break (a, b);
        }
    };
    checks.push(network_result("whole-network gradient vs finite differences", at_probe));
    checks.push(network_result("whole-network gradient at initialization", at_init));

    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let net = Network::initialized(arch.clone(), rng.random())?;
        let (images, _, triplets) = random_instance(&arch, 4, 2, 20, &mut rng)?;
        worst = worst.max(equivalence_error(&net, &images, &triplets)?);
    }
    checks.push(result("triplet-based vs image-based gradient", worst, EQUIVALENCE_TOLERANCE));

    // 40 persons x 8 images, 80 triplets per person: 320 distinct images, 3200 triplets.
    let net = Network::initialized(arch.clone(), rng.random())?;
    let (images, _, triplets) = random_instance(&arch, 40, 8, 3200, &mut rng)?;
    let loss = LossConfig::default();
    let by_image = image_based_gradient(&net, &images, &triplets, &loss)?;
    let by_triplet = triplet_based_gradient(&net, &images, &triplets, &loss)?;
    let mismatch = by_image.counter.forward.abs_diff(320)
        + by_image.counter.backward.abs_diff(320)
        + by_triplet.counter.forward.abs_diff(9600)
        + by_triplet.counter.backward.abs_diff(9600);
    checks.push(result("propagation counts (320 vs 9600)", mismatch as f64, 0.5));

    Ok(VerifyReport { checks })
}
