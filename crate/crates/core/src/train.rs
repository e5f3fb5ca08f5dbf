//! Gradient descent drivers for the triplet objective.
//!
//! * [`triplet_based_gradient`] runs three forward and three backward passes per
//!   triplet and sums the per-triplet derivatives.
//! * [`image_based_gradient`] runs one forward and one backward pass per distinct
//!   image, seeding each backward pass with the analytic derivative of the objective
//!   with respect to that image's embedding.
//!
//! Both produce the same parameter gradient. Gradients are summed over triplets, not
//! averaged, so the learning rate scales with the batch size.
//!
//! Per-image (or per-triplet) work runs on the rayon pool in fixed-size blocks whose
//! results are added in index order, so the result does not depend on the thread count.

use std::collections::BTreeMap;
use std::time::Instant;

use log::{error, warn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{prepare_input, AugmentConfig, ClassId, Dataset};
use crate::error::{Error, Result};
use crate::loss::{
    count_violations, distance_diff, objective, output_gradients, ImageId, ImageTable, LossConfig,
    Triplet,
};
use crate::nn::{Embedding, ForwardCache, Network, NetworkParams};
use crate::tensor::Tensor;

/// Lookup of network inputs by image id.
pub trait ImageSource: Sync {
    fn image(&self, id: ImageId) -> Option<&Tensor>;
}

impl ImageSource for [Tensor] {
    fn image(&self, id: ImageId) -> Option<&Tensor> {
        self.get(id.0)
    }
}

impl ImageSource for Vec<Tensor> {
    fn image(&self, id: ImageId) -> Option<&Tensor> {
        self.get(id.0)
    }
}

impl ImageSource for BTreeMap<ImageId, Tensor> {
    fn image(&self, id: ImageId) -> Option<&Tensor> {
        self.get(&id)
    }
}

fn lookup<S: ImageSource + ?Sized>(source: &S, id: ImageId) -> Result<&Tensor> {
    source
        .image(id)
        .ok_or_else(|| Error::contract(format!("no input image for id {id}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Iteration budget `T`.
    pub max_iterations: usize,
    /// Base step size; iteration `t` uses `learning_rate · lr_decay^t`.
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub classes_per_iteration: usize,
    pub triplets_per_person: usize,
    /// Batch mode stops once fewer than this many triplets in the batch are violated.
    pub convergence_threshold: usize,
    pub seed: u64,
    /// Hinge floor `C`.
    pub margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iterations: 1000,
            learning_rate: 0.01,
            lr_decay: 1.0,
            classes_per_iteration: 40,
            triplets_per_person: 80,
            convergence_threshold: 10,
            seed: 0,
            margin: -1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes_per_iteration < 2 {
            return Err(Error::config("classes_per_iteration must be at least 2"));
        }
        if self.triplets_per_person == 0 {
            return Err(Error::config("triplets_per_person must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return Err(Error::config("lr_decay must be positive"));
        }
        self.loss().validate()
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            margin: self.margin,
        }
    }

    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(iteration as i32)
    }
}

/// Forward and backward pass counts for one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropagationCounter {
    pub forward: usize,
    pub backward: usize,
}

impl PropagationCounter {
    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub objective: f64,
    /// Triplets whose matched distance exceeds the mismatched distance.
    pub violations: usize,
    pub distinct_images: usize,
    pub triplets: usize,
    pub forward_count: usize,
    pub backward_count: usize,
    pub learning_rate: f64,
    pub wall_time_ms: f64,
}

/// Gradient of the objective at the current parameters, with the loss statistics
/// measured on the way.
#[derive(Clone, Debug)]
pub struct GradientStep {
    pub gradient: NetworkParams,
    pub objective: f64,
    pub violations: usize,
    pub distinct_images: usize,
    pub triplets: usize,
    pub counter: PropagationCounter,
}

/// Sums `f(item)` over `items` in index order, evaluating blocks of items in parallel.
fn ordered_sum<T: Sync>(
    zero: NetworkParams,
    items: &[T],
    f: impl Fn(&T) -> Result<Option<NetworkParams>> + Sync,
) -> Result<NetworkParams> {
    let mut total = zero;
    let block = rayon::current_num_threads().max(1);
    for chunk in items.chunks(block) {
        let parts: Vec<Result<Option<NetworkParams>>> = chunk.par_iter().map(&f).collect();
        for part in parts {
            if let Some(p) = part? {
                total.add_assign(&p)?;
            }
        }
    }
    Ok(total)
}

/// One pass per distinct image.
pub fn image_based_gradient<S: ImageSource + ?Sized>(
    net: &Network,
    images: &S,
    triplets: &[Triplet],
    loss: &LossConfig,
) -> Result<GradientStep> {
    let mut counter = PropagationCounter::default();
    let mut table = ImageTable::from_triplets(triplets);

    let forwards: Vec<(Embedding, ForwardCache)> = table
        .ids()
        .par_iter()
        .map(|&id| net.forward(lookup(images, id)?))
        .collect::<Result<_>>()?;
    counter.forward += forwards.len();

    let ids = table.ids().to_vec();
    let mut caches = Vec::with_capacity(forwards.len());
    for (id, (embedding, cache)) in ids.into_iter().zip(forwards) {
        table.set_embedding(id, embedding)?;
        caches.push(cache);
    }

    let objective = objective(&table, triplets, loss)?;
    let violations = count_violations(&table, triplets)?;
    let output_grads = output_gradients(&table, triplets, loss)?;

    let work: Vec<(&ForwardCache, &[f64])> = caches
        .iter()
        .zip(&output_grads)
        .map(|(c, g)| (c, g.as_slice()))
        .collect();
    let gradient = ordered_sum(net.params().zeros_like(), &work, |(cache, g)| {
        net.backward(cache, g).map(Some)
    })?;
    counter.backward += work.len();

    Ok(GradientStep {
        gradient,
        objective,
        violations,
        distinct_images: table.len(),
        triplets: triplets.len(),
        counter,
    })
}

struct TripletTerm {
    diff: f64,
    /// `∂d/∂W` when the hinge is active.
    gradient: Option<NetworkParams>,
}

fn triplet_term<S: ImageSource + ?Sized>(
    net: &Network,
    images: &S,
    t: &Triplet,
    loss: &LossConfig,
) -> Result<TripletTerm> {
    let (f1, c1) = net.forward(lookup(images, t.query)?)?;
    let (f2, c2) = net.forward(lookup(images, t.matched)?)?;
    let (f3, c3) = net.forward(lookup(images, t.mismatched)?)?;
    let diff = distance_diff(&f1, &f2, &f3)?;

    // ∂d/∂W = 2(F1-F2)ᵀ(∂F1 - ∂F2) - 2(F1-F3)ᵀ(∂F1 - ∂F3), applied as three
    // vector-Jacobian products.
    let a: Vec<f64> = f1.iter().zip(f2.iter()).map(|(x, y)| 2.0 * (x - y)).collect();
    let b: Vec<f64> = f1.iter().zip(f3.iter()).map(|(x, y)| 2.0 * (x - y)).collect();
    let g1: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let g2: Vec<f64> = a.iter().map(|x| -x).collect();
    let mut grad = net.backward(&c1, &g1)?;
    grad.add_assign(&net.backward(&c2, &g2)?)?;
    grad.add_assign(&net.backward(&c3, &b)?)?;

    Ok(TripletTerm {
        diff,
        gradient: (diff > loss.margin).then_some(grad),
    })
}

/// Three passes per triplet.
pub fn triplet_based_gradient<S: ImageSource + ?Sized>(
    net: &Network,
    images: &S,
    triplets: &[Triplet],
    loss: &LossConfig,
) -> Result<GradientStep> {
    let mut terms = Vec::with_capacity(triplets.len());
    let block = rayon::current_num_threads().max(1);
    for chunk in triplets.chunks(block) {
        let part: Vec<Result<TripletTerm>> = chunk
            .par_iter()
            .map(|t| triplet_term(net, images, t, loss))
            .collect();
        for term in part {
            let term = term?;
            terms.push((term.diff, term.gradient));
        }
    }
    let mut gradient = net.params().zeros_like();
    for (_, g) in &terms {
        if let Some(g) = g {
            gradient.add_assign(g)?;
        }
    }
    let objective = terms.iter().map(|(d, _)| d.max(loss.margin)).sum();
    let violations = terms.iter().filter(|(d, _)| *d > 0.0).count();
    let distinct_images = ImageTable::from_triplets(triplets).len();

    Ok(GradientStep {
        gradient,
        objective,
        violations,
        distinct_images,
        triplets: triplets.len(),
        counter: PropagationCounter {
            forward: 3 * triplets.len(),
            backward: 3 * triplets.len(),
        },
    })
}

/// `params -= rate · grad`.
pub fn sgd_update(params: &mut NetworkParams, grad: &NetworkParams, rate: f64) -> Result<()> {
    if !grad.is_finite() {
        return Err(Error::NonFinite("parameter gradient".into()));
    }
    if !rate.is_finite() {
        return Err(Error::NonFinite("learning rate".into()));
    }
    params.axpy(-rate, grad)?;
    if !params.is_finite() {
        return Err(Error::NonFinite("parameters after update".into()));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub reports: Vec<IterationReport>,
    pub converged: bool,
}

fn report(iteration: usize, step: &GradientStep, rate: f64, started: Instant) -> IterationReport {
    IterationReport {
        iteration,
        objective: step.objective,
        violations: step.violations,
        distinct_images: step.distinct_images,
        triplets: step.triplets,
        forward_count: step.counter.forward,
        backward_count: step.counter.backward,
        learning_rate: rate,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    }
}

type GradientFn<S> = fn(&Network, &S, &[Triplet], &LossConfig) -> Result<GradientStep>;

fn train_fixed<S: ImageSource + ?Sized>(
    mut net: Network,
    images: &S,
    triplets: &[Triplet],
    cfg: &TrainConfig,
    gradient: GradientFn<S>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let loss = cfg.loss();
    let mut reports = Vec::with_capacity(cfg.max_iterations);
    for t in 0..cfg.max_iterations {
        let started = Instant::now();
        let step = gradient(&net, images, triplets, &loss).inspect_err(|e| {
            error!("iteration {t}: {e}");
        })?;
        let rate = cfg.learning_rate_at(t);
        sgd_update(net.params_mut(), &step.gradient, rate)?;
        reports.push(report(t, &step, rate, started));
    }
    Ok(TrainOutcome {
        network: net,
        reports,
        converged: false,
    })
}

/// Runs `max_iterations` triplet-based descent steps on a fixed triplet set.
pub fn train_triplet_based<S: ImageSource + ?Sized>(
    net: Network,
    images: &S,
    triplets: &[Triplet],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_fixed(net, images, triplets, cfg, triplet_based_gradient::<S>)
}

/// Runs `max_iterations` image-based descent steps on a fixed triplet set.
pub fn train_image_based<S: ImageSource + ?Sized>(
    net: Network,
    images: &S,
    triplets: &[Triplet],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_fixed(net, images, triplets, cfg, image_based_gradient::<S>)
}

/// Builds `per_person` triplets for every selected class that has at least two images.
///
/// Queries cycle through the class's images in order; the matched reference is drawn
/// uniformly from the other images of the class, the mismatched reference uniformly
/// from all images of the other selected classes. Triplet ids are dataset image indices.
pub fn generate_triplets<R: Rng + ?Sized>(
    dataset: &Dataset,
    selected: &[ClassId],
    per_person: usize,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    if selected.len() < 2 {
        return Err(Error::config("triplet generation needs at least 2 selected classes"));
    }
    if selected.iter().any(|c| c.0 >= dataset.num_classes()) {
        return Err(Error::contract("selected class is not in the dataset"));
    }
    let mut triplets = Vec::with_capacity(selected.len() * per_person);
    for &class in selected {
        let own = dataset.members(class);
        if own.len() < 2 {
            warn!(
                "class {:?} has {} image(s); no triplets generated for it",
                dataset.class_name(class),
                own.len()
            );
            continue;
        }
        let others: Vec<usize> = selected
            .iter()
            .filter(|&&c| c != class)
            .flat_map(|&c| dataset.members(c).iter().copied())
            .collect();
        if others.is_empty() {
            return Err(Error::config("no mismatched candidates among the selected classes"));
        }
        for j in 0..per_person {
            let qpos = j % own.len();
            let mut mpos = rng.random_range(0..own.len() - 1);
            if mpos >= qpos {
                mpos += 1;
            }
            let mismatched = others[rng.random_range(0..others.len())];
            triplets.push(Triplet::new(own[qpos], own[mpos], mismatched));
        }
    }
    Ok(triplets)
}

/// Independent random stream for batch iteration `t`, so a resumed run replays the same
/// class samples and crops.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

fn eligible_classes(dataset: &Dataset) -> Vec<ClassId> {
    dataset
        .class_ids()
        .filter(|&c| dataset.members(c).len() >= 2)
        .collect()
}

/// Triplets and prepared inputs for batch iteration `t`.
pub fn sample_batch(
    dataset: &Dataset,
    net: &Network,
    cfg: &TrainConfig,
    augment: &AugmentConfig,
    iteration: usize,
) -> Result<(Vec<Triplet>, BTreeMap<ImageId, Tensor>)> {
    let eligible = eligible_classes(dataset);
    let mut rng = iteration_rng(cfg.seed, iteration);
    let mut picked: Vec<ClassId> = sample(&mut rng, eligible.len(), cfg.classes_per_iteration)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    picked.sort();
    let triplets = generate_triplets(dataset, &picked, cfg.triplets_per_person, &mut rng)?;

    let arch = net.config();
    let mut inputs = BTreeMap::new();
    for &id in ImageTable::from_triplets(&triplets).ids() {
        let pixels = &dataset.image(id.0).pixels;
        let x = prepare_input(pixels, arch.input_height, arch.input_width, augment, Some(&mut rng))?;
        inputs.insert(id, x);
    }
    Ok((triplets, inputs))
}

/// Checks that `dataset` can feed batch training under `cfg`.
pub fn check_batch_dataset(dataset: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    let eligible = eligible_classes(dataset);
    if eligible.len() < dataset.num_classes() {
        warn!(
            "{} class(es) with fewer than 2 images are excluded from training",
            dataset.num_classes() - eligible.len()
        );
    }
    if eligible.len() < cfg.classes_per_iteration {
        return Err(Error::config(format!(
            "dataset has {} classes with at least 2 images; {} are sampled per iteration",
            eligible.len(),
            cfg.classes_per_iteration
        )));
    }
    Ok(())
}

/// Batch-mode training: each iteration samples classes, generates triplets from them and
/// takes one image-based step. Stops when the batch has fewer than
/// `convergence_threshold` violated triplets or after `max_iterations`.
pub fn train_batch_mode(
    dataset: &Dataset,
    net: Network,
    cfg: &TrainConfig,
    augment: &AugmentConfig,
) -> Result<TrainOutcome> {
    train_batch_mode_from(dataset, net, cfg, augment, 0, |_| {})
}

/// [`train_batch_mode`] starting at iteration `start`, calling `observer` after each iteration.
pub fn train_batch_mode_from(
    dataset: &Dataset,
    mut net: Network,
    cfg: &TrainConfig,
    augment: &AugmentConfig,
    start: usize,
    mut observer: impl FnMut(&IterationReport),
) -> Result<TrainOutcome> {
    check_batch_dataset(dataset, cfg)?;
    let loss = cfg.loss();
    let mut reports = Vec::new();
    for t in start..cfg.max_iterations {
        let started = Instant::now();
        let step = sample_batch(dataset, &net, cfg, augment, t)
            .and_then(|(triplets, inputs)| image_based_gradient(&net, &inputs, &triplets, &loss))
            .inspect_err(|e| error!("iteration {t}: {e}"))?;
        let rate = cfg.learning_rate_at(t);
        let converged = step.violations < cfg.convergence_threshold;
        if !converged {
            sgd_update(net.params_mut(), &step.gradient, rate)
                .inspect_err(|e| error!("iteration {t}: {e}"))?;
        }
        let r = report(t, &step, rate, started);
        observer(&r);
        reports.push(r);
        if converged {
            return Ok(TrainOutcome {
                network: net,
                reports,
                converged: true,
            });
        }
    }
    Ok(TrainOutcome {
        network: net,
        reports,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledImage;
    use crate::nn::ArchitectureConfig;

    fn dataset(sizes: &[usize]) -> Dataset {
        let mut images = Vec::new();
        for (c, &n) in sizes.iter().enumerate() {
            for k in 0..n {
                images.push(LabeledImage {
                    pixels: Tensor::full(&[3, 20, 12], (c * 7 + k) as f64 / 100.0),
                    person_id: format!("c{c:02}"),
                    source: "test".into(),
                });
            }
        }
        Dataset::new(images).unwrap()
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig {
            lr_decay: 0.95,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(0), 0.01);
        let expected = 0.01 * 0.95f64.powi(10);
        assert!((cfg.learning_rate_at(10) - expected).abs() < 1e-18);
        assert!((cfg.learning_rate_at(10) - 0.005987).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { classes_per_iteration: 1, ..TrainConfig::default() },
            TrainConfig { triplets_per_person: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { margin: 0.0, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn sgd_update_examples() {
        let cfg = ArchitectureConfig::desk();
        let p0 = crate::nn::init_params(&cfg, 1).unwrap();
        let mut p = p0.clone();
        sgd_update(&mut p, &p0, 0.0).unwrap();
        assert_eq!(p, p0);
        sgd_update(&mut p, &p0, 1.0).unwrap();
        assert_eq!(p.frobenius_norm(), 0.0);

        let mut bad = p0.zeros_like();
        bad.group_mut(crate::nn::ParamGroup::FcBias).data_mut()[0] = f64::INFINITY;
        let err = sgd_update(&mut p, &bad, 0.1).unwrap_err();
        assert!(err.is_numeric());
    }

    #[test]
    fn generate_respects_constraints_and_quota() {
        let d = dataset(&[2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let classes: Vec<ClassId> = d.class_ids().collect();
        let trips = generate_triplets(&d, &classes, 1, &mut rng).unwrap();
        assert_eq!(trips.len(), 2);
        for t in &trips {
            t.validate(|id| d.labels().get(id.0).copied()).unwrap();
        }
    }

    #[test]
    fn generate_skips_singleton_classes() {
        let d = dataset(&[3, 1, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let classes: Vec<ClassId> = d.class_ids().collect();
        let trips = generate_triplets(&d, &classes, 5, &mut rng).unwrap();
        assert_eq!(trips.len(), 10);
        assert!(trips.iter().all(|t| d.label(t.query.0) != ClassId(1)));
        assert!(generate_triplets(&d, &classes[..1], 5, &mut rng).is_err());
    }

    #[test]
    fn batch_dataset_too_small() {
        let d = dataset(&[3, 3, 1]);
        let cfg = TrainConfig {
            classes_per_iteration: 3,
            ..TrainConfig::default()
        };
        assert!(matches!(check_batch_dataset(&d, &cfg), Err(Error::Config(_))));
        let cfg = TrainConfig {
            classes_per_iteration: 2,
            ..TrainConfig::default()
        };
        assert!(check_batch_dataset(&d, &cfg).is_ok());
    }

    #[test]
    fn zero_iterations_returns_initial_params() {
        let d = dataset(&[3, 3]);
        let net = Network::initialized(ArchitectureConfig::desk(), 2).unwrap();
        let cfg = TrainConfig {
            max_iterations: 0,
            classes_per_iteration: 2,
            ..TrainConfig::default()
        };
        let out = train_batch_mode(&d, net.clone(), &cfg, &AugmentConfig::default()).unwrap();
        assert!(!out.converged);
        assert!(out.reports.is_empty());
        assert_eq!(out.network, net);
    }

    #[test]
    fn iteration_streams_differ() {
        let a: u64 = iteration_rng(5, 0).random();
        let b: u64 = iteration_rng(5, 1).random();
        assert_ne!(a, b);
        assert_eq!(a, iteration_rng(5, 0).random::<u64>());
    }
}
