//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.

mod common;

use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use trimetric::data::split_train_test;
use trimetric::eval::{cmc, GalleryProbeSplit};
use trimetric::loss::{distance_diff, output_gradients, ImageTable};
use trimetric::train::generate_triplets;
use trimetric::verify::{self, random_instance, VerifyOptions};
use trimetric::{
    average_trials, image_based_gradient, synth_dataset, train_batch_mode, triplet_based_gradient,
    ArchitectureConfig, AugmentConfig, ClassId, Embedding, ImageId, LossConfig, Network, SynthSpec, TrainConfig,
    Triplet,
};

fn verdict(id: &str, passed: bool, detail: String) {
    println!("{id} {} {detail}", if passed { "PASS" } else { "FAIL" });
    assert!(passed, "{id}: {detail}");
}

#[test]
fn a1_gradient_equivalence() {
    let started = Instant::now();
    let arch = ArchitectureConfig::desk();
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    let mut sharing = true;
    for k in 0..5 {
        let net = Network::initialized(arch.clone(), 200 + k).unwrap();
        let (images, _, triplets) = random_instance(&arch, 4, 2, 20, &mut r).unwrap();
        assert_eq!(images.len(), 8);
        let loss = LossConfig::default();
        let a = image_based_gradient(&net, &images, &triplets, &loss).unwrap();
        let b = triplet_based_gradient(&net, &images, &triplets, &loss).unwrap();
        sharing &= a.distinct_images < 3 * triplets.len();
        worst = worst.max(b.gradient.relative_difference(&a.gradient));
    }
    let elapsed = started.elapsed();
    verdict(
        "A1",
        worst < 1e-10 && sharing && elapsed < Duration::from_secs(10),
        format!("max relative Frobenius difference {worst:.3e} (< 1e-10), {elapsed:.2?} (< 10 s)"),
    );
}

#[test]
fn a2_finite_difference_correctness() {
    let started = Instant::now();
    let report = verify::run(&VerifyOptions { seed: 102, fault: None }).unwrap();
    let elapsed = started.elapsed();
    let fd: Vec<_> = report.checks.iter().filter(|c| c.name.contains("finite differences") || c.name.contains("at initialization")).collect();
    for c in &fd {
        println!("   {:<48} {:.3e} (< {:.0e})", c.name, c.max_error, c.tolerance);
    }
    let per_layer_ok = fd.iter().filter(|c| !c.name.starts_with("whole")).all(|c| c.passed && c.tolerance <= 1e-5);
    let network_ok = fd.iter().filter(|c| c.name.starts_with("whole")).all(|c| c.passed && c.tolerance <= 1e-4);
    verdict(
        "A2",
        fd.len() == 7 && per_layer_ok && network_ok && elapsed < Duration::from_secs(60),
        format!("{} finite-difference checks, {elapsed:.2?} (< 60 s)", fd.len()),
    );
}

#[test]
fn a3_propagation_counts() {
    let arch = ArchitectureConfig::desk();
    let (images, _, triplets) = random_instance(&arch, 40, 8, 3200, &mut rng(103)).unwrap();
    let net = Network::initialized(arch, 104).unwrap();
    let loss = LossConfig::default();
    let a = image_based_gradient(&net, &images, &triplets, &loss).unwrap();
    let b = triplet_based_gradient(&net, &images, &triplets, &loss).unwrap();
    verdict(
        "A3",
        a.distinct_images == 320 && a.counter.forward == 320 && b.counter.forward == 9600,
        format!(
            "{} triplets over {} images: forward {} (image-based) vs {} (triplet-based)",
            triplets.len(),
            a.distinct_images,
            a.counter.forward,
            b.counter.forward
        ),
    );
}

#[test]
fn a4_unit_norm_embeddings() {
    let arch = ArchitectureConfig::desk();
    let net = Network::initialized(arch, 105).unwrap();
    let mut r = rng(106);
    let worst = (0..1000)
        .map(|_| (net.embed(&uniform_image(3, 20, 12, &mut r)).unwrap().norm() - 1.0).abs())
        .fold(0.0, f64::max);
    verdict("A4", worst <= 1e-9, format!("1000 images, max | ||F|| - 1 | = {worst:.3e} (<= 1e-9)"));
}

#[test]
fn a5_end_to_end_convergence() {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let started = Instant::now();
        let spec = SynthSpec { num_classes: 10, images_per_class: 6, noise_level: 0.1, ..SynthSpec::default() };
        let data = synth_dataset(&spec, &mut rng(107)).unwrap();
        let (train, test) = split_train_test(&data, 0.6, &mut rng(108)).unwrap();
        assert_eq!((train.num_classes(), test.num_classes()), (6, 4));
        let cfg = TrainConfig {
            max_iterations: 500,
            classes_per_iteration: 4,
            triplets_per_person: 20,
            convergence_threshold: 10,
            seed: 109,
            ..TrainConfig::default()
        };
        let aug = AugmentConfig::default();
        let net = Network::initialized(ArchitectureConfig::desk(), 110).unwrap();
        let out = train_batch_mode(&train, net, &cfg, &aug).unwrap();
        let curve = average_trials(&out.network, &test, &aug, 10, 30, 111).unwrap();
        let rank1 = curve.rate(1).unwrap();
        let elapsed = started.elapsed();
        let first = &out.reports[0];
        let last = out.reports.last().unwrap();
        verdict(
            "A5",
            out.converged && last.violations < 10 && rank1 >= 0.90 && elapsed < Duration::from_secs(300),
            format!(
                "stopped after {} iteration(s) (violations {} -> {}, < 10 within 500), held-out rank-1 {rank1:.3} (>= 0.90), {elapsed:.2?} (< 5 min)",
                out.reports.len(),
                first.violations,
                last.violations
            ),
        );
    });
}

/// Sorts the gallery by (distance, index) and reads off the position of the probe's person.
fn cmc_oracle(emb: &[Vec<f64>], labels: &[ClassId], gallery: &[usize], probe: &[usize], max_rank: usize) -> Vec<f64> {
    let mut hits = vec![0usize; max_rank];
    for &p in probe {
        let mut order: Vec<(f64, usize)> = gallery.iter().enumerate().map(|(j, &g)| (sq_dist(&emb[p], &emb[g]), j)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let pos = order.iter().position(|&(_, j)| labels[gallery[j]] == labels[p]).unwrap();
        for h in hits.iter_mut().skip(pos) {
            *h += 1;
        }
    }
    hits.iter().map(|&h| h as f64 / probe.len() as f64).collect()
}

#[test]
fn a6_cmc_matches_full_sort_oracle() {
    let mut r = rng(112);
    let mut mismatches = 0;
    for _ in 0..50 {
        let persons = r.random_range(2..=20);
        let probes = r.random_range(1..=60);
        let dim = r.random_range(1..=4);
        // Coarse coordinates create distance ties.
        let point = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| r.random_range(0..4) as f64 * 0.5).collect() };
        let mut emb = Vec::new();
        let mut labels = Vec::new();
        let mut gallery = Vec::new();
        for p in 0..persons {
            gallery.push(emb.len());
            emb.push(point(&mut r));
            labels.push(ClassId(p));
        }
        let mut probe = Vec::new();
        for _ in 0..probes {
            probe.push(emb.len());
            emb.push(point(&mut r));
            labels.push(ClassId(r.random_range(0..persons)));
        }
        let split = GalleryProbeSplit {
            gallery: gallery.iter().map(|&i| ImageId(i)).collect(),
            probe: probe.iter().map(|&i| ImageId(i)).collect(),
        };
        let embeddings: Vec<Embedding> = emb.iter().cloned().map(Embedding::from_vec).collect();
        let got = cmc(&embeddings, &labels, &split, persons).unwrap();
        if got.rates() != cmc_oracle(&emb, &labels, &gallery, &probe, persons).as_slice() {
            mismatches += 1;
        }
    }
    verdict("A6", mismatches == 0, format!("50 random instances, {mismatches} differ from the full-sort oracle"));
}

#[test]
fn a7_triplet_generation_contract() {
    let mut r = rng(113);
    let d = random_dataset(&[4, 5, 6, 3, 7], 3, 1, 1, &mut r);
    let selected: Vec<ClassId> = d.class_ids().collect();
    let quota = 2000;
    let triplets = generate_triplets(&d, &selected, quota, &mut r).unwrap();
    let valid = triplets.iter().all(|t| {
        t.validate(|id| (id.0 < d.len()).then(|| d.label(id.0))).is_ok()
            && selected.contains(&d.label(t.mismatched.0))
    });
    let mut quotas_ok = true;
    let mut worst_ratio: f64 = 0.0;
    let mut check = |counts: &[usize]| {
        let n: usize = counts.iter().sum();
        let e = n as f64 / counts.len() as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        let crit = ChiSquared::new((counts.len() - 1) as f64).unwrap().inverse_cdf(0.99);
        worst_ratio = worst_ratio.max(stat / crit);
    };
    for &c in &selected {
        let own: Vec<&Triplet> = triplets.iter().filter(|t| d.label(t.query.0) == c).collect();
        quotas_ok &= own.len() == quota;
        let others: Vec<usize> = (0..d.len()).filter(|&i| d.label(i) != c).collect();
        let mut mis = vec![0; others.len()];
        for t in &own {
            mis[others.iter().position(|&i| i == t.mismatched.0).unwrap()] += 1;
        }
        check(&mis);
        let members = d.members(c);
        let mut matched = vec![0; members.len()];
        for t in &own {
            matched[members.iter().position(|&i| i == t.matched.0).unwrap()] += 1;
        }
        check(&matched);
    }
    verdict(
        "A7",
        triplets.len() == 10_000 && valid && quotas_ok && worst_ratio < 1.0,
        format!(
            "{} triplets, constraints {}, quotas {}, worst chi-square / critical(0.01) = {worst_ratio:.3}",
            triplets.len(),
            if valid { "hold" } else { "violated" },
            if quotas_ok { "exact" } else { "off" }
        ),
    );
}

#[test]
fn a8_hinge_boundary() {
    let c = LossConfig::default().margin;
    let eps = 1e-6;
    let mut lines = Vec::new();
    let mut ok = true;
    for (target, expect_active) in [(c - eps, false), (c, false), (c + eps, true)] {
        // d = 0 - b², so b = sqrt(-target) gives d = target (exactly when target = -1).
        let b = (-target).sqrt();
        let e = [vec![0.0, 0.0], vec![0.0, 0.0], vec![b, 0.0]];
        let d = distance_diff(&e[0], &e[1], &e[2]).unwrap();
        let table = ImageTable::with_embeddings(e.iter().cloned().enumerate().map(|(i, v)| (ImageId(i), v))).unwrap();
        let g = output_gradients(&table, &[Triplet::new(0, 1, 2)], &LossConfig::default()).unwrap();
        let active = g.iter().flatten().any(|&x| x != 0.0);
        let side_ok = if expect_active { d > c } else { d <= c } && (target != c || d == c);
        ok &= active == expect_active && side_ok;
        lines.push(format!("d = {d:.7} -> {}", if active { "nonzero" } else { "zero" }));
    }
    verdict("A8", ok, lines.join(", "));
}
