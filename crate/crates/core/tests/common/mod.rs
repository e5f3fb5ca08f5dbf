//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trimetric::{ClassId, Dataset, LabeledImage, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    // Box-Muller, to stay independent of the library's sampler.
    Tensor::from_fn(shape, |_| {
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    })
}

pub fn uniform_image(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[c, h, w], |_| rng.random())
}

/// Central differences with the step applied to one coordinate at a time.
pub fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[i] += h;
            down[i] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

/// Largest coordinate error relative to the largest coordinate magnitude.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = a.iter().chain(b).map(|x| x.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn at(t: &Tensor, idx: &[usize]) -> f64 {
    let shape = t.shape();
    let mut flat = 0;
    for (i, &k) in idx.iter().enumerate() {
        flat = flat * shape[i] + k;
    }
    t.data()[flat]
}

/// Direct valid cross-correlation.
pub fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f64], stride: usize) -> Vec<Vec<Vec<f64>>> {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h - kh) / stride + 1;
    let ow = (wd - kw) / stride + 1;
    let mut out = vec![vec![vec![0.0; ow]; oh]; o];
    for (k, plane) in out.iter_mut().enumerate() {
        for (i, row) in plane.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let mut s = b[k];
                for ch in 0..c {
                    for u in 0..kh {
                        for t in 0..kw {
                            s += at(w, &[k, ch, u, t]) * at(x, &[ch, i * stride + u, j * stride + t]);
                        }
                    }
                }
                *v = s;
            }
        }
    }
    out
}

pub fn flatten3(v: &[Vec<Vec<f64>>]) -> Vec<f64> {
    v.iter().flatten().flatten().copied().collect()
}

/// Max over each window, scanned in row-major order.
pub fn pool_oracle(x: &Tensor, z: usize, s: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::new();
    for ch in 0..c {
        for i in 0..(h - z) / s + 1 {
            for j in 0..(w - z) / s + 1 {
                let mut m = f64::NEG_INFINITY;
                for u in 0..z {
                    for t in 0..z {
                        m = m.max(at(x, &[ch, i * s + u, j * s + t]));
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Dataset of random images, `sizes[k]` images for person k.
pub fn random_dataset(sizes: &[usize], c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let mut images = Vec::new();
    for (k, &n) in sizes.iter().enumerate() {
        for _ in 0..n {
            images.push(LabeledImage {
                pixels: uniform_image(c, h, w, rng),
                person_id: format!("person{k:03}"),
                source: "random".into(),
            });
        }
    }
    Dataset::new(images).unwrap()
}

pub fn all_classes(d: &Dataset) -> Vec<ClassId> {
    d.class_ids().collect()
}
