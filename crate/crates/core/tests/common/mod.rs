//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the library's numeric code; each oracle uses a
//! different formulation from the one under test.
#![allow(dead_code)]

use fusion_probe::probe::{LabeledFeatures, ProbeModel};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `p_i = 1 / sum_j exp(z_j - z_i)`: no max-shift, no shared normalizer.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    z.iter()
        .map(|zi| 1.0 / z.iter().map(|zj| (zj - zi).exp()).sum::<f64>())
        .collect()
}

/// Mean cross-entropy from raw parameters, written out longhand.
pub fn mean_loss(weights: &[f64], bias: &[f64], data: &LabeledFeatures) -> f64 {
    let classes = bias.len();
    let dim = data.dim();
    let mut total = 0.0;
    for i in 0..data.len() {
        let x = data.row(i);
        let mut z = vec![0.0; classes];
        for c in 0..classes {
            let mut acc = bias[c];
            for j in 0..dim {
                acc += weights[c * dim + j] * x[j];
            }
            z[c] = acc;
        }
        let y = data.label(i);
        // -log p_y with p_y from the pairwise form above.
        let denom: f64 = z.iter().map(|zj| (zj - z[y]).exp()).sum();
        total += denom.ln();
    }
    total / data.len() as f64
}

/// Central differences of [`mean_loss`], flattened weights then bias.
pub fn fd_gradient(model: &ProbeModel, data: &LabeledFeatures, h: f64) -> Vec<f64> {
    let mut w = model.weights.clone();
    let mut b = model.bias.clone();
    let mut out = Vec::with_capacity(w.len() + b.len());
    for i in 0..w.len() {
        let orig = w[i];
        w[i] = orig + h;
        let up = mean_loss(&w, &b, data);
        w[i] = orig - h;
        let down = mean_loss(&w, &b, data);
        w[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    for i in 0..b.len() {
        let orig = b[i];
        b[i] = orig + h;
        let up = mean_loss(&w, &b, data);
        b[i] = orig - h;
        let down = mean_loss(&w, &b, data);
        b[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Plain running-sum mean, in the order given.
pub fn pool(vectors: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; vectors[0].len()];
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    acc.iter().map(|a| a / vectors.len() as f64).collect()
}

/// Classic perceptron with bias. Returns the weights if it reaches zero
/// training errors within `max_epochs`, which certifies linear separability.
pub fn perceptron(points: &[[f64; 2]], labels: &[usize], max_epochs: usize) -> Option<[f64; 3]> {
    let mut w = [0.0; 3];
    for _ in 0..max_epochs {
        let mut errors = 0;
        for (p, &l) in points.iter().zip(labels) {
            let y = if l == 1 { 1.0 } else { -1.0 };
            let s = w[0] * p[0] + w[1] * p[1] + w[2];
            if y * s <= 0.0 {
                w[0] += y * p[0];
                w[1] += y * p[1];
                w[2] += y;
                errors += 1;
            }
        }
        if errors == 0 {
            return Some(w);
        }
    }
    None
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            scale * v
        })
        .collect::<Vec<f64>>()
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Two Gaussian blobs (sigma 1) centred at `(+-centre, 0)`, with every point
/// closer than `half_gap` to the line `x = 0` redrawn. The classes are then
/// at least `2 * half_gap` apart along x.
pub fn blobs(rng: &mut ChaCha8Rng, per_class: usize, centre: f64, half_gap: f64) -> (Vec<[f64; 2]>, Vec<usize>) {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for class in 0..2 {
        let sign = if class == 1 { 1.0 } else { -1.0 };
        let mut made = 0;
        while made < per_class {
            let noise: f64 = StandardNormal.sample(rng);
            let x = sign * centre + noise;
            let y: f64 = StandardNormal.sample(rng);
            if sign * x >= half_gap {
                points.push([x, y]);
                labels.push(class);
                made += 1;
            }
        }
    }
    (points, labels)
}

/// Smallest horizontal gap between the two classes of [`blobs`] output.
pub fn x_gap(points: &[[f64; 2]], labels: &[usize]) -> f64 {
    let min_pos = points
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(p, _)| p[0])
        .fold(f64::INFINITY, f64::min);
    let max_neg = points
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(p, _)| p[0])
        .fold(f64::NEG_INFINITY, f64::max);
    min_pos - max_neg
}
