//! Generalized end-to-end (GE2E) losses and their exact gradients.
//!
//! A batch holds `N` speakers with `M` utterances each, speaker-major. Each
//! utterance embedding `e_ji` is scored against every speaker centroid:
//!
//! ```text
//! S[j,i,k] = w * cos(e_ji, c_k) + b
//! ```
//!
//! where `c_k` is the mean embedding of speaker `k`, except that the own
//! centroid `c_j` leaves `e_ji` out. Softmax loss per utterance is
//! `-S[j,i,j] + log sum_k exp S[j,i,k]`; contrast loss is
//! `1 - sig(S[j,i,j]) + max_{k != j} sig(S[j,i,k])`. Batch losses are sums.

use crate::dvector::{backward_embedding, forward_trace, l2, Gradients, Parameters};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Softmax,
    Contrast,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(LossKind::Softmax),
            "contrast" => Ok(LossKind::Contrast),
            _ => Err(Error::Invalid(format!("loss must be softmax or contrast, got {s}"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Softmax => "softmax",
            LossKind::Contrast => "contrast",
        })
    }
}

/// `N x M` utterances in speaker-major order.
#[derive(Debug, Clone)]
pub struct Ge2eBatch {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub features: Vec<FeatureSequence>,
}

impl Ge2eBatch {
    pub fn new(speakers: usize, utterances_per_speaker: usize, features: Vec<FeatureSequence>) -> Result<Self> {
        check_shape(speakers, utterances_per_speaker)?;
        if features.len() != speakers * utterances_per_speaker {
            return Err(Error::Shape(format!(
                "{} utterances for a {speakers} x {utterances_per_speaker} batch",
                features.len()
            )));
        }
        Ok(Self {
            speakers,
            utterances_per_speaker,
            features,
        })
    }
}

fn check_shape(n: usize, m: usize) -> Result<()> {
    if n < 2 || m < 2 {
        return Err(Error::Shape(format!(
            "GE2E batch needs at least 2 speakers x 2 utterances, got {n} x {m}"
        )));
    }
    Ok(())
}

/// `S[j,i,k]`, stored with `k` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub cosines: Vec<f64>,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn at(&self, j: usize, i: usize, k: usize) -> f64 {
        self.values[(j * self.utterances_per_speaker + i) * self.speakers + k]
    }

    fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.speakers..(row + 1) * self.speakers]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sum vectors for each speaker centroid (cosine ignores scale).
fn centroid_sums(embeddings: &[Vec<f64>], n: usize, m: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let mut sum = vec![0.0; embeddings[0].len()];
            for e in &embeddings[k * m..(k + 1) * m] {
                for (s, v) in sum.iter_mut().zip(e) {
                    *s += v;
                }
            }
            sum
        })
        .collect()
}

fn centroid_for(sums: &[Vec<f64>], embeddings: &[Vec<f64>], j: usize, i: usize, k: usize, m: usize) -> Vec<f64> {
    if k == j {
        sums[k]
            .iter()
            .zip(&embeddings[j * m + i])
            .map(|(s, e)| s - e)
            .collect()
    } else {
        sums[k].clone()
    }
}

pub fn similarity_matrix(
    embeddings: &[Vec<f64>],
    speakers: usize,
    utterances_per_speaker: usize,
    w: f64,
    b: f64,
) -> Result<SimilarityMatrix> {
    let (n, m) = (speakers, utterances_per_speaker);
    check_shape(n, m)?;
    if embeddings.len() != n * m {
        return Err(Error::Shape(format!(
            "{} embeddings for a {n} x {m} batch",
            embeddings.len()
        )));
    }
    if !(w > 0.0) {
        return Err(Error::Invalid(format!("GE2E scale must be positive, got {w}")));
    }
    let sums = centroid_sums(embeddings, n, m);
    let mut cosines = Vec::with_capacity(n * m * n);
    for j in 0..n {
        for i in 0..m {
            let e = &embeddings[j * m + i];
            let ne = l2(e);
            for k in 0..n {
                let c = centroid_for(&sums, embeddings, j, i, k, m);
                let denom = ne * l2(&c);
                if !(denom > 0.0) {
                    return Err(Error::Numeric(format!(
                        "zero-norm centroid for speaker {k} (utterance {j}/{i})"
                    )));
                }
                cosines.push(dot(e, &c) / denom);
            }
        }
    }
    let values = cosines.iter().map(|c| w * c + b).collect();
    Ok(SimilarityMatrix {
        speakers: n,
        utterances_per_speaker: m,
        cosines,
        values,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Index of the largest `S[j,i,k]` over `k != j`; first on ties.
fn hardest_negative(row: &[f64], j: usize) -> usize {
    let mut best = usize::MAX;
    for (k, &v) in row.iter().enumerate() {
        if k != j && (best == usize::MAX || v > row[best]) {
            best = k;
        }
    }
    best
}

/// Per-utterance losses, speaker-major.
pub fn utterance_losses(s: &SimilarityMatrix, kind: LossKind) -> Vec<f64> {
    let (n, m) = (s.speakers, s.utterances_per_speaker);
    (0..n * m)
        .map(|row_idx| {
            let j = row_idx / m;
            let row = s.row(row_idx);
            match kind {
                LossKind::Softmax => log_sum_exp(row) - row[j],
                LossKind::Contrast => {
                    1.0 - sigmoid(row[j]) + sigmoid(row[hardest_negative(row, j)])
                }
            }
        })
        .collect()
}

pub fn ge2e_loss(s: &SimilarityMatrix, kind: LossKind) -> f64 {
    utterance_losses(s, kind).iter().sum()
}

/// `(loss, dLoss/dS)`.
pub fn loss_and_grad(s: &SimilarityMatrix, kind: LossKind) -> (f64, Vec<f64>) {
    let (n, m) = (s.speakers, s.utterances_per_speaker);
    let mut grad = vec![0.0; s.values.len()];
    let mut loss = 0.0;
    for row_idx in 0..n * m {
        let j = row_idx / m;
        let row = s.row(row_idx);
        let g = &mut grad[row_idx * n..(row_idx + 1) * n];
        match kind {
            LossKind::Softmax => {
                let lse = log_sum_exp(row);
                loss += lse - row[j];
                for (gk, &v) in g.iter_mut().zip(row) {
                    *gk = (v - lse).exp();
                }
                g[j] -= 1.0;
            }
            LossKind::Contrast => {
                let neg = hardest_negative(row, j);
                let sp = sigmoid(row[j]);
                let sn = sigmoid(row[neg]);
                loss += 1.0 - sp + sn;
                g[j] = -sp * (1.0 - sp);
                g[neg] = sn * (1.0 - sn);
            }
        }
    }
    (loss, grad)
}

/// Gradient of the loss with respect to each embedding and to `(w, b)`,
/// given `dLoss/dS`.
pub fn similarity_backward(
    embeddings: &[Vec<f64>],
    s: &SimilarityMatrix,
    w: f64,
    d_s: &[f64],
) -> (Vec<Vec<f64>>, f64, f64) {
    let (n, m) = (s.speakers, s.utterances_per_speaker);
    let dim = embeddings[0].len();
    let sums = centroid_sums(embeddings, n, m);
    let mut d_emb = vec![vec![0.0; dim]; n * m];
    // Gradient with respect to each full centroid sum, spread to members later.
    let mut d_sum = vec![vec![0.0; dim]; n];
    let mut d_w = 0.0;
    let mut d_b = 0.0;

    for j in 0..n {
        for i in 0..m {
            let row_idx = j * m + i;
            let e = &embeddings[row_idx];
            let ne = l2(e);
            for k in 0..n {
                let idx = row_idx * n + k;
                let g = d_s[idx];
                if g == 0.0 {
                    continue;
                }
                let cos = s.cosines[idx];
                d_w += g * cos;
                d_b += g;
                let gc = g * w;
                let c = centroid_for(&sums, embeddings, j, i, k, m);
                let nc = l2(&c);
                for d in 0..dim {
                    d_emb[row_idx][d] += gc * (c[d] / (ne * nc) - cos * e[d] / (ne * ne));
                }
                let dc: Vec<f64> = (0..dim)
                    .map(|d| gc * (e[d] / (ne * nc) - cos * c[d] / (nc * nc)))
                    .collect();
                if k == j {
                    // Leave-one-out sum: every member except i.
                    for d in 0..dim {
                        d_sum[k][d] += dc[d];
                        d_emb[row_idx][d] -= dc[d];
                    }
                } else {
                    for d in 0..dim {
                        d_sum[k][d] += dc[d];
                    }
                }
            }
        }
    }
    for k in 0..n {
        for i in 0..m {
            for d in 0..dim {
                d_emb[k * m + i][d] += d_sum[k][d];
            }
        }
    }
    (d_emb, d_w, d_b)
}

/// Loss of a batch under `params`.
pub fn batch_loss(params: &Parameters, batch: &Ge2eBatch, kind: LossKind) -> Result<f64> {
    let embeddings = batch
        .features
        .iter()
        .map(|f| forward_trace(params, f).map(|t| t.embedding.values().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let s = similarity_matrix(
        &embeddings,
        batch.speakers,
        batch.utterances_per_speaker,
        params.ge2e_scale,
        params.ge2e_offset,
    )?;
    Ok(ge2e_loss(&s, kind))
}

/// Loss and exact gradient with respect to every parameter, including the
/// GE2E scale and offset. Per-utterance contributions are summed in
/// speaker-major order.
pub fn backward(params: &Parameters, batch: &Ge2eBatch, kind: LossKind) -> Result<(f64, Gradients)> {
    let traces = batch
        .features
        .iter()
        .map(|f| forward_trace(params, f))
        .collect::<Result<Vec<_>>>()?;
    let embeddings: Vec<Vec<f64>> = traces.iter().map(|t| t.embedding.values().to_vec()).collect();
    let s = similarity_matrix(
        &embeddings,
        batch.speakers,
        batch.utterances_per_speaker,
        params.ge2e_scale,
        params.ge2e_offset,
    )?;
    let (loss, d_s) = loss_and_grad(&s, kind);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite GE2E loss {loss}")));
    }
    let (d_emb, d_w, d_b) = similarity_backward(&embeddings, &s, params.ge2e_scale, &d_s);
    let mut grads = params.zeros_like();
    for (trace, d) in traces.iter().zip(&d_emb) {
        backward_embedding(params, trace, d, &mut grads)?;
    }
    grads.ge2e_scale = d_w;
    grads.ge2e_offset = d_b;
    Ok((loss, grads))
}

/// Largest relative error between analytic and central-difference gradients
/// over `samples` coordinates drawn with `seed`:
/// `|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)`.
pub fn gradient_check(
    params: &Parameters,
    batch: &Ge2eBatch,
    kind: LossKind,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Invalid(format!("epsilon must be in (0, 1e-2], got {epsilon}")));
    }
    if samples == 0 {
        return Err(Error::Invalid("gradient check needs at least one coordinate".into()));
    }
    let (_, grads) = backward(params, batch, kind)?;
    let mut rng = SplitMix64::new(seed);
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let idx = rng.below(params.len());
        let original = params.scalar(idx);
        *probe.scalar_mut(idx) = original + epsilon;
        let plus = batch_loss(&probe, batch, kind)?;
        *probe.scalar_mut(idx) = original - epsilon;
        let minus = batch_loss(&probe, batch, kind)?;
        *probe.scalar_mut(idx) = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grads.scalar(idx);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dvector::{init_network, NetworkSpec};
    use crate::features::Provenance;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = l2(v);
        v.iter().map(|x| x / n).collect()
    }

    fn orthogonal_batch(n: usize, m: usize) -> Vec<Vec<f64>> {
        (0..n)
            .flat_map(|j| {
                (0..m).map(move |_| {
                    let mut e = vec![0.0; n];
                    e[j] = 1.0;
                    e
                })
            })
            .collect()
    }

    fn random_unit_batch(rng: &mut SplitMix64, n: usize, m: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n * m)
            .map(|_| unit(&(0..dim).map(|_| rng.gaussian()).collect::<Vec<_>>()))
            .collect()
    }

    #[test]
    fn orthogonal_centroids_give_w_and_zero() {
        let emb = orthogonal_batch(3, 2);
        let s = similarity_matrix(&emb, 3, 2, 10.0, 0.0).unwrap();
        for j in 0..3 {
            for i in 0..2 {
                for k in 0..3 {
                    let expected = if j == k { 10.0 } else { 0.0 };
                    assert!((s.at(j, i, k) - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn antipodal_centroids_give_minus_one() {
        let emb = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0], vec![-1.0, 0.0]];
        let s = similarity_matrix(&emb, 2, 2, 1.0, 0.0).unwrap();
        assert!((s.at(0, 0, 1) + 1.0).abs() < 1e-12);
        assert!((s.at(1, 1, 0) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn own_centroid_leaves_utterance_out() {
        let u = unit(&[1.0, 0.2]);
        let v = unit(&[0.3, 1.0]);
        let other = vec![vec![-1.0, 0.0], vec![0.0, -1.0]];
        let emb = vec![u.clone(), v.clone(), other[0].clone(), other[1].clone()];
        let s = similarity_matrix(&emb, 2, 2, 1.0, 0.0).unwrap();
        let against_v = dot(&u, &v);
        let mean: Vec<f64> = u.iter().zip(&v).map(|(a, b)| (a + b) / 2.0).collect();
        let against_mean = dot(&u, &mean) / l2(&mean);
        assert!((s.at(0, 0, 0) - against_v).abs() < 1e-12);
        assert!((against_v - against_mean).abs() > 1e-3);
    }

    #[test]
    fn batch_shape_is_checked() {
        let emb = orthogonal_batch(1, 3);
        assert!(matches!(similarity_matrix(&emb, 1, 3, 1.0, 0.0), Err(Error::Shape(_))));
        let emb = orthogonal_batch(3, 1);
        assert!(matches!(similarity_matrix(&emb, 3, 1, 1.0, 0.0), Err(Error::Shape(_))));
        let emb = orthogonal_batch(2, 2);
        assert!(similarity_matrix(&emb, 2, 2, 0.0, 0.0).is_err());
    }

    #[test]
    fn degenerate_batch_closed_forms() {
        let emb = orthogonal_batch(2, 3);
        let s = similarity_matrix(&emb, 2, 3, 10.0, 0.0).unwrap();
        let soft = utterance_losses(&s, LossKind::Softmax);
        let expected = (1.0 + (-10.0f64).exp()).ln();
        assert!(soft.iter().all(|l| (l - expected).abs() < 1e-15));
        assert!((expected - 4.54e-5).abs() < 1e-7);

        let contrast = utterance_losses(&s, LossKind::Contrast);
        let expected = 1.0 - sigmoid(10.0) + 0.5;
        assert!(contrast.iter().all(|l| (l - expected).abs() < 1e-15));
        assert!((expected - 0.50005).abs() < 5e-6);
    }

    #[test]
    fn identical_embeddings_give_log_n() {
        let emb = vec![vec![0.6, 0.8]; 4 * 3];
        let s = similarity_matrix(&emb, 4, 3, 10.0, -5.0).unwrap();
        for l in utterance_losses(&s, LossKind::Softmax) {
            assert!((l - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_backward_matches_finite_differences() {
        let mut rng = SplitMix64::new(17);
        let (n, m, dim) = (3, 3, 4);
        let emb = random_unit_batch(&mut rng, n, m, dim);
        let (w, b) = (7.0, -2.0);
        for kind in [LossKind::Softmax, LossKind::Contrast] {
            let s = similarity_matrix(&emb, n, m, w, b).unwrap();
            let (_, d_s) = loss_and_grad(&s, kind);
            let (d_emb, d_w, d_b) = similarity_backward(&emb, &s, w, &d_s);
            let loss_at = |emb: &[Vec<f64>], w: f64, b: f64| {
                ge2e_loss(&similarity_matrix(emb, n, m, w, b).unwrap(), kind)
            };
            let eps = 1e-6;
            for u in 0..n * m {
                for d in 0..dim {
                    let mut plus = emb.clone();
                    plus[u][d] += eps;
                    let mut minus = emb.clone();
                    minus[u][d] -= eps;
                    let num = (loss_at(&plus, w, b) - loss_at(&minus, w, b)) / (2.0 * eps);
                    assert!((num - d_emb[u][d]).abs() < 1e-6, "{kind} {u} {d}: {num} {}", d_emb[u][d]);
                }
            }
            let num_w = (loss_at(&emb, w + eps, b) - loss_at(&emb, w - eps, b)) / (2.0 * eps);
            let num_b = (loss_at(&emb, w, b + eps) - loss_at(&emb, w, b - eps)) / (2.0 * eps);
            assert!((num_w - d_w).abs() < 1e-6);
            assert!((num_b - d_b).abs() < 1e-6);
        }
    }

    #[test]
    fn offset_gradient_at_minimum() {
        let emb = orthogonal_batch(2, 2);
        let s = similarity_matrix(&emb, 2, 2, 10.0, 0.0).unwrap();
        let (_, d_s) = loss_and_grad(&s, LossKind::Softmax);
        let (_, _, d_b) = similarity_backward(&emb, &s, 10.0, &d_s);
        let eps = 1e-5;
        let at = |b| ge2e_loss(&similarity_matrix(&emb, 2, 2, 10.0, b).unwrap(), LossKind::Softmax);
        let numeric = (at(eps) - at(-eps)) / (2.0 * eps);
        assert!((numeric - d_b).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn loss_bounds_hold(seed in any::<u64>(), n in 2usize..5, m in 2usize..4, w in 0.5f64..20.0, b in -10.0f64..10.0) {
            let mut rng = SplitMix64::new(seed);
            let emb = random_unit_batch(&mut rng, n, m, 3);
            let s = similarity_matrix(&emb, n, m, w, b).unwrap();
            for l in utterance_losses(&s, LossKind::Contrast) {
                prop_assert!((0.0..=2.0).contains(&l));
            }
            let upper = (n as f64).ln() + 2.0 * w;
            for l in utterance_losses(&s, LossKind::Softmax) {
                prop_assert!(l >= 0.0 && l <= upper + 1e-12);
            }
        }

        #[test]
        fn speaker_permutation_permutes_similarities(seed in any::<u64>()) {
            let (n, m) = (4, 3);
            let mut rng = SplitMix64::new(seed);
            let emb = random_unit_batch(&mut rng, n, m, 5);
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let permuted: Vec<Vec<f64>> = perm
                .iter()
                .flat_map(|&j| emb[j * m..(j + 1) * m].to_vec())
                .collect();
            let s = similarity_matrix(&emb, n, m, 10.0, -5.0).unwrap();
            let sp = similarity_matrix(&permuted, n, m, 10.0, -5.0).unwrap();
            for (jn, &jo) in perm.iter().enumerate() {
                for i in 0..m {
                    for (kn, &ko) in perm.iter().enumerate() {
                        prop_assert!((sp.at(jn, i, kn) - s.at(jo, i, ko)).abs() < 1e-12);
                    }
                }
            }
            for kind in [LossKind::Softmax, LossKind::Contrast] {
                prop_assert!((ge2e_loss(&s, kind) - ge2e_loss(&sp, kind)).abs() < 1e-9);
            }
        }
    }

    fn tiny_batch(seed: u64, input_dim: usize, n: usize, m: usize, frames: usize) -> Ge2eBatch {
        let mut rng = SplitMix64::new(seed);
        let features = (0..n * m)
            .map(|_| {
                let data = (0..frames * input_dim).map(|_| rng.gaussian()).collect();
                FeatureSequence::new(frames, input_dim, data, Provenance::Synthetic).unwrap()
            })
            .collect();
        Ge2eBatch::new(n, m, features).unwrap()
    }

    #[test]
    fn network_gradient_check_passes() {
        let spec = NetworkSpec {
            input_dim: 4,
            num_layers: 2,
            cells: 5,
            projection_dim: 3,
            output_dim: 3,
        };
        let params = init_network(spec, 5).unwrap();
        let batch = tiny_batch(1, 4, 3, 2, 4);
        for kind in [LossKind::Softmax, LossKind::Contrast] {
            let err = gradient_check(&params, &batch, kind, 1e-5, 100, 3).unwrap();
            assert!(err < 1e-4, "{kind}: {err}");
        }
    }

    #[test]
    fn larger_epsilon_is_less_accurate() {
        let params = init_network(NetworkSpec::td_small(4), 5).unwrap();
        let batch = tiny_batch(2, 4, 2, 2, 3);
        let fine = gradient_check(&params, &batch, LossKind::Softmax, 1e-4, 50, 8).unwrap();
        let coarse = gradient_check(&params, &batch, LossKind::Softmax, 1e-2, 50, 8).unwrap();
        assert!(coarse > fine, "{coarse} <= {fine}");
        assert!(gradient_check(&params, &batch, LossKind::Softmax, 0.1, 1, 0).is_err());
    }

    #[test]
    fn summing_a_repeated_batch_doubles_loss_and_gradients() {
        // Duplicating utterances inside one batch would move the leave-one-out
        // centroids, so "doubling" means summing the batch objective twice.
        let params = init_network(NetworkSpec::td_small(3), 4).unwrap();
        let batch = tiny_batch(3, 3, 2, 2, 3);
        let (loss, grads) = backward(&params, &batch, LossKind::Softmax).unwrap();
        let mut total_loss = 0.0;
        let mut total = grads.zeros_like();
        for _ in 0..2 {
            let (l, g) = backward(&params, &batch, LossKind::Softmax).unwrap();
            total_loss += l;
            total.add_scaled(&g, 1.0);
        }
        assert_eq!(total_loss, 2.0 * loss);
        let mut doubled = grads.clone();
        doubled.scale(2.0);
        assert_eq!(total, doubled);
    }
}
