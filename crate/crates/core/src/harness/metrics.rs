//! Evaluation metrics and report structures.
//!
//! Identification enrolls one centroid per class from the aligned images
//! and ranks probes by cosine against the centroids. Verification scores
//! every unordered pair of probe embeddings; the acceptance threshold for a
//! FAR target is the ceil(FAR * n_impostor)-th largest impostor score, and
//! an entry whose target cannot be resolved by the available impostor count
//! is flagged unreliable instead of silently reported.
//!
//! Both protocols run twice, on aligned images and on alignment-perturbed
//! copies, and the report carries the aligned-minus-perturbed gaps.

use crate::data::{perturb_alignment, Dataset, PerturbSpec, Sample};
use crate::error::Result;
use crate::parallel;
use crate::recognizer::{cosines, embed, MarginConfig, ModelParams};
use crate::rng::stream;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TarEntry {
    pub far: f64,
    pub tar: f64,
    pub threshold: f64,
    pub reliable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    /// Closed-set classifier accuracy (argmax cosine over classifier rows).
    pub accuracy: f64,
    /// Nearest-centroid identification.
    pub rank1: f64,
    pub rank5: f64,
    pub tar: Vec<TarEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGaps {
    pub accuracy: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub tar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perturb: PerturbSpec,
    pub n_probes: usize,
    pub n_genuine_pairs: usize,
    pub n_impostor_pairs: usize,
    pub aligned: ArmMetrics,
    pub perturbed: ArmMetrics,
    pub gaps: EvalGaps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurves {
    /// Per-iteration mean loss on the adversarially warped batch (empty in
    /// baseline mode).
    pub l1: Vec<f64>,
    /// Per-iteration mean loss on the benign batch.
    pub l2: Vec<f64>,
    pub lr: Vec<f64>,
}

/// Aggregates over every per-sample attack run during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackStats {
    pub samples: u64,
    pub feasible: u64,
    /// Samples where every step saw nonzero gradients on all unfrozen
    /// components; the deviation statistics below are over this subset.
    pub all_nonzero_grad_samples: u64,
    pub mean_pre_projection_deviation: f64,
    pub std_pre_projection_deviation: f64,
    /// Fraction of samples with loss_after >= loss_before.
    pub ascent_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub training: Option<TrainingCurves>,
    pub attack: Option<AttackStats>,
    pub evaluation: Option<EvalReport>,
}

/// Incremental mean/variance over the filtered deviation norms.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct DeviationWelford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl DeviationWelford {
    pub(crate) fn push(&mut self, value: f64) {
        self.n += 1;
        let delta = value - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (value - self.mean);
    }

    pub(crate) fn count(&self) -> u64 {
        self.n
    }

    pub(crate) fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.mean
        }
    }

    pub(crate) fn std(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / self.n as f64).sqrt()
        }
    }
}

fn class_centroids(embeddings: &[Vec<f64>], labels: &[usize], n_classes: usize, d: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; d]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (z, &y) in embeddings.iter().zip(labels) {
        counts[y] += 1;
        for (slot, v) in sums[y].iter_mut().zip(z) {
            *slot += v;
        }
    }
    for (c, sum) in sums.iter_mut().enumerate() {
        if counts[c] == 0 {
            continue;
        }
        let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in sum.iter_mut() {
                *v /= norm;
            }
        }
    }
    sums
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn identification(embeddings: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> (f64, f64) {
    let n = embeddings.len();
    let mut rank1 = 0usize;
    let mut rank5 = 0usize;
    for (z, &y) in embeddings.iter().zip(labels) {
        let own = dot(z, &centroids[y]);
        let better = centroids
            .iter()
            .enumerate()
            .filter(|(c, ctr)| *c != y && dot(z, ctr) > own)
            .count();
        if better == 0 {
            rank1 += 1;
        }
        if better < 5 {
            rank5 += 1;
        }
    }
    (rank1 as f64 / n as f64, rank5 as f64 / n as f64)
}

fn classifier_accuracy(params: &ModelParams, embeddings: &[Vec<f64>], labels: &[usize]) -> f64 {
    let correct = embeddings
        .iter()
        .zip(labels)
        .filter(|(z, &y)| {
            let cos = cosines(params, z);
            let best = cos
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite cosines"))
                .expect("at least one class")
                .0;
            best == y
        })
        .count();
    correct as f64 / embeddings.len() as f64
}

/// TAR at each requested FAR from exhaustive pair scores.
fn verification(embeddings: &[Vec<f64>], labels: &[usize], fars: &[f64]) -> (Vec<TarEntry>, usize, usize) {
    let n = embeddings.len();
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let score = dot(&embeddings[i], &embeddings[j]);
            if labels[i] == labels[j] {
                genuine.push(score);
            } else {
                impostor.push(score);
            }
        }
    }
    impostor.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    let entries = fars
        .iter()
        .map(|&far| {
            if impostor.is_empty() || genuine.is_empty() {
                return TarEntry {
                    far,
                    tar: 0.0,
                    threshold: 0.0,
                    reliable: false,
                };
            }
            let need = far * impostor.len() as f64;
            let reliable = need >= 1.0;
            let k = (need.ceil() as usize).clamp(1, impostor.len());
            let threshold = impostor[k - 1];
            let tar = genuine.iter().filter(|s| **s >= threshold).count() as f64 / genuine.len() as f64;
            TarEntry {
                far,
                tar,
                threshold,
                reliable,
            }
        })
        .collect();
    (entries, genuine.len(), impostor.len())
}

fn arm_metrics(
    params: &ModelParams,
    embeddings: &[Vec<f64>],
    labels: &[usize],
    centroids: &[Vec<f64>],
    fars: &[f64],
) -> (ArmMetrics, usize, usize) {
    let (rank1, rank5) = identification(embeddings, labels, centroids);
    let accuracy = classifier_accuracy(params, embeddings, labels);
    let (tar, n_gen, n_imp) = verification(embeddings, labels, fars);
    (
        ArmMetrics {
            accuracy,
            rank1,
            rank5,
            tar,
        },
        n_gen,
        n_imp,
    )
}

/// Evaluate a model on a dataset: aligned arm, perturbed arm, and gaps.
///
/// The perturbation of sample `id` is drawn from the stream
/// `(seed, "eval-perturb", id)`, so results do not depend on worker count
/// or iteration order. The margin configuration is not used at evaluation
/// time beyond providing the classifier; scoring uses plain cosines.
pub fn evaluate(
    params: &ModelParams,
    _margin: &MarginConfig,
    dataset: &Dataset,
    spec: &PerturbSpec,
    fars: &[f64],
    seed: u64,
) -> Result<EvalReport> {
    assert!(!dataset.is_empty(), "evaluation needs a nonempty dataset");
    let labels: Vec<usize> = dataset.samples.iter().map(|s| s.label).collect();
    let aligned_embeddings = parallel::map_slice(&dataset.samples, |s| embed(params, &s.image));
    let perturbed: Vec<Sample> = parallel::map_slice(&dataset.samples, |s| {
        let mut rng = stream(seed, "eval-perturb", s.id);
        perturb_alignment(s, spec, &mut rng)
    });
    let perturbed_embeddings = parallel::map_slice(&perturbed, |s| embed(params, &s.image));

    let centroids = class_centroids(&aligned_embeddings, &labels, dataset.n_classes, params.meta.embed_dim);
    let (aligned, n_gen, n_imp) = arm_metrics(params, &aligned_embeddings, &labels, &centroids, fars);
    let (perturbed_arm, _, _) = arm_metrics(params, &perturbed_embeddings, &labels, &centroids, fars);

    let gaps = EvalGaps {
        accuracy: aligned.accuracy - perturbed_arm.accuracy,
        rank1: aligned.rank1 - perturbed_arm.rank1,
        rank5: aligned.rank5 - perturbed_arm.rank5,
        tar: aligned
            .tar
            .iter()
            .zip(&perturbed_arm.tar)
            .map(|(a, p)| a.tar - p.tar)
            .collect(),
    };
    Ok(EvalReport {
        perturb: *spec,
        n_probes: dataset.len(),
        n_genuine_pairs: n_gen,
        n_impostor_pairs: n_imp,
        aligned,
        perturbed: perturbed_arm,
        gaps,
    })
}
