//! Retrieval metrics over probe/gallery embeddings.
//!
//! Gallery entries are ordered by descending score; equal scores keep
//! gallery index order, so every ranking is deterministic.

use crate::adversarial::Fusion;
use crate::data::CrossViewDataset;
use crate::error::{check_dim, Error, Result};
use crate::model::Model;
use crate::numerics::{dot, gaussian_kl_diag, GaussianParams, SIGMA_FLOOR};
use crate::training::{model_config_for, EpochRecord, EvalSet, TrainConfig, Trainer, ViewMetrics};
use crate::vrnn::{FrameSequence, SequenceEmbedding};

/// Inner product of two embeddings.
pub fn similarity(probe: &SequenceEmbedding, gallery: &SequenceEmbedding) -> Result<f64> {
    check_dim("embedding", probe.vector.len(), gallery.vector.len())?;
    Ok(dot(&probe.vector, &gallery.vector))
}

/// Probe × gallery scores with the identity label of every row and column.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    scores: Vec<f64>,
    probe_labels: Vec<usize>,
    gallery_labels: Vec<usize>,
}

impl ScoreMatrix {
    /// `scores` is row-major, one row per probe.
    pub fn new(
        scores: Vec<f64>,
        probe_labels: Vec<usize>,
        gallery_labels: Vec<usize>,
    ) -> Result<Self> {
        check_dim(
            "score entries",
            probe_labels.len() * gallery_labels.len(),
            scores.len(),
        )?;
        if let Some(v) = scores.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("score {v}")));
        }
        Ok(Self {
            scores,
            probe_labels,
            gallery_labels,
        })
    }

    pub fn from_embeddings(
        probes: &[SequenceEmbedding],
        gallery: &[SequenceEmbedding],
    ) -> Result<Self> {
        let mut scores = Vec::with_capacity(probes.len() * gallery.len());
        for p in probes {
            for g in gallery {
                scores.push(similarity(p, g)?);
            }
        }
        Self::new(
            scores,
            probes.iter().map(|e| e.label).collect(),
            gallery.iter().map(|e| e.label).collect(),
        )
    }

    pub fn rows(&self) -> usize {
        self.probe_labels.len()
    }

    pub fn cols(&self) -> usize {
        self.gallery_labels.len()
    }

    pub fn row(&self, probe: usize) -> &[f64] {
        let c = self.cols();
        &self.scores[probe * c..(probe + 1) * c]
    }

    pub fn probe_labels(&self) -> &[usize] {
        &self.probe_labels
    }

    pub fn gallery_labels(&self) -> &[usize] {
        &self.gallery_labels
    }

    /// 1-based position of gallery entry `j` in probe `p`'s ordering.
    fn position(&self, p: usize, j: usize) -> usize {
        let row = self.row(p);
        let s = row[j];
        1 + row
            .iter()
            .enumerate()
            .filter(|&(k, &v)| v > s || (v == s && k < j))
            .count()
    }

    fn relevant(&self, p: usize) -> Result<Vec<usize>> {
        let label = self.probe_labels[p];
        let rel: Vec<usize> = (0..self.cols())
            .filter(|&j| self.gallery_labels[j] == label)
            .collect();
        if rel.is_empty() {
            return Err(Error::MissingMatch { probe: p });
        }
        Ok(rel)
    }
}

/// Rank (1-based) of the best-placed correct match for every probe.
pub fn rank_gallery(scores: &ScoreMatrix) -> Result<Vec<usize>> {
    (0..scores.rows())
        .map(|p| {
            Ok(scores
                .relevant(p)?
                .into_iter()
                .map(|j| scores.position(p, j))
                .min()
                .expect("non-empty"))
        })
        .collect()
}

/// Fraction of probes whose correct match is within the top `r`.
pub fn cmc(ranks: &[usize], r: usize) -> Result<f64> {
    if r == 0 {
        return Err(Error::InvalidConfig("cmc rank must be >= 1".into()));
    }
    if ranks.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(ranks.iter().filter(|&&k| k <= r).count() as f64 / ranks.len() as f64)
}

/// Matching rate at ranks `1..=n`.
#[derive(Clone, Debug, PartialEq)]
pub struct CmcCurve {
    values: Vec<f64>,
}

impl CmcCurve {
    pub fn from_ranks(ranks: &[usize], gallery_size: usize) -> Result<Self> {
        let values = (1..=gallery_size)
            .map(|r| cmc(ranks, r))
            .collect::<Result<_>>()?;
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Rate at rank `r` (1-based); ranks past the end saturate.
    pub fn at(&self, r: usize) -> f64 {
        match self.values.len() {
            0 => 0.0,
            n => self.values[r.clamp(1, n) - 1],
        }
    }
}

/// Mean over probes of average precision over all relevant gallery entries.
pub fn mean_ap(scores: &ScoreMatrix) -> Result<f64> {
    if scores.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for p in 0..scores.rows() {
        let mut positions: Vec<usize> = scores
            .relevant(p)?
            .into_iter()
            .map(|j| scores.position(p, j))
            .collect();
        positions.sort_unstable();
        let ap: f64 = positions
            .iter()
            .enumerate()
            .map(|(hits, &pos)| (hits + 1) as f64 / pos as f64)
            .sum::<f64>()
            / positions.len() as f64;
        total += ap;
    }
    Ok(total / scores.rows() as f64)
}

/// Diagonal-Gaussian fits of both views and the KL between them.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewDivergence {
    pub kl: f64,
    pub probe_fit: GaussianParams,
    pub gallery_fit: GaussianParams,
}

/// Sample mean and (n−1) standard deviation, floored.
pub fn fit_diagonal_gaussian(vectors: &[&[f64]]) -> Result<GaussianParams> {
    if vectors.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 embeddings to fit, got {}",
            vectors.len()
        )));
    }
    let d = vectors[0].len();
    let n = vectors.len() as f64;
    let mut mean = vec![0.0; d];
    for v in vectors {
        check_dim("embedding", d, v.len())?;
        for (m, x) in mean.iter_mut().zip(*v) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; d];
    for v in vectors {
        for ((s, x), m) in var.iter_mut().zip(*v).zip(&mean) {
            *s += (x - m) * (x - m) / (n - 1.0);
        }
    }
    let std = var.iter().map(|v| v.sqrt().max(SIGMA_FLOOR)).collect();
    GaussianParams::new(mean, std)
}

/// `KL(fit(probe) ‖ fit(gallery))`.
pub fn cross_view_kl(
    probes: &[SequenceEmbedding],
    gallery: &[SequenceEmbedding],
) -> Result<ViewDivergence> {
    let p: Vec<&[f64]> = probes.iter().map(|e| e.vector.as_slice()).collect();
    let g: Vec<&[f64]> = gallery.iter().map(|e| e.vector.as_slice()).collect();
    let probe_fit = fit_diagonal_gaussian(&p)?;
    let gallery_fit = fit_diagonal_gaussian(&g)?;
    Ok(ViewDivergence {
        kl: gaussian_kl_diag(&probe_fit, &gallery_fit)?,
        probe_fit,
        gallery_fit,
    })
}

/// Summary of one probe/gallery evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub ranks: Vec<usize>,
    pub cmc: CmcCurve,
    pub mean_ap: f64,
    pub kl: f64,
}

impl Evaluation {
    pub fn rank1(&self) -> f64 {
        self.cmc.at(1)
    }
}

pub fn evaluate_embeddings(
    probes: &[SequenceEmbedding],
    gallery: &[SequenceEmbedding],
) -> Result<Evaluation> {
    let scores = ScoreMatrix::from_embeddings(probes, gallery)?;
    let ranks = rank_gallery(&scores)?;
    Ok(Evaluation {
        cmc: CmcCurve::from_ranks(&ranks, gallery.len())?,
        mean_ap: mean_ap(&scores)?,
        kl: cross_view_kl(probes, gallery)?.kl,
        ranks,
    })
}

/// Embeds both views with `model` and evaluates them.
pub fn evaluate_model(
    model: &Model,
    probes: &[FrameSequence],
    gallery: &[FrameSequence],
) -> Result<Evaluation> {
    evaluate_embeddings(&model.embed_all(probes)?, &model.embed_all(gallery)?)
}

pub const DEFAULT_ABLATION_LENGTHS: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 128];

/// Rank-1 for every (probe length, gallery length) truncation.
#[derive(Clone, Debug, PartialEq)]
pub struct LengthGrid {
    pub lengths: Vec<usize>,
    /// `rank1[i][j]`: probe length `lengths[i]`, gallery length `lengths[j]`.
    pub rank1: Vec<Vec<f64>>,
    /// Mean number of frames actually used per cell, after truncating to
    /// what each sequence has.
    pub effective_probe_len: Vec<Vec<f64>>,
    pub effective_gallery_len: Vec<Vec<f64>>,
}

fn mean_len(seqs: &[FrameSequence], len: usize) -> f64 {
    seqs.iter().map(|s| s.len().min(len) as f64).sum::<f64>() / seqs.len() as f64
}

pub fn rank1_at_lengths(
    model: &Model,
    probes: &[FrameSequence],
    gallery: &[FrameSequence],
    probe_len: usize,
    gallery_len: usize,
) -> Result<f64> {
    let p: Vec<FrameSequence> = probes.iter().map(|s| s.truncated(probe_len)).collect();
    let g: Vec<FrameSequence> = gallery.iter().map(|s| s.truncated(gallery_len)).collect();
    let scores = ScoreMatrix::from_embeddings(&model.embed_all(&p)?, &model.embed_all(&g)?)?;
    cmc(&rank_gallery(&scores)?, 1)
}

pub fn variable_length_ablation(
    model: &Model,
    probes: &[FrameSequence],
    gallery: &[FrameSequence],
    lengths: &[usize],
) -> Result<LengthGrid> {
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::InvalidConfig(
            "lengths must be non-empty and positive".into(),
        ));
    }
    if probes.is_empty() || gallery.is_empty() {
        return Err(Error::EmptyBatch);
    }
    // embed each truncation once
    let embed_at = |seqs: &[FrameSequence], len: usize| -> Result<Vec<SequenceEmbedding>> {
        let cut: Vec<FrameSequence> = seqs.iter().map(|s| s.truncated(len)).collect();
        model.embed_all(&cut)
    };
    let p_embs = lengths
        .iter()
        .map(|&l| embed_at(probes, l))
        .collect::<Result<Vec<_>>>()?;
    let g_embs = lengths
        .iter()
        .map(|&l| embed_at(gallery, l))
        .collect::<Result<Vec<_>>>()?;
    let n = lengths.len();
    let mut grid = LengthGrid {
        lengths: lengths.to_vec(),
        rank1: vec![vec![0.0; n]; n],
        effective_probe_len: vec![vec![0.0; n]; n],
        effective_gallery_len: vec![vec![0.0; n]; n],
    };
    for i in 0..n {
        for j in 0..n {
            let scores = ScoreMatrix::from_embeddings(&p_embs[i], &g_embs[j])?;
            grid.rank1[i][j] = cmc(&rank_gallery(&scores)?, 1)?;
            grid.effective_probe_len[i][j] = mean_len(probes, lengths[i]);
            grid.effective_gallery_len[i][j] = mean_len(gallery, lengths[j]);
        }
    }
    Ok(grid)
}

/// One training run of the fusion comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionRun {
    pub seed: u64,
    pub fusion: Fusion,
    /// Per-epoch metrics on the test set.
    pub curve: Vec<ViewMetrics>,
    pub records: Vec<EpochRecord>,
}

impl FusionRun {
    pub fn final_rank1(&self) -> Option<f64> {
        self.curve.last().map(|m| m.rank1)
    }
}

/// Trains early and late fusion from the same seed for every seed in
/// `seeds` and tracks rank-1 on `test` after each epoch. Runs are returned
/// as `[early, late]` per seed.
pub fn fusion_ablation(
    config: &TrainConfig,
    dataset: &CrossViewDataset,
    test: &EvalSet,
    seeds: &[u64],
) -> Result<Vec<FusionRun>> {
    let mut runs = Vec::with_capacity(2 * seeds.len());
    for &seed in seeds {
        for fusion in [Fusion::Early, Fusion::Late] {
            let cfg = TrainConfig {
                seed,
                fusion,
                ..*config
            };
            let mut trainer =
                Trainer::new(dataset, model_config_for(dataset), cfg)?.with_monitor(test.clone());
            trainer.run()?;
            let records = trainer.records().to_vec();
            let curve = records.iter().filter_map(|r| r.monitor).collect();
            runs.push(FusionRun {
                seed,
                fusion,
                curve,
                records,
            });
        }
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vrnn::View;
    use proptest::prelude::*;

    fn e(v: &[f64], label: usize, view: View) -> SequenceEmbedding {
        SequenceEmbedding {
            vector: v.to_vec(),
            view,
            label,
        }
    }

    #[test]
    fn similarity_cases() {
        let a = e(&[1.0, 0.0], 0, View::Probe);
        let b = e(&[0.0, 3.0], 0, View::Gallery);
        assert_eq!(similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(similarity(&a, &b).unwrap(), 0.0);
        assert!(similarity(&a, &e(&[1.0], 0, View::Gallery)).is_err());
    }

    #[test]
    fn tie_rule() {
        let s = ScoreMatrix::new(vec![0.5; 4], vec![0], vec![0, 1, 2, 3]).unwrap();
        assert_eq!(rank_gallery(&s).unwrap(), vec![1]);
        for j in 0..4 {
            let mut labels = vec![9; 4];
            labels[j] = 0;
            let s = ScoreMatrix::new(vec![0.5; 4], vec![0], labels).unwrap();
            assert_eq!(rank_gallery(&s).unwrap(), vec![j + 1]);
        }
    }

    #[test]
    fn unique_max_is_rank_one_and_missing_match_errors() {
        let s = ScoreMatrix::new(vec![0.1, 0.9, 0.3], vec![1], vec![0, 1, 2]).unwrap();
        assert_eq!(rank_gallery(&s).unwrap(), vec![1]);
        let s = ScoreMatrix::new(vec![0.1, 0.9, 0.3], vec![5], vec![0, 1, 2]).unwrap();
        assert!(matches!(
            rank_gallery(&s),
            Err(Error::MissingMatch { probe: 0 })
        ));
    }

    #[test]
    fn cmc_cases() {
        assert_eq!(cmc(&[3], 1).unwrap(), 0.0);
        assert_eq!(cmc(&[3], 3).unwrap(), 1.0);
        assert_eq!(cmc(&[3], 10).unwrap(), 1.0);
        assert_eq!(cmc(&[1, 1, 1], 1).unwrap(), 1.0);
        assert!(cmc(&[1], 0).is_err());
    }

    #[test]
    fn ap_cases() {
        // one relevant item at rank 3
        let s = ScoreMatrix::new(vec![0.9, 0.8, 0.7, 0.1], vec![0], vec![1, 2, 0, 3]).unwrap();
        assert!((mean_ap(&s).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let s = ScoreMatrix::new(vec![0.9, 0.8, 0.7], vec![0], vec![0, 0, 3]).unwrap();
        assert_eq!(mean_ap(&s).unwrap(), 1.0);
    }

    #[test]
    fn kl_cases() {
        let set = vec![
            e(&[0.0, 1.0], 0, View::Probe),
            e(&[2.0, -1.0], 1, View::Probe),
            e(&[1.0, 0.5], 2, View::Probe),
        ];
        assert_eq!(cross_view_kl(&set, &set).unwrap().kl, 0.0);
        // sample mean 1 / std 1 against mean 0 / std 1
        let h = 1.0 / 2f64.sqrt();
        let p = vec![e(&[1.0 - h], 0, View::Probe), e(&[1.0 + h], 1, View::Probe)];
        let g = vec![e(&[-h], 0, View::Gallery), e(&[h], 1, View::Gallery)];
        let kl = cross_view_kl(&p, &g).unwrap().kl;
        assert!((kl - 0.5).abs() < 1e-12, "{kl}");
        assert!(cross_view_kl(&p[..1], &g).is_err());
    }

    fn brute_positions(row: &[f64]) -> Vec<usize> {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        order
    }

    fn matrix() -> impl Strategy<Value = (usize, usize, Vec<u8>, Vec<usize>, Vec<usize>)> {
        (1usize..=6, 1usize..=8).prop_flat_map(|(r, c)| {
            (
                Just(r),
                Just(c),
                // few distinct values force ties
                proptest::collection::vec(0u8..4, r * c),
                proptest::collection::vec(0usize..3, r),
                proptest::collection::vec(0usize..3, c),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn metrics_match_sort_oracle((r, c, raw, mut pl, gl) in matrix()) {
            // make every probe label present
            for l in pl.iter_mut() {
                if !gl.contains(l) {
                    *l = gl[0];
                }
            }
            let scores: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
            let s = ScoreMatrix::new(scores.clone(), pl.clone(), gl.clone()).unwrap();
            let ranks = rank_gallery(&s).unwrap();
            let mut ap_sum = 0.0;
            for p in 0..r {
                let order = brute_positions(&scores[p * c..(p + 1) * c]);
                let first = order.iter().position(|&j| gl[j] == pl[p]).unwrap() + 1;
                prop_assert_eq!(ranks[p], first);
                let mut hits = 0;
                let mut ap = 0.0;
                for (pos, &j) in order.iter().enumerate() {
                    if gl[j] == pl[p] {
                        hits += 1;
                        ap += hits as f64 / (pos + 1) as f64;
                    }
                }
                ap_sum += ap / hits as f64;
            }
            prop_assert!((mean_ap(&s).unwrap() - ap_sum / r as f64).abs() < 1e-12);
            let curve = CmcCurve::from_ranks(&ranks, c).unwrap();
            for k in 1..=c {
                let want = ranks.iter().filter(|&&x| x <= k).count() as f64 / r as f64;
                prop_assert_eq!(curve.at(k), want);
            }
            prop_assert!(curve.values().windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(curve.at(c), 1.0);
        }

        #[test]
        fn ranks_invariant_to_positive_scaling(
            v in proptest::collection::vec(-3.0f64..3.0, 4 * 5),
            c in 0.1f64..10.0,
        ) {
            let probes: Vec<_> = (0..2).map(|i| e(&v[i * 5..i * 5 + 5], i, View::Probe)).collect();
            let gallery: Vec<_> = (0..2).map(|i| e(&v[10 + i * 5..15 + i * 5], i, View::Gallery)).collect();
            let scaled = |s: &[SequenceEmbedding]| -> Vec<SequenceEmbedding> {
                s.iter().map(|x| e(&x.vector.iter().map(|y| y * c).collect::<Vec<_>>(), x.label, x.view)).collect()
            };
            let a = rank_gallery(&ScoreMatrix::from_embeddings(&probes, &gallery).unwrap()).unwrap();
            let b = rank_gallery(&ScoreMatrix::from_embeddings(&scaled(&probes), &scaled(&gallery)).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn kl_is_nonnegative_and_permutation_invariant(
            v in proptest::collection::vec(-3.0f64..3.0, 2 * 4 * 3),
        ) {
            let p: Vec<_> = (0..4).map(|i| e(&v[i * 3..i * 3 + 3], i, View::Probe)).collect();
            let g: Vec<_> = (0..4).map(|i| e(&v[12 + i * 3..15 + i * 3], i, View::Gallery)).collect();
            let kl = cross_view_kl(&p, &g).unwrap().kl;
            prop_assert!(kl >= 0.0);
            let mut pr = p.clone();
            let mut gr = g.clone();
            pr.reverse();
            gr.reverse();
            prop_assert!((cross_view_kl(&pr, &gr).unwrap().kl - kl).abs() < 1e-9 * (1.0 + kl));
        }
    }
}
