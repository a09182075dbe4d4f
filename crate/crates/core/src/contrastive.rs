//! Two-view batches, label-driven positive sets and the supervised
//! contrastive loss.
//!
//! View layout is zero-based: sample `k` of a batch produces views `2k` and
//! `2k + 1`, which carry the same label key. For anchor `i`:
//!
//! * `A(i)` holds every other view,
//! * `C(i)` holds every other view with the same key (always including the
//!   augmented twin `i ^ 1`).
//!
//! The loss for anchor `i` is `logsumexp_{a in A(i)} s_ia - mean_{c in C(i)} s_ic`
//! with `s = z z^T / temperature`, averaged over anchors with a non-empty `C(i)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataforge::Sample;
use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Which sample attribute defines "same label" when picking positives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LabelKey {
    EyeId,
    Bcva {
        bin_width: Option<u32>,
    },
    Cst {
        bin_width: Option<u32>,
    },
    /// Every sample is its own class: positives are only augmented twins.
    UniqueId,
}

impl LabelKey {
    pub fn value(&self, sample: &Sample) -> i64 {
        match *self {
            LabelKey::EyeId => sample.eye_id as i64,
            LabelKey::Bcva { bin_width } => bin(sample.bcva, bin_width),
            LabelKey::Cst { bin_width } => bin(sample.cst, bin_width),
            LabelKey::UniqueId => sample.sample_id as i64,
        }
    }

    /// Same key, with `width` applied to BCVA/CST.
    pub fn with_bin_width(self, width: Option<u32>) -> Self {
        match self {
            LabelKey::Bcva { .. } => LabelKey::Bcva { bin_width: width },
            LabelKey::Cst { .. } => LabelKey::Cst { bin_width: width },
            other => other,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LabelKey::EyeId => "eye",
            LabelKey::Bcva { .. } => "bcva",
            LabelKey::Cst { .. } => "cst",
            LabelKey::UniqueId => "unique",
        }
    }
}

fn bin(v: i64, width: Option<u32>) -> i64 {
    match width {
        Some(w) if w > 1 => v.div_euclid(w as i64),
        _ => v,
    }
}

impl FromStr for LabelKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eye" => Ok(LabelKey::EyeId),
            "bcva" => Ok(LabelKey::Bcva { bin_width: None }),
            "cst" => Ok(LabelKey::Cst { bin_width: None }),
            "unique" => Ok(LabelKey::UniqueId),
            _ => Err(Error::Parameter {
                name: "label_key",
                detail: format!("`{s}` is not one of eye|bcva|cst|unique"),
            }),
        }
    }
}

impl fmt::Display for LabelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelKey::Bcva { bin_width: Some(w) } | LabelKey::Cst { bin_width: Some(w) } => {
                write!(f, "{}/{w}", self.name())
            }
            _ => f.write_str(self.name()),
        }
    }
}

/// Augmentations for feature vectors. `grid = Some([h, w])` lets flips and
/// crops treat the vector as a row-major `h x w` image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub sigma: f64,
    pub mask_p: f64,
    pub flip: bool,
    pub crop_pad: usize,
    pub grid: Option<[usize; 2]>,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            mask_p: 0.1,
            flip: false,
            crop_pad: 0,
            grid: None,
        }
    }
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            sigma: 0.0,
            mask_p: 0.0,
            flip: false,
            crop_pad: 0,
            grid: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Parameter {
                name: "sigma",
                detail: format!("must be finite and >= 0, got {}", self.sigma),
            });
        }
        if !(0.0..1.0).contains(&self.mask_p) {
            return Err(Error::Parameter {
                name: "mask_p",
                detail: format!("must lie in [0, 1), got {}", self.mask_p),
            });
        }
        if (self.flip || self.crop_pad > 0) && self.grid.is_none() {
            return Err(Error::Parameter {
                name: "grid",
                detail: "flip and crop_pad need grid dimensions".into(),
            });
        }
        Ok(())
    }
}

/// One augmented copy of `x`: grid flip/crop, then additive Gaussian noise,
/// then coordinate masking.
pub fn augment(x: &[f64], spec: &AugmentSpec, rng: &mut impl Rng) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut out = x.to_vec();
    if let Some([h, w]) = spec.grid {
        if h * w != x.len() {
            return Err(Error::dim(
                "augment",
                format!("grid {h}x{w} does not cover {} features", x.len()),
            ));
        }
        if spec.flip && rng.random_bool(0.5) {
            for row in out.chunks_exact_mut(w) {
                row.reverse();
            }
        }
        if spec.crop_pad > 0 {
            out = crop_with_pad(&out, h, w, spec.crop_pad, rng);
        }
    }
    if spec.sigma > 0.0 {
        let noise = Normal::new(0.0, spec.sigma).expect("sigma validated");
        for v in &mut out {
            *v += noise.sample(rng);
        }
    }
    if spec.mask_p > 0.0 {
        for v in &mut out {
            if rng.random_bool(spec.mask_p) {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Zero-pads by `pad` on every side and crops an `h x w` window at a random offset.
fn crop_with_pad(x: &[f64], h: usize, w: usize, pad: usize, rng: &mut impl Rng) -> Vec<f64> {
    let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = (r as isize + dy, c as isize + dx);
            if sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w {
                out[r * w + c] = x[sr as usize * w + sc as usize];
            }
        }
    }
    out
}

/// `2N` augmented views with duplicated label keys.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub views: Tensor,
    pub labels: Vec<i64>,
    pub origin: Vec<usize>,
}

impl ViewBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn make_views(
    samples: &[&Sample],
    key: &LabelKey,
    aug: &AugmentSpec,
    rng: &mut impl Rng,
) -> Result<ViewBatch> {
    if samples.len() < 2 {
        return Err(Error::BatchTooSmall(samples.len()));
    }
    aug.validate()?;
    let dim = samples[0].features.len();
    let mut data = Vec::with_capacity(2 * samples.len() * dim);
    let mut labels = Vec::with_capacity(2 * samples.len());
    let mut origin = Vec::with_capacity(2 * samples.len());
    for (k, s) in samples.iter().enumerate() {
        if s.features.len() != dim {
            return Err(Error::dim(
                "make_views",
                format!(
                    "sample {} has {} features, expected {dim}",
                    s.sample_id,
                    s.features.len()
                ),
            ));
        }
        let label = key.value(s);
        for _ in 0..2 {
            data.extend(augment(&s.features, aug, rng)?);
            labels.push(label);
            origin.push(k);
        }
    }
    Ok(ViewBatch {
        views: Tensor::matrix(2 * samples.len(), dim, data)?,
        labels,
        origin,
    })
}

/// Positive sets `C(i)` and candidate sets `A(i)` for every anchor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PosNegSets {
    positives: Vec<Vec<usize>>,
    candidates: Vec<Vec<usize>>,
}

impl PosNegSets {
    /// Checks `i not in A(i)` and `C(i) subset of A(i)`.
    pub fn new(positives: Vec<Vec<usize>>, candidates: Vec<Vec<usize>>) -> Result<Self> {
        if positives.len() != candidates.len() {
            return Err(Error::Contract(
                "positives and candidates cover different anchor counts".into(),
            ));
        }
        let n = positives.len();
        for (i, (c, a)) in positives.iter().zip(&candidates).enumerate() {
            if a.contains(&i) || a.iter().any(|&j| j >= n) {
                return Err(Error::Contract(format!(
                    "A({i}) contains the anchor or an out-of-range view"
                )));
            }
            if c.iter().any(|j| !a.contains(j)) {
                return Err(Error::Contract(format!("C({i}) is not a subset of A({i})")));
            }
        }
        Ok(Self {
            positives,
            candidates,
        })
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn positives(&self, anchor: usize) -> &[usize] {
        &self.positives[anchor]
    }

    pub fn candidates(&self, anchor: usize) -> &[usize] {
        &self.candidates[anchor]
    }

    /// Anchors with an empty `C(i)`; the loss skips them.
    pub fn empty_anchors(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.positives[i].is_empty())
            .collect()
    }

    /// Drops each anchor's augmented twin from `C(i)` (kept in `A(i)`), so
    /// only other samples with the same key count as positives.
    pub fn without_twins(&self, origin: &[usize]) -> Self {
        let positives = self
            .positives
            .iter()
            .enumerate()
            .map(|(i, c)| {
                c.iter()
                    .copied()
                    .filter(|&j| origin[j] != origin[i])
                    .collect()
            })
            .collect();
        Self {
            positives,
            candidates: self.candidates.clone(),
        }
    }
}

pub fn build_sets(vb: &ViewBatch) -> PosNegSets {
    sets_from_labels(&vb.labels)
}

pub fn sets_from_labels(labels: &[i64]) -> PosNegSets {
    let n = labels.len();
    let mut positives = Vec::with_capacity(n);
    let mut candidates = Vec::with_capacity(n);
    for i in 0..n {
        candidates.push((0..n).filter(|&j| j != i).collect());
        positives.push(
            (0..n)
                .filter(|&j| j != i && labels[j] == labels[i])
                .collect(),
        );
    }
    PosNegSets {
        positives,
        candidates,
    }
}

/// Sets for plain two-view NT-Xent: each anchor's only positive is its twin.
pub fn ntxent_sets(n_views: usize) -> PosNegSets {
    let labels: Vec<i64> = (0..n_views).map(|i| (i / 2) as i64).collect();
    sets_from_labels(&labels)
}

/// Supervised contrastive loss over unit-norm embedding rows `z`.
pub fn supcon_loss(
    g: &mut Graph,
    z: NodeId,
    sets: &PosNegSets,
    temperature: f64,
) -> Result<NodeId> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Parameter {
            name: "temperature",
            detail: format!("must be > 0, got {temperature}"),
        });
    }
    let n = g.value(z).rows();
    if n != sets.len() {
        return Err(Error::dim(
            "supcon_loss",
            format!("{n} embeddings for {} anchors", sets.len()),
        ));
    }
    let zt = g.transpose(z)?;
    let dots = g.matmul(z, zt)?;
    let sim = g.scale(dots, 1.0 / temperature)?;

    let mut per_anchor = Vec::with_capacity(n);
    for i in 0..n {
        let pos = sets.positives(i);
        if pos.is_empty() {
            continue;
        }
        let cand: Vec<usize> = sets.candidates(i).iter().map(|&a| i * n + a).collect();
        let pos: Vec<usize> = pos.iter().map(|&c| i * n + c).collect();
        let cand = g.gather(sim, &cand)?;
        let denom = g.log_sum_exp(cand)?;
        let pos = g.gather(sim, &pos)?;
        let pos_mean = g.mean(pos)?;
        per_anchor.push(g.sub(denom, pos_mean)?);
    }
    if per_anchor.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let stacked = g.stack(&per_anchor)?;
    g.mean(stacked)
}

/// NT-Xent: [`supcon_loss`] with every sample its own class.
pub fn ntxent_loss(g: &mut Graph, z: NodeId, temperature: f64) -> Result<NodeId> {
    let n = g.value(z).rows();
    supcon_loss(g, z, &ntxent_sets(n), temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{rng_for, Stream};

    fn sample(id: u64, cst: i64, features: Vec<f64>) -> Sample {
        Sample {
            sample_id: id,
            eye_id: id as u32 / 2,
            bcva: 70,
            cst,
            biomarkers: [None; 16],
            features,
        }
    }

    #[test]
    fn view_labels_are_duplicated() {
        let s = [
            sample(0, 5, vec![1.0, 2.0]),
            sample(1, 5, vec![3.0, 4.0]),
            sample(2, 7, vec![5.0, 6.0]),
        ];
        let refs: Vec<&Sample> = s.iter().collect();
        let mut rng = rng_for(1, Stream::Augment, 0);
        let key = LabelKey::Cst { bin_width: None };
        let vb = make_views(&refs, &key, &AugmentSpec::default(), &mut rng).unwrap();
        assert_eq!(vb.labels, vec![5, 5, 5, 5, 7, 7]);
        assert_eq!(vb.origin, vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(vb.views.shape(), &[6, 2]);
    }

    #[test]
    fn identity_views_match_and_seed_is_deterministic() {
        let s = [
            sample(0, 1, vec![1.0, -2.0, 3.0]),
            sample(1, 2, vec![0.5, 0.0, 9.0]),
        ];
        let refs: Vec<&Sample> = s.iter().collect();
        let key = LabelKey::UniqueId;
        let vb = make_views(
            &refs,
            &key,
            &AugmentSpec::identity(),
            &mut rng_for(3, Stream::Augment, 0),
        )
        .unwrap();
        for (k, sample) in s.iter().enumerate() {
            assert_eq!(vb.views.row(2 * k), vb.views.row(2 * k + 1));
            assert_eq!(vb.views.row(2 * k), sample.features.as_slice());
        }
        let a = make_views(
            &refs,
            &key,
            &AugmentSpec::default(),
            &mut rng_for(3, Stream::Augment, 0),
        )
        .unwrap();
        let b = make_views(
            &refs,
            &key,
            &AugmentSpec::default(),
            &mut rng_for(3, Stream::Augment, 0),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let s = sample(0, 1, vec![1.0]);
        let err = make_views(
            &[&s],
            &LabelKey::EyeId,
            &AugmentSpec::identity(),
            &mut rng_for(0, Stream::Augment, 0),
        );
        assert!(matches!(err, Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn sets_by_enumeration() {
        let sets = sets_from_labels(&[5, 5, 5, 5, 7, 7]);
        assert_eq!(sets.positives(0), &[1, 2, 3]);
        assert_eq!(sets.candidates(0), &[1, 2, 3, 4, 5]);
        assert_eq!(sets.positives(4), &[5]);

        let unique = ntxent_sets(6);
        for i in 0..6 {
            assert_eq!(unique.positives(i), &[i ^ 1]);
            assert_eq!(unique.candidates(i).len(), 5);
        }

        let same = sets_from_labels(&[3; 4]);
        for i in 0..4 {
            assert_eq!(same.positives(i), same.candidates(i));
        }
        assert!(same.empty_anchors().is_empty());
    }

    #[test]
    fn twin_filter_flags_empty_anchors() {
        let sets = sets_from_labels(&[5, 5, 5, 5, 7, 7]);
        let filtered = sets.without_twins(&[0, 0, 1, 1, 2, 2]);
        assert_eq!(filtered.positives(0), &[2, 3]);
        assert_eq!(filtered.empty_anchors(), vec![4, 5]);
    }

    #[test]
    fn pos_neg_sets_validate() {
        assert!(PosNegSets::new(vec![vec![1], vec![0]], vec![vec![1], vec![0]]).is_ok());
        assert!(PosNegSets::new(vec![vec![0], vec![0]], vec![vec![0], vec![0]]).is_err());
        assert!(PosNegSets::new(vec![vec![1], vec![]], vec![vec![], vec![0]]).is_err());
    }

    #[test]
    fn label_key_binning() {
        let s = sample(3, 347, vec![0.0]);
        assert_eq!(LabelKey::Cst { bin_width: None }.value(&s), 347);
        assert_eq!(
            LabelKey::Cst {
                bin_width: Some(25)
            }
            .value(&s),
            13
        );
        assert_eq!(LabelKey::UniqueId.value(&s), 3);
        assert_eq!(
            "bcva".parse::<LabelKey>().unwrap(),
            LabelKey::Bcva { bin_width: None }
        );
        assert!("age".parse::<LabelKey>().is_err());
        assert_eq!(bin(-7, Some(5)), -2);
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let mut g = Graph::new();
        let z = g.param(Tensor::matrix(2, 2, vec![0.6, 0.8, 1.0, 0.0]).unwrap());
        let loss = ntxent_loss(&mut g, z, 0.07).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn equal_similarity_gives_ln2() {
        // anchor 0: positive 1, negative 2, both orthogonal to z0
        let sets = PosNegSets::new(
            vec![vec![1], vec![], vec![]],
            vec![vec![1, 2], vec![0, 2], vec![0, 1]],
        )
        .unwrap();
        for tau in [0.07, 0.5, 3.0] {
            let mut g = Graph::new();
            let z = g.param(Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, -1.0]).unwrap());
            let loss = supcon_loss(&mut g, z, &sets, tau).unwrap();
            assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_temperature_and_empty_loss() {
        let mut g = Graph::new();
        let z = g.param(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        assert!(matches!(
            supcon_loss(&mut g, z, &ntxent_sets(2), 0.0),
            Err(Error::Parameter { .. })
        ));
        assert!(matches!(
            supcon_loss(&mut g, z, &ntxent_sets(2), -1.0),
            Err(Error::Parameter { .. })
        ));
        let empty = PosNegSets::new(vec![vec![], vec![]], vec![vec![1], vec![0]]).unwrap();
        assert!(matches!(
            supcon_loss(&mut g, z, &empty, 0.1),
            Err(Error::EmptyLoss)
        ));
    }

    #[test]
    fn augment_identity_and_validation() {
        let x = vec![1.0, 2.0, 3.0];
        let mut rng = rng_for(0, Stream::Augment, 0);
        assert_eq!(augment(&x, &AugmentSpec::identity(), &mut rng).unwrap(), x);
        let bad = AugmentSpec {
            mask_p: 1.0,
            ..AugmentSpec::identity()
        };
        assert!(matches!(
            augment(&x, &bad, &mut rng),
            Err(Error::Parameter { name: "mask_p", .. })
        ));
        let bad = AugmentSpec {
            sigma: -0.1,
            ..AugmentSpec::identity()
        };
        assert!(augment(&x, &bad, &mut rng).is_err());
        let spec = AugmentSpec {
            sigma: 0.3,
            mask_p: 0.2,
            ..AugmentSpec::identity()
        };
        let a = augment(&x, &spec, &mut rng_for(4, Stream::Augment, 1)).unwrap();
        let b = augment(&x, &spec, &mut rng_for(4, Stream::Augment, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_rate_within_binomial_bound() {
        let x = vec![1.0; 1000];
        let spec = AugmentSpec {
            mask_p: 0.5,
            ..AugmentSpec::identity()
        };
        for seed in 0..5 {
            let out = augment(&x, &spec, &mut rng_for(seed, Stream::Augment, 0)).unwrap();
            let zeros = out.iter().filter(|&&v| v == 0.0).count() as f64;
            // mean 500, sd sqrt(1000 * 0.25)
            assert!((zeros - 500.0).abs() <= 4.0 * 250f64.sqrt(), "{zeros}");
        }
    }

    #[test]
    fn grid_flip_and_crop() {
        let x: Vec<f64> = (1..=6).map(f64::from).collect();
        let flip = AugmentSpec {
            flip: true,
            grid: Some([2, 3]),
            ..AugmentSpec::identity()
        };
        let mut seen_flip = false;
        for seed in 0..16 {
            let out = augment(&x, &flip, &mut rng_for(seed, Stream::Augment, 0)).unwrap();
            assert!(out == x || out == vec![3., 2., 1., 6., 5., 4.]);
            seen_flip |= out != x;
        }
        assert!(seen_flip);
        let crop = AugmentSpec {
            crop_pad: 1,
            grid: Some([2, 3]),
            ..AugmentSpec::identity()
        };
        let out = augment(&x, &crop, &mut rng_for(2, Stream::Augment, 0)).unwrap();
        assert_eq!(out.len(), 6);
        assert!(out.iter().all(|v| *v == 0.0 || x.contains(v)));
        let no_grid = AugmentSpec {
            flip: true,
            ..AugmentSpec::identity()
        };
        assert!(no_grid.validate().is_err());
    }
}
