//! Monte-Carlo simulator for the latent-class view of contrastive learning.
//!
//! Hidden classes `c` have a prior `ρ` and each class a spherical Gaussian
//! feature law `D_c`. Positive pairs come from one class (`D_sim`); negatives
//! come from the marginal (`D_neg`). When positives are formed from a
//! surrogate label instead of the true class, the class behind a surrogate
//! value `v` follows `ρ_clin(c | v)` and pairs may straddle classes.
//!
//! Symmetric assignment noise `η` means a sample of class `c` receives
//! surrogate value `c` with probability `1 - η` and each other value with
//! probability `η / (K - 1)`.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::log_sum_exp;
use crate::seed::{self, Stream};

const PRIOR_TOL: f64 = 1e-12;

fn validate_categorical(name: &'static str, p: &[f64], tol: f64) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Parameter {
            name,
            detail: "empty distribution".into(),
        });
    }
    if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Parameter {
            name,
            detail: "entries must lie in [0, 1]".into(),
        });
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(Error::Parameter {
            name,
            detail: format!("sums to {s}, not 1"),
        });
    }
    Ok(())
}

fn draw_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentClassModel {
    prior: Vec<f64>,
    means: Vec<Vec<f64>>,
    sigmas: Vec<f64>,
}

impl LatentClassModel {
    pub fn new(prior: Vec<f64>, means: Vec<Vec<f64>>, sigmas: Vec<f64>) -> Result<Self> {
        validate_categorical("prior", &prior, PRIOR_TOL)?;
        let k = prior.len();
        if means.len() != k || sigmas.len() != k {
            return Err(Error::dim(
                "LatentClassModel",
                format!(
                    "{k} classes but {} means, {} sigmas",
                    means.len(),
                    sigmas.len()
                ),
            ));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return Err(Error::dim(
                "LatentClassModel",
                "means must share a non-zero dimension",
            ));
        }
        if sigmas.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Parameter {
                name: "sigma",
                detail: "every class sigma must be > 0".into(),
            });
        }
        Ok(Self {
            prior,
            means,
            sigmas,
        })
    }

    /// Class `c` centred at `spread * e_(c mod dim)` with a shared sigma.
    pub fn axis_aligned(prior: Vec<f64>, dim: usize, spread: f64, sigma: f64) -> Result<Self> {
        let k = prior.len();
        let means = (0..k)
            .map(|c| {
                let mut m = vec![0.0; dim];
                if dim > 0 {
                    m[c % dim] = spread;
                }
                m
            })
            .collect();
        Self::new(prior, means, vec![sigma; k])
    }

    pub fn n_classes(&self) -> usize {
        self.prior.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    fn sample_into(&self, c: usize, rng: &mut impl Rng, out: &mut Vec<f64>) {
        let s = self.sigmas[c];
        out.extend(
            self.means[c]
                .iter()
                .map(|m| m + s * rng.sample::<f64, _>(StandardNormal)),
        );
    }
}

/// Surrogate value → distribution over true classes, plus the marginal law of
/// the surrogate value itself.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateAssignment {
    value_prob: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

impl SurrogateAssignment {
    /// Surrogate value equals the true class.
    pub fn identity(prior: &[f64]) -> Self {
        let k = prior.len();
        let rows = (0..k)
            .map(|v| (0..k).map(|c| if c == v { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            value_prob: prior.to_vec(),
            rows,
        }
    }

    pub fn symmetric_noise(prior: &[f64], noise: f64) -> Result<Self> {
        validate_categorical("prior", prior, PRIOR_TOL)?;
        if !(0.0..=1.0).contains(&noise) {
            return Err(Error::Parameter {
                name: "noise",
                detail: format!("must lie in [0, 1], got {noise}"),
            });
        }
        let k = prior.len();
        if k == 1 || noise == 0.0 {
            return Ok(Self::identity(prior));
        }
        let t = |v: usize, c: usize| {
            if v == c {
                1.0 - noise
            } else {
                noise / (k - 1) as f64
            }
        };
        let value_prob: Vec<f64> = (0..k)
            .map(|v| (0..k).map(|c| prior[c] * t(v, c)).sum())
            .collect();
        let rows = (0..k)
            .map(|v| {
                if value_prob[v] > 0.0 {
                    (0..k).map(|c| prior[c] * t(v, c) / value_prob[v]).collect()
                } else {
                    prior.to_vec()
                }
            })
            .collect();
        Ok(Self { value_prob, rows })
    }

    /// `counts[v][c]`: how often surrogate value `v` co-occurred with class `c`.
    pub fn from_counts(counts: &[Vec<u64>]) -> Result<Self> {
        let k = counts.first().map_or(0, Vec::len);
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return Err(Error::dim(
                "SurrogateAssignment::from_counts",
                "ragged or empty count table",
            ));
        }
        let total: u64 = counts.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Contract("co-occurrence table is all zero".into()));
        }
        let mut value_prob = Vec::new();
        let mut rows = Vec::new();
        for r in counts {
            let n: u64 = r.iter().sum();
            if n == 0 {
                continue;
            }
            value_prob.push(n as f64 / total as f64);
            rows.push(r.iter().map(|&x| x as f64 / n as f64).collect());
        }
        Ok(Self { value_prob, rows })
    }

    pub fn n_values(&self) -> usize {
        self.rows.len()
    }

    pub fn value_prob(&self) -> &[f64] {
        &self.value_prob
    }

    pub fn row(&self, v: usize) -> &[f64] {
        &self.rows[v]
    }

    /// Class marginal `Σ_v P(v) ρ_clin(c | v)`.
    pub fn class_marginal(&self) -> Vec<f64> {
        let k = self.rows[0].len();
        (0..k)
            .map(|c| {
                self.value_prob
                    .iter()
                    .zip(&self.rows)
                    .map(|(p, r)| p * r[c])
                    .sum()
            })
            .collect()
    }

    /// Probability that the two members of a positive pair share a class.
    pub fn same_class_rate(&self) -> f64 {
        self.value_prob
            .iter()
            .zip(&self.rows)
            .map(|(p, r)| p * r.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    /// `Q(c, c) = Σ_v P(v) ρ_clin(c | v)^2` for each class.
    pub fn pair_diagonal(&self) -> Vec<f64> {
        let k = self.rows[0].len();
        (0..k)
            .map(|c| {
                self.value_prob
                    .iter()
                    .zip(&self.rows)
                    .map(|(p, r)| p * r[c] * r[c])
                    .sum()
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum LabelSource<'a> {
    True,
    Clinical(&'a SurrogateAssignment),
}

impl LabelSource<'_> {
    fn assignment(&self, model: &LatentClassModel) -> SurrogateAssignment {
        match self {
            LabelSource::True => SurrogateAssignment::identity(&model.prior),
            LabelSource::Clinical(a) => (*a).clone(),
        }
    }
}

fn check_width(model: &LatentClassModel, a: &SurrogateAssignment) -> Result<()> {
    if a.rows[0].len() != model.n_classes() {
        return Err(Error::dim(
            "LabelSource",
            format!(
                "assignment over {} classes, model has {}",
                a.rows[0].len(),
                model.n_classes()
            ),
        ));
    }
    Ok(())
}

/// Points with their hidden classes, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Points {
    pub dim: usize,
    pub x: Vec<f64>,
    pub classes: Vec<usize>,
}

impl Points {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pairs {
    pub anchors: Points,
    pub positives: Points,
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Parameter {
            name: "n",
            detail: "need at least one draw".into(),
        });
    }
    Ok(())
}

/// Positive pairs: one surrogate value, two classes drawn from `ρ_clin(· | v)`.
pub fn sample_dsim(
    model: &LatentClassModel,
    source: LabelSource<'_>,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Pairs> {
    check_n(n)?;
    let a = source.assignment(model);
    check_width(model, &a)?;
    let d = model.dim();
    let mut anchors = Points {
        dim: d,
        x: Vec::with_capacity(n * d),
        classes: Vec::with_capacity(n),
    };
    let mut positives = anchors.clone();
    for _ in 0..n {
        let v = draw_categorical(&a.value_prob, rng);
        let (c1, c2) = (
            draw_categorical(&a.rows[v], rng),
            draw_categorical(&a.rows[v], rng),
        );
        model.sample_into(c1, rng, &mut anchors.x);
        model.sample_into(c2, rng, &mut positives.x);
        anchors.classes.push(c1);
        positives.classes.push(c2);
    }
    Ok(Pairs { anchors, positives })
}

/// Marginal draws of `D_sim`.
pub fn sample_dneg(
    model: &LatentClassModel,
    source: LabelSource<'_>,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Points> {
    check_n(n)?;
    let a = source.assignment(model);
    check_width(model, &a)?;
    let d = model.dim();
    let mut out = Points {
        dim: d,
        x: Vec::with_capacity(n * d),
        classes: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let v = draw_categorical(&a.value_prob, rng);
        let c = draw_categorical(&a.rows[v], rng);
        model.sample_into(c, rng, &mut out.x);
        out.classes.push(c);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeSelection {
    /// Negatives iid from the marginal.
    #[default]
    Marginal,
    /// Negatives carry a surrogate value different from the anchor's.
    DistinctLabel,
}

/// `(x, x⁺, x⁻_1..x⁻_k)` tuples with hidden classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveSampleSet {
    pub k: usize,
    pub anchors: Points,
    pub positives: Points,
    /// `n * k` negatives, tuple-major.
    pub negatives: Points,
}

impl ContrastiveSampleSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn negative_classes(&self, t: usize) -> &[usize] {
        &self.negatives.classes[t * self.k..(t + 1) * self.k]
    }

    /// Some negative of tuple `t` shares the anchor's class.
    pub fn is_collision(&self, t: usize) -> bool {
        let c = self.anchors.classes[t];
        self.negative_classes(t).contains(&c)
    }
}

pub fn sample_tuples(
    model: &LatentClassModel,
    source: LabelSource<'_>,
    n: usize,
    k: usize,
    selection: NegativeSelection,
    rng: &mut impl Rng,
) -> Result<ContrastiveSampleSet> {
    check_n(n)?;
    if k == 0 {
        return Err(Error::Parameter {
            name: "k",
            detail: "need at least one negative".into(),
        });
    }
    let a = source.assignment(model);
    check_width(model, &a)?;
    if selection == NegativeSelection::DistinctLabel
        && a.value_prob.iter().filter(|&&p| p > 0.0).count() < 2
    {
        return Err(Error::Contract(
            "distinct-label negatives need two surrogate values with mass".into(),
        ));
    }
    let d = model.dim();
    let empty = |m: usize| Points {
        dim: d,
        x: Vec::with_capacity(m * d),
        classes: Vec::with_capacity(m),
    };
    let mut set = ContrastiveSampleSet {
        k,
        anchors: empty(n),
        positives: empty(n),
        negatives: empty(n * k),
    };
    let mut excluded = vec![0.0; a.value_prob.len()];
    for _ in 0..n {
        let v = draw_categorical(&a.value_prob, rng);
        let (c1, c2) = (
            draw_categorical(&a.rows[v], rng),
            draw_categorical(&a.rows[v], rng),
        );
        model.sample_into(c1, rng, &mut set.anchors.x);
        model.sample_into(c2, rng, &mut set.positives.x);
        set.anchors.classes.push(c1);
        set.positives.classes.push(c2);
        let value_law: &[f64] = match selection {
            NegativeSelection::Marginal => &a.value_prob,
            NegativeSelection::DistinctLabel => {
                let rest = 1.0 - a.value_prob[v];
                for (j, e) in excluded.iter_mut().enumerate() {
                    *e = if j == v { 0.0 } else { a.value_prob[j] / rest };
                }
                &excluded
            }
        };
        for _ in 0..k {
            let u = draw_categorical(value_law, rng);
            let c = draw_categorical(&a.rows[u], rng);
            model.sample_into(c, rng, &mut set.negatives.x);
            set.negatives.classes.push(c);
        }
    }
    Ok(set)
}

/// Fraction of (anchor, negative) pairs whose hidden classes coincide.
pub fn collision_rate(set: &ContrastiveSampleSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Contract(
            "collision rate of an empty sample set".into(),
        ));
    }
    let hits: usize = (0..set.len())
        .map(|t| {
            let c = set.anchors.classes[t];
            set.negative_classes(t).iter().filter(|&&n| n == c).count()
        })
        .sum();
    Ok(hits as f64 / (set.len() * set.k) as f64)
}

/// Per-tuple loss `ln(1 + Σ_i exp(f(x)·f(x⁻_i) - f(x)·f(x⁺)))`; the logistic
/// loss when `k = 1`.
pub fn tuple_loss(fx: &[f64], fpos: &[f64], fnegs: &[Vec<f64>]) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let sp = dot(fx, fpos);
    let mut terms = Vec::with_capacity(fnegs.len() + 1);
    terms.push(0.0);
    terms.extend(fnegs.iter().map(|n| dot(fx, n) - sp));
    log_sum_exp(&terms).expect("non-empty")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decomposition {
    pub l_un: f64,
    /// Mean over tuples with no colliding negative.
    pub l_neq: Option<f64>,
    /// Mean over tuples with at least one colliding negative.
    pub l_eq: Option<f64>,
    /// Fraction of collision tuples.
    pub tau: f64,
    /// Set when one stratum is empty.
    pub partial: bool,
}

impl Decomposition {
    /// `|L_un - ((1-τ)L_≠ + τL_=)|` over the non-empty strata.
    pub fn identity_residual(&self) -> f64 {
        let rhs =
            (1.0 - self.tau) * self.l_neq.unwrap_or(0.0) + self.tau * self.l_eq.unwrap_or(0.0);
        (self.l_un - rhs).abs()
    }
}

pub fn decompose_loss<F>(f: F, set: &ContrastiveSampleSet) -> Result<Decomposition>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if set.is_empty() {
        return Err(Error::Contract(
            "decomposition of an empty sample set".into(),
        ));
    }
    let (mut sum_eq, mut n_eq, mut sum_neq, mut n_neq) = (0.0, 0usize, 0.0, 0usize);
    for t in 0..set.len() {
        let fx = f(set.anchors.point(t));
        let fp = f(set.positives.point(t));
        let fnegs: Vec<Vec<f64>> = (0..set.k)
            .map(|i| f(set.negatives.point(t * set.k + i)))
            .collect();
        let loss = tuple_loss(&fx, &fp, &fnegs);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                op: "decompose_loss",
            });
        }
        if set.is_collision(t) {
            sum_eq += loss;
            n_eq += 1;
        } else {
            sum_neq += loss;
            n_neq += 1;
        }
    }
    let n = set.len() as f64;
    Ok(Decomposition {
        l_un: (sum_eq + sum_neq) / n,
        l_neq: (n_neq > 0).then(|| sum_neq / n_neq as f64),
        l_eq: (n_eq > 0).then(|| sum_eq / n_eq as f64),
        tau: n_eq as f64 / n,
        partial: n_eq == 0 || n_neq == 0,
    })
}

/// `Σ p ln(p / q)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim(
            "kl_divergence",
            format!("{} vs {} outcomes", p.len(), q.len()),
        ));
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(Error::DivergenceUndefined { index: i });
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl)
}

/// Divergence of the surrogate-induced class pairing from the true pairing,
/// `KL(truth ‖ clin) = Σ_c ρ(c) ln(ρ(c) / Q(c, c))`.
pub fn pairing_kl(prior: &[f64], a: &SurrogateAssignment) -> Result<f64> {
    kl_divergence(prior, &a.pair_diagonal())
}

/// L2-normalised identity map; the embedding used by sweeps.
pub fn unit_embedding(x: &[f64]) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    x.iter().map(|v| v / n).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub prior: Vec<f64>,
    pub dim: usize,
    pub spread: f64,
    pub sigma: f64,
    pub n: usize,
    pub negatives: usize,
    pub selection: NegativeSelection,
    pub noise_grid: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            prior: vec![0.25; 4],
            dim: 4,
            spread: 2.0,
            sigma: 0.5,
            n: 20_000,
            negatives: 1,
            selection: NegativeSelection::DistinctLabel,
            noise_grid: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub noise: f64,
    pub kl_nats: f64,
    pub collision_rate: f64,
    pub l_un: f64,
    pub l_neq: Option<f64>,
    pub l_eq: Option<f64>,
    pub n: usize,
}

pub const SWEEP_HEADER: &str = "noise,kl_nats,collision_rate,l_un,l_neq,l_eq,n";

/// One row per noise level. Row `i` draws from its own stream, so rows are
/// computed in parallel and the table does not depend on thread count.
pub fn sweep_surrogate_fidelity(cfg: &SweepConfig, seed: u64) -> Result<Vec<SweepRow>> {
    if cfg.noise_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Parameter {
            name: "noise_grid",
            detail: "must be sorted ascending".into(),
        });
    }
    let model = LatentClassModel::axis_aligned(cfg.prior.clone(), cfg.dim, cfg.spread, cfg.sigma)?;
    cfg.noise_grid
        .par_iter()
        .enumerate()
        .map(|(i, &noise)| {
            let a = SurrogateAssignment::symmetric_noise(&cfg.prior, noise)?;
            let mut rng = seed::rng_for(seed, Stream::Theory, i as u64);
            let set = sample_tuples(
                &model,
                LabelSource::Clinical(&a),
                cfg.n,
                cfg.negatives,
                cfg.selection,
                &mut rng,
            )?;
            let dec = decompose_loss(unit_embedding, &set)?;
            Ok(SweepRow {
                noise,
                kl_nats: pairing_kl(&cfg.prior, &a)?,
                collision_rate: collision_rate(&set)?,
                l_un: dec.l_un,
                l_neq: dec.l_neq,
                l_eq: dec.l_eq,
                n: cfg.n,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.noise,
            r.kl_nats,
            r.collision_rate,
            r.l_un,
            opt(r.l_neq),
            opt(r.l_eq),
            r.n
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rng(i: u64) -> rand_chacha::ChaCha8Rng {
        seed::rng_for(11, Stream::Theory, i)
    }

    fn model4() -> LatentClassModel {
        LatentClassModel::axis_aligned(vec![0.1, 0.2, 0.3, 0.4], 4, 2.0, 0.5).unwrap()
    }

    #[test]
    fn model_validation() {
        assert!(LatentClassModel::axis_aligned(vec![0.5, 0.6], 2, 1.0, 1.0).is_err());
        assert!(LatentClassModel::axis_aligned(vec![0.5, 0.5], 2, 1.0, 0.0).is_err());
        assert!(LatentClassModel::new(vec![1.0], vec![vec![0.0, 1.0]], vec![1.0]).is_ok());
    }

    #[test]
    fn true_pairs_share_class() {
        let p = sample_dsim(&model4(), LabelSource::True, 2000, &mut rng(0)).unwrap();
        assert_eq!(p.anchors.classes, p.positives.classes);
        let single = LatentClassModel::axis_aligned(vec![1.0], 2, 1.0, 1.0).unwrap();
        let a = SurrogateAssignment::symmetric_noise(&[1.0], 0.5).unwrap();
        let p = sample_dsim(&single, LabelSource::Clinical(&a), 50, &mut rng(1)).unwrap();
        assert!(p
            .anchors
            .classes
            .iter()
            .chain(&p.positives.classes)
            .all(|&c| c == 0));
        assert!(sample_dsim(&single, LabelSource::True, 0, &mut rng(1)).is_err());
    }

    #[test]
    fn noisy_pairs_match_closed_form() {
        let m = model4();
        let a = SurrogateAssignment::symmetric_noise(m.prior(), 0.3).unwrap();
        // oracle written out directly from T(v|c) and Bayes
        let prior = m.prior();
        let t = |v: usize, c: usize| if v == c { 0.7 } else { 0.1 };
        let mut oracle = 0.0;
        for v in 0..4 {
            let pv: f64 = (0..4).map(|c| prior[c] * t(v, c)).sum();
            oracle += (0..4).map(|c| (prior[c] * t(v, c)).powi(2)).sum::<f64>() / pv;
        }
        assert!((a.same_class_rate() - oracle).abs() < 1e-12);

        let n = 100_000;
        let p = sample_dsim(&m, LabelSource::Clinical(&a), n, &mut rng(2)).unwrap();
        let same = p
            .anchors
            .classes
            .iter()
            .zip(&p.positives.classes)
            .filter(|(a, b)| a == b)
            .count() as f64
            / n as f64;
        let sd = (oracle * (1.0 - oracle) / n as f64).sqrt();
        assert!(same < 1.0);
        assert!((same - oracle).abs() < 4.0 * sd, "{same} vs {oracle}");
    }

    #[test]
    fn symmetric_noise_preserves_class_marginal() {
        let prior = [0.1, 0.2, 0.3, 0.4];
        let a = SurrogateAssignment::symmetric_noise(&prior, 0.45).unwrap();
        for (x, y) in a.class_marginal().iter().zip(prior) {
            assert!((x - y).abs() < 1e-12);
        }
        for v in 0..4 {
            assert!((a.row(v).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn counts_estimate_rows() {
        let a = SurrogateAssignment::from_counts(&[vec![8, 2], vec![0, 0], vec![1, 9]]).unwrap();
        assert_eq!(a.n_values(), 2);
        assert_eq!(a.row(0), &[0.8, 0.2]);
        assert_eq!(a.value_prob(), &[0.5, 0.5]);
        assert!(SurrogateAssignment::from_counts(&[vec![0, 0]]).is_err());
    }

    #[test]
    fn dneg_frequencies() {
        let m = model4();
        let n = 100_000;
        let pts = sample_dneg(&m, LabelSource::True, n, &mut rng(3)).unwrap();
        for (c, &p) in m.prior().iter().enumerate() {
            let freq = pts.classes.iter().filter(|&&x| x == c).count() as f64 / n as f64;
            assert!(
                (freq - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt(),
                "class {c}: {freq}"
            );
        }
        assert_eq!(pts.x.len(), n * 4);
        let again = sample_dneg(&m, LabelSource::True, 10, &mut rng(3)).unwrap();
        assert_eq!(again.classes, pts.classes[..10]);
    }

    #[test]
    fn collision_cases() {
        let m = LatentClassModel::axis_aligned(vec![0.25; 4], 4, 1.0, 1.0).unwrap();
        let set = sample_tuples(
            &m,
            LabelSource::True,
            5000,
            3,
            NegativeSelection::DistinctLabel,
            &mut rng(4),
        )
        .unwrap();
        assert_eq!(collision_rate(&set).unwrap(), 0.0);

        let single = LatentClassModel::axis_aligned(vec![1.0], 2, 1.0, 1.0).unwrap();
        let set = sample_tuples(
            &single,
            LabelSource::True,
            100,
            2,
            NegativeSelection::Marginal,
            &mut rng(5),
        )
        .unwrap();
        assert_eq!(collision_rate(&set).unwrap(), 1.0);

        let n = 100_000;
        let set = sample_tuples(
            &m,
            LabelSource::True,
            n,
            1,
            NegativeSelection::Marginal,
            &mut rng(6),
        )
        .unwrap();
        let r = collision_rate(&set).unwrap();
        assert!(
            (r - 0.25).abs() < 4.0 * (0.25f64 * 0.75 / n as f64).sqrt(),
            "{r}"
        );
    }

    #[test]
    fn decomposition_strata() {
        let m = model4();
        let clean = sample_tuples(
            &m,
            LabelSource::True,
            500,
            1,
            NegativeSelection::DistinctLabel,
            &mut rng(7),
        )
        .unwrap();
        let d = decompose_loss(unit_embedding, &clean).unwrap();
        assert_eq!(d.l_eq, None);
        assert!(d.partial);
        assert_eq!(d.l_neq, Some(d.l_un));

        let single = LatentClassModel::axis_aligned(vec![1.0], 3, 1.0, 1.0).unwrap();
        let all = sample_tuples(
            &single,
            LabelSource::True,
            300,
            2,
            NegativeSelection::Marginal,
            &mut rng(8),
        )
        .unwrap();
        let d = decompose_loss(unit_embedding, &all).unwrap();
        assert_eq!((d.l_eq, d.tau), (Some(d.l_un), 1.0));

        let a = SurrogateAssignment::symmetric_noise(m.prior(), 0.4).unwrap();
        let mixed = sample_tuples(
            &m,
            LabelSource::Clinical(&a),
            3000,
            4,
            NegativeSelection::Marginal,
            &mut rng(9),
        )
        .unwrap();
        let d = decompose_loss(unit_embedding, &mixed).unwrap();
        assert!(!d.partial);
        assert!(d.identity_residual() < 1e-12);
    }

    #[test]
    fn tuple_loss_is_logistic_for_one_negative() {
        let fx = [1.0, 0.0];
        let (fp, fn_) = ([0.6, 0.8], vec![vec![0.0, 1.0]]);
        let margin: f64 = 0.6 - 0.0;
        let logistic = -(1.0 / (1.0 + (-margin).exp())).ln();
        assert!((tuple_loss(&fx, &fp, &fn_) - logistic).abs() < 1e-15);
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((kl_divergence(&[0.9, 0.1], &[0.5, 0.5]).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.368).abs() < 1e-3);
        assert!(matches!(
            kl_divergence(&[1.0, 0.0], &[0.0, 1.0]),
            Err(Error::DivergenceUndefined { index: 0 })
        ));
    }

    #[test]
    fn sweep_zero_noise_is_supervised() {
        let cfg = SweepConfig {
            n: 2000,
            ..SweepConfig::default()
        };
        let rows = sweep_surrogate_fidelity(&cfg, 3).unwrap();
        assert_eq!(rows[0].collision_rate, 0.0);
        assert_eq!(rows[0].kl_nats, 0.0);
        assert!(rows[0].l_eq.is_none());
        assert_eq!(
            sweep_csv(&rows),
            sweep_csv(&sweep_surrogate_fidelity(&cfg, 3).unwrap())
        );
        assert!(
            sweep_csv(&rows).starts_with("noise,kl_nats,collision_rate,l_un,l_neq,l_eq,n\n0,0,0,")
        );
        let unsorted = SweepConfig {
            noise_grid: vec![0.2, 0.1],
            ..cfg
        };
        assert!(sweep_surrogate_fidelity(&unsorted, 3).is_err());
    }

    #[test]
    fn pairing_kl_closed_form() {
        // uniform K = 4, noise 1/2: rows are (1/2, 1/6, 1/6, 1/6) so Q(c, c) = 1/12
        let a = SurrogateAssignment::symmetric_noise(&[0.25; 4], 0.5).unwrap();
        for q in a.pair_diagonal() {
            assert!((q - 1.0 / 12.0).abs() < 1e-15);
        }
        assert!((pairing_kl(&[0.25; 4], &a).unwrap() - 3f64.ln()).abs() < 1e-12);
        let clean = SurrogateAssignment::symmetric_noise(&[0.25; 4], 0.0).unwrap();
        assert_eq!(pairing_kl(&[0.25; 4], &clean).unwrap(), 0.0);
    }

    fn categorical(k: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.01f64..1.0, k).prop_map(|w| {
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn kl_nonnegative((p, q) in (2usize..8).prop_flat_map(|k| (categorical(k), categorical(k)))) {
            let kl = kl_divergence(&p, &q).unwrap();
            prop_assert!(kl >= -1e-12);
            prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
            let max_gap = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if max_gap > 1e-3 {
                prop_assert!(kl > 0.0);
            }
        }
    }
}
