//! Flat `section.key = value` run configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! generator.separation = 3
//! train.label_key = cst
//! probe.slots = 0,1,2,3,4
//! ```
//!
//! Unknown keys are rejected. [`RunConfig::to_text`] writes every key in a
//! fixed order; its SHA-256 prefix is the config hash embedded in outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::contrastive::{AugmentSpec, LabelKey};
use crate::dataforge::{
    interpolated_biomarker_prob, GeneratorConfig, PretrainPool, NUM_BIOMARKERS,
};
use crate::error::{Error, Result};
use crate::seed;
use crate::theory::{NegativeSelection, SweepConfig};
use crate::trainloop::{EvalConfig, ProbeConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SplitConfig {
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 20.0 / 96.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub eval: EvalConfig,
    pub seeds: usize,
    pub theory: SweepConfig,
}

fn bad(key: &str, detail: impl Into<String>) -> Error {
    Error::BadValue {
        key: key.into(),
        detail: detail.into(),
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| bad(key, format!("cannot parse `{v}`")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn bool_value(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, format!("expected true or false, got `{v}`"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn show_opt<T: ToString>(x: &Option<T>) -> String {
    x.as_ref().map_or("none".into(), ToString::to_string)
}

fn bin_width(key: &LabelKey) -> Option<u32> {
    match *key {
        LabelKey::Bcva { bin_width } | LabelKey::Cst { bin_width } => bin_width,
        _ => None,
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                detail: format!("expected `section.key = value`, got `{line}`"),
            })?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Self::from_entries(&entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn from_entries(entries: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = RunConfig {
            seeds: 1,
            ..RunConfig::default()
        };
        // class count first: prior and biomarker tables default from it
        if let Some(v) = entries.get("generator.n_classes") {
            let k: usize = num("generator.n_classes", v)?;
            if k == 0 {
                return Err(bad("generator.n_classes", "must be >= 1"));
            }
            cfg.generator.n_classes = k;
            cfg.generator.class_prior = vec![1.0 / k as f64; k];
            cfg.generator.biomarker_prob = interpolated_biomarker_prob(k);
        }
        let mut bin = bin_width(&cfg.train.label_key);
        for (key, v) in entries {
            let k = key.as_str();
            let g = &mut cfg.generator;
            let t = &mut cfg.train;
            let p = &mut cfg.probe;
            let th = &mut cfg.theory;
            match k {
                "generator.n_classes" => {}
                "generator.class_prior" => g.class_prior = list(k, v)?,
                "generator.input_dim" => g.input_dim = num(k, v)?,
                "generator.n_eyes" => g.n_eyes = num(k, v)?,
                "generator.visits_per_eye" => g.visits_per_eye = num(k, v)?,
                "generator.class_drift" => g.class_drift = num(k, v)?,
                "generator.separation" => g.separation = num(k, v)?,
                "generator.bcva_mean" => g.bcva_mean = num(k, v)?,
                "generator.bcva_sigma" => g.bcva_sigma = num(k, v)?,
                "generator.cst_mean" => g.cst_mean = num(k, v)?,
                "generator.cst_sigma" => g.cst_sigma = num(k, v)?,
                "generator.signal_dims" => g.signal_dims = num(k, v)?,
                "generator.class_shift" => g.class_shift = num(k, v)?,
                "generator.class_radius" => g.class_radius = num(k, v)?,
                "generator.feature_sigma" => g.feature_sigma = num(k, v)?,
                "generator.eye_nuisance" => g.eye_nuisance = num(k, v)?,
                "generator.labeled_fraction" => g.labeled_fraction = num(k, v)?,
                "split.test_fraction" => cfg.split.test_fraction = num(k, v)?,
                "split.pool" => {
                    t.pool = match v.as_str() {
                        "all-train" => PretrainPool::AllTrain,
                        "unlabeled-only" => PretrainPool::UnlabeledOnly,
                        _ => {
                            return Err(bad(
                                k,
                                format!("expected all-train or unlabeled-only, got `{v}`"),
                            ))
                        }
                    }
                }
                "train.label_key" => {
                    t.label_key = v
                        .parse()
                        .map_err(|_| bad(k, format!("unknown label key `{v}`")))?
                }
                "train.bin_width" => bin = opt(k, v)?,
                "train.temperature" => t.temperature = num(k, v)?,
                "train.batch_size" => t.batch_size = num(k, v)?,
                "train.epochs" => t.epochs = num(k, v)?,
                "train.lr" => t.lr = num(k, v)?,
                "train.momentum" => t.momentum = num(k, v)?,
                "train.seed" => t.seed = num(k, v)?,
                "train.hidden" => t.hidden = num(k, v)?,
                "train.repr_dim" => t.repr_dim = num(k, v)?,
                "train.proj_dim" => t.proj_dim = num(k, v)?,
                "augment.sigma" => t.augment.sigma = num(k, v)?,
                "augment.mask_p" => t.augment.mask_p = num(k, v)?,
                "augment.flip" => t.augment.flip = bool_value(k, v)?,
                "augment.crop_pad" => t.augment.crop_pad = num(k, v)?,
                "augment.grid" => {
                    t.augment.grid = if v == "none" {
                        None
                    } else {
                        let (h, w) = v
                            .split_once('x')
                            .ok_or_else(|| bad(k, format!("expected HxW or none, got `{v}`")))?;
                        Some([num(k, h)?, num(k, w)?])
                    }
                }
                "probe.slots" => p.slots = list(k, v)?,
                "probe.epochs" => p.epochs = num(k, v)?,
                "probe.batch_size" => p.batch_size = num(k, v)?,
                "probe.lr" => p.lr = num(k, v)?,
                "probe.momentum" => p.momentum = num(k, v)?,
                "probe.max_samples" => p.max_samples = opt(k, v)?,
                "eval.n_per_class" => cfg.eval.n_per_class = num(k, v)?,
                "eval.seeds" => cfg.seeds = num(k, v)?,
                "theory.prior" => th.prior = list(k, v)?,
                "theory.dim" => th.dim = num(k, v)?,
                "theory.spread" => th.spread = num(k, v)?,
                "theory.sigma" => th.sigma = num(k, v)?,
                "theory.n" => th.n = num(k, v)?,
                "theory.negatives" => th.negatives = num(k, v)?,
                "theory.selection" => {
                    th.selection = match v.as_str() {
                        "marginal" => NegativeSelection::Marginal,
                        "distinct-label" => NegativeSelection::DistinctLabel,
                        _ => {
                            return Err(bad(
                                k,
                                format!("expected marginal or distinct-label, got `{v}`"),
                            ))
                        }
                    }
                }
                "theory.noise_grid" => th.noise_grid = list(k, v)?,
                _ => match k
                    .strip_prefix("generator.biomarker_prob.")
                    .map(str::parse::<usize>)
                {
                    Some(Ok(j)) if j < NUM_BIOMARKERS => g.biomarker_prob[j] = list(k, v)?,
                    _ => return Err(Error::UnknownKey(k.to_string())),
                },
            }
        }
        cfg.train.label_key = cfg.train.label_key.with_bin_width(bin);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return Err(bad(
                "split.test_fraction",
                format!("must lie in (0, 1), got {}", self.split.test_fraction),
            ));
        }
        self.train.validate().map_err(|e| match e {
            Error::Parameter { name, detail } => bad(&format!("augment.{name}"), detail),
            other => other,
        })?;
        self.probe.validate()?;
        if self.eval.n_per_class == 0 {
            return Err(bad("eval.n_per_class", "must be >= 1"));
        }
        if self.seeds == 0 {
            return Err(bad("eval.seeds", "must be >= 1"));
        }
        if self.theory.n == 0 || self.theory.negatives == 0 || self.theory.dim == 0 {
            return Err(bad("theory.n", "n, negatives and dim must be >= 1"));
        }
        if self
            .theory
            .noise_grid
            .iter()
            .any(|x| !(0.0..=1.0).contains(x))
            || self.theory.noise_grid.windows(2).any(|w| w[0] > w[1])
        {
            return Err(bad("theory.noise_grid", "must be sorted values in [0, 1]"));
        }
        Ok(())
    }

    /// Every key, fixed order.
    pub fn to_text(&self) -> String {
        let g = &self.generator;
        let t = &self.train;
        let a = &t.augment;
        let p = &self.probe;
        let th = &self.theory;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        put("generator.n_classes", g.n_classes.to_string());
        put("generator.class_prior", join(&g.class_prior));
        put("generator.input_dim", g.input_dim.to_string());
        put("generator.n_eyes", g.n_eyes.to_string());
        put("generator.visits_per_eye", g.visits_per_eye.to_string());
        put("generator.class_drift", g.class_drift.to_string());
        put("generator.separation", g.separation.to_string());
        put("generator.bcva_mean", g.bcva_mean.to_string());
        put("generator.bcva_sigma", g.bcva_sigma.to_string());
        put("generator.cst_mean", g.cst_mean.to_string());
        put("generator.cst_sigma", g.cst_sigma.to_string());
        put("generator.signal_dims", g.signal_dims.to_string());
        put("generator.class_shift", g.class_shift.to_string());
        put("generator.class_radius", g.class_radius.to_string());
        put("generator.feature_sigma", g.feature_sigma.to_string());
        put("generator.eye_nuisance", g.eye_nuisance.to_string());
        put("generator.labeled_fraction", g.labeled_fraction.to_string());
        for (j, row) in g.biomarker_prob.iter().enumerate() {
            put(&format!("generator.biomarker_prob.{j}"), join(row));
        }
        put("split.test_fraction", self.split.test_fraction.to_string());
        put(
            "split.pool",
            match t.pool {
                PretrainPool::AllTrain => "all-train",
                PretrainPool::UnlabeledOnly => "unlabeled-only",
            }
            .into(),
        );
        put("train.label_key", t.label_key.name().into());
        put("train.bin_width", show_opt(&bin_width(&t.label_key)));
        put("train.temperature", t.temperature.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.epochs", t.epochs.to_string());
        put("train.lr", t.lr.to_string());
        put("train.momentum", t.momentum.to_string());
        put("train.seed", t.seed.to_string());
        put("train.hidden", t.hidden.to_string());
        put("train.repr_dim", t.repr_dim.to_string());
        put("train.proj_dim", t.proj_dim.to_string());
        put("augment.sigma", a.sigma.to_string());
        put("augment.mask_p", a.mask_p.to_string());
        put("augment.flip", a.flip.to_string());
        put("augment.crop_pad", a.crop_pad.to_string());
        put(
            "augment.grid",
            a.grid.map_or("none".into(), |[h, w]| format!("{h}x{w}")),
        );
        put("probe.slots", join(&p.slots));
        put("probe.epochs", p.epochs.to_string());
        put("probe.batch_size", p.batch_size.to_string());
        put("probe.lr", p.lr.to_string());
        put("probe.momentum", p.momentum.to_string());
        put("probe.max_samples", show_opt(&p.max_samples));
        put("eval.n_per_class", self.eval.n_per_class.to_string());
        put("eval.seeds", self.seeds.to_string());
        put("theory.prior", join(&th.prior));
        put("theory.dim", th.dim.to_string());
        put("theory.spread", th.spread.to_string());
        put("theory.sigma", th.sigma.to_string());
        put("theory.n", th.n.to_string());
        put("theory.negatives", th.negatives.to_string());
        put(
            "theory.selection",
            match th.selection {
                NegativeSelection::Marginal => "marginal",
                NegativeSelection::DistinctLabel => "distinct-label",
            }
            .into(),
        );
        put("theory.noise_grid", join(&th.noise_grid));
        s
    }

    pub fn hash(&self) -> String {
        seed::short_hash(self.to_text().as_bytes())
    }

    pub fn augment(&self) -> &AugmentSpec {
        &self.train.augment
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_roundtrip() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.seeds, 1);
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::parse(
            "# desk run\ngenerator.separation = 0\ntrain.label_key = bcva\ntrain.bin_width = 5\nprobe.slots = 0, 2\naugment.grid = 4x8\n",
        )
        .unwrap();
        assert_eq!(cfg.generator.separation, 0.0);
        assert_eq!(cfg.train.label_key, LabelKey::Bcva { bin_width: Some(5) });
        assert_eq!(cfg.probe.slots, vec![0, 2]);
        assert_eq!(cfg.train.augment.grid, Some([4, 8]));
        assert_ne!(cfg.hash(), RunConfig::parse("").unwrap().hash());
    }

    #[test]
    fn class_count_resizes_tables() {
        let cfg = RunConfig::parse("generator.n_classes = 3").unwrap();
        assert_eq!(cfg.generator.class_prior.len(), 3);
        assert!(cfg.generator.biomarker_prob.iter().all(|r| r.len() == 3));
    }

    #[test]
    fn rejects_unknown_and_bad_values() {
        assert!(
            matches!(RunConfig::parse("train.colour = red"), Err(Error::UnknownKey(k)) if k == "train.colour")
        );
        assert!(matches!(
            RunConfig::parse("generator.biomarker_prob.16 = 0.1"),
            Err(Error::UnknownKey(_))
        ));
        assert!(matches!(
            RunConfig::parse("generator.biomarker_prob.0 = 0.1,0.2,1.5,0.3"),
            Err(Error::BadValue { key, .. }) if key == "generator.biomarker_prob.0"
        ));
        assert!(
            matches!(RunConfig::parse("train.lr = fast"), Err(Error::BadValue { key, .. }) if key == "train.lr")
        );
        assert!(matches!(
            RunConfig::parse("no equals sign"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn text_roundtrip(sep in 0.0f64..5.0, lr in 1e-4f64..1.0, slots in proptest::collection::btree_set(0usize..16, 1..6), seed in any::<u64>()) {
            let mut cfg = RunConfig::parse("").unwrap();
            cfg.generator.separation = sep;
            cfg.train.lr = lr;
            cfg.train.seed = seed;
            cfg.probe.slots = slots.into_iter().collect();
            let back = RunConfig::parse(&cfg.to_text()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
