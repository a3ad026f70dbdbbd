//! Seeded synthetic multimodal world.
//!
//! Each location is a latent `z ~ N(0, I)`. A modality observes it through a
//! fixed random map `tanh(z·W + b) + ε` with `ε ~ N(0, σ²)`; the map is a
//! deterministic function of the world seed and the modality name. A
//! *mirrored* modality (text, by default) observes the clean signal of
//! another modality through a fixed orthogonal rotation, so that suitably
//! rotated reference encoders pre-align the two.
//!
//! Pair sets are drawn over disjoint ranges of latent indices, one range per
//! set, followed by an evaluation pool observed in every modality.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::{derive_seed, rng_for};

pub const DATASET_MAGIC: &[u8; 4] = b"GBDS";
pub const DATASET_VERSION: u32 = 1;

const BIAS_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
    /// Observe this other modality's clean signal through a rotation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mirror_of: Option<String>,
}

/// One anchor-paired dataset: `count` locations observed in two modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSetSpec {
    pub id: String,
    pub anchor: String,
    pub partner: String,
    pub count: usize,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
}

fn default_holdout() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub latent_dim: usize,
    pub noise_std: f64,
    pub modalities: Vec<ModalitySpec>,
    pub pair_sets: Vec<PairSetSpec>,
    /// Locations in the evaluation pool.
    pub eval_count: usize,
    /// Set from the run's master seed; not part of the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let m = |name: &str, dim, mirror: Option<&str>| ModalitySpec {
            name: name.into(),
            dim,
            mirror_of: mirror.map(Into::into),
        };
        let p = |id: &str, anchor: &str, partner: &str, count| PairSetSpec {
            id: id.into(),
            anchor: anchor.into(),
            partner: partner.into(),
            count,
            holdout_fraction: default_holdout(),
        };
        WorldConfig {
            latent_dim: 8,
            noise_std: 0.05,
            modalities: vec![
                m("satellite", 16, None),
                m("ground", 16, None),
                m("audio", 12, None),
                m("text", 16, Some("ground")),
            ],
            pair_sets: vec![
                p("satellite-ground", "satellite", "ground", 10_000),
                p("satellite-audio", "satellite", "audio", 2_000),
            ],
            eval_count: 1_000,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn modality(&self, name: &str) -> Option<&ModalitySpec> {
        self.modalities.iter().find(|m| m.name == name)
    }

    pub fn pair_set(&self, id: &str) -> Option<&PairSetSpec> {
        self.pair_sets.iter().find(|p| p.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(Error::config(format!("world.latent_dim must be >= 2, got {}", self.latent_dim)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config(format!("world.noise_std must be >= 0, got {}", self.noise_std)));
        }
        if self.modalities.is_empty() {
            return Err(Error::config("world.modalities is empty"));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            validate_tag(&m.name, &format!("world.modalities[{i}].name"))?;
            if m.dim < 2 {
                return Err(Error::config(format!("world.modalities[{i}].dim must be >= 2, got {}", m.dim)));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::config(format!("world.modalities: duplicate modality {:?}", m.name)));
            }
            if let Some(base) = &m.mirror_of {
                let Some(b) = self.modality(base) else {
                    return Err(Error::config(format!(
                        "world.modalities[{i}].mirror_of names unknown modality {base:?}"
                    )));
                };
                if b.mirror_of.is_some() || b.dim != m.dim || b.name == m.name {
                    return Err(Error::config(format!(
                        "world.modalities[{i}].mirror_of must name a distinct, unmirrored modality of the same dim"
                    )));
                }
            }
        }
        for (i, p) in self.pair_sets.iter().enumerate() {
            let field = format!("world.pair_sets[{i}]");
            validate_tag(&p.id, &format!("{field}.id"))?;
            if self.pair_sets[..i].iter().any(|o| o.id == p.id) || p.id == "eval" {
                return Err(Error::config(format!("{field}.id {:?} is duplicate or reserved", p.id)));
            }
            for m in [&p.anchor, &p.partner] {
                if self.modality(m).is_none() {
                    return Err(Error::config(format!("{field} names unknown modality {m:?}")));
                }
            }
            if p.anchor == p.partner {
                return Err(Error::config(format!("{field} pairs {:?} with itself", p.anchor)));
            }
            if p.count == 0 {
                return Err(Error::config(format!("{field}.count must be >= 1")));
            }
            if !(0.0..1.0).contains(&p.holdout_fraction) {
                return Err(Error::config(format!(
                    "{field}.holdout_fraction must lie in [0, 1), got {}",
                    p.holdout_fraction
                )));
            }
        }
        Ok(())
    }
}

fn validate_tag(tag: &str, field: &str) -> Result<()> {
    let ok = !tag.is_empty() && tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if !ok {
        return Err(Error::config(format!(
            "{field} must be non-empty ASCII letters, digits, '-' or '_', got {tag:?}"
        )));
    }
    Ok(())
}

/// Fixed map from latents to one modality's clean observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMap {
    weights: Matrix,
    bias: Matrix,
    /// For mirrored modalities: base modality and rotation applied to its clean signal.
    mirror: Option<(String, Matrix)>,
}

impl ObservationMap {
    fn for_modality(cfg: &WorldConfig, spec: &ModalitySpec) -> Result<Self> {
        let base = match &spec.mirror_of {
            Some(b) => cfg.modality(b).expect("validated"),
            None => spec,
        };
        let mut rng = rng_for(cfg.seed, &format!("modality:{}", base.name));
        let scale = 1.0 / (cfg.latent_dim as f64).sqrt();
        let weights = Matrix::from_fn(cfg.latent_dim, base.dim, |_, _| {
            scale * rng.sample::<f64, _>(StandardNormal)
        })?;
        let bias = Matrix::from_fn(1, base.dim, |_, _| BIAS_STD * rng.sample::<f64, _>(StandardNormal))?;
        let mirror = match &spec.mirror_of {
            Some(b) => Some((b.clone(), mirror_rotation(cfg.seed, &spec.name, spec.dim)?)),
            None => None,
        };
        Ok(ObservationMap { weights, bias, mirror })
    }

    /// Noise-free observations for a batch of latents (one row each).
    pub fn clean(&self, latents: &Matrix) -> Result<Matrix> {
        let base = latents.matmul(&self.weights)?.add_row(&self.bias)?.map(f64::tanh)?;
        match &self.mirror {
            Some((_, rotation)) => base.matmul(rotation),
            None => Ok(base),
        }
    }

    pub fn mirror(&self) -> Option<(&str, &Matrix)> {
        self.mirror.as_ref().map(|(b, r)| (b.as_str(), r))
    }
}

/// The orthogonal rotation a mirrored modality applies to its base signal.
pub fn mirror_rotation(world_seed: u64, modality: &str, dim: usize) -> Result<Matrix> {
    let mut rng = rng_for(world_seed, &format!("mirror:{modality}"));
    loop {
        let raw = Matrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal))?;
        if let Some(q) = gram_schmidt(&raw) {
            return Ok(q);
        }
    }
}

/// Modified Gram-Schmidt over rows; `None` if the rows are nearly dependent.
fn gram_schmidt(m: &Matrix) -> Option<Matrix> {
    let n = m.cols();
    let mut rows: Vec<Vec<f64>> = (0..m.rows()).map(|r| m.row(r).to_vec()).collect();
    for i in 0..rows.len() {
        for j in 0..i {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let (head, tail) = rows.split_at_mut(i);
            for (x, &q) in tail[0].iter_mut().zip(&head[j]) {
                *x -= dot * q;
            }
        }
        let norm = rows[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            return None;
        }
        rows[i].iter_mut().for_each(|x| *x /= norm);
    }
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    Matrix::new(m.rows(), n, data).ok()
}

/// Observations of several modalities for the same locations, with ids and
/// a held-out mask. This is the in-memory form of a GBDS file.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTable {
    pub modalities: Vec<String>,
    pub observations: Vec<Matrix>,
    pub ids: Vec<u64>,
    pub heldout: Vec<bool>,
}

impl ObservationTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, modality: &str) -> Option<&Matrix> {
        self.modalities
            .iter()
            .position(|m| m == modality)
            .map(|i| &self.observations[i])
    }

    fn check(&self) -> Result<()> {
        let n = self.ids.len();
        if self.heldout.len() != n
            || self.modalities.len() != self.observations.len()
            || self.observations.iter().any(|m| m.rows() != n)
        {
            return Err(Error::contract("observation table columns disagree on row count"));
        }
        Ok(())
    }

    pub fn to_gbds(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.usize32(self.modalities.len());
        for (name, m) in self.modalities.iter().zip(&self.observations) {
            w.str(name);
            w.usize32(m.cols());
        }
        w.u64(self.ids.len() as u64);
        for &id in &self.ids {
            w.u64(id);
        }
        let mut bits = vec![0u8; self.ids.len().div_ceil(8)];
        for (i, &h) in self.heldout.iter().enumerate() {
            if h {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        w.bytes(&bits);
        for m in &self.observations {
            w.matrix_f32(m);
        }
        w.into_bytes()
    }

    pub fn from_gbds(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        r.version(DATASET_VERSION)?;
        let n_mod = r.u32("modality count")? as usize;
        if n_mod > 4096 {
            return Err(r.error(format!("implausible modality count {n_mod}")));
        }
        let mut modalities = Vec::with_capacity(n_mod);
        let mut dims = Vec::with_capacity(n_mod);
        for _ in 0..n_mod {
            modalities.push(r.str("modality tag")?);
            let at = r.offset();
            let d = r.u32("modality dim")? as usize;
            if d == 0 {
                return Err(Error::format(at, "zero modality dim"));
            }
            dims.push(d);
        }
        let n = r.count("row count", 8)?;
        let ids = (0..n).map(|_| r.u64("row id")).collect::<Result<Vec<_>>>()?;
        let bits_at = r.offset();
        let bits = r.take(n.div_ceil(8), "split mask")?;
        if n % 8 != 0 && bits[n / 8] >> (n % 8) != 0 {
            return Err(Error::format(bits_at + n / 8, "padding bits set in split mask"));
        }
        let heldout = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        let observations = dims
            .iter()
            .map(|&d| r.matrix_f32(n, d, "observations"))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(ObservationTable {
            modalities,
            observations,
            ids,
            heldout,
        })
    }
}

/// Two aligned modalities: row `i` of `a` and row `i` of `b` observe the same location.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub id: String,
    table: ObservationTable,
}

impl PairedDataset {
    pub fn from_table(id: impl Into<String>, table: ObservationTable) -> Result<Self> {
        table.check()?;
        if table.modalities.len() != 2 {
            return Err(Error::config(format!(
                "a paired dataset needs exactly two modalities, found {}",
                table.modalities.len()
            )));
        }
        Ok(PairedDataset { id: id.into(), table })
    }

    pub fn from_gbds(id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let table = ObservationTable::from_gbds(bytes)?;
        Self::from_table(id, table).map_err(|e| match e {
            Error::Config(msg) => Error::format(0, msg),
            other => other,
        })
    }

    pub fn to_gbds(&self) -> Vec<u8> {
        self.table.to_gbds()
    }

    pub fn table(&self) -> &ObservationTable {
        &self.table
    }

    pub fn modality_a(&self) -> &str {
        &self.table.modalities[0]
    }

    pub fn modality_b(&self) -> &str {
        &self.table.modalities[1]
    }

    pub fn a(&self) -> &Matrix {
        &self.table.observations[0]
    }

    pub fn b(&self) -> &Matrix {
        &self.table.observations[1]
    }

    /// Observations of the named modality, if this dataset carries it.
    pub fn side(&self, modality: &str) -> Option<&Matrix> {
        self.table.get(modality)
    }

    pub fn ids(&self) -> &[u64] {
        &self.table.ids
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.table.heldout[i]).collect()
    }

    pub fn heldout_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.table.heldout[i]).collect()
    }
}

/// Held-out locations observed in every modality, for retrieval evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBundle {
    table: ObservationTable,
}

impl EvalBundle {
    pub fn from_table(table: ObservationTable) -> Result<Self> {
        table.check()?;
        if table.heldout.iter().any(|&h| !h) {
            return Err(Error::config("evaluation bundle contains rows marked for training"));
        }
        Ok(EvalBundle { table })
    }

    pub fn from_gbds(bytes: &[u8]) -> Result<Self> {
        let table = ObservationTable::from_gbds(bytes)?;
        Self::from_table(table).map_err(|e| match e {
            Error::Config(msg) => Error::format(0, msg),
            other => other,
        })
    }

    pub fn to_gbds(&self) -> Vec<u8> {
        self.table.to_gbds()
    }

    pub fn table(&self) -> &ObservationTable {
        &self.table
    }

    pub fn modalities(&self) -> &[String] {
        &self.table.modalities
    }

    pub fn get(&self, modality: &str) -> Option<&Matrix> {
        self.table.get(modality)
    }

    pub fn ids(&self) -> &[u64] {
        &self.table.ids
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

/// A generated world. Holds the latents and observation maps along with
/// the paired datasets and the eval pool.
#[derive(Debug, Clone)]
pub struct World {
    config: WorldConfig,
    latents: Matrix,
    maps: BTreeMap<String, ObservationMap>,
    datasets: Vec<PairedDataset>,
    eval: EvalBundle,
}

/// Generates the world described by `cfg`; a pure function of `cfg`.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let total = cfg.pair_sets.iter().map(|p| p.count).sum::<usize>() + cfg.eval_count;

    let mut rng = rng_for(cfg.seed, "latent");
    let latents = Matrix::from_fn(total, cfg.latent_dim, |_, _| rng.sample::<f64, _>(StandardNormal))?;

    let mut maps = BTreeMap::new();
    for m in &cfg.modalities {
        maps.insert(m.name.clone(), ObservationMap::for_modality(cfg, m)?);
    }

    let observe = |set: &str, modality: &str, ids: &[usize]| -> Result<Matrix> {
        let z = latents.select_rows(ids);
        let mut obs = maps[modality].clean(&z)?;
        if cfg.noise_std > 0.0 {
            let mut noise = rng_for(cfg.seed, &format!("noise:{set}:{modality}"));
            for x in obs.data_mut() {
                *x += cfg.noise_std * noise.sample::<f64, _>(StandardNormal);
            }
        }
        obs.round_to_f32();
        Ok(obs)
    };

    let mut start = 0;
    let mut datasets = Vec::with_capacity(cfg.pair_sets.len());
    for p in &cfg.pair_sets {
        let ids: Vec<usize> = (start..start + p.count).collect();
        start += p.count;
        let mut order: Vec<usize> = (0..p.count).collect();
        order.shuffle(&mut rng_for(cfg.seed, &format!("split:{}", p.id)));
        let n_held = (p.holdout_fraction * p.count as f64).round() as usize;
        let mut heldout = vec![false; p.count];
        for &i in &order[..n_held] {
            heldout[i] = true;
        }
        let table = ObservationTable {
            modalities: vec![p.anchor.clone(), p.partner.clone()],
            observations: vec![observe(&p.id, &p.anchor, &ids)?, observe(&p.id, &p.partner, &ids)?],
            ids: ids.iter().map(|&i| i as u64).collect(),
            heldout,
        };
        datasets.push(PairedDataset::from_table(p.id.clone(), table)?);
    }

    let eval_ids: Vec<usize> = (start..start + cfg.eval_count).collect();
    let eval = EvalBundle::from_table(ObservationTable {
        modalities: cfg.modalities.iter().map(|m| m.name.clone()).collect(),
        observations: cfg
            .modalities
            .iter()
            .map(|m| observe("eval", &m.name, &eval_ids))
            .collect::<Result<_>>()?,
        ids: eval_ids.iter().map(|&i| i as u64).collect(),
        heldout: vec![true; cfg.eval_count],
    })?;

    Ok(World {
        config: cfg.clone(),
        latents,
        maps,
        datasets,
        eval,
    })
}

impl World {
    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn latents(&self) -> &Matrix {
        &self.latents
    }

    pub fn latent(&self, id: u64) -> &[f64] {
        self.latents.row(id as usize)
    }

    pub fn observation_map(&self, modality: &str) -> Option<&ObservationMap> {
        self.maps.get(modality)
    }

    pub fn datasets(&self) -> &[PairedDataset] {
        &self.datasets
    }

    pub fn dataset(&self, id: &str) -> Option<&PairedDataset> {
        self.datasets.iter().find(|d| d.id == id)
    }

    /// The first `n_eval` locations of the evaluation pool.
    pub fn eval_bundle(&self, n_eval: usize) -> Result<EvalBundle> {
        if n_eval > self.eval.len() {
            return Err(Error::config(format!(
                "requested {n_eval} evaluation tuples but only {} held-out locations exist",
                self.eval.len()
            )));
        }
        let idx: Vec<usize> = (0..n_eval).collect();
        let t = &self.eval.table;
        EvalBundle::from_table(ObservationTable {
            modalities: t.modalities.clone(),
            observations: t.observations.iter().map(|m| m.select_rows(&idx)).collect(),
            ids: t.ids[..n_eval].to_vec(),
            heldout: vec![true; n_eval],
        })
    }

    pub fn full_eval_bundle(&self) -> &EvalBundle {
        &self.eval
    }
}

/// Seed for the world of a run with the given master seed.
pub fn world_seed(master: u64) -> u64 {
    derive_seed(master, "world")
}
