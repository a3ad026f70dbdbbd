//! Commands behind the `anchorbind` binary.
//!
//! Output layout under a run directory:
//!
//! ```text
//! manifest.json          seeds and sha256 of every generated file
//! data/<pair set>.gbds   paired training datasets
//! data/eval.gbds         evaluation bundle
//! pipeline.gbpl          pipeline checkpoint
//! metrics.csv            per-step training metrics
//! encoders/<m>.gbec      final encoder per modality
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use anchorbind::config::RunConfig;
use anchorbind::pipeline::{checkpoint, resume, run_pipeline_bounded, PipelineState, Progress};
use anchorbind::retrieval::{evaluate_all_pairs, ranks_csv, reports_csv, RetrievalReport};
use anchorbind::store::{top_k, top_k_csv, EmbeddingStore};
use anchorbind::world::{generate_world, EvalBundle, ObservationTable, PairedDataset};
use anchorbind::{Error, Result};

pub const EVAL_FILE: &str = "eval.gbds";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "pipeline.gbpl";
pub const METRICS_FILE: &str = "metrics.csv";

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::config(format!("{} is not UTF-8", path.display())))?;
    RunConfig::from_json(&text)
}

/// The run directory: an explicit override, else the config's `output_dir`.
pub fn run_dir(cfg: &RunConfig, out: Option<&Path>) -> PathBuf {
    out.map_or_else(|| PathBuf::from(&cfg.output_dir), Path::to_path_buf)
}

pub fn dataset_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("data").join(format!("{id}.gbds"))
}

#[derive(Debug, Serialize)]
struct ManifestFile {
    path: String,
    role: &'static str,
    rows: usize,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    master_seed: u64,
    world_seed: u64,
    config_sha256: String,
    stage_seeds: BTreeMap<String, u64>,
    files: Vec<ManifestFile>,
}

/// Generates the world and writes every GBDS file plus a manifest.
/// Returns the manifest path.
pub fn cmd_gen_data(config: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let cfg = load_config(config)?;
    let dir = run_dir(&cfg, out);
    let world = generate_world(&cfg.world)?;
    let mut files = Vec::new();
    for d in world.datasets() {
        let bytes = d.to_gbds();
        let rel = format!("data/{}.gbds", d.id);
        write(&dir.join(&rel), &bytes)?;
        files.push(ManifestFile {
            path: rel,
            role: "paired",
            rows: d.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let bundle = world.full_eval_bundle();
    let bytes = bundle.to_gbds();
    let rel = format!("data/{EVAL_FILE}");
    write(&dir.join(&rel), &bytes)?;
    files.push(ManifestFile {
        path: rel,
        role: "eval",
        rows: bundle.len(),
        sha256: sha256_hex(&bytes),
    });
    let manifest = Manifest {
        master_seed: cfg.master_seed,
        world_seed: cfg.world.seed,
        config_sha256: sha256_hex(cfg.to_json().as_bytes()),
        stage_seeds: cfg.stages.iter().map(|s| (s.name.clone(), s.seed)).collect(),
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write(&path, text.as_bytes())?;
    Ok(path)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub max_steps: Option<u64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub progress: Progress,
    pub checkpoint: PathBuf,
    pub state: PipelineState,
}

/// Runs (or resumes) the configured pipeline over datasets written by
/// [`cmd_gen_data`].
pub fn cmd_train(config: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    let cfg = load_config(config)?;
    let dir = run_dir(&cfg, opts.out.as_deref());
    let mut datasets = BTreeMap::new();
    for s in &cfg.stages {
        if datasets.contains_key(&s.dataset) {
            continue;
        }
        let path = dataset_path(&dir, &s.dataset);
        let d = PairedDataset::from_gbds(s.dataset.clone(), &read(&path)?)?;
        datasets.insert(s.dataset.clone(), d);
    }
    let mut state = match &opts.resume {
        Some(p) => resume(p)?,
        None => PipelineState::new(cfg.initial_registry()?),
    };
    let progress = run_pipeline_bounded(&cfg.stages, &mut state, &datasets, opts.max_steps)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    checkpoint(&state, &ckpt)?;
    write(&dir.join(METRICS_FILE), state.metrics_csv().as_bytes())?;
    if progress == Progress::Completed {
        for (id, enc) in &state.encoders {
            write(&dir.join("encoders").join(format!("{id}.gbec")), &enc.serialize())?;
        }
    }
    Ok(TrainOutcome {
        progress,
        checkpoint: ckpt,
        state,
    })
}

/// All-pairs retrieval of a checkpoint's encoders on an eval bundle. Writes
/// `reports.csv` and `ranks.csv` into `out_dir`.
pub fn cmd_eval(ckpt: &Path, bundle: &Path, ks: &[usize], seed: u64, out_dir: &Path) -> Result<Vec<RetrievalReport>> {
    let state = resume(ckpt)?;
    let bundle = EvalBundle::from_gbds(&read(bundle)?)?;
    let reports = evaluate_all_pairs(&state.encoders, &bundle, ks, seed)?;
    write(&out_dir.join("reports.csv"), reports_csv(&reports).as_bytes())?;
    write(&out_dir.join("ranks.csv"), ranks_csv(&reports).as_bytes())?;
    Ok(reports)
}

/// Embeds every row of one modality of a GBDS file with the checkpoint's
/// encoder for that modality.
pub fn cmd_embed(ckpt: &Path, data: &Path, modality: &str, out: &Path) -> Result<EmbeddingStore> {
    let state = resume(ckpt)?;
    let table = ObservationTable::from_gbds(&read(data)?)?;
    let obs = table.get(modality).ok_or_else(|| {
        Error::config(format!(
            "{} has no {modality:?} observations (has {:?})",
            data.display(),
            table.modalities
        ))
    })?;
    let enc = state.encoder(modality)?;
    if enc.input_dim() != obs.cols() {
        return Err(Error::config(format!(
            "encoder {modality:?} expects {} inputs but {} has {}",
            enc.input_dim(),
            data.display(),
            obs.cols()
        )));
    }
    let store = EmbeddingStore::embed(enc, modality, &table.ids, obs)?;
    write(out, &store.to_bytes())?;
    Ok(store)
}

/// Top-`k` gallery ids for every query, as CSV.
pub fn cmd_retrieve(queries: &Path, gallery: &Path, k: usize) -> Result<String> {
    let q = EmbeddingStore::from_bytes(&read(queries)?)?;
    let g = EmbeddingStore::from_bytes(&read(gallery)?)?;
    let hits = top_k(&q, &g, k)?;
    Ok(top_k_csv(&q, &hits))
}

pub fn parse_k_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .ok()
                .filter(|&k| k > 0)
                .ok_or_else(|| Error::config(format!("--k: {p:?} is not a positive integer")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_list_parsing() {
        assert_eq!(parse_k_list("1,5, 10").unwrap(), vec![1, 5, 10]);
        assert!(parse_k_list("1,0").is_err());
        assert!(parse_k_list("a").is_err());
    }
}
