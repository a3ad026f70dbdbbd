use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use anchorbind::config::RunConfig;
use anchorbind_cli::sha256_hex;

fn bin(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anchorbind"))
        .args(args.iter().map(|a| a.as_ref()))
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig {
        joint_dim: 8,
        ..RunConfig::default()
    };
    cfg.world.pair_sets[0].count = 300;
    cfg.world.pair_sets[1].count = 200;
    cfg.world.eval_count = 80;
    for e in &mut cfg.encoders {
        if !e.hidden.is_empty() {
            e.hidden = vec![12];
        }
    }
    for s in &mut cfg.stages {
        s.epochs = 2;
        s.batch_size = 32;
        s.schedule.eta_max = 1e-3;
    }
    cfg.derive_seeds();
    cfg
}

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Run {
    fn new(cfg: &RunConfig) -> Run {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("run.json");
        std::fs::write(&config, cfg.to_json()).unwrap();
        Run { _dir: dir, root, config }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn gen(&self, out: &Path) -> Output {
        bin(&[&"gen-data", &"--config", &self.config, &"--out", &out])
    }

    fn train(&self, out: &Path, extra: &[&str]) -> Output {
        let mut args: Vec<&dyn AsRef<std::ffi::OsStr>> = vec![&"train", &"--config", &self.config, &"--out", &out];
        for e in extra {
            args.push(e);
        }
        bin(&args)
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let run = Run::new(&small_config());
    let (a, b) = (run.out("a"), run.out("b"));
    assert!(run.gen(&a).status.success());
    assert!(run.gen(&b).status.success());
    for f in [
        "manifest.json",
        "data/satellite-ground.gbds",
        "data/satellite-audio.gbds",
        "data/eval.gbds",
    ] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&read(&a.join("manifest.json"))).unwrap();
    let files = manifest["files"].as_array().unwrap();
    assert_eq!(files.len(), 3);
    for f in files {
        let bytes = read(&a.join(f["path"].as_str().unwrap()));
        assert_eq!(f["sha256"].as_str().unwrap(), sha256_hex(&bytes));
    }
    assert_eq!(manifest["master_seed"], 2024);
    assert!(manifest["stage_seeds"]["stage1"].is_u64());
}

#[test]
fn empty_pair_set_is_config_error_naming_field() {
    let mut cfg = small_config();
    cfg.world.pair_sets[0].count = 0;
    let run = Run::new(&cfg);
    let o = run.gen(&run.out("x"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("pair_sets[0].count"), "{}", stderr(&o));
}

#[test]
fn malformed_config_is_config_error() {
    let run = Run::new(&small_config());
    std::fs::write(&run.config, "{ \"version\": 1, ").unwrap();
    assert_eq!(run.gen(&run.out("x")).status.code(), Some(2));
}

#[test]
fn missing_dataset_names_the_path() {
    let run = Run::new(&small_config());
    let o = run.train(&run.out("empty"), &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("satellite-ground.gbds"), "{}", stderr(&o));
}

#[test]
fn train_eval_embed_retrieve_end_to_end() {
    let run = Run::new(&small_config());
    let out = run.out("run");
    assert!(run.gen(&out).status.success());
    let o = run.train(&out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = out.join("pipeline.gbpl");
    let first = read(&ckpt);
    for m in ["satellite", "ground", "audio", "text"] {
        assert!(out.join(format!("encoders/{m}.gbec")).exists());
    }
    let metrics = String::from_utf8(read(&out.join("metrics.csv"))).unwrap();
    assert!(metrics.starts_with("stage,step,epoch,loss,lr,tau\n"));

    let again = run.out("again");
    assert!(run.gen(&again).status.success());
    assert!(run.train(&again, &[]).status.success());
    assert_eq!(sha256_hex(&read(&again.join("pipeline.gbpl"))), sha256_hex(&first));

    let bundle = out.join("data/eval.gbds");
    let o = bin(&[&"eval", &"--ckpt", &ckpt, &"--bundle", &bundle, &"--k", &"1,5,10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let reports = String::from_utf8(read(&out.join("reports.csv"))).unwrap();
    let mut lines = reports.lines();
    assert_eq!(
        lines.next().unwrap(),
        "query_modality,gallery_modality,N,k,recall_percent,median_rank,baseline"
    );
    let rows: Vec<&str> = lines.collect();
    let model_pairs: std::collections::BTreeSet<(&str, &str)> = rows
        .iter()
        .filter(|r| r.ends_with(",model"))
        .map(|r| {
            let f: Vec<&str> = r.split(',').collect();
            (f[0], f[1])
        })
        .collect();
    assert_eq!(model_pairs.len(), 12);
    assert_eq!(rows.len(), 12 * 2 * 3);

    let sat = out.join("sat.gbes");
    let aud = out.join("aud.gbes");
    for (m, p) in [("satellite", &sat), ("audio", &aud)] {
        let o = bin(&[&"embed", &"--ckpt", &ckpt, &"--data", &bundle, &"--modality", &m, &"--out", p]);
        assert!(o.status.success(), "{}", stderr(&o));
    }

    let o = bin(&[&"retrieve", &"--queries", &sat, &"--gallery", &sat, &"--k", &"1"]);
    assert!(o.status.success());
    let csv = String::from_utf8(o.stdout).unwrap();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0], f[2], "{line}");
    }

    let o = bin(&[&"retrieve", &"--queries", &sat, &"--gallery", &aud, &"--k", &"81"]);
    assert_eq!(o.status.code(), Some(2));

    // Rank of the true partner from the full top-k list agrees with eval.
    let o = bin(&[&"retrieve", &"--queries", &sat, &"--gallery", &aud, &"--k", &"80"]);
    let csv = String::from_utf8(o.stdout).unwrap();
    let mut from_retrieve = Vec::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[0] == f[2] {
            from_retrieve.push(f[1].parse::<usize>().unwrap());
        }
    }
    let ranks = String::from_utf8(read(&out.join("ranks.csv"))).unwrap();
    let from_eval: Vec<usize> = ranks
        .lines()
        .skip(1)
        .filter(|l| l.starts_with("satellite,audio,model,"))
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(from_retrieve.len(), 80);
    assert_eq!(from_retrieve, from_eval);

    let o = bin(&[&"embed", &"--ckpt", &ckpt, &"--data", &bundle, &"--modality", &"smell", &"--out", &sat]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn untrained_checkpoint_scores_near_random() {
    let mut cfg = small_config();
    for s in &mut cfg.stages {
        s.epochs = 0;
    }
    let run = Run::new(&cfg);
    let out = run.out("run");
    assert!(run.gen(&out).status.success());
    assert!(run.train(&out, &[]).status.success());
    let o = bin(&[
        &"eval",
        &"--ckpt",
        &out.join("pipeline.gbpl"),
        &"--bundle",
        &out.join("data/eval.gbds"),
        &"--k",
        &"10",
    ]);
    assert!(o.status.success());
    let reports = String::from_utf8(read(&out.join("reports.csv"))).unwrap();
    let recall = |kind: &str| -> f64 {
        let line = reports
            .lines()
            .find(|l| l.starts_with("satellite,audio,") && l.ends_with(kind))
            .unwrap();
        line.split(',').nth(4).unwrap().parse().unwrap()
    };
    // Chance at N = 80 is 12.5%.
    assert!(recall("model") < 30.0, "{}", recall("model"));
    assert!(recall("random") < 30.0);
}

#[test]
fn max_steps_then_resume_matches_uninterrupted_training() {
    let run = Run::new(&small_config());
    let out = run.out("run");
    assert!(run.gen(&out).status.success());
    assert!(run.train(&out, &[]).status.success());
    let full = read(&out.join("pipeline.gbpl"));

    let part = run.out("part");
    assert!(run.gen(&part).status.success());
    let o = run.train(&part, &["--max-steps", "13"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("suspended"));
    assert!(!part.join("encoders").exists());
    let mid = part.join("mid.gbpl");
    std::fs::rename(part.join("pipeline.gbpl"), &mid).unwrap();
    let o = run.train(&part, &["--resume", mid.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(&part.join("pipeline.gbpl")), full);
}

#[test]
fn damaged_files_exit_with_format_error() {
    let run = Run::new(&small_config());
    let out = run.out("run");
    assert!(run.gen(&out).status.success());
    let bundle = out.join("data/eval.gbds");
    let bytes = read(&bundle);
    let cut = out.join("cut.gbds");
    std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
    assert!(run.train(&out, &[]).status.success());
    let ckpt = out.join("pipeline.gbpl");
    let o = bin(&[&"eval", &"--ckpt", &ckpt, &"--bundle", &cut]);
    assert_eq!(o.status.code(), Some(3));

    let junk = out.join("junk.gbpl");
    std::fs::write(&junk, b"GBPL\x01\x00\x00\x00garbage").unwrap();
    let o = bin(&[&"eval", &"--ckpt", &junk, &"--bundle", &bundle]);
    assert_eq!(o.status.code(), Some(3));

    let o = bin(&[&"train", &"--config", &run.config, &"--out", &out, &"--resume", &out.join("absent.gbpl")]);
    assert_eq!(o.status.code(), Some(3));

    let data = out.join("data/satellite-ground.gbds");
    let mut long = read(&data);
    long.push(1);
    std::fs::write(&data, long).unwrap();
    assert_eq!(run.train(&out, &[]).status.code(), Some(3));
}

#[test]
fn preset_configs_parse() {
    for preset in ["default", "three-stage"] {
        let o = bin(&[&"config", &"--preset", &preset]);
        assert!(o.status.success());
        RunConfig::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
    }
}
