use std::path::{Path, PathBuf};

use maskmotion_harness::cli::run;
use maskmotion_harness::formats::{Checkpoint, SequenceFile};

const TINY: &str = r#"
seed = 3
tokenizer_stride = 2

[data]
num_sequences = 4
frames = 10

[tokenizer]
tokens = 4
latent = 4
codebook_size = 8
hidden = 16

[tokenizer_train]
epochs = 2
batch_size = 8

[network]
width = 16
depth = 1
heads = 2
ffn_mult = 2
window = 4
tokens = 4
codebook_size = 8

[motion]
batch_size = 2

[image]
batch_size = 2

[video]
batch_size = 2
epochs = 2

[bench]
frames = 12
steps = [1, 2, 4]
repeats = 1
"#;

struct Dir(PathBuf);

impl Dir {
    fn new(name: &str) -> Self {
        let p = std::env::temp_dir().join(format!("mm_cli_{name}_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&p);
        std::fs::create_dir_all(&p).unwrap();
        std::fs::write(p.join("tiny.toml"), TINY).unwrap();
        Dir(p)
    }
    fn path(&self, f: &str) -> String {
        self.0.join(f).display().to_string()
    }
}

impl Drop for Dir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn cli(args: &[&str]) -> String {
    let mut out = Vec::new();
    let argv = std::iter::once("maskmotion").chain(args.iter().copied());
    run(argv, &mut out).unwrap_or_else(|e| panic!("{args:?}: {e}"));
    String::from_utf8(out).unwrap()
}

fn read(p: &str) -> Vec<u8> {
    std::fs::read(Path::new(p)).unwrap()
}

#[test]
fn gen_data_is_seed_deterministic() {
    let d = Dir::new("gen");
    let cfg = d.path("tiny.toml");
    for name in ["a.mmsq", "b.mmsq"] {
        cli(&["gen-data", "--config", &cfg, "--seed", "1", "--out", &d.path(name)]);
    }
    cli(&["gen-data", "--config", &cfg, "--seed", "2", "--out", &d.path("c.mmsq")]);
    assert_eq!(read(&d.path("a.mmsq")), read(&d.path("b.mmsq")));
    assert_ne!(read(&d.path("a.mmsq")), read(&d.path("c.mmsq")));
    let f = SequenceFile::from_bytes(&read(&d.path("a.mmsq"))).unwrap();
    assert_eq!(f.records.len(), 4);
    assert!(f.records.iter().all(|r| r.observations.is_some() && r.sequence.frames() == 10));
    cli(&["gen-data", "--config", &cfg, "--seed", "1", "--json", "--out", &d.path("a.json")]);
    let v: serde_json::Value = serde_json::from_slice(&read(&d.path("a.json"))).unwrap();
    assert!(v.is_object());
}

#[test]
fn bad_flags_and_files_fail() {
    let mut out = Vec::new();
    assert!(run(["maskmotion", "fly"], &mut out).is_err());
    assert!(run(["maskmotion", "gen-data", "--seed", "x"], &mut out).is_err());
    assert!(run(["maskmotion", "train-tokenizer", "--data", "/nonexistent/file", "--out", "/tmp/x"], &mut out).is_err());
    assert!(run(["maskmotion", "--help"], &mut out).is_ok());
}

#[test]
fn pipeline_from_data_to_evaluation() {
    let d = Dir::new("pipe");
    let cfg = d.path("tiny.toml");
    let c = |args: &[&str]| {
        let mut v = args.to_vec();
        v.extend(["--config", cfg.as_str()]);
        cli(&v)
    };
    c(&["gen-data", "--out", &d.path("train.mmsq")]);
    c(&["gen-data", "--seed", "9", "--observations", "eval", "--out", &d.path("eval.mmsq")]);
    let log = c(&["train-tokenizer", "--data", &d.path("train.mmsq"), "--out", &d.path("tok.mmck")]);
    assert_eq!(log.lines().count(), 2);
    c(&["train", "--stage", "motion", "--data", &d.path("train.mmsq"), "--init", &d.path("tok.mmck"), "--out", &d.path("m.mmck")]);
    let log = c(&["train", "--stage", "image", "--data", &d.path("train.mmsq"), "--init", &d.path("m.mmck"), "--out", &d.path("i.mmck")]);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["stage"], "image");
    assert!(first["loss"]["total"].as_f64().unwrap() > 0.0 && first["lr"].as_f64().is_some());

    // uninterrupted video stage vs. two steps, resume, the rest
    c(&["train", "--stage", "video", "--data", &d.path("train.mmsq"), "--init", &d.path("i.mmck"), "--out", &d.path("v.mmck"), "--log", &d.path("v.jsonl")]);
    c(&["train", "--stage", "video", "--data", &d.path("train.mmsq"), "--init", &d.path("i.mmck"), "--max-steps", "2", "--out", &d.path("v2.mmck")]);
    assert_eq!(Checkpoint::<f32>::load(Path::new(&d.path("v2.mmck"))).unwrap().step, 2);
    let rest = c(&["train", "--stage", "video", "--data", &d.path("train.mmsq"), "--resume", &d.path("v2.mmck"), "--out", &d.path("v3.mmck")]);
    let full = String::from_utf8(read(&d.path("v.jsonl"))).unwrap();
    assert_eq!(full.lines().count(), 4);
    assert_eq!(full.lines().skip(2).collect::<Vec<_>>(), rest.lines().collect::<Vec<_>>());
    assert_eq!(read(&d.path("v.mmck")), read(&d.path("v3.mmck")));

    c(&["infer", "--model", &d.path("v.mmck"), "--data", &d.path("eval.mmsq"), "--steps", "3", "--trace", &d.path("trace.jsonl"), "--out", &d.path("pred.mmsq")]);
    let trace = String::from_utf8(read(&d.path("trace.jsonl"))).unwrap();
    assert_eq!(trace.lines().count(), 4 * 3);
    let last: serde_json::Value = serde_json::from_str(trace.lines().nth(2).unwrap()).unwrap();
    assert_eq!((last["step"].as_u64(), last["kept"].as_u64()), (Some(3), Some(40)));
    let pred = SequenceFile::from_bytes(&read(&d.path("pred.mmsq"))).unwrap();
    assert!(pred.records.iter().all(|r| r.world.is_some() && r.tokens.as_ref().map(Vec::len) == Some(40)));

    let table = c(&["eval", "--pred", &d.path("eval.mmsq"), "--gt", &d.path("eval.mmsq"), "--split-visibility", &d.path("eval.mmsq"), "--out", &d.path("self.json")]);
    assert!(table.contains("MPJPE-occ"));
    let r: serde_json::Value = serde_json::from_slice(&read(&d.path("self.json"))).unwrap();
    // jitter and sliding describe the prediction alone
    for k in ["mpjpe_all", "mpjpe_vis", "mpjpe_occ", "pve", "gmpjpe", "accel", "g_accel"] {
        assert_eq!(r[k].as_f64(), Some(0.0), "{k}");
    }
    // aligned metrics go through an SVD fit; a short, nearly straight path is ill-conditioned
    assert!(r["pa_mpjpe"].as_f64().unwrap() < 1e-9);
    assert!(r["rte"].as_f64().unwrap() < 1e-4);
    c(&["eval", "--pred", &d.path("pred.mmsq"), "--gt", &d.path("eval.mmsq"), "--out", &d.path("pred.json")]);
    let r: serde_json::Value = serde_json::from_slice(&read(&d.path("pred.json"))).unwrap();
    assert!(r["mpjpe_all"].as_f64().unwrap() > 0.0 && r["mpjpe_occ"].is_null());

    let table = c(&["bench", "--model", &d.path("v.mmck"), "--out", &d.path("bench.json")]);
    assert!(table.contains("frames/s"));
    let b: serde_json::Value = serde_json::from_slice(&read(&d.path("bench.json"))).unwrap();
    assert_eq!(b["rows"].as_array().unwrap().len(), 3);
    assert!(b["rows"].as_array().unwrap().iter().all(|r| r["frames_per_second"].as_f64().unwrap() > 0.0));
}
