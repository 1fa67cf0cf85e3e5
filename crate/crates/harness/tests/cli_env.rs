//! Separate binary: it mutates the process environment.

use maskmotion_harness::cli::run;
use maskmotion_harness::formats::SequenceFile;

#[test]
fn env_overrides_reach_the_cli() {
    let d = std::env::temp_dir().join(format!("mm_cli_env_{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    let cfg = d.join("c.toml");
    std::fs::write(&cfg, "[data]\nnum_sequences = 5\nframes = 8\n").unwrap();
    let out = d.join("e.mmsq");
    std::env::set_var("MASKMOTION__DATA__NUM_SEQUENCES", "2");
    let args = ["maskmotion", "gen-data", "--config", cfg.to_str().unwrap(), "--observations", "none", "--out", out.to_str().unwrap()];
    run(args, &mut Vec::new()).unwrap();
    std::env::remove_var("MASKMOTION__DATA__NUM_SEQUENCES");
    let f = SequenceFile::load(&out).unwrap();
    std::fs::remove_dir_all(&d).unwrap();
    assert_eq!(f.records.len(), 2);
    assert!(f.records[0].observations.is_none());
}
