//! Command-line front end. Every subcommand takes `--config`, `--seed` and `--out`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use maskmotion_core::body::SkeletonConfig;
use maskmotion_core::metrics::{evaluate_sequence, EvalReport, MotionSample};
use maskmotion_model::inference::reconstruct;
use maskmotion_model::network::ModelWeights;
use maskmotion_model::tokenizer::train_tokenizer;
use maskmotion_model::training::{Stage, Trainer};
use serde::Serialize;

use crate::bench::bench;
use crate::config::Config;
use crate::error::{HarnessError, Result};
use crate::experiment::{build_samples, eval_observations, pose_frames, training_observations};
use crate::formats::{skeleton_hash, Checkpoint, Hyperparameters, SequenceFile, SequenceRecord, WorldBody};
use crate::synthetic::{generate_dataset, MotionSequence};

#[derive(Debug, Parser)]
#[command(name = "maskmotion", version, about = "Masked generative motion recovery at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    /// Mixed random occlusions.
    Train,
    /// Temporal-block occlusion at the configured ratio.
    Eval,
    /// No observations.
    None,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic sequences with simulated observations.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "train")]
        observations: Split,
        /// JSON export instead of the binary format.
        #[arg(long)]
        json: bool,
    },
    /// Train the pose tokenizer on a sequence file.
    TrainTokenizer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: Stage,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint holding the tokenizer and, optionally, earlier-stage weights.
        #[arg(long, required_unless_present = "resume")]
        init: Option<PathBuf>,
        /// Checkpoint written mid-stage to continue from.
        #[arg(long, conflicts_with = "init")]
        resume: Option<PathBuf>,
        /// Write the checkpoint every n steps as well as at the end.
        #[arg(long)]
        checkpoint_every: Option<u64>,
        /// Stop after this many steps in this run.
        #[arg(long)]
        max_steps: Option<u64>,
        /// JSON-lines training log (stdout when absent).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Reconstruct motion for every sequence with observations.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Number of decoding steps.
        #[arg(long)]
        steps: Option<usize>,
        /// JSON-lines per-step trace.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Sequence file whose observations give the visible/occluded split.
        #[arg(long)]
        split_visibility: Option<PathBuf>,
    },
    /// Time reconstruction for several step counts.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint; a freshly initialized model otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<Config> {
    let cfg = Config::load(c.config.as_deref())?;
    Ok(match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn required_out(c: &Common) -> Result<&Path> {
    c.out.as_deref().ok_or_else(|| HarnessError::Config("--out is required".into()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn json_line(value: &impl Serialize) -> String {
    serde_json::to_string(value).expect("log records serialize")
}

/// Sink for JSON lines: a file, or the command's output stream.
struct Lines<'a> {
    file: Option<(PathBuf, std::io::BufWriter<std::fs::File>)>,
    out: &'a mut dyn Write,
}

impl<'a> Lines<'a> {
    fn open(path: Option<&Path>, out: &'a mut dyn Write) -> Result<Self> {
        let file = match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
                }
                let f = std::fs::File::create(p).map_err(|e| HarnessError::io(p, e))?;
                Some((p.to_path_buf(), std::io::BufWriter::new(f)))
            }
            None => None,
        };
        Ok(Lines { file, out })
    }

    fn push(&mut self, line: &str) -> Result<()> {
        match &mut self.file {
            Some((p, w)) => writeln!(w, "{line}").map_err(|e| HarnessError::io(&*p, e)),
            None => writeln!(self.out, "{line}").map_err(|e| HarnessError::io("<stdout>", e)),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some((p, mut w)) = self.file {
            w.flush().map_err(|e| HarnessError::io(&p, e))?;
        }
        Ok(())
    }
}

fn say(out: &mut dyn Write, text: &str) -> Result<()> {
    writeln!(out, "{text}").map_err(|e| HarnessError::io("<stdout>", e))
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run(args: impl IntoIterator<Item = impl Into<OsString> + Clone>, out: &mut dyn Write) -> Result<()> {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            return say(out, e.to_string().trim_end());
        }
        Err(e) => return Err(HarnessError::Config(e.to_string())),
    };
    let skel = SkeletonConfig::<f64>::desk_default();
    match cli.command {
        Command::GenData { common, observations, json } => gen_data(&common, observations, json, &skel, out),
        Command::TrainTokenizer { common, data } => train_tok(&common, &data, &skel, out),
        Command::Train { common, stage, data, init, resume, checkpoint_every, max_steps, log } => {
            let run = TrainRun { stage, data: &data, init: init.as_deref(), resume: resume.as_deref(), checkpoint_every, max_steps, log: log.as_deref() };
            train(&common, &run, &skel, out)
        }
        Command::Infer { common, model, data, steps, trace } => infer(&common, &model, &data, steps, trace.as_deref(), &skel, out),
        Command::Eval { common, pred, gt, split_visibility } => eval(&common, &pred, &gt, split_visibility.as_deref(), &skel, out),
        Command::Bench { common, model } => run_bench(&common, model.as_deref(), &skel, out),
    }
}

fn gen_data(c: &Common, split: Split, json: bool, skel: &SkeletonConfig<f64>, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(c)?;
    let path = required_out(c)?;
    let cam = cfg.camera()?;
    let seqs = generate_dataset(&cfg.data, skel)?;
    let mut file = SequenceFile::new(skel, cfg.data.fps, 0, 0);
    for (i, s) in seqs.into_iter().enumerate() {
        let obs = match split {
            Split::Train => Some(training_observations(&s, skel, &cam, &cfg.observe.train, cfg.seed, i as u64)?),
            Split::Eval => Some(eval_observations(&s, skel, &cam, cfg.observe.eval_ratio, cfg.observe.train.pixel_noise, cfg.seed, i as u64)?),
            Split::None => None,
        };
        file.records.push(SequenceRecord { observations: obs, ..SequenceRecord::new(s) });
    }
    if json {
        write_text(path, &serde_json::to_string_pretty(&file.to_json()).expect("json export"))?;
    } else {
        file.save(path)?;
    }
    say(out, &format!("wrote {} sequences to {}", file.records.len(), path.display()))
}

fn train_tok(c: &Common, data: &Path, skel: &SkeletonConfig<f64>, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(c)?;
    let path = required_out(c)?;
    let file = SequenceFile::load_for(data, skel)?;
    let seqs: Vec<MotionSequence> = file.records.into_iter().map(|r| r.sequence).filter(|s| !s.poses.is_empty()).collect();
    let poses = pose_frames::<f32>(&seqs, skel, cfg.tokenizer_stride)?;
    let tcfg = maskmotion_model::tokenizer::TokenizerConfig { vertices: skel.vertex_count, ..cfg.tokenizer };
    let (tokenizer, log) = train_tokenizer(&poses, tcfg, cfg.tokenizer_train)?;
    for (epoch, (loss, reinit)) in log.epoch_loss.iter().zip(&log.reinitialized).enumerate() {
        say(out, &json_line(&serde_json::json!({ "epoch": epoch, "loss": loss, "reinitialized": reinit })))?;
    }
    let ck = Checkpoint {
        hyper: Hyperparameters { tokenizer: tcfg, network: None, stage: None, skeleton_hash: skeleton_hash(skel), dataset_len: 0 },
        tokenizer,
        model: None,
        optimizer: None,
        seed: cfg.seed,
        step: 0,
    };
    ck.save(path)
}

struct TrainRun<'p> {
    stage: Stage,
    data: &'p Path,
    init: Option<&'p Path>,
    resume: Option<&'p Path>,
    checkpoint_every: Option<u64>,
    max_steps: Option<u64>,
    log: Option<&'p Path>,
}

fn train(c: &Common, run: &TrainRun<'_>, skel: &SkeletonConfig<f64>, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(c)?;
    let path = required_out(c)?;
    let file = SequenceFile::load_for(run.data, skel)?;
    let (seqs, obs): (Vec<MotionSequence>, Vec<_>) = file.records.into_iter().map(|r| (r.sequence, r.observations)).unzip();
    if seqs.iter().any(|s| s.poses.is_empty()) {
        return Err(HarnessError::Config("training sequences need local poses".into()));
    }
    let obs: Option<Vec<_>> = obs.into_iter().collect();
    if run.stage != Stage::Motion && obs.is_none() {
        return Err(HarnessError::Config(format!("the {:?} stage needs observations for every sequence", run.stage)));
    }
    let (mut trainer, seed) = match (run.resume, run.init) {
        (Some(p), _) => {
            let ck = Checkpoint::<f32>::load(p)?;
            if ck.stage() != Some(run.stage) {
                return Err(HarnessError::Config(format!("{} is not a {:?}-stage checkpoint", p.display(), run.stage)));
            }
            let seed = ck.seed;
            (ck.into_trainer(skel)?, seed)
        }
        (None, Some(p)) => {
            let ck = Checkpoint::<f32>::load(p)?;
            ck.check_skeleton(skel)?;
            let tk = &ck.tokenizer.config;
            if tk.tokens != cfg.network.tokens || tk.codebook_size != cfg.network.codebook_size {
                return Err(HarnessError::Config("checkpoint tokenizer disagrees with the network config".into()));
            }
            let model = match ck.model {
                Some(m) => m,
                None => ModelWeights::new(cfg.network, cfg.seed)?,
            };
            let t = Trainer::new(model, ck.tokenizer, skel.cast(), cfg.stage(run.stage).clone(), seqs.len())?;
            (t, cfg.seed)
        }
        (None, None) => return Err(HarnessError::Config("train needs --init or --resume".into())),
    };
    let samples = build_samples::<f32>(&seqs, obs.as_deref(), skel, &trainer.tokenizer)?;
    let mut lines = Lines::open(run.log, out)?;
    let mut taken = 0;
    while !trainer.is_done() && run.max_steps.is_none_or(|m| taken < m) {
        let log = trainer.train_step(&samples)?;
        lines.push(&json_line(&log))?;
        taken += 1;
        if run.checkpoint_every.is_some_and(|n| n > 0 && trainer.step % n == 0) {
            Checkpoint::from_trainer(&trainer, skel, seed).save(path)?;
        }
    }
    lines.finish()?;
    Checkpoint::from_trainer(&trainer, skel, seed).save(path)
}

#[derive(Serialize)]
struct TraceLine<'a> {
    sequence: &'a str,
    step: usize,
    kept: usize,
    mean_confidence: f64,
}

fn infer(
    c: &Common,
    model: &Path,
    data: &Path,
    steps: Option<usize>,
    trace: Option<&Path>,
    skel: &SkeletonConfig<f64>,
    out: &mut dyn Write,
) -> Result<()> {
    let cfg = load_config(c)?;
    let path = required_out(c)?;
    let ck = Checkpoint::<f32>::load(model)?;
    ck.check_skeleton(skel)?;
    let Some(weights) = &ck.model else {
        return Err(HarnessError::Config(format!("{} holds no network weights", model.display())));
    };
    let file = SequenceFile::load_for(data, skel)?;
    let inf = maskmotion_model::inference::InferenceConfig { steps: steps.unwrap_or(cfg.inference.steps), fps: file.header.fps, ..cfg.inference };
    let skel32 = skel.cast::<f32>();
    let mut pred = SequenceFile::new(skel, file.header.fps, weights.config.tokens, weights.config.codebook_size);
    let mut lines = trace.map(|p| Lines::open(Some(p), &mut *out)).transpose()?;
    for r in &file.records {
        let name = &r.sequence.name;
        let obs = r.observations.as_ref().ok_or_else(|| HarnessError::Config(format!("sequence {name} has no observations")))?;
        let rec = reconstruct(&obs.cast::<f32>(), weights, &ck.tokenizer, &skel32, &inf)?;
        if let Some(l) = lines.as_mut() {
            for t in &rec.trace {
                l.push(&json_line(&TraceLine { sequence: name, step: t.step, kept: t.kept, mean_confidence: t.mean_confidence }))?;
            }
        }
        let sequence = MotionSequence {
            name: name.clone(),
            family: r.sequence.family,
            fps: file.header.fps,
            traj: rec.trajectory.cast(),
            poses: Vec::new(),
            contacts: Vec::new(),
        };
        pred.records.push(SequenceRecord {
            tokens: Some(rec.tokens.ids.clone()),
            world: Some(WorldBody { joints: rec.world_joints.cast(), vertices: rec.world_vertices.cast() }),
            ..SequenceRecord::new(sequence)
        });
    }
    if let Some(l) = lines {
        l.finish()?;
    }
    pred.save(path)?;
    say(out, &format!("reconstructed {} sequences with T = {} into {}", pred.records.len(), inf.steps, path.display()))
}

fn eval(c: &Common, pred: &Path, gt: &Path, split: Option<&Path>, skel: &SkeletonConfig<f64>, out: &mut dyn Write) -> Result<()> {
    load_config(c)?;
    let pred = SequenceFile::load_for(pred, skel)?;
    let gt = SequenceFile::load_for(gt, skel)?;
    let vis = split.map(|p| SequenceFile::load_for(p, skel)).transpose()?;
    let mut rows = Vec::with_capacity(gt.records.len());
    for g in &gt.records {
        let name = &g.sequence.name;
        let p = pred
            .records
            .iter()
            .find(|r| &r.sequence.name == name)
            .ok_or_else(|| HarnessError::Config(format!("no prediction for sequence {name}")))?;
        let visibility = match &vis {
            Some(v) => Some(
                v.records
                    .iter()
                    .find(|r| &r.sequence.name == name)
                    .and_then(|r| r.observations.as_ref())
                    .map(|o| o.visibility.clone())
                    .ok_or_else(|| HarnessError::Config(format!("no visibility for sequence {name}")))?,
            ),
            None => None,
        };
        let (pw, gw) = (p.world_body(skel)?, g.world_body(skel)?);
        if pw.joints.frames != gw.joints.frames {
            return Err(HarnessError::Config(format!("sequence {name}: {} predicted frames, {} ground truth", pw.joints.frames, gw.joints.frames)));
        }
        rows.push(evaluate_sequence(
            name,
            &MotionSample { joints: &pw.joints, vertices: &pw.vertices },
            &MotionSample { joints: &gw.joints, vertices: &gw.vertices },
            skel,
            gt.header.fps,
            visibility.as_deref(),
        )?);
    }
    let report = EvalReport::from_sequences(rows);
    say(out, &report_table(&report))?;
    if let Some(p) = &c.out {
        write_text(p, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    }
    Ok(())
}

/// Headline metrics as an aligned two-column table.
pub fn report_table(r: &EvalReport) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
    let rows = [
        ("PA-MPJPE (mm)", format!("{:.2}", r.pa_mpjpe)),
        ("MPJPE-all (mm)", format!("{:.2}", r.mpjpe_all)),
        ("MPJPE-vis (mm)", opt(r.mpjpe_vis)),
        ("MPJPE-occ (mm)", opt(r.mpjpe_occ)),
        ("PVE (mm)", format!("{:.2}", r.pve)),
        ("GMPJPE (mm)", format!("{:.2}", r.gmpjpe)),
        ("RTE (%)", format!("{:.2}", r.rte)),
        ("Accel (m/s²)", format!("{:.2}", r.accel)),
        ("G-Accel (m/s²)", format!("{:.2}", r.g_accel)),
        ("Jitter (m/s³)", format!("{:.2}", r.jitter)),
        ("Sliding (mm)", format!("{:.2}", r.sliding)),
    ];
    let mut s = format!("{} sequences\n", r.sequences.len());
    for (k, v) in rows {
        s.push_str(&format!("{k:<18}{v:>12}\n"));
    }
    s
}

fn run_bench(c: &Common, model: Option<&Path>, skel: &SkeletonConfig<f64>, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(c)?;
    let (weights, tokenizer) = match model {
        Some(p) => {
            let ck = Checkpoint::<f32>::load(p)?;
            ck.check_skeleton(skel)?;
            let m = ck.model.ok_or_else(|| HarnessError::Config(format!("{} holds no network weights", p.display())))?;
            (m, ck.tokenizer)
        }
        None => {
            let tcfg = maskmotion_model::tokenizer::TokenizerConfig { vertices: skel.vertex_count, ..cfg.tokenizer };
            (ModelWeights::new(cfg.network, cfg.seed)?, maskmotion_model::tokenizer::TokenizerWeights::new(tcfg, cfg.seed))
        }
    };
    let data = crate::synthetic::SyntheticMotionConfig { num_sequences: 1, frames: cfg.bench.frames, ..cfg.data.clone() };
    let seq = generate_dataset(&data, skel)?.remove(0);
    let obs = eval_observations(&seq, skel, &cfg.camera()?, cfg.observe.eval_ratio, cfg.observe.train.pixel_noise, cfg.seed, 0)?;
    let inf = maskmotion_model::inference::InferenceConfig { fps: data.fps, ..cfg.inference };
    let report = bench(&obs.cast::<f32>(), &weights, &tokenizer, &skel.cast(), &inf, &cfg.bench.steps, cfg.bench.repeats)?;
    say(out, &report.to_table())?;
    if let Some(p) = &c.out {
        write_text(p, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    }
    Ok(())
}
