//! Command implementations behind the `cmnet` binary.
//!
//! Every command resolves a [`RunConfig`], does its work, and writes a
//! `manifest.toml` recording the resolved configuration, its SHA-256, the
//! seed, crate and format versions, and the SHA-256 of each output file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{mix_scenario, ScenarioDistribution, ScenarioKind};
use crate::error::{Error, Result};
use crate::model::{
    cmnet_forward, init_parameters, load_checkpoint, load_checkpoint_for, sha256_hex, AblationCase, Graph, Mode,
    ModelConfig, ParameterStore,
};
use crate::signal::{read_wav, write_wav, AlignmentStatus, SAMPLE_RATE};
use crate::tensor::Tape;
use crate::train::{
    ablation_run, default_stft, enhance, evaluate_specs, prepare, standard_eval_set, Trainer, TrainConfig, Utterance,
};
use crate::verify::run_gradcheck;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_FORMAT: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

/// Exit code of a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Format(_) => EXIT_FORMAT,
        Error::Config(_) | Error::Checkpoint(_) => EXIT_CONFIG,
        _ => EXIT_INTERNAL,
    }
}

/// Evaluation set drawn by `eval`, `ablate` and `synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub seed: u64,
    pub per_kind: usize,
    pub duration_s: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            seed: 1000,
            per_kind: 4,
            duration_s: 4.0,
        }
    }
}

/// Contents of a `--config` file; every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.per_kind == 0 || !(self.eval.duration_s >= crate::data::MIN_SPEECH_S) {
            return Err(Error::Config("eval needs per_kind >= 1 and duration_s >= 0.5".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serialises")
    }
}

#[derive(Parser, Debug)]
#[command(name = "cmnet", version, about = "Neural acoustic echo cancellation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML file with optional [model], [train] and [eval] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (a `.wav` path for `enhance`).
    #[arg(long, global = true, env = "CMNET_OUT")]
    pub out: Option<PathBuf>,
    /// Ablation case 1..=5.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=5))]
    pub case: Option<u8>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Checkpoint directory.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Relative tolerance of `gradcheck`.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Suppress progress output.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write scenario WAV files (mic, far end, near end, echo).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes loss.csv and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Remove the echo from a microphone recording.
    Enhance {
        mic: PathBuf,
        far: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score a model on generated scenarios.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Train and score every ablation case.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every layer and block.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Dump attention masks, interactive weights, the shape trace and parameter counts.
    Inspect {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Synth { .. } => "synth",
            Self::Train { .. } => "train",
            Self::Enhance { .. } => "enhance",
            Self::Eval { .. } => "eval",
            Self::Ablate { .. } => "ablate",
            Self::Gradcheck { .. } => "gradcheck",
            Self::Inspect { .. } => "inspect",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Self::Synth { common }
            | Self::Train { common }
            | Self::Enhance { common, .. }
            | Self::Eval { common }
            | Self::Ablate { common }
            | Self::Gradcheck { common }
            | Self::Inspect { common } => common,
        }
    }
}

/// Record of one run, written as `manifest.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub crate_version: String,
    pub checkpoint_format: u32,
    pub seed: u64,
    pub config_sha256: String,
    pub arguments: Vec<String>,
    /// Output file name and SHA-256.
    pub outputs: Vec<(String, String)>,
    pub notes: Vec<String>,
    pub config: RunConfig,
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

struct Run {
    command: &'static str,
    out: PathBuf,
    cfg: RunConfig,
    seed: u64,
    quiet: bool,
    outputs: Vec<PathBuf>,
    notes: Vec<String>,
}

impl Run {
    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }

    fn write(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let path = self.out.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    fn finish(self, manifest_path: PathBuf, args: &[String]) -> Result<Manifest> {
        let mut outputs = Vec::new();
        for p in &self.outputs {
            let shown = p.strip_prefix(&self.out).unwrap_or(p).display().to_string();
            outputs.push((shown, file_sha256(p)?));
        }
        let manifest = Manifest {
            command: self.command.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: crate::model::params::FORMAT_VERSION,
            seed: self.seed,
            config_sha256: sha256_hex(&self.cfg.to_toml()),
            arguments: args.to_vec(),
            outputs,
            notes: self.notes,
            config: self.cfg,
        };
        if let Some(dir) = manifest_path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(manifest)
    }
}

/// Resolves the configuration, applies flag overrides, runs the command
/// and writes its manifest.
pub fn run(cli: &Cli, args: &[String]) -> Result<Manifest> {
    let c = cli.command.common();
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    if let Some(case) = c.case {
        cfg.model = cfg.model.with_case(AblationCase::from_index(case)?);
    }
    if let Some(steps) = c.steps {
        cfg.train.steps = steps;
    }
    if let Some(seed) = c.seed {
        match cli.command {
            Command::Train { .. } | Command::Ablate { .. } => cfg.train.seed = seed,
            _ => cfg.eval.seed = seed,
        }
    }
    cfg.validate()?;
    let name = cli.command.name();
    let seed = match cli.command {
        Command::Train { .. } | Command::Ablate { .. } => cfg.train.seed,
        _ => cfg.eval.seed,
    };
    let default_out = PathBuf::from("runs").join(name);
    let out = c.out.clone().unwrap_or(default_out);
    let mut run = Run {
        command: name,
        out: out.clone(),
        cfg,
        seed,
        quiet: c.quiet,
        outputs: Vec::new(),
        notes: Vec::new(),
    };
    let manifest_path = match &cli.command {
        Command::Enhance { mic, far, .. } => {
            let wav = match out.extension().is_some_and(|e| e == "wav") {
                true => out.clone(),
                false => out.join("enhanced.wav"),
            };
            run.out = wav.parent().map(Path::to_path_buf).unwrap_or_default();
            cmd_enhance(&mut run, c, mic, far, &wav)?;
            wav.with_extension("manifest.toml")
        }
        cmd => {
            match cmd {
                Command::Synth { .. } => cmd_synth(&mut run)?,
                Command::Train { .. } => cmd_train(&mut run, c)?,
                Command::Eval { .. } => cmd_eval(&mut run, c)?,
                Command::Ablate { .. } => cmd_ablate(&mut run, c)?,
                Command::Gradcheck { .. } => cmd_gradcheck(&mut run, c)?,
                Command::Inspect { .. } => cmd_inspect(&mut run, c)?,
                Command::Enhance { .. } => unreachable!(),
            }
            out.join("manifest.toml")
        }
    };
    run.finish(manifest_path, args)
}

/// Model for commands that accept an optional checkpoint. A checkpoint
/// must match the configured architecture when `--config` is given.
fn model_for(run: &mut Run, c: &Common) -> Result<(ModelConfig, ParameterStore)> {
    match &c.checkpoint {
        Some(dir) => {
            let (ckpt_cfg, store) = match c.config.is_some() || c.case.is_some() {
                true => (run.cfg.model.clone(), load_checkpoint_for(dir, &run.cfg.model)?),
                false => load_checkpoint(dir)?,
            };
            run.notes.push(format!("checkpoint {} ({})", dir.display(), store.fingerprint()));
            run.cfg.model = ckpt_cfg.clone();
            Ok((ckpt_cfg, store))
        }
        None => {
            run.notes.push("untrained parameters from the model seed".into());
            Ok((run.cfg.model.clone(), init_parameters(&run.cfg.model)?))
        }
    }
}

fn cmd_synth(run: &mut Run) -> Result<()> {
    let ev = run.cfg.eval.clone();
    let dist = &run.cfg.train.scenarios;
    let mut listing = String::from("index,kind,seed,ser_db,snr_db,bulk_delay,nonlinearity\n");
    let mut specs = Vec::new();
    for (k, kind) in ScenarioKind::ALL.into_iter().enumerate() {
        if !dist.kinds.contains(&kind) {
            continue;
        }
        let d = ScenarioDistribution {
            kinds: vec![kind],
            ..dist.clone()
        };
        for i in 0..ev.per_kind {
            specs.push(d.sample(ev.seed, (k * ev.per_kind + i) as u64, ev.duration_s));
        }
    }
    fs::create_dir_all(&run.out).map_err(|e| Error::io(&run.out, e))?;
    for (i, spec) in specs.iter().enumerate() {
        let m = mix_scenario(spec)?;
        let stem = format!("{i:03}_{}", spec.kind.label());
        for (suffix, w) in [("mic", &m.y), ("far", &m.x), ("near", &m.s), ("echo", &m.d)] {
            let path = run.out.join(format!("{stem}_{suffix}.wav"));
            write_wav(&path, w)?;
            run.outputs.push(path);
        }
        let _ = writeln!(
            listing,
            "{i},{},{},{},{},{},{:?}",
            spec.kind.label(),
            spec.seed,
            spec.ser_db.map_or_else(String::new, |v| format!("{v:.3}")),
            spec.snr_db.map_or_else(String::new, |v| format!("{v:.3}")),
            spec.echo.bulk_delay,
            spec.echo.nonlinearity
        );
    }
    run.write("scenarios.csv", &listing)?;
    run.say(format!("wrote {} scenarios to {}", specs.len(), run.out.display()));
    Ok(())
}

fn cmd_train(run: &mut Run, c: &Common) -> Result<()> {
    let mut trainer = match &c.checkpoint {
        Some(dir) => {
            let store = load_checkpoint_for(dir, &run.cfg.model)?;
            run.notes.push(format!("initialised from {}", dir.display()));
            Trainer::from_store(&run.cfg.model, &run.cfg.train, store)?
        }
        None => Trainer::new(&run.cfg.model, &run.cfg.train)?,
    };
    let total = run.cfg.train.steps;
    let every = (total / 20).max(1);
    let quiet = run.quiet;
    let start = Instant::now();
    let records = trainer.run(Some(&run.out), |r| {
        if !quiet && (r.step % every == 0 || r.step + 1 == total) {
            println!(
                "step {:>6}/{total}  loss {:>9.4}  grad norm {:>9.4}  {:.1} s",
                r.step + 1,
                r.loss,
                r.grad_norm,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    run.outputs.push(run.out.join("loss.csv"));
    for f in crate::model::params::CHECKPOINT_FILES {
        run.outputs.push(run.out.join("checkpoint").join(f));
    }
    if let Some(last) = records.last() {
        run.notes.push(format!("final loss {:.6}", last.loss));
    }
    run.notes.push(format!("parameters {}", trainer.store.fingerprint()));
    run.say(format!("checkpoint written to {}", run.out.join("checkpoint").display()));
    Ok(())
}

fn cmd_enhance(run: &mut Run, c: &Common, mic: &Path, far: &Path, out_wav: &Path) -> Result<()> {
    let Some(_) = &c.checkpoint else {
        return Err(Error::Config("enhance needs --checkpoint".into()));
    };
    let (cfg, store) = model_for(run, c)?;
    let mic_w = read_wav(mic)?;
    let far_w = read_wav(far)?;
    for (p, w) in [(mic, &mic_w), (far, &far_w)] {
        if w.sample_rate() != SAMPLE_RATE {
            return Err(Error::Format(format!(
                "{} is sampled at {} Hz; expected {SAMPLE_RATE} Hz",
                p.display(),
                w.sample_rate()
            )));
        }
    }
    let start = Instant::now();
    let e = enhance(&store, &cfg, &mic_w, &far_w)?;
    let elapsed = start.elapsed().as_secs_f64();
    if let Some(dir) = out_wav.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_wav(out_wav, &e.output)?;
    run.outputs.push(out_wav.to_path_buf());
    let status = match e.alignment.status {
        AlignmentStatus::Confident => "confident",
        AlignmentStatus::LowConfidence => "low-confidence",
        AlignmentStatus::NoSignal => "no-signal",
    };
    let rtf = elapsed / mic_w.duration_s().max(f64::MIN_POSITIVE);
    let line = format!(
        "delay {} samples ({:.2} ms, {status}); real-time factor {rtf:.3}",
        e.alignment.delay_samples,
        1e3 * e.alignment.delay_samples as f64 / SAMPLE_RATE as f64
    );
    println!("{line}");
    run.notes.push(line);
    for p in [mic, far] {
        run.notes.push(format!("input {} sha256 {}", p.display(), file_sha256(p)?));
    }
    Ok(())
}

fn cmd_eval(run: &mut Run, c: &Common) -> Result<()> {
    let (cfg, store) = model_for(run, c)?;
    let ev = &run.cfg.eval;
    let specs = standard_eval_set(ev.seed, ev.per_kind, ev.duration_s);
    let report = evaluate_specs(&store, &cfg, &specs, true)?;
    let text = report.to_text();
    run.say(text.trim_end());
    run.write("eval.txt", &text)?;
    run.write("eval.csv", &report.to_csv())?;
    Ok(())
}

fn cmd_ablate(run: &mut Run, c: &Common) -> Result<()> {
    let cases = match c.case {
        Some(i) => vec![AblationCase::from_index(i)?],
        None => AblationCase::ALL.to_vec(),
    };
    let ev = run.cfg.eval.clone();
    let specs = standard_eval_set(ev.seed, ev.per_kind, ev.duration_s);
    let quiet = run.quiet;
    let report = ablation_run(&run.cfg.model, &run.cfg.train, &specs, &cases, |row| {
        if !quiet {
            println!("{} done: final loss {:.4}, {} parameters", row.case, row.final_loss, row.param_count);
        }
    })?;
    let text = report.to_text();
    run.say(text.trim_end());
    run.write("ablation.txt", &text)?;
    run.write("ablation.csv", &report.to_csv())?;
    run.notes.push(format!("table digest {}", report.digest()));
    Ok(())
}

fn cmd_gradcheck(run: &mut Run, c: &Common) -> Result<()> {
    let tol = c.tol.unwrap_or(1e-4);
    if !(tol > 0.0) {
        return Err(Error::Config(format!("--tol must be positive, got {tol}")));
    }
    let cases = match c.case {
        Some(i) => vec![AblationCase::from_index(i)?],
        None => AblationCase::ALL.to_vec(),
    };
    let suite = run_gradcheck(&run.cfg.model, &cases, run.seed, tol)?;
    let text = suite.to_text();
    run.say(text.trim_end());
    run.write("gradcheck.txt", &text)?;
    let failing: Vec<String> = suite
        .failures()
        .map(|b| match b.case {
            Some(case) => format!("{} ({case})", b.block),
            None => b.block.clone(),
        })
        .collect();
    if failing.is_empty() {
        run.notes.push(format!("all {} blocks pass at {tol:e}", suite.blocks.len()));
        Ok(())
    } else {
        Err(Error::Contract(format!("gradient check failed for: {}", failing.join(", "))))
    }
}

fn case_label(cfg: &ModelConfig) -> String {
    AblationCase::from_toggles(cfg.toggles).map_or_else(|| "this configuration".into(), |c| c.to_string())
}

fn cmd_inspect(run: &mut Run, c: &Common) -> Result<()> {
    let (cfg, store) = model_for(run, c)?;
    let spec = ScenarioDistribution {
        kinds: vec![ScenarioKind::DoubleTalk],
        ..run.cfg.train.scenarios.clone()
    }
    .sample(run.seed, 0, run.cfg.eval.duration_s);
    let mix = mix_scenario(&spec)?;
    let stft = default_stft();
    let p = prepare(&stft, Utterance::from(&mix))?;
    let mut tape = Tape::new();
    let out = {
        let mut g = Graph::new(&mut tape, &store, Mode::Infer);
        cmnet_forward(&mut g, &cfg, &p.far_spec, &p.mic_spec)?
    };
    let mut shapes = String::from("stage,shape\n");
    for (name, shape) in &out.trace.stages {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(shapes, "{name},{}", dims.join("x"));
    }
    run.write("shapes.csv", &shapes)?;
    run.say(shapes.trim_end());
    let params = crate::model::param_report(&cfg)?.to_text();
    run.write("params.txt", &params)?;
    run.say(params.trim_end());
    let cm = &out.trace.cm;
    if cm.m_tp.is_some() {
        let (a, b) = crate::cm::write_attention_maps(&tape, cm, &run.out)?;
        run.outputs.extend([a, b]);
    } else {
        run.notes.push(format!("{} has no attention masks", case_label(&cfg)));
    }
    if let (Some(w_tp), Some(w_tn)) = (cm.w_tp, cm.w_tn) {
        let mut csv = String::from("frame,w_tp,w_tn\n");
        let (a, b) = (tape.value(w_tp).data(), tape.value(w_tn).data());
        for (t, (x, y)) in a.iter().zip(b).enumerate() {
            let _ = writeln!(csv, "{t},{x:.9},{y:.9}");
        }
        run.write("w_tp.csv", &csv)?;
    } else {
        run.notes.push(format!("{} has no interactive block", case_label(&cfg)));
    }
    run.notes.push(format!(
        "scenario seed {} ({}, {} frames)",
        spec.seed,
        spec.kind.label(),
        p.mic_spec.frames
    ));
    Ok(())
}
