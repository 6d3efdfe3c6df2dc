//! Command-line front end: inference, token dumps, distillation, evaluation,
//! export and teacher labelling.
//!
//! Results go to stdout as JSON lines, diagnostics to stderr. Exit status is
//! 0 on success, 1 on usage errors and 2 on data or contract errors.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use wav2small::distill::train::{run_distillation, TrainEvent};
use wav2small::distill::{LabelTable, TeacherOracle};
use wav2small::io::config::DistillConfig;
use wav2small::io::manifest::{write_manifest, Manifest, ManifestRecord};
use wav2small::io::wav::read_wav;
use wav2small::io::weights::{load_weights, save_fused, save_model, LoadedModel, WeightFile};
use wav2small::metrics::{evaluate_manifest, DEFAULT_NEUTRAL};
use wav2small::model::{AdvPredictor, ParamBreakdown};
use wav2small::{Mode, Wav2Small};

#[derive(Parser)]
#[command(name = "wav2small", version, about = "Arousal/dominance/valence from 16 kHz speech")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print one A/D/V line per WAV file.
    Infer {
        weights: PathBuf,
        #[arg(required = true)]
        wavs: Vec<PathBuf>,
    },
    /// Dump the 169-dimensional token matrix of one WAV file.
    Tokens { weights: PathBuf, wav: PathBuf },
    /// Distill a student from a teacher as described by a TOML config.
    TrainDistill {
        config: PathBuf,
        /// Print the default config and exit.
        #[arg(long)]
        print_defaults: bool,
    },
    /// Score a model against a labelled manifest.
    Evaluate {
        weights: PathBuf,
        manifest: PathBuf,
        #[arg(long, default_value_t = DEFAULT_NEUTRAL)]
        neutral: f64,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Write the fused inference form, optionally int8-quantized.
    Export {
        #[arg(long)]
        quantize: bool,
        input: PathBuf,
        output: PathBuf,
    },
    /// Print the parameter breakdown of a weight file.
    ParamCount { weights: PathBuf },
    /// Label a manifest with a teacher: comma-separated weight files and/or
    /// `.jsonl` label manifests, averaged.
    TeacherLabel {
        teacher_spec: String,
        manifest_in: PathBuf,
        manifest_out: PathBuf,
    },
    /// Write freshly initialized weights.
    Init {
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the fused inference form instead of the trainable one.
        #[arg(long)]
        fused: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let stdout = std::io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let result = run(cli.command, &mut out).and_then(|()| out.flush().map_err(Into::into));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command, out: &mut impl Write) -> Result<()> {
    match command {
        Command::Infer { weights, wavs } => infer(&weights, &wavs, out),
        Command::Tokens { weights, wav } => tokens(&weights, &wav, out),
        Command::TrainDistill { config, print_defaults } => {
            if print_defaults {
                write!(out, "{}", DistillConfig::default_toml())?;
                return Ok(());
            }
            train(&config, out)
        }
        Command::Evaluate {
            weights,
            manifest,
            neutral,
            threads,
        } => {
            let model = load(&weights)?;
            let m = Manifest::read(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
            for issue in m.issues() {
                eprintln!("warning: {}:{}: {}", manifest.display(), issue.line, issue.message);
            }
            let report = evaluate_manifest(&model, &m, neutral, threads)?;
            for e in &report.errors {
                eprintln!("warning: line {}: skipped {}: {}", e.line, e.path.display(), e.message);
            }
            writeln!(out, "{}", report.to_json_line())?;
            Ok(())
        }
        Command::Export { quantize, input, output } => {
            let fused = load(&input)?.into_fused()?;
            save_fused(&fused, &output, quantize)?;
            let size = std::fs::metadata(&output)?.len();
            writeln!(
                out,
                "{}",
                json!({"output": output.display().to_string(), "quantized": quantize, "bytes": size})
            )?;
            Ok(())
        }
        Command::ParamCount { weights } => param_count(&weights, out),
        Command::TeacherLabel {
            teacher_spec,
            manifest_in,
            manifest_out,
        } => teacher_label(&teacher_spec, &manifest_in, &manifest_out, out),
        Command::Init { output, seed, fused } => {
            let mut m = Wav2Small::<f32>::init(seed);
            if fused {
                m.set_mode(Mode::Eval);
                save_fused(&m.fused()?, &output, false)?;
            } else {
                save_model(&m, &output)?;
            }
            writeln!(out, "{}", json!({"output": output.display().to_string(), "seed": seed, "fused": fused}))?;
            Ok(())
        }
    }
}

fn load(path: &Path) -> Result<LoadedModel> {
    load_weights(path).with_context(|| format!("loading weights {}", path.display()))
}

fn infer(weights: &Path, wavs: &[PathBuf], out: &mut impl Write) -> Result<()> {
    let model = load(weights)?.into_fused()?;
    let mut failed = 0;
    for p in wavs {
        match read_wav(p).and_then(|w| model.predict(&w)) {
            Ok(t) => writeln!(
                out,
                "{}",
                json!({"path": p.display().to_string(), "arousal": t.arousal, "dominance": t.dominance, "valence": t.valence})
            )?,
            Err(e) => {
                failed += 1;
                eprintln!("error: {}: {e}", p.display());
            }
        }
    }
    if failed > 0 {
        bail!("{failed} of {} files failed", wavs.len());
    }
    Ok(())
}

fn tokens(weights: &Path, wav: &Path, out: &mut impl Write) -> Result<()> {
    let model = load(weights)?.into_fused()?;
    let w = read_wav(wav).with_context(|| format!("reading {}", wav.display()))?;
    let t = model.forward_tokens(&w)?;
    let rows: Vec<&[f32]> = (0..t.tokens()).map(|i| t.token(i)).collect();
    writeln!(
        out,
        "{}",
        json!({"path": wav.display().to_string(), "tokens": t.tokens(), "dim": t.dim(), "values": rows})
    )?;
    Ok(())
}

fn breakdown_json(b: &ParamBreakdown) -> serde_json::Value {
    json!({"total": b.total(), "frontend": b.frontend, "vgg": b.vgg, "lin": b.lin, "sof": b.sof, "adv": b.adv})
}

fn param_count(weights: &Path, out: &mut impl Write) -> Result<()> {
    let file = WeightFile::read(weights).with_context(|| format!("loading weights {}", weights.display()))?;
    let model = file.to_model()?;
    let (fused, trainable) = match &model {
        LoadedModel::Fused(m) => (m.param_breakdown(), None),
        LoadedModel::Unfused(m) => (m.param_breakdown(true), Some(m.count_params(false, false))),
    };
    let mut v = json!({
        "file_fused": file.flags.fused,
        "file_quantized": file.flags.quantized,
        "fused": breakdown_json(&fused),
    });
    if let Some(t) = trainable {
        v["trainable_excluding_frontend"] = json!(t);
    }
    writeln!(out, "{v}")?;
    Ok(())
}

fn teacher_label(spec: &str, manifest_in: &Path, manifest_out: &Path, out: &mut impl Write) -> Result<()> {
    let mut members = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let p = Path::new(part);
        let member = if part.ends_with(".jsonl") {
            TeacherOracle::labels(LabelTable::read(p).with_context(|| format!("reading labels {part}"))?)
        } else {
            TeacherOracle::model(load(p)?.into_fused()?)
        };
        members.push(member);
    }
    if members.is_empty() {
        bail!("empty teacher spec");
    }
    let teacher = if members.len() == 1 {
        members.pop().expect("one member")
    } else {
        TeacherOracle::ensemble(members)?
    };
    let m = Manifest::read_strict(manifest_in).with_context(|| format!("reading {}", manifest_in.display()))?;
    let out_dir = manifest_out.parent().unwrap_or(Path::new(""));
    let same_dir = std::fs::canonicalize(m.base_dir()).ok() == std::fs::canonicalize(if out_dir.as_os_str().is_empty() { Path::new(".") } else { out_dir }).ok();
    let mut records = Vec::with_capacity(m.len());
    for e in m.entries() {
        let audio = m.resolve(e);
        let w = read_wav(&audio).with_context(|| format!("line {}: reading {}", e.line, audio.display()))?;
        let label = teacher.predict(&w).with_context(|| format!("line {}: labelling {}", e.line, audio.display()))?;
        let path = if same_dir {
            e.audio_path.clone()
        } else {
            std::fs::canonicalize(&audio)?
        };
        records.push(ManifestRecord::new(path, label, e.split.clone()));
    }
    write_manifest(manifest_out, &records)?;
    writeln!(out, "{}", json!({"output": manifest_out.display().to_string(), "rows": records.len()}))?;
    Ok(())
}

fn train(config: &Path, out: &mut impl Write) -> Result<()> {
    let cfg = DistillConfig::read(config).with_context(|| format!("reading config {}", config.display()))?;
    let buckets = Arc::new(cfg.build_corpus()?);
    let teacher = cfg.build_teacher(&buckets)?;
    let mut student = cfg.build_student()?;
    let mut telemetry: Option<BufWriter<File>> = match &cfg.run.telemetry {
        Some(p) => Some(BufWriter::new(File::create(cfg.resolve(p))?)),
        None => None,
    };
    let checkpoint_dir = cfg.run.checkpoint_dir.as_ref().map(|d| cfg.resolve(d));
    if let Some(d) = &checkpoint_dir {
        std::fs::create_dir_all(d)?;
    }
    let summary = run_distillation(&mut student, &teacher, buckets, &cfg.augmentation, &cfg.training, |event| {
        let line = match event {
            TrainEvent::Step(r) => r.to_json_line(),
            TrainEvent::Skipped { step, error } => json!({"step": step, "skipped": error.to_string()}).to_string(),
            TrainEvent::Checkpoint { step, model } => {
                if let Some(d) = &checkpoint_dir {
                    save_model(model, &d.join(format!("step-{step:08}.w2s")))?;
                }
                return Ok(());
            }
        };
        match telemetry.as_mut() {
            Some(f) => writeln!(f, "{line}")?,
            None => writeln!(out, "{line}")?,
        }
        Ok(())
    })?;
    if let Some(f) = telemetry.as_mut() {
        f.flush()?;
    }
    student.set_mode(Mode::Eval);
    let output = cfg.resolve(&cfg.run.output);
    save_model(&student, &output)?;
    writeln!(
        out,
        "{}",
        json!({"output": output.display().to_string(), "steps": summary.steps, "skipped": summary.skipped})
    )?;
    Ok(())
}
