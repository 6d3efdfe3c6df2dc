use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wav2small::io::manifest::{write_manifest, ManifestRecord};
use wav2small::io::wav::{write_wav, WavEncoding};
use wav2small::{AdvTriple, Waveform};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wav2small"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn cli")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tone(freq: f32, secs: f32, amp: f32) -> Waveform {
    let n = (secs * 16_000.0) as usize;
    Waveform::new(
        (0..n)
            .map(|i| amp * (2.0 * std::f32::consts::PI * freq * i as f32 / 16_000.0).sin())
            .collect(),
    )
    .unwrap()
}

fn fixture(dir: &Path) -> (PathBuf, Vec<PathBuf>) {
    let weights = dir.join("init.w2s");
    let o = run(&["init", p(&weights), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let wavs: Vec<PathBuf> = [(220.0, 0.5), (440.0, 1.0), (880.0, 0.8), (1500.0, 1.2)]
        .iter()
        .enumerate()
        .map(|(i, &(f, s))| {
            let path = dir.join(format!("clip{i}.wav"));
            write_wav(&path, &tone(f, s, 0.3), WavEncoding::Pcm16).unwrap();
            path
        })
        .collect();
    (weights, wavs)
}

fn json(line: &str) -> serde_json::Value {
    serde_json::from_str(line).unwrap_or_else(|e| panic!("bad json {line:?}: {e}"))
}

#[test]
fn help_exits_zero_and_usage_errors_exit_one() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("train-distill"));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["infer"]).status.code(), Some(1));
}

#[test]
fn missing_or_corrupt_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["param-count", p(&dir.path().join("nope.w2s"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());
    assert!(!o.stderr.is_empty());

    let (weights, wavs) = fixture(dir.path());
    let mut bytes = std::fs::read(&weights).unwrap();
    bytes[20] ^= 0xff;
    let bad = dir.path().join("bad.w2s");
    std::fs::write(&bad, bytes).unwrap();
    let o = run(&["infer", p(&bad), p(&wavs[0])]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("crc"));

    let stereo = dir.path().join("stereo.wav");
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
    for _ in 0..2000 {
        w.write_sample(0i16).unwrap();
    }
    w.finalize().unwrap();
    let o = run(&["infer", p(&weights), p(&stereo)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mono"));
}

#[test]
fn infer_prints_one_line_per_file_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (weights, wavs) = fixture(dir.path());
    let mut args = vec!["infer", p(&weights)];
    args.extend(wavs.iter().map(|w| p(w)));
    let a = run(&args);
    assert!(a.status.success());
    let b = run(&args);
    assert_eq!(a.stdout, b.stdout);
    let out = stdout(&a);
    let lines: Vec<_> = out.lines().collect();
    assert_eq!(lines.len(), wavs.len());
    for (line, wav) in lines.iter().zip(&wavs) {
        let v = json(line);
        assert_eq!(v["path"], p(wav));
        for k in ["arousal", "dominance", "valence"] {
            assert!(v[k].as_f64().unwrap().is_finite());
        }
    }
}

#[test]
fn tokens_dump_has_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let (weights, wavs) = fixture(dir.path());
    let o = run(&["tokens", p(&weights), p(&wavs[1])]);
    assert!(o.status.success());
    let v = json(stdout(&o).trim());
    assert_eq!(v["tokens"], 251);
    assert_eq!(v["dim"], 169);
    let rows = v["values"].as_array().unwrap();
    assert_eq!(rows.len(), 251);
    assert!(rows.iter().all(|r| r.as_array().unwrap().len() == 169));
}

#[test]
fn param_count_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let (weights, wavs) = fixture(dir.path());
    let o = run(&["param-count", p(&weights)]);
    assert!(o.status.success());
    let v = json(stdout(&o).trim());
    assert_eq!(v["fused"]["total"], 72_568);
    assert_eq!(v["fused"]["frontend"], 5_082);
    assert_eq!(v["fused"]["vgg"], 9_516);
    assert_eq!(v["fused"]["lin"], 28_730);
    assert_eq!(v["fused"]["sof"], 28_730);
    assert_eq!(v["fused"]["adv"], 510);
    assert_eq!(v["trainable_excluding_frontend"], 67_577);

    let q = dir.path().join("q.w2s");
    let o = run(&["export", "--quantize", p(&weights), p(&q)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::metadata(&q).unwrap().len() <= 128 * 1024);
    let v = json(stdout(&run(&["param-count", p(&q)])).trim());
    assert_eq!(v["file_quantized"], true);
    assert_eq!(v["fused"]["total"], 72_568);

    let o = run(&["infer", p(&q), p(&wavs[0])]);
    assert!(o.status.success());
}

#[test]
fn teacher_label_then_evaluate_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let (weights, wavs) = fixture(dir.path());
    let records: Vec<_> = wavs
        .iter()
        .map(|w| ManifestRecord::new(w.file_name().unwrap(), AdvTriple::new(0.5, 0.5, 0.5), None))
        .collect();
    let m_in = dir.path().join("in.jsonl");
    write_manifest(&m_in, &records).unwrap();
    let m_out = dir.path().join("labels.jsonl");
    let o = run(&["teacher-label", p(&weights), p(&m_in), p(&m_out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = run(&["evaluate", p(&weights), p(&m_out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(stdout(&o).trim());
    assert_eq!(v["n"], 4);
    assert_eq!(v["quadrant_agreement_rate"], 1.0);
    for k in ["ccc_arousal", "ccc_dominance", "ccc_valence"] {
        assert!(v[k].as_f64().unwrap() > 0.999, "{k}: {v}");
    }

    // Two identical members average to the same labels.
    let spec = format!("{},{}", p(&weights), p(&m_out));
    let m_ens = dir.path().join("ens.jsonl");
    let o = run(&["teacher-label", &spec, p(&m_in), p(&m_ens)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = std::fs::read_to_string(&m_out).unwrap();
    let b = std::fs::read_to_string(&m_ens).unwrap();
    for (x, y) in a.lines().zip(b.lines()) {
        let (x, y) = (json(x), json(y));
        for k in ["arousal", "dominance", "valence"] {
            assert!((x[k].as_f64().unwrap() - y[k].as_f64().unwrap()).abs() < 1e-6);
        }
    }
}

#[test]
fn evaluate_skips_broken_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (weights, wavs) = fixture(dir.path());
    let mut text = String::new();
    for (i, w) in wavs.iter().enumerate() {
        let v = 0.3 + 0.1 * i as f64;
        text.push_str(&format!(
            "{{\"audio_path\":\"{}\",\"arousal\":{v},\"dominance\":{v},\"valence\":{v}}}\n",
            w.file_name().unwrap().to_str().unwrap()
        ));
    }
    text.push_str("not json\n");
    text.push_str("{\"audio_path\":\"missing.wav\",\"arousal\":0.1,\"dominance\":0.1,\"valence\":0.1}\n");
    let m = dir.path().join("m.jsonl");
    std::fs::write(&m, text).unwrap();
    let o = run(&["evaluate", p(&weights), p(&m), "--threads", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(stdout(&o).trim());
    assert_eq!(v["n"], 4);
    assert_eq!(v["skipped"], 2);
}

#[test]
fn train_distill_short_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "steps = 3\nbatch_size = 2\nmax_excerpt_secs = 0.5\nprimary_tracks = 2\nprimary_secs = 2.0\n\
         secondary_items = 2\nsecondary_secs = 1.0\nteacher_calibration_items = 4\n\
         output = \"student.w2s\"\ntelemetry = \"telemetry.jsonl\"\n",
    )
    .unwrap();
    let o = run(&["train-distill", p(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(stdout(&o).trim());
    assert_eq!(v["steps"], 3);
    let tele = std::fs::read_to_string(dir.path().join("telemetry.jsonl")).unwrap();
    assert_eq!(tele.lines().count(), 3);
    for line in tele.lines() {
        let r = json(line);
        assert!(r["loss"].as_f64().unwrap().is_finite());
        assert_eq!(r["batch_ccc"].as_array().unwrap().len(), 3);
    }
    let o = run(&["param-count", p(&dir.path().join("student.w2s"))]);
    assert!(o.status.success());

    std::fs::write(&cfg, "stepz = 3\n").unwrap();
    let o = run(&["train-distill", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stepz"));
}
