use slotset_cli::batch::{parse_batch, to_csv};
use slotset_cli::commands::{self, ModelSpec};
use slotset_cli::{ModelFile, SessionFile, SessionLock};
use slotset_core::{relative_discrepancy, AggMode, EncoderKind, EncoderStack, LayerNormParams, LinearMap, Matrix, Rng, SetEncoder, SlotConfig, SseParams, StackLayer};
use std::path::PathBuf;
use std::process::{Command, Output};

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_slotset")).current_dir(self.dir.path()).args(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn write_rows(&self, name: &str, m: &Matrix<f64>) {
        std::fs::write(self.path(name), to_csv(m)).unwrap();
    }

    fn model(&self, name: &str, spec: &ModelSpec) -> ModelFile {
        let m = spec.build().unwrap();
        m.save(&self.path(name)).unwrap();
        m
    }
}

fn csv_row(text: &str) -> Vec<f64> {
    parse_batch("out", text, None).unwrap().into_vec()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    relative_discrepancy(&Matrix::row_vector(a), &Matrix::row_vector(b))
}

fn spec(kind: EncoderKind, mode: AggMode) -> ModelSpec {
    ModelSpec {
        mode,
        seed: 3,
        ..ModelSpec::new(kind, 3)
    }
}

#[test]
fn model_files_round_trip_byte_for_byte() {
    for kind in [EncoderKind::Sse, EncoderKind::DeepSets, EncoderKind::SoftmaxPool] {
        for train in [true, false] {
            let mut m = spec(kind, AggMode::Max).build().unwrap();
            if !train {
                m.train = None;
            }
            let text = m.to_text();
            let back = ModelFile::parse("m", &text).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.to_text(), text);
            assert_eq!(back.fingerprint(), m.fingerprint());
        }
    }
    let det = ModelSpec {
        random_slots: false,
        bias: false,
        depth: 1,
        ..spec(EncoderKind::Sse, AggMode::Sum)
    }
    .build()
    .unwrap();
    assert_eq!(ModelFile::parse("m", &det.to_text()).unwrap(), det);
}

#[test]
fn model_parse_errors_carry_line_and_field() {
    let text = spec(EncoderKind::Sse, AggMode::Sum).build().unwrap().to_text();
    let lines: Vec<&str> = text.lines().collect();
    let idx = lines.iter().position(|l| l.starts_with("param layer0.slot_norm.gain")).unwrap() + 1;
    let mut broken: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
    let mut fields: Vec<&str> = lines[idx].split(' ').collect();
    fields[2] = "1.0x";
    broken[idx] = fields.join(" ");
    let err = ModelFile::parse("m.model", &broken.join("\n")).unwrap_err().to_string();
    assert_eq!(err, format!("m.model:{} field 3: `1.0x` is not a number", idx + 1));

    let err = ModelFile::parse("m.model", &text.replace("mode sum", "mode median")).unwrap_err().to_string();
    assert!(err.starts_with("m.model:4 field 4"), "{err}");
    let err = ModelFile::parse("m.model", &text.replace("layer0.proj_k.weight", "layer0.proj_z.weight")).unwrap_err().to_string();
    assert!(err.contains("missing parameter `layer0.proj_k.weight`"), "{err}");
    let err = ModelFile::parse("m.model", &text.replace("format_version 1", "format_version 9")).unwrap_err().to_string();
    assert!(err.contains("unsupported model format version 9"), "{err}");
}

#[test]
fn fingerprint_ignores_the_training_block() {
    let mut m = spec(EncoderKind::DeepSets, AggMode::Sum).build().unwrap();
    let fp = m.fingerprint();
    m.train.as_mut().unwrap().config.steps = 3;
    assert_eq!(m.fingerprint(), fp);
    m.encoder.set_stream_mode(AggMode::Max);
    assert_ne!(m.fingerprint(), fp);
}

#[test]
fn init_is_deterministic_and_starts_empty() {
    let ws = Workspace::new();
    ws.model("m.model", &spec(EncoderKind::Sse, AggMode::Sum));
    ws.ok(&["init", "--model", "m.model", "--session", "a.session", "--seed", "9", "--mode", "max"]);
    ws.ok(&["init", "--model", "m.model", "--session", "b.session", "--seed", "9", "--mode", "max"]);
    let a = std::fs::read(ws.path("a.session")).unwrap();
    assert_eq!(a, std::fs::read(ws.path("b.session")).unwrap());
    assert!(String::from_utf8(a).unwrap().contains("\n-inf -inf"));

    let out = ws.run(&["finalize", "--model", "m.model", "--session", "a.session"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty set"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ingesting_twice_equals_ingesting_the_doubled_file() {
    let ws = Workspace::new();
    ws.model("m.model", &spec(EncoderKind::Sse, AggMode::Sum));
    let x: Matrix<f64> = Rng::new(1).standard_normals(25, 3);
    ws.write_rows("a.csv", &x);
    ws.write_rows("aa.csv", &Matrix::vstack(&[&x, &x]).unwrap());
    ws.ok(&["init", "--model", "m.model", "--session", "one.session", "--mode", "sum"]);
    ws.ok(&["init", "--model", "m.model", "--session", "two.session", "--mode", "sum"]);
    ws.ok(&["ingest", "--model", "m.model", "--session", "one.session", "a.csv"]);
    ws.ok(&["ingest", "--model", "m.model", "--session", "one.session", "a.csv"]);
    ws.ok(&["ingest", "--model", "m.model", "--session", "two.session", "aa.csv"]);
    let one = csv_row(&ws.ok(&["finalize", "--model", "m.model", "--session", "one.session"]));
    let two = csv_row(&ws.ok(&["finalize", "--model", "m.model", "--session", "two.session"]));
    assert!(rel(&one, &two) <= 1e-12, "{}", rel(&one, &two));
}

#[test]
fn ingest_order_does_not_matter() {
    for mode in AggMode::ALL {
        let ws = Workspace::new();
        ws.model("m.model", &spec(EncoderKind::Sse, mode));
        let mut rng = Rng::new(2);
        ws.write_rows("a.csv", &rng.standard_normals(17, 3));
        ws.write_rows("b.csv", &rng.standard_normals(40, 3));
        ws.ok(&["init", "--model", "m.model", "--session", "ab.session", "--seed", "4"]);
        ws.ok(&["init", "--model", "m.model", "--session", "ba.session", "--seed", "4"]);
        ws.ok(&["ingest", "--model", "m.model", "--session", "ab.session", "a.csv", "b.csv"]);
        ws.ok(&["ingest", "--model", "m.model", "--session", "ba.session", "b.csv"]);
        ws.ok(&["ingest", "--model", "m.model", "--session", "ba.session", "a.csv"]);
        let ab = ws.ok(&["finalize", "--model", "m.model", "--session", "ab.session"]);
        let ba = ws.ok(&["finalize", "--model", "m.model", "--session", "ba.session"]);
        if mode.is_exact() {
            assert_eq!(ab, ba);
        } else {
            assert!(rel(&csv_row(&ab), &csv_row(&ba)) <= 1e-12);
        }
    }
}

#[test]
fn finalize_is_repeatable_and_matches_the_library() {
    for kind in [EncoderKind::Sse, EncoderKind::DeepSets] {
        for mode in AggMode::ALL {
            let ws = Workspace::new();
            let model = ws.model("m.model", &spec(kind, mode));
            let mut rng = Rng::new(5);
            let batches: Vec<Matrix<f64>> = (0..4).map(|i| rng.standard_normals(3 + 7 * i, 3)).collect();
            ws.ok(&["init", "--model", "m.model", "--session", "s.session", "--seed", "21"]);
            for (i, b) in batches.iter().enumerate() {
                let name = format!("b{i}.csv");
                ws.write_rows(&name, b);
                ws.ok(&["ingest", "--model", "m.model", "--session", "s.session", &name]);
            }
            let before = std::fs::read(ws.path("s.session")).unwrap();
            let first = ws.ok(&["finalize", "--model", "m.model", "--session", "s.session"]);
            let second = ws.ok(&["finalize", "--model", "m.model", "--session", "s.session"]);
            assert_eq!(first, second);
            assert_eq!(std::fs::read(ws.path("s.session")).unwrap(), before);
            let want = model.encoder.encode_partitioned(&batches, 21).unwrap();
            let got = csv_row(&first);
            assert!(rel(&got, want.data()) <= 1e-9, "{kind} {mode}");
        }
    }
}

fn identity_value_model(d: usize) -> ModelFile {
    let mut rng = Rng::new(8);
    let params = SseParams::new(
        SlotConfig::Deterministic {
            slots: rng.standard_normals(1, 4),
        },
        LayerNormParams::standard(4),
        LinearMap::new(rng.standard_normals(4, d), None).unwrap(),
        LinearMap::new(rng.standard_normals(d, d), None).unwrap(),
        LinearMap::identity(d),
    )
    .unwrap();
    ModelFile::new(SetEncoder::Sse(EncoderStack::new(vec![StackLayer { params, mode: AggMode::Sum }]).unwrap()))
}

#[test]
fn single_slot_identity_values_sum_the_rows() {
    let ws = Workspace::new();
    identity_value_model(3).save(&ws.path("m.model")).unwrap();
    let x = Matrix::from_vec(4, 3, vec![1.0, 2.0, 3.0, 0.5, -1.0, 4.0, 8.0, 0.25, -2.0, 1.0, 1.0, 1.0]).unwrap();
    ws.write_rows("x.csv", &x.select_rows(&[0, 1]));
    ws.write_rows("y.csv", &x.select_rows(&[2, 3]));
    ws.ok(&["init", "--model", "m.model", "--session", "s.session"]);
    ws.ok(&["ingest", "--model", "m.model", "--session", "s.session", "x.csv", "y.csv"]);
    let got = csv_row(&ws.ok(&["finalize", "--model", "m.model", "--session", "s.session"]));
    assert_eq!(got, vec![10.5, 2.25, 6.0]);
}

#[test]
fn single_row_gives_that_rows_contribution() {
    let ws = Workspace::new();
    let model = ws.model("m.model", &ModelSpec { depth: 1, ..spec(EncoderKind::Sse, AggMode::Sum) });
    let x = Matrix::from_vec(1, 3, vec![0.3, -1.2, 2.0]).unwrap();
    ws.write_rows("x.csv", &x);
    ws.ok(&["init", "--model", "m.model", "--session", "s.session", "--seed", "2"]);
    ws.ok(&["ingest", "--model", "m.model", "--session", "s.session", "x.csv"]);
    let got = csv_row(&ws.ok(&["finalize", "--model", "m.model", "--session", "s.session"]));
    let SetEncoder::Sse(stack) = &model.encoder else { unreachable!() };
    let enc = stack.first_layer_encoder(2).unwrap();
    let w = enc.weights(&x).unwrap();
    let v = stack.layers()[0].params.proj_v.apply(&x).unwrap();
    let mut want = Vec::new();
    for k in 0..w.cols() {
        for m in 0..v.cols() {
            want.push(w.get(0, k) * v.get(0, m));
        }
    }
    assert_eq!(got, want);
}

#[test]
fn sessions_reject_the_wrong_model_and_bad_batches() {
    let ws = Workspace::new();
    ws.model("m.model", &spec(EncoderKind::Sse, AggMode::Sum));
    ws.model("other.model", &ModelSpec { seed: 4, ..spec(EncoderKind::Sse, AggMode::Sum) });
    ws.write_rows("x.csv", &Rng::new(1).standard_normals(5, 3));
    ws.write_rows("wide.csv", &Rng::new(1).standard_normals(5, 4));
    std::fs::write(ws.path("bad.csv"), "1,2,3\n4,five,6\n").unwrap();
    ws.ok(&["init", "--model", "m.model", "--session", "s.session"]);
    let before = std::fs::read(ws.path("s.session")).unwrap();

    let out = ws.run(&["ingest", "--model", "other.model", "--session", "s.session", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("session error"));

    let out = ws.run(&["ingest", "--model", "m.model", "--session", "s.session", "wide.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("expected 3 fields"));

    let out = ws.run(&["ingest", "--model", "m.model", "--session", "s.session", "bad.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.csv:2 field 2"), "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(std::fs::read(ws.path("s.session")).unwrap(), before);
    assert!(!SessionLock::path_for(&ws.path("s.session")).exists());
}

#[test]
fn a_held_lock_blocks_ingest() {
    let ws = Workspace::new();
    ws.model("m.model", &spec(EncoderKind::DeepSets, AggMode::Sum));
    ws.write_rows("x.csv", &Rng::new(1).standard_normals(5, 3));
    ws.ok(&["init", "--model", "m.model", "--session", "s.session"]);
    let lock = SessionLock::acquire(&ws.path("s.session")).unwrap();
    let out = ws.run(&["ingest", "--model", "m.model", "--session", "s.session", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
    drop(lock);
    ws.ok(&["ingest", "--model", "m.model", "--session", "s.session", "x.csv"]);
}

#[test]
fn softmax_pooling_cannot_be_streamed() {
    let ws = Workspace::new();
    ws.model("p.model", &spec(EncoderKind::SoftmaxPool, AggMode::Mean));
    let out = ws.run(&["init", "--model", "p.model", "--session", "s.session"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!ws.path("s.session").exists());
}

#[test]
fn verify_mbc_exit_codes() {
    let ws = Workspace::new();
    ws.model("sse.model", &spec(EncoderKind::Sse, AggMode::Mean));
    ws.model("ds.model", &spec(EncoderKind::DeepSets, AggMode::Max));
    ws.model("pool.model", &spec(EncoderKind::SoftmaxPool, AggMode::Mean));
    ws.write_rows("x.csv", &Rng::new(3).standard_normals(64, 3));
    std::fs::write(ws.path("empty.csv"), "\n").unwrap();
    let out = ws.ok(&["verify-mbc", "--model", "sse.model", "x.csv", "--partitions", "30"]);
    assert!(out.lines().nth(1).unwrap().ends_with(",pass"), "{out}");
    ws.ok(&["verify-mbc", "--model", "ds.model", "x.csv"]);
    let fail = ws.run(&["verify-mbc", "--model", "pool.model", "x.csv"]);
    assert_eq!(fail.status.code(), Some(1));
    let line = String::from_utf8(fail.stdout).unwrap();
    let disc: f64 = line.lines().nth(1).unwrap().split(',').nth(4).unwrap().parse().unwrap();
    assert!(disc >= 1e-3, "{disc}");
    assert_eq!(ws.run(&["verify-mbc", "--model", "sse.model", "empty.csv"]).status.code(), Some(2));
    assert_eq!(ws.run(&["verify-mbc", "--model", "missing.model", "x.csv"]).status.code(), Some(2));
    assert_eq!(ws.run(&["verify-mbc", "--bogus"]).status.code(), Some(2));
}

#[test]
fn gradcheck_on_a_fresh_model_passes() {
    let ws = Workspace::new();
    ws.model("m.model", &spec(EncoderKind::Sse, AggMode::Mean));
    let out = ws.ok(&["gradcheck", "--model", "m.model", "--seed", "4"]);
    let summary: Vec<&str> = out.lines().nth(1).unwrap().split(',').collect();
    assert!(summary[2].parse::<f64>().unwrap() <= 1e-6);
    assert_eq!(summary[4], "pass");
}

fn small_training(ws: &Workspace, name: &str, kind: EncoderKind) {
    let mut m = spec(kind, AggMode::Mean).build().unwrap();
    let t = m.train.as_mut().unwrap();
    t.task.shot = 64;
    t.config.steps = 20;
    t.config.eval_every = 10;
    t.config.eval_episodes = 2;
    m.save(&ws.path(name)).unwrap();
}

#[test]
fn frozen_training_leaves_eval_unchanged() {
    let ws = Workspace::new();
    small_training(&ws, "m.model", EncoderKind::Sse);
    let before = ws.ok(&["eval", "--model", "m.model"]);
    let history = ws.ok(&["train", "--model", "m.model", "--save", "frozen.model", "--lr", "0"]);
    assert!(history.starts_with("step,train_loss,eval_loss_full,eval_loss_partitioned\n"));
    assert_eq!(history.lines().count(), 21);
    let after = ws.ok(&["eval", "--model", "frozen.model"]);
    assert_eq!(before, after);
    assert_eq!(before.lines().next().unwrap(), "set_size,loss_full,loss_partitioned,accuracy");
    assert_eq!(before.lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect::<Vec<_>>(), ["16", "32", "64"]);

    ws.ok(&["train", "--model", "m.model", "--lr", "0.01"]);
    assert_ne!(ws.ok(&["eval", "--model", "m.model"]), before);
}

#[test]
fn mode_sweep_emits_four_loss_columns() {
    let ws = Workspace::new();
    small_training(&ws, "m.model", EncoderKind::DeepSets);
    let out = ws.ok(&["sweep", "--model", "m.model"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "step,sum,mean,max,min");
    assert_eq!(lines.len(), 3);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 5 && !l.contains(",,")));
}

#[test]
fn demo_reports_growing_softmax_discrepancy() {
    let ws = Workspace::new();
    ws.write_rows("x.csv", &Rng::new(6).standard_normals(64, 2));
    let out = ws.ok(&["demo-inconsistency", "x.csv", "--seed", "1"]);
    let rows: Vec<Vec<&str>> = out.lines().skip(1).map(|l| l.split(',').collect()).collect();
    for r in &rows {
        let disc: f64 = r[3].parse().unwrap();
        if r[0] == "sse" {
            assert!(disc <= 1e-9);
        } else if r[1] == "1" {
            assert!(disc >= 1e-3);
        }
    }
}

#[test]
fn session_library_round_trip() {
    let model = spec(EncoderKind::Sse, AggMode::Min).build().unwrap();
    let mut s = commands::init_session(&model, 3, None).unwrap();
    s = commands::ingest(&model, &s, &Rng::new(1).standard_normals(6, 3)).unwrap();
    let text = s.to_text();
    assert_eq!(SessionFile::parse("s", &text).unwrap().to_text(), text);
}

