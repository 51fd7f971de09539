use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cpf_core::data::{read_splits, write_splits, Checkpoint};
use cpf_core::rng::{stream, Stream};
use cpf_core::{CpfParams, Dims};

fn cpf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cpf(args);
    assert!(
        out.status.success(),
        "cpf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_synth(dir: &Path) -> String {
    ok(&[
        "synth", "--M", "4", "--N", "3", "--seen-frac", "0.667", "--seed", "7", "--D", "8", "--d", "4", "--T",
        "3", "--samples", "4", "--out", dir.to_str().unwrap(),
    ])
}

#[test]
fn synth_reports_counts_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let stdout = small_synth(&a);
    assert!(stdout.contains("8 seen, 4 unseen"), "{stdout}");
    small_synth(&b);
    for f in ["train.cpff", "val.cpff", "test.cpff", "text.cpft", "splits.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_out_is_a_usage_error() {
    assert_eq!(cpf(&["synth", "--M", "4"]).status.code(), Some(2));
    assert_eq!(cpf(&["train", "--out", "x"]).status.code(), Some(2));
    assert_eq!(cpf(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn infeasible_synth_config_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cpf(&["synth", "--M", "1", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 2"));
}

#[test]
fn zero_epochs_checkpoint_is_the_initialisation() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let run = tmp.path().join("r");
    small_synth(&data);
    ok(&["train", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap(), "--epochs", "0", "--seed", "3"]);
    let ck = Checkpoint::load(run.join("checkpoint.cpfc")).unwrap();
    let dims = Dims { visual: 8, text: 4, blocks: 3 };
    let init = CpfParams::init(dims, ck.config.head, &mut stream(3, Stream::Init));
    assert_eq!(ck.params, init);
    assert_eq!(ck.optimizer.step, 0);
    // defaults are echoed into the checkpoint
    assert_eq!(ck.config.head.temperature, 0.05);
    assert_eq!((ck.config.head.alpha_attr, ck.config.head.alpha_obj), (0.6, 0.4));
}

#[test]
fn config_file_under_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let run = tmp.path().join("r");
    small_synth(&data);
    let conf = tmp.path().join("run.conf");
    fs::write(
        &conf,
        format!(
            "# trial\ndata = {}\nout = {}\nepochs = 1\nbatch-size = 16\nalpha1 = 0.5\nalpha2 = 0.5\n",
            data.display(),
            run.display()
        ),
    )
    .unwrap();
    ok(&["train", "--config", conf.to_str().unwrap(), "--epochs", "2"]);
    let ck = Checkpoint::load(run.join("checkpoint.cpfc")).unwrap();
    assert_eq!(ck.config.epochs, 2);
    assert_eq!(ck.config.batch_size, 16);
    assert_eq!((ck.config.head.alpha_attr, ck.config.head.alpha_obj), (0.5, 0.5));
    // 32 training images in batches of 16, two epochs
    assert_eq!(ck.optimizer.step, 4);

    fs::write(&conf, "epochz = 3\n").unwrap();
    assert_eq!(cpf(&["train", "--config", conf.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn eval_reports_and_settings_agree_when_all_unseen_are_tested() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let run = tmp.path().join("r");
    small_synth(&data);
    ok(&["train", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap(), "--epochs", "2"]);
    let ck = run.join("checkpoint.cpfc");
    let ow = ok(&["eval", "--data", data.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap(), "--setting", "ow"]);
    assert!(ow.contains("12 candidates"), "{ow}");
    assert!(ow.contains("AUC, HM, Seen, Unseen"));
    let cw = ok(&["eval", "--data", data.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap()]);
    assert!(cw.contains("10 candidates"), "{cw}");
    assert!(run.join("report_cw.txt").is_file() && run.join("report_ow.txt").is_file());

    // every unseen pair in the closed-world list: both reports coincide
    let splits = data.join("splits.txt");
    let mut space = read_splits(&splits).unwrap();
    let moved: Vec<_> = space.val_unseen.iter().copied().collect();
    space.test_unseen.extend(moved);
    space.val_unseen.clear();
    write_splits(&splits, &space).unwrap();
    let cw_out = run.join("cw.txt");
    let ow_out = run.join("ow.txt");
    for (s, o) in [("cw", &cw_out), ("ow", &ow_out)] {
        ok(&[
            "eval", "--data", data.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap(), "--setting", s, "--out",
            o.to_str().unwrap(),
        ]);
    }
    let strip = |p: &Path| {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("setting"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&cw_out), strip(&ow_out));
}

#[test]
fn corrupt_features_are_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    small_synth(&data);
    let p = data.join("train.cpff");
    let mut bytes = fs::read(&p).unwrap();
    bytes[0] = b'X';
    fs::write(&p, bytes).unwrap();
    let out = cpf(&["train", "--data", data.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train.cpff") && err.contains("byte 0"), "{err}");
}

#[test]
fn threads_do_not_change_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let run = tmp.path().join("r");
    small_synth(&data);
    ok(&["train", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap(), "--epochs", "1"]);
    let ck = run.join("checkpoint.cpfc");
    let one = run.join("one.txt");
    let three = run.join("three.txt");
    ok(&["eval", "--data", data.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap(), "--out", one.to_str().unwrap(), "--threads", "1"]);
    let out = Command::new(env!("CARGO_BIN_EXE_cpf"))
        .args(["eval", "--data", data.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap(), "--out", three.to_str().unwrap()])
        .env("CPF_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(one).unwrap(), fs::read(three).unwrap());
    let bad = cpf(&["eval", "--data", data.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap(), "--threads", "0"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_catches_a_fault() {
    let out = ok(&["gradcheck", "--seeds", "2"]);
    assert!(out.contains("PASS"), "{out}");
    let bad = cpf(&["gradcheck", "--seeds", "1", "--inject-fault", "softmax-jacobian"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("full/"));
    assert_eq!(cpf(&["gradcheck", "--eps", "1e-1"]).status.code(), Some(2));
}
