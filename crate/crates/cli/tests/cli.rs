use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bilm_ner::checkpoint::Checkpoint;

const TRAIN: &str = "\
aspirin\tB-Chem
causes\tO
headache\tB-Dis
.\tO

sodium\tB-Chem
valproate\tI-Chem
induced\tO
liver\tB-Dis
failure\tI-Dis
.\tO

no\tO
headache\tB-Dis
after\tO
aspirin\tB-Chem
.\tO

patients\tO
took\tO
valproate\tB-Chem
daily\tO
.\tO
";

const ARCH: &str = "
[architecture]
char_dim = 4
word_dim = 6
max_filter_width = 2
filters_per_width = 3
max_filters = 4
hidden = 6
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bilm-ner"));
    c.env("BILMNER_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes the toy corpus and a config with `extra` appended.
fn setup(dir: &Path, extra: &str) -> PathBuf {
    fs::write(dir.join("train.txt"), TRAIN).unwrap();
    let cfg = format!(
        "seed = 3\n{extra}\n[paths]\ntrain = \"train.txt\"\ndev = \"train.txt\"\ntest = \"train.txt\"\ncheckpoints = \"out\"\n{ARCH}\n[lm]\nepochs = 2\nword_budget = 8\n[training]\nepochs = 3\nword_budget = 8\nretrain_on_dev = false\n"
    );
    let path = dir.join("config.toml");
    fs::write(&path, cfg).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pretrain_writes_checkpoint_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let o = run(&["pretrain", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck_path = dir.path().join("out/lm.ckpt");
    let first = fs::read(&ck_path).unwrap();
    let ck = Checkpoint::from_bytes(&first).unwrap();
    assert!(ck.names().any(|n| n.starts_with("encoder.")));
    assert!(ck.has_prefix("lm_decoder."));
    assert!(dir.path().join("out/lm.ckpt.words").exists());

    let o = run(&["pretrain", "--config", s(&cfg)]);
    assert!(o.status.success());
    assert_eq!(first, fs::read(&ck_path).unwrap());
}

#[test]
fn missing_embeddings_file_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("[paths]\n", "[paths]\nembeddings = \"nope.vec\"\n");
    fs::write(&cfg, text).unwrap();
    let o = run(&["pretrain", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("paths.embeddings"), "{}", stderr(&o));
}

#[test]
fn bad_usage_exits_one() {
    assert_eq!(run(&["train", "--mode", "sideways"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn train_none_reports_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let o = run(&["train", "--config", s(&cfg), "--mode", "none"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("dev precision=") && out.contains("test precision="), "{out}");
    assert!(dir.path().join("out/ner_history.txt").exists());
    assert!(dir.path().join("out/ner.ckpt.tags").exists());
}

#[test]
fn bilm_mode_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let o = run(&["train", "--config", s(&cfg), "--mode", "bilm"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lm-checkpoint"), "{}", stderr(&o));
}

#[test]
fn bilm_mode_with_checkpoint_trains() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    assert!(run(&["pretrain", "--config", s(&cfg)]).status.success());
    let lm = dir.path().join("out/lm.ckpt");
    let o = run(&["train", "--config", s(&cfg), "--mode", "bilm", "--lm-checkpoint", s(&lm), "--out-dir", s(&dir.path().join("ner"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = Checkpoint::load(&dir.path().join("ner/ner.ckpt")).unwrap();
    assert!(!ck.has_prefix("lm_decoder"));
}

#[test]
fn heads_use_different_namespaces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    for head in ["crf", "softmax"] {
        let out = dir.path().join(head);
        let o = run(&["train", "--config", s(&cfg), "--head", head, "--out-dir", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let crf = Checkpoint::load(&dir.path().join("crf/ner.ckpt")).unwrap();
    let soft = Checkpoint::load(&dir.path().join("softmax/ner.ckpt")).unwrap();
    assert!(crf.has_prefix("crf."));
    assert!(!soft.has_prefix("crf."));
    assert!(crf.has_prefix("ner.decoder.") && soft.has_prefix("ner.decoder."));
}

fn memorized(dir: &Path) -> PathBuf {
    let extra = "";
    let cfg = setup(dir, extra);
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("[training]\nepochs = 3", "[training]\nepochs = 150\npatience = 150\nlr_decay = 1.0\ndropout = 0.0\nadam = { lr = 0.02 }");
    fs::write(&cfg, text).unwrap();
    let o = run(&["train", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    cfg
}

#[test]
fn tagging_memorized_training_set_reproduces_gold() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = memorized(dir.path());
    let input: String = TRAIN
        .lines()
        .map(|l| l.split('\t').next().unwrap().to_string() + "\n")
        .collect();
    fs::write(dir.path().join("tokens.txt"), &input).unwrap();
    let pred = dir.path().join("pred.txt");
    let o = run(&["tag", "--config", s(&cfg), "--input", s(&dir.path().join("tokens.txt")), "--output", s(&pred)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&pred).unwrap();
    let tokens = input.lines().filter(|l| !l.is_empty()).count();
    let separators = input.lines().filter(|l| l.is_empty()).count();
    assert_eq!(text.lines().count(), tokens + separators);

    let o = run(&["eval", "--gold", s(&dir.path().join("train.txt")), "--pred", s(&pred)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("f1=1.0000"), "{}\n{text}", stdout(&o));

    let o = run(&["curve", "--config", s(&cfg), "--steps", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let curve = fs::read_to_string(dir.path().join("out/pr_curve.tsv")).unwrap();
    let recalls: Vec<f64> = curve
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(recalls.len(), 11);
    assert!(recalls.windows(2).all(|w| w[1] <= w[0]), "{recalls:?}");
}

#[test]
fn tagging_empty_input_gives_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    assert!(run(&["train", "--config", s(&cfg)]).status.success());
    fs::write(dir.path().join("empty.txt"), "").unwrap();
    let o = run(&["tag", "--config", s(&cfg), "--input", s(&dir.path().join("empty.txt"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
}

#[test]
fn eval_identical_and_hand_counted() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.txt");
    fs::write(&gold, "a\tB-X\nb\tO\nc\tB-Y\nd\tI-Y\n\ne\tB-X\nf\tO\ng\tB-X\n").unwrap();
    let o = run(&["eval", "--gold", s(&gold), "--pred", s(&gold)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("f1=1.0000"));

    // one of two predicted chunks is right; four gold chunks
    let pred = dir.path().join("pred.txt");
    fs::write(&pred, "a\tB-X\nb\tO\nc\tB-Y\nd\tO\n\ne\tO\nf\tO\ng\tO\n").unwrap();
    let o = run(&["eval", "--gold", s(&gold), "--pred", s(&pred)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("precision=0.5000 recall=0.2500 f1=0.3333"), "{}", stdout(&o));
}

#[test]
fn eval_misaligned_names_sentence() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.txt");
    let pred = dir.path().join("pred.txt");
    fs::write(&gold, "a\tO\n\nb\tO\nc\tO\n").unwrap();
    fs::write(&pred, "a\tO\n\nb\tO\n").unwrap();
    let o = run(&["eval", "--gold", s(&gold), "--pred", s(&pred)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sentence 1"), "{}", stderr(&o));
}

#[test]
fn synth_writes_usable_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--out-dir", s(dir.path()), "--unlabeled", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["train.txt", "dev.txt", "test.txt", "unlabeled.txt", "config.toml"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let text = fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert!(text.contains("unlabeled = \"unlabeled.txt\""));
}
