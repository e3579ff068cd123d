use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

const GOLDEN_INPUT: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/preprocess_input.txt");
const GOLDEN_EXPECTED: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/preprocess_expected.txt");

fn hatemask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hatemask"))
        .args(args)
        .env_remove("HSMASK_REPORT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", out.status, stdout(out), stderr(out));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn detect_config() -> Value {
    json!({
        "task": "detect",
        "seed": 5,
        "data": {"synthetic": {"n": 120, "lexicon_size": 6, "vocab_size": 40}, "vocab_size": 200},
        "model": {"arch": "CNN", "seq_len": 10, "embed_dim": 16, "conv_filters": 8, "conv_kernel": 3, "dense_units": 8},
        "training": {"batch_size": 32, "max_epochs": 3},
    })
}

fn mask_config() -> Value {
    json!({
        "task": "mask",
        "seed": 5,
        "data": {"synthetic": {"n": 60, "lexicon_size": 4, "vocab_size": 30}, "vocab_size": 100},
        "model": {"seq_len": 10, "embed_dim": 16, "heads": 2, "ff_dim": 32},
        "training": {"batch_size": 16, "max_epochs": 3},
    })
}

#[test]
fn preprocess_golden_file_is_reproduced_byte_for_byte() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out.txt");
    assert_ok(&hatemask(&["preprocess", "--input", GOLDEN_INPUT, "--output", p(&out)]));
    assert_eq!(fs::read(&out).unwrap(), fs::read(GOLDEN_EXPECTED).unwrap());
}

#[test]
fn preprocess_is_idempotent_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let (once, twice) = (tmp.path().join("once.txt"), tmp.path().join("twice.txt"));
    assert_ok(&hatemask(&["preprocess", "--input", GOLDEN_INPUT, "--output", p(&once)]));
    let second = hatemask(&["preprocess", "--input", p(&once), "--output", p(&twice)]);
    assert_ok(&second);
    assert_eq!(fs::read(&once).unwrap(), fs::read(&twice).unwrap());
    assert!(stdout(&second).contains("0 dropped; tokens"));
}

#[test]
fn preprocess_reports_dropped_lines_and_tokens() {
    let tmp = TempDir::new().unwrap();
    let input = tmp.path().join("in.txt");
    fs::write(&input, "hello world\nانا love يوم\n").unwrap();
    let out = hatemask(&["preprocess", "--input", p(&input), "--output", p(&tmp.path().join("o.txt"))]);
    assert_ok(&out);
    assert_eq!(
        stdout(&out).trim(),
        "lines: 2 read, 1 written, 1 dropped; tokens: 5 read, 2 written, 3 dropped"
    );
}

#[test]
fn preprocess_labeled_and_parallel_formats() {
    let tmp = TempDir::new().unwrap();
    let labeled = tmp.path().join("l.tsv");
    fs::write(&labeled, "1\tأنت كلب!!!\tOFF\n2\tok\tNOT\n").unwrap();
    let out = tmp.path().join("l.out");
    assert_ok(&hatemask(&["preprocess", "--format", "labeled", "--input", p(&labeled), "--output", p(&out)]));
    assert_eq!(fs::read_to_string(&out).unwrap(), "1\tانت كلب !\tOFF\n");

    let parallel = tmp.path().join("p.tsv");
    fs::write(&parallel, "أنت كلب !!\tأنت *** !!\n").unwrap();
    let out = tmp.path().join("p.out");
    assert_ok(&hatemask(&["preprocess", "--format", "parallel", "--input", p(&parallel), "--output", p(&out)]));
    assert_eq!(fs::read_to_string(&out).unwrap(), "انت كلب !!\tانت *** !!\n");
}

#[test]
fn missing_input_exits_with_data_error_naming_the_path() {
    let out = hatemask(&["preprocess", "--input", "/no/such/corpus.txt", "--output", "/tmp/unused.txt"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("/no/such/corpus.txt"));
}

#[test]
fn invalid_config_lists_every_problem_with_exit_code_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.json",
        &json!({
            "task": "detect",
            "data": {"corpus": "x.tsv", "shuffle": true},
            "model": {"arch": "TRANSFORMER", "dropout": 2.0},
            "training": {"max_epochs": 0},
            "extra": 1,
        }),
    );
    let out = hatemask(&["train", "--config", p(&cfg), "--report-dir", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for needle in ["data.shuffle", "model.arch", "model.dropout", "training.max_epochs", "extra"] {
        assert!(err.contains(needle), "{needle} missing from:\n{err}");
    }
}

#[test]
fn detect_training_is_reproducible_and_writes_all_artifacts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "detect.json", &detect_config());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_ok(&hatemask(&["train", "--config", p(&cfg), "--report-dir", p(&a)]));
    assert_ok(&hatemask(&["train", "--config", p(&cfg), "--report-dir", p(&b)]));
    for file in ["history.json", "model.ckpt", "vocab.txt", "config.resolved.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file} differs");
    }
    let report = read_json(&a.join("report.json"));
    assert_eq!(report["config"], read_json(&a.join("config.resolved.json")));
    assert_eq!(report["corpus_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(report["history"]["epochs"].as_array().unwrap().len(), 3);
    let test = &report["model"]["evaluation"]["test"];
    for key in ["offensive", "not_offensive", "macro_avg"] {
        for metric in ["precision", "recall", "f1"] {
            assert!(test[key][metric].is_number(), "{key}.{metric}");
        }
    }
    assert!(test["accuracy"].is_number());
}

#[test]
fn seed_flag_overrides_the_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "detect.json", &detect_config());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_ok(&hatemask(&["train", "--config", p(&cfg), "--report-dir", p(&a), "--max-epochs", "1"]));
    assert_ok(&hatemask(&["train", "--config", p(&cfg), "--report-dir", p(&b), "--max-epochs", "1", "--seed", "6"]));
    assert_eq!(read_json(&b.join("config.resolved.json"))["seed"], 6);
    assert_ne!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(b.join("model.ckpt")).unwrap());
}

#[test]
fn resolved_config_can_be_rerun_unchanged() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "detect.json", &detect_config());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_ok(&hatemask(&["train", "--config", p(&cfg), "--report-dir", p(&a)]));
    let resolved = a.join("config.resolved.json");
    assert_ok(&hatemask(&["train", "--config", p(&resolved), "--report-dir", p(&b)]));
    assert_eq!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(b.join("model.ckpt")).unwrap());
}

#[test]
fn report_dir_falls_back_to_the_environment() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = detect_config();
    cfg["training"]["max_epochs"] = json!(1);
    let cfg = write_config(tmp.path(), "detect.json", &cfg);
    let env_dir = tmp.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_hatemask"))
        .args(["train", "--config", p(&cfg)])
        .env("HSMASK_REPORT_DIR", &env_dir)
        .output()
        .unwrap();
    assert_ok(&out);
    assert!(env_dir.join("report.json").is_file());
}

#[test]
fn numeric_blow_up_exits_with_code_4() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = detect_config();
    cfg["training"]["learning_rate"] = json!(1e308);
    cfg["training"]["max_epochs"] = json!(5);
    let cfg = write_config(tmp.path(), "detect.json", &cfg);
    let out = hatemask(&["train", "--config", p(&cfg), "--report-dir", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(4), "stderr:\n{}", stderr(&out));
}

#[test]
fn eval_detect_checkpoint_and_vocab_mismatch() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "detect.json", &detect_config());
    let run = tmp.path().join("run");
    assert_ok(&hatemask(&["train", "--config", p(&cfg), "--report-dir", p(&run)]));

    let test = tmp.path().join("test.tsv");
    fs::write(&test, "1\tكلام عادي\tNOT\n2\tكلام اخر\tOFF\n").unwrap();
    let ckpt = run.join("model.ckpt");
    let eval_dir = tmp.path().join("eval");
    let out = hatemask(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--test",
        p(&test),
        "--vocab",
        p(&run.join("vocab.txt")),
        "--report-dir",
        p(&eval_dir),
    ]);
    assert_ok(&out);
    for header in ["P", "R", "F1", "A", "Offensive", "Not offensive", "Macro Avg"] {
        assert!(stdout(&out).contains(header));
    }
    let report = read_json(&eval_dir.join("eval_report.json"));
    assert_eq!(report["task"], "detect");
    assert_eq!(report["config"]["arch"], "CNN");
    let confusion = &report["report"]["confusion"];
    let total: u64 = ["tp", "fp", "fn", "tn"].iter().map(|k| confusion[k].as_u64().unwrap()).sum();
    assert_eq!(total, 2);

    let other_vocab = tmp.path().join("other.txt");
    let corpus = tmp.path().join("corpus.txt");
    fs::write(&corpus, "كلمه اخري\n").unwrap();
    assert_ok(&hatemask(&["vocab", "--input", p(&corpus), "--output", p(&other_vocab), "--max-size", "10"]));
    let out = hatemask(&["eval", "--checkpoint", p(&ckpt), "--test", p(&test), "--vocab", p(&other_vocab)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("vocabulary mismatch"));
}

#[test]
fn mask_training_eval_and_neural_masking() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "mask.json", &mask_config());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_ok(&hatemask(&["train", "--config", p(&cfg), "--report-dir", p(&a)]));
    assert_ok(&hatemask(&["train", "--config", p(&cfg), "--report-dir", p(&b)]));
    for file in ["history.json", "model.ckpt", "source_vocab.txt", "target_vocab.txt"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file} differs");
    }

    let test = tmp.path().join("pairs.tsv");
    fs::write(&test, "كلام عادي\tكلام عادي\n").unwrap();
    let eval_dir = tmp.path().join("eval");
    let out = hatemask(&[
        "eval",
        "--checkpoint",
        p(&a.join("model.ckpt")),
        "--test",
        p(&test),
        "--vocab",
        p(&a.join("source_vocab.txt")),
        "--target-vocab",
        p(&a.join("target_vocab.txt")),
        "--report-dir",
        p(&eval_dir),
    ]);
    assert_ok(&out);
    for header in ["Vocab", "UNK", "BLEU 1", "BLEU 2", "BLEU 3", "BLEU 4"] {
        assert!(stdout(&out).contains(header));
    }
    let report = &read_json(&eval_dir.join("eval_report.json"))["report"];
    for key in ["vocab_size", "unk", "bleu1", "bleu2", "bleu3", "bleu4"] {
        assert!(report[key].is_number(), "{key}");
    }
    assert_eq!(report["vocab_size"], 100);

    let out = hatemask(&["mask", "--checkpoint", p(&a.join("model.ckpt")), "كلام عادي"]);
    assert_ok(&out);
    assert_eq!(stdout(&out).lines().count(), 1);
}

#[test]
fn oracle_masking_uses_the_lexicon() {
    let tmp = TempDir::new().unwrap();
    let lexicon = tmp.path().join("lex.tsv");
    fs::write(&lexicon, "كلب\tinsult\n").unwrap();
    let out = hatemask(&["mask", "--oracle", "--lexicon", p(&lexicon), "انت كلب"]);
    assert_ok(&out);
    assert_eq!(stdout(&out), "انت ***\n");

    let empty = tmp.path().join("empty.tsv");
    fs::write(&empty, "").unwrap();
    let out = hatemask(&["mask", "--oracle", "--lexicon", p(&empty), "انت كلب"]);
    assert_ok(&out);
    assert_eq!(stdout(&out), "انت كلب\n");
}

#[test]
fn mask_requires_an_existing_checkpoint_or_lexicon() {
    let out = hatemask(&["mask", "--checkpoint", "/no/model.ckpt", "نص"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("/no/model.ckpt"));
    let out = hatemask(&["mask", "--oracle", "--lexicon", "/no/lex.tsv", "نص"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("/no/lex.tsv"));
}

#[test]
fn sweep_rows_are_sorted_descending_and_match_their_runs() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = mask_config();
    cfg["training"]["max_epochs"] = json!(1);
    let cfg = write_config(tmp.path(), "mask.json", &cfg);
    let dir = tmp.path().join("sweep");
    let out = hatemask(&["sweep", "--config", p(&cfg), "--sizes", "20,60,40", "--report-dir", p(&dir)]);
    assert_ok(&out);
    let sweep = read_json(&dir.join("sweep.json"));
    let rows = sweep["rows"].as_array().unwrap();
    let sizes: Vec<u64> = rows.iter().map(|r| r["vocab_size"].as_u64().unwrap()).collect();
    assert_eq!(sizes, vec![60, 40, 20]);
    for (row, run) in rows.iter().zip(sweep["runs"].as_array().unwrap()) {
        let own = read_json(&PathBuf::from(run["dir"].as_str().unwrap()).join("report.json"));
        let test = &own["model"]["evaluation"]["test"];
        for key in ["bleu1", "bleu2", "bleu3", "bleu4", "unk"] {
            assert_eq!(row[key], test[key], "{key}");
        }
    }
    let table = stdout(&out);
    let positions: Vec<usize> = ["      60", "      40", "      20"].iter().map(|s| table.find(s).unwrap()).collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn sweep_rejects_detect_configs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "detect.json", &detect_config());
    let out = hatemask(&["sweep", "--config", p(&cfg), "--report-dir", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn vocab_command_builds_each_kind() {
    let tmp = TempDir::new().unwrap();
    let corpus = tmp.path().join("c.txt");
    fs::write(&corpus, "ا ا ب\n").unwrap();
    let out_path = tmp.path().join("v.txt");
    assert_ok(&hatemask(&["vocab", "--input", p(&corpus), "--output", p(&out_path), "--max-size", "6", "--kind", "target"]));
    assert_eq!(fs::read_to_string(&out_path).unwrap(), "[PAD]\n[UNK]\n[start]\n[end]\nا\nب\n");
    assert_ok(&hatemask(&["vocab", "--input", p(&corpus), "--output", p(&out_path), "--max-size", "6"]));
    assert_eq!(fs::read_to_string(&out_path).unwrap(), "[PAD]\n[UNK]\nا\nب\n");
    assert_ok(&hatemask(&["vocab", "--input", p(&corpus), "--output", p(&out_path), "--max-size", "4", "--kind", "wordpiece"]));
    assert!(fs::read_to_string(&out_path).unwrap().starts_with("continuation_prefix=##\n"));
}
