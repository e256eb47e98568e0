use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ticketforge_cli::commands::{cmd_divergence, cmd_obtain, cmd_report, cmd_transfer};
use ticketforge_cli::{Context, ExperimentConfig};
use ticketforge_core::corpus::write_jsonl;
use ticketforge_core::store::load_ticket;
use ticketforge_core::synthetic::{generate_domain, SyntheticConfig};

const TINY: &str = r#"
seeds = [1]
[splits]
train = 200
val = 100
test = 100
[prune]
rounds = 2
[train]
max_epochs = 2
[synthetic]
names = ["alpha", "beta"]
[synthetic.generator]
records = 440
"#;

fn ticketforge(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ticketforge")).args(args).current_dir(dir).env_remove("TICKETFORGE_THREADS").output().unwrap()
}

fn tiny_ctx(out: &Path, force: bool) -> Context {
    Context::new(ExperimentConfig::from_toml(TINY).unwrap(), out.to_path_buf(), force).unwrap()
}

#[test]
fn missing_input_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[[domains]]\nname = \"a\"\npath = \"nope.jsonl\"\n").unwrap();
    let out = ticketforge(&["--config", "c.toml", "build-vocab"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
    assert!(!dir.path().join("runs").join("vocab").exists());
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "sedes = [1]\n").unwrap();
    assert_eq!(ticketforge(&["--config", "c.toml", "obtain"], dir.path()).status.code(), Some(2));
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ticketforge"))
        .args(["--synthetic", "build-vocab"])
        .current_dir(dir.path())
        .env("TICKETFORGE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn transfer_without_obtain_names_the_missing_run() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), TINY).unwrap();
    assert!(ticketforge(&["--config", "c.toml", "build-vocab"], dir.path()).status.success());
    let out = ticketforge(&["--config", "c.toml", "transfer"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("alpha-reset-seed1") && err.contains("missing"), "{err}");
}

#[test]
fn divergence_of_identical_and_distinct_domains() {
    let dir = tempfile::tempdir().unwrap();
    let gen = SyntheticConfig { records: 440, ..Default::default() };
    write_jsonl(&dir.path().join("a.jsonl"), &generate_domain(&gen, 1, 0)).unwrap();
    write_jsonl(&dir.path().join("b.jsonl"), &generate_domain(&gen, 1, 1)).unwrap();
    let cfg = format!(
        "[splits]\ntrain = 200\nval = 100\ntest = 100\n{}",
        [("a", "a"), ("a2", "a"), ("b", "b")].iter().map(|(n, f)| format!("[[domains]]\nname = \"{n}\"\npath = \"{}/{f}.jsonl\"\n", dir.path().display())).collect::<String>()
    );
    let ctx = Context::new(ExperimentConfig::from_toml(&cfg).unwrap(), dir.path().join("out"), false).unwrap();
    let m = cmd_divergence(&ctx).unwrap();
    assert!(m.values[0][1].abs() < 1e-12);
    assert!(m.values[0][2] > 1e-3 && m.values[1][2] > 1e-3);
    let text = fs::read_to_string(dir.path().join("out/divergence.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').skip(1).collect()).collect();
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[i], "0");
        for (j, v) in row.iter().enumerate() {
            assert_eq!(*v, rows[j][i]);
        }
    }
}

#[test]
fn obtain_transfer_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let ctx = tiny_ctx(&out, false);

    // 2 domains x 2 strategies x 1 seed, 3 records each (dense + 2 rounds)
    let first = cmd_obtain(&ctx).unwrap();
    assert_eq!((first.ran, first.skipped), (4, 0));
    assert_eq!(first.rows.len(), 12);
    for name in ["alpha-reset-seed1", "alpha-random-seed1", "beta-reset-seed1", "beta-random-seed1"] {
        let run = out.join("runs").join(name);
        for f in ["vocab", "theta0.bin", "records.csv", "epochs.csv", "config.toml", "tickets/round-1.tkt", "tickets/round-2.tkt"] {
            assert!(run.join(f).exists(), "{name}/{f}");
        }
        assert_eq!(load_ticket(&run.join("tickets/round-2.tkt")).unwrap().round, 2);
    }
    let records = fs::read(out.join("records.csv")).unwrap();

    // idempotent unless forced, and byte-stable when forced
    let again = cmd_obtain(&ctx).unwrap();
    assert_eq!((again.ran, again.skipped), (0, 4));
    assert_eq!(fs::read(out.join("records.csv")).unwrap(), records);
    let forced = cmd_obtain(&tiny_ctx(&out, true)).unwrap();
    assert_eq!(forced.ran, 4);
    assert_eq!(fs::read(out.join("records.csv")).unwrap(), records);

    // the effective configuration written to the run re-validates
    let written = ExperimentConfig::load(&out.join("config.toml")).unwrap();
    written.validate().unwrap();
    assert_eq!(written, ctx.cfg);
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("obtain/beta-random-seed1"));

    let t = cmd_transfer(&ctx).unwrap();
    // 2 cells x 3 strategies x 2 rounds
    assert_eq!(t.records.len(), 12);
    for r in &t.records {
        let own = first.rows.iter().find(|o| o.domain == r.source && o.strategy == "reset" && o.round == r.round).unwrap();
        let target = first.rows.iter().find(|o| o.domain == r.target && o.strategy == "reset" && o.round == r.round).unwrap();
        match r.strategy.as_str() {
            "ticket-target" => assert_eq!(r.test_acc, target.test_acc),
            _ => assert_eq!(r.sparsity, own.sparsity),
        }
    }
    assert_eq!(t.phase.len(), 2);

    let report_dir = dir.path().join("report");
    let rep = cmd_report(std::slice::from_ref(&out), &report_dir, &ctx.cfg.phase).unwrap();
    let full = &rep.curves[&("alpha".to_string(), "full-model".to_string())];
    assert_eq!(full.len(), 1);
    assert_eq!(full[0].n, 1);
    let summary = fs::read_to_string(report_dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("group,strategy,round,sparsity,mean_test_acc,std_test_acc,n\n"));
    assert!(summary.contains("alpha->beta,masks-reset,2,"));
}

#[test]
fn report_rejects_malformed_records() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("records.csv"), "round,sparsity,val_acc,test_acc,stop_epoch,strategy,domain,seed\n0,0,1,1,1,reset,a,1\nzero,0,1,1,1,reset,a,1\n").unwrap();
    let out = ticketforge(&["report", "."], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":3:"));
}
